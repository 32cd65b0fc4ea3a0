//! Layer building blocks shared by the autoencoder, the denoiser and the
//! discriminators. Parameters live in a [`ParamStore`] under dotted names.

use tensorlab::{Graph, ParamStore, Real, Rng, Tensor, Var};

use crate::error::Result;

/// Largest group count `<= wanted` that divides `c`.
pub fn groups_for(c: usize, wanted: usize) -> usize {
    (1..=wanted.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

pub fn init_conv<T: Real>(s: &mut ParamStore<T>, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut Rng) -> Result<()> {
    let fan_in = c_in * k * k * k;
    s.insert_fan_in(format!("{name}.w"), &[c_out, c_in, k, k, k], fan_in, rng)?;
    s.insert_fan_in(format!("{name}.b"), &[c_out], fan_in, rng)?;
    Ok(())
}

/// Same-padded convolution (`pad = k / 2`).
pub fn conv<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.param(s, &format!("{name}.w"))?;
    let b = g.param(s, &format!("{name}.b"))?;
    let k = g.shape(w)[2];
    Ok(g.conv3d(x, w, Some(b), stride, k / 2)?)
}

pub fn init_norm<T: Real>(s: &mut ParamStore<T>, name: &str, c: usize) -> Result<()> {
    s.insert(format!("{name}.g"), Tensor::ones(&[c]))?;
    s.insert(format!("{name}.b"), Tensor::zeros(&[c]))?;
    Ok(())
}

/// Group normalization, or the identity when `enabled` is false.
pub fn norm<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, name: &str, x: Var, groups: usize, enabled: bool) -> Result<Var> {
    if !enabled {
        return Ok(x);
    }
    let c = g.shape(x)[0];
    let gamma = g.param(s, &format!("{name}.g"))?;
    let beta = g.param(s, &format!("{name}.b"))?;
    Ok(g.group_norm(x, gamma, beta, groups_for(c, groups), 1e-5)?)
}

pub fn init_linear<T: Real>(s: &mut ParamStore<T>, name: &str, inp: usize, out: usize, rng: &mut Rng) -> Result<()> {
    s.insert_fan_in(format!("{name}.w"), &[inp, out], inp, rng)?;
    s.insert_fan_in(format!("{name}.b"), &[1, out], inp, rng)?;
    Ok(())
}

/// `x[1, inp] @ w + b`.
pub fn linear<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(s, &format!("{name}.w"))?;
    let b = g.param(s, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOpts {
    pub groups: usize,
    pub norm: bool,
}

/// `GN -> SiLU -> conv -> (+ time) -> GN -> SiLU -> conv`, plus a 1x1 skip
/// projection when the width changes.
pub fn init_res<T: Real>(
    s: &mut ParamStore<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    temb: Option<usize>,
    rng: &mut Rng,
) -> Result<()> {
    init_norm(s, &format!("{name}.n1"), c_in)?;
    init_conv(s, &format!("{name}.c1"), c_out, c_in, 3, rng)?;
    if let Some(dim) = temb {
        init_linear(s, &format!("{name}.t"), dim, c_out, rng)?;
    }
    init_norm(s, &format!("{name}.n2"), c_out)?;
    init_conv(s, &format!("{name}.c2"), c_out, c_out, 3, rng)?;
    if c_in != c_out {
        init_conv(s, &format!("{name}.skip"), c_out, c_in, 1, rng)?;
    }
    Ok(())
}

pub fn res<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, name: &str, x: Var, temb: Option<Var>, o: BlockOpts) -> Result<Var> {
    let h = norm(g, s, &format!("{name}.n1"), x, o.groups, o.norm)?;
    let h = g.silu(h);
    let mut h = conv(g, s, &format!("{name}.c1"), h, 1)?;
    if let Some(t) = temb {
        let proj = linear(g, s, &format!("{name}.t"), t)?;
        let c = g.shape(proj)[1];
        let proj = g.reshape(proj, &[c])?;
        h = g.add_channel(h, proj)?;
    }
    let h = norm(g, s, &format!("{name}.n2"), h, o.groups, o.norm)?;
    let h = g.silu(h);
    let h = conv(g, s, &format!("{name}.c2"), h, 1)?;
    let skip = if s.contains(&format!("{name}.skip.w")) {
        conv(g, s, &format!("{name}.skip"), x, 1)?
    } else {
        x
    };
    Ok(g.add(skip, h)?)
}

pub fn init_attn<T: Real>(s: &mut ParamStore<T>, name: &str, c: usize, rng: &mut Rng) -> Result<()> {
    init_norm(s, &format!("{name}.n"), c)?;
    for p in ["q", "k", "v", "o"] {
        s.insert_fan_in(format!("{name}.{p}.w"), &[c, c], c, rng)?;
        s.insert_fan_in(format!("{name}.{p}.b"), &[c], c, rng)?;
    }
    Ok(())
}

/// Single-head self-attention over flattened spatial positions, residual.
pub fn attn<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, name: &str, x: Var, o: BlockOpts) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    let h = norm(g, s, &format!("{name}.n"), x, o.groups, o.norm)?;
    let h = g.reshape(h, &[c, n])?;
    let proj = |g: &mut Graph<T>, p: &str, inp: Var| -> Result<Var> {
        let w = g.param(s, &format!("{name}.{p}.w"))?;
        let b = g.param(s, &format!("{name}.{p}.b"))?;
        let y = g.matmul(w, inp)?;
        Ok(g.add_channel(y, b)?)
    };
    let q = proj(g, "q", h)?;
    let k = proj(g, "k", h)?;
    let v = proj(g, "v", h)?;
    let qt = g.transpose(q)?;
    let scores = g.matmul(qt, k)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
    let a = g.softmax(scores);
    let at = g.transpose(a)?;
    let mixed = g.matmul(v, at)?;
    let out = proj(g, "o", mixed)?;
    let out = g.reshape(out, &shape)?;
    Ok(g.add(x, out)?)
}

/// Sinusoidal embedding of a timestep, shape `[1, dim]`.
pub fn timestep_embedding<T: Real>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let j = i % half.max(1);
        let freq = (-(10_000f64).ln() * j as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        T::lit(if i < half { arg.sin() } else { arg.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_choice_divides() {
        assert_eq!(groups_for(32, 8), 8);
        assert_eq!(groups_for(12, 8), 6);
        assert_eq!(groups_for(1, 8), 1);
        assert_eq!(groups_for(4, 8), 4);
    }

    #[test]
    fn embedding_distinguishes_steps() {
        let a = timestep_embedding::<f64>(1, 64);
        let b = timestep_embedding::<f64>(2, 64);
        assert_eq!(a.shape(), &[1, 64]);
        assert!(a.max_abs_diff(&b) > 1e-3);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }
}
