//! Group normalization kernels over `[c, ...]` activations.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-group statistics saved by the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn check_groups(shape: &[usize], groups: usize, eps: f64) -> Result<()> {
    if shape.len() < 2 {
        return Err(TensorError::invalid("group_norm", "input must be [c, ...]"));
    }
    if groups == 0 || shape[0] % groups != 0 {
        return Err(TensorError::invalid(
            "group_norm",
            format!("{} channels not divisible into {groups} groups", shape[0]),
        ));
    }
    if eps <= 0.0 {
        return Err(TensorError::invalid("group_norm", "eps must be positive"));
    }
    Ok(())
}

pub fn group_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<T>, GroupStats)> {
    check_groups(x.shape(), groups, eps)?;
    let c = x.channels();
    gamma.expect_shape("group_norm gamma", &[c])?;
    beta.expect_shape("group_norm beta", &[c])?;
    let m = x.channel_len();
    let span = c / groups * m;
    let mut out = Tensor::zeros(x.shape());
    let mut stats = GroupStats {
        mean: Vec::with_capacity(groups),
        rstd: Vec::with_capacity(groups),
    };
    for g in 0..groups {
        let xs = &x.data()[g * span..(g + 1) * span];
        let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / span as f64;
        let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / span as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        stats.mean.push(mean);
        stats.rstd.push(rstd);
        let ys = &mut out.data_mut()[g * span..(g + 1) * span];
        for (i, (y, v)) in ys.iter_mut().zip(xs).enumerate() {
            let ch = g * (c / groups) + i / m;
            let xhat = (v.as_f64() - mean) * rstd;
            *y = T::lit(gamma.data()[ch].as_f64() * xhat + beta.data()[ch].as_f64());
        }
    }
    Ok((out, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &GroupStats,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = x.channels();
    let m = x.channel_len();
    let groups = stats.mean.len();
    let cg = c / groups;
    let span = cg * m;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut dxhat = vec![0.0f64; span];
    let mut xhat = vec![0.0f64; span];
    for g in 0..groups {
        let (mean, rstd) = (stats.mean[g], stats.rstd[g]);
        let xs = &x.data()[g * span..(g + 1) * span];
        let gs = &grad_out.data()[g * span..(g + 1) * span];
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for i in 0..span {
            let ch = g * cg + i / m;
            let gv = gs[i].as_f64();
            xhat[i] = (xs[i].as_f64() - mean) * rstd;
            dgamma[ch] += gv * xhat[i];
            dbeta[ch] += gv;
            dxhat[i] = gv * gamma.data()[ch].as_f64();
            sum_d += dxhat[i];
            sum_dx += dxhat[i] * xhat[i];
        }
        let n = span as f64;
        let out = &mut dx.data_mut()[g * span..(g + 1) * span];
        for i in 0..span {
            out[i] = T::lit(rstd / n * (n * dxhat[i] - sum_d - xhat[i] * sum_dx));
        }
    }
    let to_t = |v: Vec<f64>| Tensor::new(&[c], v.into_iter().map(T::lit).collect()).expect("affine grad");
    (dx, to_t(dgamma), to_t(dbeta))
}
