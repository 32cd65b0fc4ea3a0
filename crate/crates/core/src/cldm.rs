//! Conditional latent denoiser: a time-conditioned 3D UNet with
//! self-attention, conditioned on the target latent by channel concatenation,
//! together with the stage-2 loss terms.

use serde::{Deserialize, Serialize};
use tensorlab::{Graph, ParamStore, Real, Rng, Tensor, Var};

use crate::autoenc::bce_logits;
use crate::error::{Error, Result};
use crate::fusion::{self, NoiseSchedule, NORM_EPS};
use crate::nn::{self, BlockOpts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CldmConfig {
    pub widths: Vec<usize>,
    pub c_latent: usize,
    pub groups: usize,
    pub temb_dim: usize,
    pub attn_blocks: usize,
    /// Group normalization inside blocks; off removes every norm layer.
    pub group_norm: bool,
}

impl Default for CldmConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 64],
            c_latent: 4,
            groups: 8,
            temb_dim: 64,
            attn_blocks: 2,
            group_norm: true,
        }
    }
}

impl CldmConfig {
    fn opts(&self) -> BlockOpts {
        BlockOpts {
            groups: self.groups,
            norm: self.group_norm,
        }
    }

    fn hidden(&self) -> usize {
        2 * self.temb_dim
    }
}

pub fn init_params<T: Real>(cfg: &CldmConfig, seed: u64) -> Result<ParamStore<T>> {
    if cfg.widths.is_empty() || cfg.c_latent == 0 || cfg.temb_dim < 2 {
        return Err(Error::invalid("denoiser config", "need widths, latent channels and a time embedding"));
    }
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let hid = cfg.hidden();
    let t = Some(hid);
    nn::init_linear(&mut s, "temb.0", cfg.temb_dim, hid, &mut rng)?;
    nn::init_linear(&mut s, "temb.1", hid, hid, &mut rng)?;
    nn::init_conv(&mut s, "in", cfg.widths[0], 2 * cfg.c_latent, 3, &mut rng)?;
    let mut cur = cfg.widths[0];
    let mut skips = Vec::new();
    for (i, &w) in cfg.widths.iter().enumerate() {
        nn::init_res(&mut s, &format!("d{i}.res"), cur, w, t, &mut rng)?;
        for j in 0..cfg.attn_blocks {
            nn::init_res(&mut s, &format!("d{i}.ar{j}.res"), w, w, t, &mut rng)?;
            nn::init_attn(&mut s, &format!("d{i}.ar{j}.attn"), w, &mut rng)?;
        }
        cur = w;
        skips.push(w);
    }
    nn::init_res(&mut s, "m.r0", cur, cur, t, &mut rng)?;
    nn::init_attn(&mut s, "m.attn", cur, &mut rng)?;
    nn::init_res(&mut s, "m.r1", cur, cur, t, &mut rng)?;
    for (i, &w) in cfg.widths.iter().rev().enumerate() {
        let skip = skips.pop().expect("one skip per level");
        nn::init_res(&mut s, &format!("u{i}.res"), cur + skip, w, t, &mut rng)?;
        for j in 0..cfg.attn_blocks {
            nn::init_res(&mut s, &format!("u{i}.ar{j}.res"), w, w, t, &mut rng)?;
            nn::init_attn(&mut s, &format!("u{i}.ar{j}.attn"), w, &mut rng)?;
        }
        cur = w;
    }
    nn::init_norm(&mut s, "out.n", cur)?;
    nn::init_conv(&mut s, "out", cfg.c_latent, cur, 3, &mut rng)?;
    Ok(s)
}

/// `eps_theta(z_t, z_y, t)`.
pub fn predict_noise<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &CldmConfig,
    z_t: Var,
    z_y: Var,
    t: usize,
) -> Result<Var> {
    if g.shape(z_t) != g.shape(z_y) {
        return Err(Error::invalid(
            "denoiser input",
            format!("noisy latent {:?} vs condition {:?}", g.shape(z_t), g.shape(z_y)),
        ));
    }
    if g.shape(z_t).len() != 4 || g.shape(z_t)[0] != cfg.c_latent {
        return Err(Error::invalid("denoiser input", format!("expected [{}, w, h, d]", cfg.c_latent)));
    }
    if t == 0 {
        return Err(Error::invalid("timestep", "t must be at least 1"));
    }
    let o = cfg.opts();
    let e = g.constant(nn::timestep_embedding(t, cfg.temb_dim));
    let e = nn::linear(g, s, "temb.0", e)?;
    let e = g.silu(e);
    let e = nn::linear(g, s, "temb.1", e)?;
    let temb = Some(g.silu(e));

    let x = g.concat(&[z_t, z_y])?;
    let mut h = nn::conv(g, s, "in", x, 1)?;
    let mut skips = Vec::new();
    for i in 0..cfg.widths.len() {
        h = nn::res(g, s, &format!("d{i}.res"), h, temb, o)?;
        for j in 0..cfg.attn_blocks {
            h = nn::res(g, s, &format!("d{i}.ar{j}.res"), h, temb, o)?;
            h = nn::attn(g, s, &format!("d{i}.ar{j}.attn"), h, o)?;
        }
        skips.push(h);
    }
    h = nn::res(g, s, "m.r0", h, temb, o)?;
    h = nn::attn(g, s, "m.attn", h, o)?;
    h = nn::res(g, s, "m.r1", h, temb, o)?;
    for i in 0..cfg.widths.len() {
        let skip = skips.pop().expect("one skip per level");
        h = g.concat(&[h, skip])?;
        h = nn::res(g, s, &format!("u{i}.res"), h, temb, o)?;
        for j in 0..cfg.attn_blocks {
            h = nn::res(g, s, &format!("u{i}.ar{j}.res"), h, temb, o)?;
            h = nn::attn(g, s, &format!("u{i}.ar{j}.attn"), h, o)?;
        }
    }
    let h = nn::norm(g, s, "out.n", h, cfg.groups, cfg.group_norm)?;
    let h = g.silu(h);
    nn::conv(g, s, "out", h, 1)
}

/// Trained denoiser with `f32` parameters.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: CldmConfig,
    pub params: ParamStore<f32>,
}

impl Denoiser {
    pub fn new(config: CldmConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn predict(&self, z_t: &Tensor<f32>, z_y: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let a = g.constant(z_t.clone());
        let b = g.constant(z_y.clone());
        let y = predict_noise(&mut g, &self.params, &self.config, a, b, t)?;
        Ok(g.value(y).clone())
    }
}

/// `||eps - eps_pred||^2` averaged per element.
pub fn loss_noise<T: Real>(g: &mut Graph<T>, eps_true: Var, eps_pred: Var) -> Result<Var> {
    Ok(g.mse(eps_true, eps_pred)?)
}

/// MSE between the source content map and the (optionally instance
/// normalized) estimate.
pub fn loss_content<T: Real>(g: &mut Graph<T>, z_cx: Var, z0_hat: Var, use_in: bool) -> Result<Var> {
    let z = if use_in {
        fusion::instance_norm_var(g, z0_hat, NORM_EPS)?
    } else {
        z0_hat
    };
    Ok(g.mse(z_cx, z)?)
}

/// `F F^T / (c M)` for the `[c, M]` flattening of `x`.
pub fn gram<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = shape[0];
    let m: usize = shape[1..].iter().product();
    let f = g.reshape(x, &[c, m])?;
    let ft = g.transpose(f)?;
    let prod = g.matmul(f, ft)?;
    Ok(g.scale(prod, 1.0 / (c * m) as f64))
}

/// `(1/c^2) sum (G - A)^2` with `G` from the target and `A` from the estimate.
pub fn loss_style_gram<T: Real>(g: &mut Graph<T>, z_y: Var, z0_hat: Var) -> Result<Var> {
    let c = g.shape(z_y)[0];
    let a = gram(g, z_y)?;
    let b = gram(g, z0_hat)?;
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (c * c) as f64))
}

/// Summed squared differences of channel means and standard deviations.
pub fn loss_style_stats<T: Real>(g: &mut Graph<T>, z_y: Var, z0_hat: Var) -> Result<Var> {
    let my = g.channel_mean(z_y);
    let mz = g.channel_mean(z0_hat);
    let sy = fusion::channel_std(g, z_y);
    let sz = fusion::channel_std(g, z0_hat);
    let dm = g.sub(my, mz)?;
    let ds = g.sub(sy, sz)?;
    let a = g.square(dm);
    let b = g.square(ds);
    let a = g.sum(a);
    let b = g.sum(b);
    Ok(g.add(a, b)?)
}

/// Three-layer latent style discriminator.
pub fn init_style_disc<T: Real>(c_latent: usize, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    nn::init_conv(&mut s, "sd0", 16, c_latent, 3, &mut rng)?;
    nn::init_conv(&mut s, "sd1", 16, 16, 3, &mut rng)?;
    nn::init_conv(&mut s, "sd2", 1, 16, 3, &mut rng)?;
    Ok(s)
}

/// One logit per latent map, shape `[1]`.
pub fn style_disc<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, z: Var) -> Result<Var> {
    let h = nn::conv(g, s, "sd0", z, 1)?;
    let h = g.silu(h);
    let h = nn::conv(g, s, "sd1", h, 2)?;
    let h = g.silu(h);
    let h = nn::conv(g, s, "sd2", h, 1)?;
    Ok(g.mean(h))
}

/// `-log S_D(z0_hat)`.
pub fn loss_style_adversarial<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, z0_hat: Var) -> Result<Var> {
    let logit = style_disc(g, s, z0_hat)?;
    Ok(bce_logits(g, logit, true))
}

/// `-log S_D(z_y) - log(1 - S_D(z_x))`.
pub fn loss_discriminator<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, z_y: Var, z_x: Var) -> Result<Var> {
    let ly = style_disc(g, s, z_y)?;
    let lx = style_disc(g, s, z_x)?;
    let real = bce_logits(g, ly, true);
    let fake = bce_logits(g, lx, false);
    Ok(g.add(real, fake)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleMode {
    Gram,
    Stats,
    Adversarial,
    GramAdversarial,
}

impl StyleMode {
    pub fn uses_gram(self) -> bool {
        matches!(self, StyleMode::Gram | StyleMode::GramAdversarial)
    }

    pub fn uses_adversarial(self) -> bool {
        matches!(self, StyleMode::Adversarial | StyleMode::GramAdversarial)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    pub no_content: bool,
    pub no_style: bool,
    pub no_adain: bool,
    pub no_in: bool,
    pub gn_off: bool,
}

impl Ablations {
    pub fn set(&mut self, flag: &str) -> Result<()> {
        match flag {
            "no_content" => self.no_content = true,
            "no_style" => self.no_style = true,
            "no_adain" => self.no_adain = true,
            "no_in" => self.no_in = true,
            "gn_off" => self.gn_off = true,
            other => {
                return Err(Error::invalid(
                    "ablation flag",
                    format!("`{other}` (expected no_content, no_style, no_adain, no_in or gn_off)"),
                ))
            }
        }
        Ok(())
    }
}

/// `L_N + L_C + alpha * sum(style terms)` on plain numbers.
pub fn combine(noise: f64, content: Option<f64>, style: &[f64], alpha: f64) -> f64 {
    noise + content.unwrap_or(0.0) + alpha * style.iter().sum::<f64>()
}

/// Graph form of [`combine`].
pub fn loss_total<T: Real>(g: &mut Graph<T>, noise: Var, content: Option<Var>, style: &[Var], alpha: f64) -> Result<Var> {
    let mut total = noise;
    if let Some(c) = content {
        total = g.add(total, c)?;
    }
    for &s in style {
        let w = g.scale(s, alpha);
        total = g.add(total, w)?;
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct Stage2Options {
    pub alpha: f64,
    pub style_mode: StyleMode,
    pub ablate: Ablations,
    /// Generator-side adversarial term is active.
    pub adversarial_live: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Terms {
    pub total: Var,
    pub noise: Var,
    pub content: Option<Var>,
    pub gram: Option<Var>,
    pub stats: Option<Var>,
    pub adversarial: Option<Var>,
    pub z0_hat: Var,
}

/// Every stage-2 loss term for one `(source, target)` latent pair at step `t`
/// with forward-process noise `eps`.
#[allow(clippy::too_many_arguments)]
pub fn training_terms<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &CldmConfig,
    disc: Option<&ParamStore<T>>,
    schedule: &NoiseSchedule,
    z_x: &Tensor<T>,
    z_y: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    opts: &Stage2Options,
) -> Result<Stage2Terms> {
    let z0 = if opts.ablate.no_adain {
        z_x.clone()
    } else {
        fusion::adain(z_x, z_y, NORM_EPS)?
    };
    let z_t = fusion::fdp_with_noise(&z0, eps, t, schedule)?;
    let zt = g.constant(z_t);
    let zy = g.constant(z_y.clone());
    let ev = g.constant(eps.clone());
    let pred = predict_noise(g, s, cfg, zt, zy, t)?;
    let noise = loss_noise(g, ev, pred)?;
    let z0_hat = fusion::estimate_z0_var(g, zt, pred, t, schedule)?;
    let content = if opts.ablate.no_content {
        None
    } else {
        let zc = g.constant(fusion::instance_norm(z_x, NORM_EPS)?);
        Some(loss_content(g, zc, z0_hat, !opts.ablate.no_in)?)
    };
    let mut style = Vec::new();
    let (mut gram_l, mut stats_l, mut adv_l) = (None, None, None);
    if !opts.ablate.no_style {
        match opts.style_mode {
            StyleMode::Stats => {
                let l = loss_style_stats(g, zy, z0_hat)?;
                stats_l = Some(l);
                style.push(l);
            }
            mode => {
                if mode.uses_gram() {
                    let l = loss_style_gram(g, zy, z0_hat)?;
                    gram_l = Some(l);
                    style.push(l);
                }
                if mode.uses_adversarial() && opts.adversarial_live {
                    let d = disc.ok_or_else(|| Error::invalid("adversarial style", "discriminator parameters missing"))?;
                    let l = loss_style_adversarial(g, d, z0_hat)?;
                    adv_l = Some(l);
                    style.push(l);
                }
            }
        }
    }
    let total = loss_total(g, noise, content, &style, opts.alpha)?;
    Ok(Stage2Terms {
        total,
        noise,
        content,
        gram: gram_l,
        stats: stats_l,
        adversarial: adv_l,
        z0_hat,
    })
}
