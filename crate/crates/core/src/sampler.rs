//! Deterministic DDIM noising/denoising and the stochastic ancestral sampler.

use serde::{Deserialize, Serialize};
use tensorlab::{Real, Rng, Tensor};

use crate::autoenc::Autoencoder;
use crate::cldm::Denoiser;
use crate::error::{Error, Result};
use crate::fusion::{self, NoiseSchedule, NORM_EPS};

/// Anything that predicts the noise in `z_t` given the condition `z_y`.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor<f32>, z_y: &Tensor<f32>, t: usize) -> Result<Tensor<f32>>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z_t: &Tensor<f32>, z_y: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        Denoiser::predict(self, z_t, z_y, t)
    }
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor<f32>, &Tensor<f32>, usize) -> Result<Tensor<f32>>,
{
    fn predict(&self, z_t: &Tensor<f32>, z_y: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        self(z_t, z_y, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ddim,
    Ddpm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub t_s: usize,
    pub k_f: usize,
    pub k_r: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ddim,
            t_s: 50,
            k_f: 30,
            k_r: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.t_s == 0 || self.t_s > schedule.t_total() {
            return Err(Error::invalid("sampler", format!("T_s = {} outside [1, T]", self.t_s)));
        }
        if self.k_f > self.t_s || self.k_r > self.t_s {
            return Err(Error::invalid("sampler", "K_F and K_R must not exceed T_s"));
        }
        Ok(())
    }
}

/// `k` evenly spaced integer timesteps from 1 to `t_s` inclusive, strictly
/// increasing. A single step lands on `t_s`.
pub fn timestep_grid(k: usize, t_s: usize) -> Result<Vec<usize>> {
    if k > t_s {
        return Err(Error::invalid("timestep grid", format!("{k} steps cannot fit in [1, {t_s}]")));
    }
    Ok(match k {
        0 => Vec::new(),
        1 => vec![t_s],
        _ => (0..k)
            .map(|i| 1 + ((i * (t_s - 1)) as f64 / (k - 1) as f64).round() as usize)
            .collect(),
    })
}

fn lerp2(a: f64, x: &Tensor<f32>, b: f64, y: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(x.zip_map(y, |u, v| (a * f64::from(u) + b * f64::from(v)) as f32)?)
}

/// One DDIM move of `z` from level `from` to level `to`, reusing `eps`.
fn ddim_step(z: &Tensor<f32>, eps: &Tensor<f32>, from: usize, to: usize, schedule: &NoiseSchedule) -> Result<Tensor<f32>> {
    let (ab_from, ab_to) = (schedule.alpha_bar(from), schedule.alpha_bar(to));
    // z0_hat = (z - sqrt(1 - ab_from) eps) / sqrt(ab_from)
    let z0 = lerp2(1.0 / ab_from.sqrt(), z, -(1.0 - ab_from).sqrt() / ab_from.sqrt(), eps)?;
    lerp2(ab_to.sqrt(), &z0, (1.0 - ab_to).sqrt(), eps)
}

/// Deterministic noising of a clean latent up the `K_F`-point grid. The clean
/// state is queried at the first grid level.
pub fn ddim_forward<P: NoisePredictor + ?Sized>(
    z0: &Tensor<f32>,
    z_y: &Tensor<f32>,
    model: &P,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor<f32>> {
    cfg.validate(schedule)?;
    let grid = timestep_grid(cfg.k_f, cfg.t_s)?;
    let mut z = z0.clone();
    let mut from = 0;
    for &to in &grid {
        let eps = model.predict(&z, z_y, from.max(1))?;
        z = ddim_step(&z, &eps, from, to, schedule)?;
        from = to;
    }
    Ok(z)
}

/// Deterministic denoising from level `T_s` down the `K_R`-point grid to 0.
pub fn ddim_reverse<P: NoisePredictor + ?Sized>(
    z_k: &Tensor<f32>,
    z_y: &Tensor<f32>,
    model: &P,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor<f32>> {
    cfg.validate(schedule)?;
    let grid = timestep_grid(cfg.k_r, cfg.t_s)?;
    let mut z = z_k.clone();
    for (i, &from) in grid.iter().enumerate().rev() {
        let to = if i == 0 { 0 } else { grid[i - 1] };
        let eps = model.predict(&z, z_y, from)?;
        z = ddim_step(&z, &eps, from, to, schedule)?;
    }
    Ok(z)
}

/// Ancestral sampling over the full schedule, starting from `z_t` at `t = T`.
pub fn ddpm_sample<P: NoisePredictor + ?Sized>(
    z_t: &Tensor<f32>,
    z_y: &Tensor<f32>,
    model: &P,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    let mut z = z_t.clone();
    for t in (1..=schedule.t_total()).rev() {
        let eps = model.predict(&z, z_y, t)?;
        let (a, ab, b) = (schedule.alpha(t), schedule.alpha_bar(t), schedule.beta(t));
        z = lerp2(1.0 / a.sqrt(), &z, -b / ((1.0 - ab).sqrt() * a.sqrt()), &eps)?;
        if t > 1 {
            let sd = b.sqrt();
            let noise = Tensor::<f32>::randn(z.shape(), rng);
            z = z.zip_map(&noise, |v, n| v + f32::lit(sd) * n)?;
        }
    }
    Ok(z)
}

/// Latent-space harmonization of `z_x` towards the style of `z_y`.
pub fn harmonize_latent<P: NoisePredictor + ?Sized>(
    z_x: &Tensor<f32>,
    z_y: &Tensor<f32>,
    model: &P,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    use_adain: bool,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    match cfg.strategy {
        Strategy::Ddim => {
            let fused = if use_adain {
                fusion::adain(z_x, z_y, NORM_EPS)?
            } else {
                z_x.clone()
            };
            let noisy = ddim_forward(&fused, z_y, model, schedule, cfg)?;
            ddim_reverse(&noisy, z_y, model, schedule, cfg)
        }
        Strategy::Ddpm => ddpm_sample(z_x, z_y, model, schedule, rng),
    }
}

/// Encodes the source and one randomly chosen target reference, samples in
/// latent space and decodes. Output is clamped to `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn harmonize<P: NoisePredictor + ?Sized>(
    source: &Tensor<f32>,
    target_refs: &[&Tensor<f32>],
    ae: &Autoencoder,
    model: &P,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    use_adain: bool,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    if target_refs.is_empty() {
        return Err(Error::invalid("harmonize", "at least one target reference is required"));
    }
    let reference = target_refs[rng.below(target_refs.len())];
    if reference.shape() != source.shape() {
        return Err(Error::invalid(
            "harmonize",
            format!("reference extent {:?} differs from source {:?}", reference.shape(), source.shape()),
        ));
    }
    let z_x = ae.encode_mean(source)?;
    let z_y = ae.encode_mean(reference)?;
    let z = harmonize_latent(&z_x, &z_y, model, schedule, cfg, use_adain, rng)?;
    Ok(ae.decode(&z)?.map(|v| v.clamp(0.0, 1.0)))
}
