//! Latent style fusion (instance normalization, AdaIN) and the forward
//! noising process.

use serde::{Deserialize, Serialize};
use tensorlab::{Graph, Real, Rng, Tensor, Var};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel mean and population standard deviation over the spatial axes.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn of<T: Real>(z: &Tensor<T>) -> Self {
        let (mut mu, mut sigma) = (Vec::new(), Vec::new());
        for c in 0..z.channels() {
            let ch = z.channel(c);
            let n = ch.len() as f64;
            let m = ch.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = ch.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n;
            mu.push(m);
            sigma.push(var.sqrt());
        }
        Self { mu, sigma }
    }
}

fn restyle<T: Real>(z: &Tensor<T>, from: &ChannelStats, to_mu: &[f64], to_sigma: &[f64], eps: f64) -> Tensor<T> {
    let mut out = z.clone();
    for c in 0..z.channels() {
        let (m, s) = (from.mu[c], from.sigma[c] + eps);
        for v in out.channel_mut(c) {
            *v = T::lit(to_sigma[c] * (v.as_f64() - m) / s + to_mu[c]);
        }
    }
    out
}

/// `(z - mu) / (sigma + eps)` per channel, no affine.
pub fn instance_norm<T: Real>(z: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if eps <= 0.0 {
        return Err(Error::invalid("instance norm", "eps must be positive"));
    }
    let stats = ChannelStats::of(z);
    let c = z.channels();
    Ok(restyle(z, &stats, &vec![0.0; c], &vec![1.0; c], eps))
}

/// Re-standardizes `z_x` to the channel statistics of `z_y`.
pub fn adain<T: Real>(z_x: &Tensor<T>, z_y: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if z_x.shape() != z_y.shape() {
        return Err(Error::invalid(
            "adain",
            format!("shapes differ: {:?} vs {:?}", z_x.shape(), z_y.shape()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("adain", "eps must be positive"));
    }
    let target = ChannelStats::of(z_y);
    Ok(restyle(z_x, &ChannelStats::of(z_x), &target.mu, &target.sigma, eps))
}

/// Offset added under the square root of the variance so the standard
/// deviation stays differentiable on constant channels.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Differentiable per-channel standard deviation, shape `[c]`.
pub fn channel_std<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let var = g.channel_var(x);
    let var = g.add_scalar(var, SIGMA_FLOOR);
    g.sqrt(var)
}

/// Differentiable instance normalization.
pub fn instance_norm_var<T: Real>(g: &mut Graph<T>, x: Var, eps: f64) -> Result<Var> {
    let mu = g.channel_mean(x);
    let neg = g.neg(mu);
    let centred = g.add_channel(x, neg)?;
    let sd = channel_std(g, x);
    let denom = g.add_scalar(sd, eps);
    let inv = g.recip(denom);
    Ok(g.mul_channel(centred, inv)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta` linear from `beta_1` to `beta_T` over `t_total` steps.
    pub fn linear(t_total: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if t_total == 0 {
            return Err(Error::invalid("schedule", "T must be positive"));
        }
        if !(beta_1 > 0.0 && beta_t < 1.0 && beta_1 <= beta_t) {
            return Err(Error::invalid("schedule", "need 0 < beta_1 <= beta_T < 1"));
        }
        let beta: Vec<f64> = (0..t_total)
            .map(|i| {
                if t_total == 1 {
                    beta_1
                } else {
                    beta_1 + (beta_t - beta_1) * i as f64 / (t_total - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("schedule", "every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn t_total(&self) -> usize {
        self.beta.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_total() {
            return Err(Error::invalid("timestep", format!("t = {t} outside [1, {}]", self.t_total())));
        }
        Ok(())
    }

    /// Values are indexed by `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `alpha_bar` gathered at several timesteps.
    pub fn gather_alpha_bar(&self, ts: &[usize]) -> Result<Tensor<f32>> {
        let table = Tensor::new(&[self.t_total() + 1], {
            let mut v = vec![1.0f32];
            v.extend(self.alpha_bar.iter().map(|&a| a as f32));
            v
        })?;
        Ok(table.gather(ts)?)
    }
}

/// `sqrt(ab) * z0 + sqrt(1 - ab) * eps` with `ab = alpha_bar(t)`.
pub fn fdp_with_noise<T: Real>(z0: &Tensor<T>, eps: &Tensor<T>, t: usize, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    schedule.check(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::invalid("forward diffusion", "noise shape differs from latent"));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(z0.zip_map(eps, |z, e| a * z + b * e)?)
}

/// Draws `eps ~ N(0, I)` and returns `(z_t, eps)`.
pub fn fdp_sample<T: Real>(z0: &Tensor<T>, t: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<(Tensor<T>, Tensor<T>)> {
    schedule.check(t)?;
    let eps = Tensor::randn(z0.shape(), rng);
    let zt = fdp_with_noise(z0, &eps, t, schedule)?;
    Ok((zt, eps))
}

/// `(z_t - sqrt(1 - ab) * eps) / sqrt(ab)`.
pub fn estimate_z0<T: Real>(z_t: &Tensor<T>, eps: &Tensor<T>, t: usize, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    schedule.check(t)?;
    if z_t.shape() != eps.shape() {
        return Err(Error::invalid("z0 estimate", "noise shape differs from latent"));
    }
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t.zip_map(eps, |z, e| T::lit((z.as_f64() - n * e.as_f64()) / s))?)
}

/// Differentiable form of [`estimate_z0`] for the training losses.
pub fn estimate_z0_var<T: Real>(g: &mut Graph<T>, z_t: Var, eps: Var, t: usize, schedule: &NoiseSchedule) -> Result<Var> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let scaled = g.scale(eps, (1.0 - ab).sqrt());
    let diff = g.sub(z_t, scaled)?;
    Ok(g.scale(diff, 1.0 / ab.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_and_tensor_instance_norm_agree() {
        let mut rng = Rng::new(3);
        let z = Tensor::<f64>::randn(&[3, 2, 2, 2], &mut rng);
        let mut g = Graph::new();
        let v = g.constant(z.clone());
        let y = instance_norm_var(&mut g, v, NORM_EPS).unwrap();
        assert!(g.value(y).max_abs_diff(&instance_norm(&z, NORM_EPS).unwrap()) < 1e-9);
    }

    #[test]
    fn alpha_bar_zero_is_one() {
        let s = NoiseSchedule::linear(10, 0.01, 0.02).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.check(0).is_err() && s.check(11).is_err() && s.check(10).is_ok());
        let g = s.gather_alpha_bar(&[0, 1, 10]).unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert!((f64::from(g.data()[1]) - 0.99).abs() < 1e-7);
    }
}
