//! Variational 3D convolutional autoencoder mapping `[w, h, d]` volumes to
//! `[c_latent, w/8, h/8, d/8]` latent maps.

use serde::{Deserialize, Serialize};
use tensorlab::{Graph, ParamStore, Real, Rng, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{self, BlockOpts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub widths: Vec<usize>,
    pub c_latent: usize,
    pub groups: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 64],
            c_latent: 4,
            groups: 8,
        }
    }
}

impl AeConfig {
    pub fn factor(&self) -> usize {
        1 << self.widths.len()
    }

    fn opts(&self) -> BlockOpts {
        BlockOpts {
            groups: self.groups,
            norm: true,
        }
    }

    pub fn latent_shape(&self, extent: [usize; 3]) -> Result<[usize; 4]> {
        let f = self.factor();
        if extent.iter().any(|e| e % f != 0 || *e == 0) {
            return Err(Error::invalid(
                "volume extent",
                format!("{extent:?} is not divisible by {f}"),
            ));
        }
        Ok([self.c_latent, extent[0] / f, extent[1] / f, extent[2] / f])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeMode {
    Sample,
    Mean,
}

pub fn init_params<T: Real>(cfg: &AeConfig, seed: u64) -> Result<ParamStore<T>> {
    if cfg.widths.is_empty() || cfg.c_latent == 0 {
        return Err(Error::invalid("autoencoder config", "need at least one stage and one latent channel"));
    }
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let mut prev = 1;
    for (i, &w) in cfg.widths.iter().enumerate() {
        nn::init_conv(&mut s, &format!("enc.s{i}.down"), w, prev, 3, &mut rng)?;
        nn::init_res(&mut s, &format!("enc.s{i}.res"), w, w, None, &mut rng)?;
        prev = w;
    }
    nn::init_norm(&mut s, "enc.out.n", prev)?;
    nn::init_conv(&mut s, "enc.out", 2 * cfg.c_latent, prev, 3, &mut rng)?;

    let rev: Vec<usize> = cfg.widths.iter().rev().copied().collect();
    nn::init_conv(&mut s, "dec.in", rev[0], cfg.c_latent, 3, &mut rng)?;
    for (i, &w) in rev.iter().enumerate() {
        let next = rev.get(i + 1).copied().unwrap_or(1);
        nn::init_res(&mut s, &format!("dec.s{i}.res"), w, w, None, &mut rng)?;
        nn::init_conv(&mut s, &format!("dec.s{i}.up"), next, w, 3, &mut rng)?;
    }
    Ok(s)
}

/// Encoder graph on a `[1, w, h, d]` input; returns `(mu, logvar)`.
pub fn encoder<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &AeConfig, x: Var) -> Result<(Var, Var)> {
    let mut h = x;
    for i in 0..cfg.widths.len() {
        h = nn::conv(g, s, &format!("enc.s{i}.down"), h, 2)?;
        h = nn::res(g, s, &format!("enc.s{i}.res"), h, None, cfg.opts())?;
    }
    let h = nn::norm(g, s, "enc.out.n", h, cfg.groups, true)?;
    let h = g.silu(h);
    let out = nn::conv(g, s, "enc.out", h, 1)?;
    let mu = g.narrow(out, 0, cfg.c_latent)?;
    let logvar = g.narrow(out, cfg.c_latent, cfg.c_latent)?;
    Ok((mu, logvar))
}

/// Decoder graph on a latent map; returns `[1, w, h, d]`.
pub fn decoder<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &AeConfig, z: Var) -> Result<Var> {
    let mut h = nn::conv(g, s, "dec.in", z, 1)?;
    for i in 0..cfg.widths.len() {
        h = nn::res(g, s, &format!("dec.s{i}.res"), h, None, cfg.opts())?;
        h = g.upsample2(h)?;
        h = nn::conv(g, s, &format!("dec.s{i}.up"), h, 1)?;
    }
    Ok(h)
}

/// `mu + exp(logvar / 2) * eps`.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var, eps: Tensor<T>) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let sd = g.exp(half);
    let e = g.constant(eps);
    let noise = g.mul(sd, e)?;
    Ok(g.add(mu, noise)?)
}

/// Per-element KL divergence of `N(mu, exp(logvar))` from `N(0, 1)`.
pub fn kl<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = g.square(mu);
    let ev = g.exp(logvar);
    let a = g.add(m2, ev)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0);
    let m = g.mean(c);
    Ok(g.scale(m, 0.5))
}

/// Trained autoencoder with `f32` parameters.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AeConfig,
    pub params: ParamStore<f32>,
}

impl Autoencoder {
    pub fn new(config: AeConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    fn input(volume: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = volume.shape();
        if s.len() != 3 {
            return Err(Error::invalid("volume", format!("expected [w, h, d], got {s:?}")));
        }
        Ok(volume.clone().reshape(&[1, s[0], s[1], s[2]])?)
    }

    pub fn encode(&self, volume: &Tensor<f32>, mode: EncodeMode, rng: &mut Rng) -> Result<Tensor<f32>> {
        let s = volume.shape();
        if s.len() == 3 {
            self.config.latent_shape([s[0], s[1], s[2]])?;
        }
        let mut g = Graph::new();
        let x = g.constant(Self::input(volume)?);
        let (mu, logvar) = encoder(&mut g, &self.params, &self.config, x)?;
        let z = match mode {
            EncodeMode::Mean => mu,
            EncodeMode::Sample => {
                let eps = Tensor::randn(g.shape(mu), rng);
                reparameterize(&mut g, mu, logvar, eps)?
            }
        };
        Ok(g.value(z).clone())
    }

    pub fn encode_mean(&self, volume: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.encode(volume, EncodeMode::Mean, &mut Rng::new(0))
    }

    /// Unclamped reconstruction shaped `[w, h, d]`.
    pub fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        if z.rank() != 4 || z.shape()[0] != self.config.c_latent {
            return Err(Error::invalid(
                "latent",
                format!("expected [{}, w, h, d], got {:?}", self.config.c_latent, z.shape()),
            ));
        }
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let y = decoder(&mut g, &self.params, &self.config, zv)?;
        let s = g.shape(y).to_vec();
        Ok(g.value(y).clone().reshape(&s[1..])?)
    }
}

/// Frozen random two-layer feature extractor for the perceptual term.
pub fn perceptual_params<T: Real>(seed: u64) -> Result<ParamStore<T>> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    nn::init_conv(&mut s, "p0", 8, 1, 3, &mut rng)?;
    nn::init_conv(&mut s, "p1", 8, 8, 3, &mut rng)?;
    s.freeze();
    Ok(s)
}

fn features<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
    let a = nn::conv(g, s, "p0", x, 2)?;
    let a = g.silu(a);
    let b = nn::conv(g, s, "p1", a, 1)?;
    Ok((a, b))
}

/// Mean squared feature distance, summed over both layers.
pub fn perceptual<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, x: Var, y: Var) -> Result<Var> {
    let (xa, xb) = features(g, s, x)?;
    let (ya, yb) = features(g, s, y)?;
    let la = g.mse(xa, ya)?;
    let lb = g.mse(xb, yb)?;
    Ok(g.add(la, lb)?)
}

/// Three-layer patch discriminator on volumes; returns per-patch logits.
pub fn init_patch_disc<T: Real>(seed: u64) -> Result<ParamStore<T>> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    nn::init_conv(&mut s, "pd0", 8, 1, 3, &mut rng)?;
    nn::init_conv(&mut s, "pd1", 16, 8, 3, &mut rng)?;
    nn::init_conv(&mut s, "pd2", 1, 16, 3, &mut rng)?;
    Ok(s)
}

pub fn patch_disc<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
    let h = nn::conv(g, s, "pd0", x, 2)?;
    let h = g.silu(h);
    let h = nn::conv(g, s, "pd1", h, 2)?;
    let h = g.silu(h);
    nn::conv(g, s, "pd2", h, 1)
}

/// `-mean(log(clamp(sigmoid(logits))))` against the `real` label, or the
/// complementary term for fake.
pub fn bce_logits<T: Real>(g: &mut Graph<T>, logits: Var, real: bool) -> Var {
    let p = g.sigmoid(logits);
    let p = if real {
        p
    } else {
        let n = g.neg(p);
        g.add_scalar(n, 1.0)
    };
    let p = g.clamp(p, 1e-7, 1.0 - 1e-7);
    let l = g.log(p);
    let m = g.mean(l);
    g.neg(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Weights {
    pub rec: f64,
    pub perc: f64,
    pub kl: f64,
    pub adv: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            perc: 1.0,
            kl: 1e-6,
            adv: 0.0,
        }
    }
}

impl Stage1Weights {
    pub fn validate(&self) -> Result<()> {
        if [self.rec, self.perc, self.kl, self.adv].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("stage-1 weights", "weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms {
    pub total: Var,
    pub rec: Var,
    pub perc: Var,
    pub kl: Var,
    pub adv: Option<Var>,
    pub recon: Var,
}

/// Hybrid reconstruction loss for one `[1, w, h, d]` volume. `eps` selects the
/// sampled latent (mean latent when `None`); `disc` adds the generator side of
/// the patch-adversarial term.
#[allow(clippy::too_many_arguments)]
pub fn stage1_loss<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &AeConfig,
    perc: &ParamStore<T>,
    disc: Option<&ParamStore<T>>,
    x: Var,
    eps: Option<Tensor<T>>,
    w: &Stage1Weights,
) -> Result<Stage1Terms> {
    w.validate()?;
    let (mu, logvar) = encoder(g, s, cfg, x)?;
    let z = match eps {
        Some(e) => reparameterize(g, mu, logvar, e)?,
        None => mu,
    };
    let recon = decoder(g, s, cfg, z)?;
    let rec = g.mae(x, recon)?;
    let kl = kl(g, mu, logvar)?;
    let perc_l = perceptual(g, perc, x, recon)?;
    let a = g.scale(rec, w.rec);
    let b = g.scale(perc_l, w.perc);
    let c = g.scale(kl, w.kl);
    let mut total = g.add(a, b)?;
    total = g.add(total, c)?;
    let adv = match disc {
        Some(d) if w.adv > 0.0 => {
            let logits = patch_disc(g, d, recon)?;
            let l = bce_logits(g, logits, true);
            let sl = g.scale(l, w.adv);
            total = g.add(total, sl)?;
            Some(l)
        }
        _ => None,
    };
    Ok(Stage1Terms {
        total,
        rec,
        perc: perc_l,
        kl,
        adv,
        recon,
    })
}
