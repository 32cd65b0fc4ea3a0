//! The two training stages: the autoencoder on raw volumes, then the latent
//! denoiser with the autoencoder frozen.

use serde::{Deserialize, Serialize};
use tensorlab::{Adam, AdamConfig, Graph, ParamStore, ReduceOnPlateau, Rng, Tensor};

use crate::autoenc::{self, Autoencoder};
use crate::cldm::{self, Denoiser, Stage2Options};
use crate::config::{RunConfig, Stream};
use crate::error::{Error, Result};
use crate::fusion::{self, NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Row {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub rec: f64,
    pub perc: f64,
    pub kl: f64,
    pub adv: f64,
    pub disc: f64,
    pub val_rec: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub ae: Autoencoder,
    pub log: Vec<Stage1Row>,
    pub rng_state: [u64; 2],
}

fn batched(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::invalid("volume", format!("expected [w, h, d], got {s:?}")));
    }
    Ok(x.clone().reshape(&[1, s[0], s[1], s[2]])?)
}

fn extent_of(v: &Tensor<f32>) -> [usize; 3] {
    let s = v.shape();
    [s[0], s[1], s[2]]
}

fn adam(lr: f64) -> Adam {
    Adam::new(AdamConfig {
        lr,
        ..AdamConfig::default()
    })
}

/// Mean absolute reconstruction error through the mean latent.
pub fn reconstruction_error(ae: &Autoencoder, volumes: &[&Tensor<f32>]) -> Result<f64> {
    let mut total = 0.0;
    for v in volumes {
        let r = ae.decode(&ae.encode_mean(v)?)?;
        total += r
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum::<f64>()
            / v.numel() as f64;
    }
    Ok(total / volumes.len().max(1) as f64)
}

/// Trains the autoencoder. Learning rate follows reduce-on-plateau on the
/// validation reconstruction error (`val`, or `train` when `val` is empty).
pub fn train_stage1(cfg: &RunConfig, train: &[&Tensor<f32>], val: &[&Tensor<f32>]) -> Result<Stage1Outcome> {
    if train.is_empty() {
        return Err(Error::invalid("stage 1", "no training volumes"));
    }
    let s1 = &cfg.stage1;
    let weights = s1.effective_weights();
    weights.validate()?;
    let mut ae = Autoencoder::new(s1.ae.clone(), cfg.seed_for(Stream::AeInit))?;
    let perc = autoenc::perceptual_params::<f32>(cfg.seed_for(Stream::AeInit) ^ 0x5eed)?;
    let mut disc = if s1.adversarial {
        Some(autoenc::init_patch_disc::<f32>(cfg.seed_for(Stream::Disc))?)
    } else {
        None
    };
    let val = if val.is_empty() { train } else { val };
    let mut opt = adam(s1.lr);
    let mut dopt = adam(s1.lr);
    let mut plateau = ReduceOnPlateau::new(s1.plateau_factor, s1.plateau_patience, s1.min_lr);
    let mut lr = s1.lr;
    let mut rng = Rng::new(cfg.seed_for(Stream::AeTrain));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(s1.epochs);

    for epoch in 1..=s1.epochs {
        rng.shuffle(&mut order);
        let mut sums = [0.0f64; 6];
        for batch in order.chunks(s1.batch) {
            let share = 1.0 / batch.len() as f64;
            ae.params.zero_grad();
            let mut fakes = Vec::new();
            let gen_disc = disc.as_ref().map(|d| {
                let mut f = d.clone();
                f.freeze();
                f
            });
            for &i in batch {
                let mut g = Graph::new();
                let x = g.constant(batched(train[i])?);
                let shape = s1.ae.latent_shape(extent_of(train[i]))?;
                let eps = Tensor::randn(&shape, &mut rng);
                let terms = autoenc::stage1_loss(&mut g, &ae.params, &s1.ae, &perc, gen_disc.as_ref(), x, Some(eps), &weights)?;
                let scaled = g.scale(terms.total, share);
                g.backward(scaled)?;
                ae.params.accumulate(&g)?;
                sums[0] += g.value(terms.total).item() as f64;
                sums[1] += g.value(terms.rec).item() as f64;
                sums[2] += g.value(terms.perc).item() as f64;
                sums[3] += g.value(terms.kl).item() as f64;
                if let Some(a) = terms.adv {
                    sums[4] += g.value(a).item() as f64;
                }
                if disc.is_some() {
                    fakes.push((i, g.value(terms.recon).clone()));
                }
            }
            opt.step(&mut ae.params)?;
            if let Some(d) = disc.as_mut() {
                d.zero_grad();
                for (i, fake) in &fakes {
                    let mut g = Graph::new();
                    let real = g.constant(batched(train[*i])?);
                    let fake = g.constant(fake.clone());
                    let lr_ = autoenc::patch_disc(&mut g, d, real)?;
                    let lf = autoenc::patch_disc(&mut g, d, fake)?;
                    let a = autoenc::bce_logits(&mut g, lr_, true);
                    let b = autoenc::bce_logits(&mut g, lf, false);
                    let l = g.add(a, b)?;
                    let l = g.scale(l, 0.5 * share);
                    g.backward(l)?;
                    d.accumulate(&g)?;
                    sums[5] += g.value(l).item() as f64 / share;
                }
                dopt.step(d)?;
            }
        }
        let n = train.len() as f64;
        let val_rec = reconstruction_error(&ae, val)?;
        let row = Stage1Row {
            epoch,
            lr,
            loss: sums[0] / n,
            rec: sums[1] / n,
            perc: sums[2] / n,
            kl: sums[3] / n,
            adv: sums[4] / n,
            disc: sums[5] / n,
            val_rec,
        };
        if !(row.loss.is_finite() && val_rec.is_finite()) {
            return Err(Error::invalid("stage 1", format!("loss diverged at epoch {epoch}")));
        }
        if cfg.verbose {
            eprintln!("stage1 epoch {epoch:4} lr {lr:.2e} loss {:.5} val_rec {val_rec:.5}", row.loss);
        }
        log.push(row);
        lr = plateau.observe(val_rec, lr);
        opt.set_lr(lr);
        dopt.set_lr(lr);
    }
    let (a, b) = rng.state();
    Ok(Stage1Outcome {
        ae,
        log,
        rng_state: [a, b],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Row {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub noise: f64,
    pub content: f64,
    pub style: f64,
    pub adversarial: f64,
    pub disc: f64,
    pub val_noise: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub denoiser: Denoiser,
    pub log: Vec<Stage2Row>,
    pub rng_state: [u64; 2],
}

/// Latent pairs drawn once and reused to score every epoch.
struct ValSet {
    items: Vec<(usize, usize, usize, Tensor<f32>)>,
}

/// Trains the conditional denoiser on mean latents of `sources` paired with
/// random `targets`. The autoencoder is only read; its parameters are checked
/// bit-for-bit after every epoch.
pub fn train_stage2(
    cfg: &RunConfig,
    ae: &Autoencoder,
    sources: &[&Tensor<f32>],
    targets: &[&Tensor<f32>],
    val_sources: &[&Tensor<f32>],
) -> Result<Stage2Outcome> {
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::invalid("stage 2", "need source and target volumes"));
    }
    let s2 = &cfg.stage2;
    let schedule = s2.schedule()?;
    let net = s2.network();
    if net.c_latent != ae.config.c_latent {
        return Err(Error::invalid("stage 2", "denoiser and autoencoder latent channels differ"));
    }
    let mut frozen = ae.clone();
    frozen.params.freeze();
    let snapshot = frozen.params.clone();

    let encode = |vs: &[&Tensor<f32>]| -> Result<Vec<Tensor<f32>>> { vs.iter().map(|v| frozen.encode_mean(v)).collect() };
    let zx = encode(sources)?;
    let zy = encode(targets)?;
    let zv = if val_sources.is_empty() { zx.clone() } else { encode(val_sources)? };

    let mut den = Denoiser::new(net.clone(), cfg.seed_for(Stream::CldmInit))?;
    let adversarial = s2.style_mode.uses_adversarial() && !s2.ablate.no_style;
    let mut disc = if adversarial {
        Some(cldm::init_style_disc::<f32>(net.c_latent, cfg.seed_for(Stream::Disc))?)
    } else {
        None
    };
    let mut rng = Rng::new(cfg.seed_for(Stream::CldmTrain));
    let t_total = schedule.t_total();
    let val = {
        let mut vr = rng.split(0xa1);
        ValSet {
            items: (0..zv.len())
                .map(|i| {
                    let j = vr.below(zy.len());
                    let t = 1 + vr.below(t_total);
                    (i, j, t, Tensor::randn(zv[i].shape(), &mut vr))
                })
                .collect(),
        }
    };
    let val_noise = |den: &Denoiser| -> Result<f64> {
        let mut total = 0.0;
        for (i, j, t, eps) in &val.items {
            let z0 = if s2.ablate.no_adain {
                zv[*i].clone()
            } else {
                fusion::adain(&zv[*i], &zy[*j], NORM_EPS)?
            };
            let zt = fusion::fdp_with_noise(&z0, eps, *t, &schedule)?;
            let pred = den.predict(&zt, &zy[*j], *t)?;
            total += pred
                .data()
                .iter()
                .zip(eps.data())
                .map(|(a, b)| f64::from(a - b).powi(2))
                .sum::<f64>()
                / eps.numel() as f64;
        }
        Ok(total / val.items.len() as f64)
    };

    let mut opt = adam(s2.lr);
    let mut dopt = adam(s2.lr);
    let mut plateau = ReduceOnPlateau::new(s2.plateau_factor, s2.plateau_patience, s2.min_lr);
    let mut lr = s2.lr;
    let mut order: Vec<usize> = (0..zx.len()).collect();
    let mut log = Vec::with_capacity(s2.epochs);

    for epoch in 1..=s2.epochs {
        let opts = Stage2Options {
            alpha: s2.alpha,
            style_mode: s2.style_mode,
            ablate: s2.ablate,
            adversarial_live: epoch > s2.adv_burn_in,
        };
        rng.shuffle(&mut order);
        let mut sums = [0.0f64; 6];
        for batch in order.chunks(s2.batch) {
            let share = 1.0 / batch.len() as f64;
            den.params.zero_grad();
            let gen_disc: Option<ParamStore<f32>> = disc.as_ref().map(|d| {
                let mut f = d.clone();
                f.freeze();
                f
            });
            let mut pairs = Vec::new();
            for &i in batch {
                let j = rng.below(zy.len());
                let t = 1 + rng.below(t_total);
                let eps = Tensor::randn(zx[i].shape(), &mut rng);
                let mut g = Graph::new();
                let terms = cldm::training_terms(&mut g, &den.params, &net, gen_disc.as_ref(), &schedule, &zx[i], &zy[j], t, &eps, &opts)?;
                let scaled = g.scale(terms.total, share);
                g.backward(scaled)?;
                den.params.accumulate(&g)?;
                let val_of = |v: Option<tensorlab::Var>| v.map(|v| g.value(v).item() as f64).unwrap_or(0.0);
                sums[0] += g.value(terms.total).item() as f64;
                sums[1] += g.value(terms.noise).item() as f64;
                sums[2] += val_of(terms.content);
                sums[3] += val_of(terms.gram) + val_of(terms.stats);
                sums[4] += val_of(terms.adversarial);
                pairs.push((i, j));
            }
            opt.step(&mut den.params)?;
            if let Some(d) = disc.as_mut() {
                d.zero_grad();
                for &(i, j) in &pairs {
                    let mut g = Graph::new();
                    let y = g.constant(zy[j].clone());
                    let x = g.constant(zx[i].clone());
                    let l = cldm::loss_discriminator(&mut g, d, y, x)?;
                    let sl = g.scale(l, share);
                    g.backward(sl)?;
                    d.accumulate(&g)?;
                    sums[5] += g.value(l).item() as f64;
                }
                dopt.step(d)?;
            }
        }
        if !frozen.params.same_values(&snapshot) {
            return Err(Error::invalid("stage 2", "autoencoder parameters changed during training"));
        }
        let n = zx.len() as f64;
        let vn = val_noise(&den)?;
        let row = Stage2Row {
            epoch,
            lr,
            loss: sums[0] / n,
            noise: sums[1] / n,
            content: sums[2] / n,
            style: sums[3] / n,
            adversarial: sums[4] / n,
            disc: sums[5] / n,
            val_noise: vn,
        };
        if !(row.loss.is_finite() && vn.is_finite()) {
            return Err(Error::invalid("stage 2", format!("loss diverged at epoch {epoch}")));
        }
        if cfg.verbose {
            eprintln!(
                "stage2 epoch {epoch:4} lr {lr:.2e} loss {:.5} noise {:.5} val_noise {vn:.5}",
                row.loss, row.noise
            );
        }
        log.push(row);
        lr = plateau.observe(vn, lr);
        opt.set_lr(lr);
        dopt.set_lr(lr);
    }
    let (a, b) = rng.state();
    Ok(Stage2Outcome {
        denoiser: den,
        log,
        rng_state: [a, b],
    })
}
