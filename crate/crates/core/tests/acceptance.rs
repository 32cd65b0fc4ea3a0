//! Acceptance suite. Each `criterion_*` test prints one PASS/FAIL line.
//! Criteria 5 to 7 share one desk-scale experiment, trained once.

mod common;

use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use common::{channel_stats, fd_store, max_abs, probe, report, store_of, with, Fd};
use hcld::autoenc::{self, AeConfig, Stage1Weights};
use hcld::cldm::{self, Ablations, CldmConfig, Stage2Options, StyleMode};
use hcld::config::{RunConfig, Variant};
use hcld::fusion::{self, NoiseSchedule, NORM_EPS};
use hcld::metrics::{self, build_pairing, histogram, Labeled, Tag, WD_BINS};
use hcld::nn::{self, BlockOpts};
use hcld::pipeline::{run_experiment, Experiment};
use hcld::sampler::{ddim_forward, ddim_reverse, SamplerConfig, Strategy};
use hcld::Result;
use tensorlab::{Graph, ParamStore, Rng, Tensor};

/// Serializes the tests in this binary so timings are not shared.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, ok: bool, detail: &str) {
    report(&format!("criterion {n}: {} | {detail}", if ok { "PASS" } else { "FAIL" }));
}

// ---------------------------------------------------------------- 1

struct Tally {
    cases: usize,
    worst: f64,
    failures: Vec<String>,
}

impl Tally {
    fn add(&mut self, name: String, r: Result<Fd>) {
        self.cases += 1;
        match r {
            Ok(fd) if fd.checked > 0 && fd.max_rel <= 1e-4 => self.worst = self.worst.max(fd.max_rel),
            Ok(fd) => {
                self.worst = self.worst.max(fd.max_rel);
                self.failures.push(format!("{name}: {:.2e} at {}", fd.max_rel, fd.worst));
            }
            Err(e) => self.failures.push(format!("{name}: {e}")),
        }
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

fn pick(rng: &mut Rng, xs: &[usize]) -> usize {
    xs[rng.below(xs.len())]
}

fn gradient_cases(t: &mut Tally) {
    let mut rng = Rng::new(2024);
    let sample = 12;

    for i in 0..10 {
        let (ci, co) = (pick(&mut rng, &[1, 2, 3]), pick(&mut rng, &[1, 2, 3]));
        let k = pick(&mut rng, &[1, 3]);
        let stride = pick(&mut rng, &[1, 2]);
        let ext = [pick(&mut rng, &[3, 4, 5]), pick(&mut rng, &[3, 4, 5]), pick(&mut rng, &[2, 3, 4])];
        let s = store_of(&[
            ("x", randn(&[ci, ext[0], ext[1], ext[2]], &mut rng)),
            ("k", randn(&[co, ci, k, k, k], &mut rng)),
            ("b", randn(&[co], &mut rng)),
        ]);
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let (x, w, b) = (g.param(s, "x")?, g.param(s, "k")?, g.param(s, "b")?);
            let y = g.conv3d(x, w, Some(b), stride, k / 2)?;
            probe(g, y, i)
        });
        t.add(format!("conv3d {ci}->{co} k{k} s{stride} {ext:?}"), r);
    }

    for i in 0..6 {
        let groups = pick(&mut rng, &[1, 2, 3]);
        let c = groups * pick(&mut rng, &[1, 2]);
        let s = store_of(&[
            ("x", randn(&[c, 3, 2, 3], &mut rng)),
            ("g", randn(&[c], &mut rng)),
            ("b", randn(&[c], &mut rng)),
        ]);
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let (x, ga, be) = (g.param(s, "x")?, g.param(s, "g")?, g.param(s, "b")?);
            let y = g.group_norm(x, ga, be, groups, 1e-5)?;
            probe(g, y, 10 + i)
        });
        t.add(format!("group_norm c{c} g{groups}"), r);
    }

    for i in 0..5 {
        let c = pick(&mut rng, &[2, 4]);
        let mut s = ParamStore::<f64>::new();
        nn::init_attn(&mut s, "a", c, &mut rng).unwrap();
        let s = with(&s, &[("x", randn(&[c, 2, pick(&mut rng, &[1, 2, 3]), 2], &mut rng))]);
        let opts = BlockOpts { groups: 2, norm: i % 2 == 0 };
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let x = g.param(s, "x")?;
            let y = nn::attn(g, s, "a", x, opts)?;
            probe(g, y, 20 + i as u64)
        });
        t.add(format!("attention c{c}"), r);
    }

    for i in 0..6 {
        let ci = pick(&mut rng, &[2, 4]);
        let co = pick(&mut rng, &[2, 4]);
        let temb = if i % 2 == 0 { Some(6) } else { None };
        let mut s = ParamStore::<f64>::new();
        nn::init_res(&mut s, "r", ci, co, temb, &mut rng).unwrap();
        let mut extra = vec![("x", randn(&[ci, 3, 2, 2], &mut rng))];
        if let Some(d) = temb {
            extra.push(("e", randn(&[1, d], &mut rng)));
        }
        let s = with(&s, &extra);
        let opts = BlockOpts { groups: 2, norm: i != 3 };
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let x = g.param(s, "x")?;
            let e = match temb {
                Some(_) => Some(g.param(s, "e")?),
                None => None,
            };
            let y = nn::res(g, s, "r", x, e, opts)?;
            probe(g, y, 30 + i as u64)
        });
        t.add(format!("residual {ci}->{co} temb={}", temb.is_some()), r);
    }

    let lat = |rng: &mut Rng| randn(&[3, 2, 3, 2], rng);
    for i in 0..3 {
        let s = store_of(&[("a", lat(&mut rng)), ("b", lat(&mut rng))]);
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            cldm::loss_noise(g, a, b)
        });
        t.add(format!("L_N #{i}"), r);
    }
    for i in 0..5 {
        let use_in = i < 3;
        let s = store_of(&[("a", lat(&mut rng)), ("b", lat(&mut rng))]);
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            cldm::loss_content(g, a, b, use_in)
        });
        t.add(format!("L_C in={use_in} #{i}"), r);
    }
    for i in 0..3 {
        let s = store_of(&[("a", lat(&mut rng)), ("b", lat(&mut rng))]);
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            cldm::loss_style_gram(g, a, b)
        });
        t.add(format!("L_S gram #{i}"), r);
    }
    for i in 0..3 {
        let s = store_of(&[("a", lat(&mut rng)), ("b", lat(&mut rng))]);
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            cldm::loss_style_stats(g, a, b)
        });
        t.add(format!("L_S stats #{i}"), r);
    }
    for i in 0..2 {
        let d = cldm::init_style_disc::<f64>(3, 40 + i).unwrap();
        let s = with(&d, &[("z", lat(&mut rng))]);
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let z = g.param(s, "z")?;
            cldm::loss_style_adversarial(g, s, z)
        });
        t.add(format!("L_S adversarial #{i}"), r);
        let s = with(&d, &[("y", lat(&mut rng)), ("x", lat(&mut rng))]);
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let (y, x) = (g.param(s, "y")?, g.param(s, "x")?);
            cldm::loss_discriminator(g, s, y, x)
        });
        t.add(format!("L_S_D #{i}"), r);
    }
    for i in 0..2 {
        let vol = |rng: &mut Rng| randn(&[1, 4, 4, 4], rng);
        let s = store_of(&[("a", vol(&mut rng)), ("b", vol(&mut rng))]);
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            Ok(g.mae(a, b)?)
        });
        t.add(format!("L_R #{i}"), r);
        let s = store_of(&[("mu", lat(&mut rng)), ("lv", lat(&mut rng).scale(0.5))]);
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let (m, l) = (g.param(s, "mu")?, g.param(s, "lv")?);
            autoenc::kl(g, m, l)
        });
        t.add(format!("L_KL #{i}"), r);
        let p = autoenc::perceptual_params::<f64>(50 + i).unwrap();
        let mut free = ParamStore::new();
        free.insert("a", vol(&mut rng)).unwrap();
        free.insert("b", vol(&mut rng)).unwrap();
        let r = fd_store(&free, sample, &mut rng, |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            autoenc::perceptual(g, &p, a, b)
        });
        t.add(format!("L_P #{i}"), r);
        let pd = autoenc::init_patch_disc::<f64>(60 + i).unwrap();
        let s = with(&pd, &[("v", vol(&mut rng))]);
        let real = i == 0;
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let v = g.param(s, "v")?;
            let l = autoenc::patch_disc(g, s, v)?;
            Ok(autoenc::bce_logits(g, l, real))
        });
        t.add(format!("L_A real={real}"), r);
    }
    let schedule = NoiseSchedule::linear(1000, 0.0015, 0.0195).unwrap();
    for (i, step) in [3usize, 640].into_iter().enumerate() {
        let s = store_of(&[("zt", lat(&mut rng)), ("e", lat(&mut rng)), ("y", lat(&mut rng))]);
        let r = fd_store(&s, sample, &mut rng, |g, s| {
            let (zt, e, y) = (g.param(s, "zt")?, g.param(s, "e")?, g.param(s, "y")?);
            let z0 = fusion::estimate_z0_var(g, zt, e, step, &schedule)?;
            let n = cldm::loss_noise(g, e, y)?;
            let c = cldm::loss_content(g, y, z0, true)?;
            let st = cldm::loss_style_gram(g, y, z0)?;
            cldm::loss_total(g, n, Some(c), &[st], 0.1)
        });
        t.add(format!("z0 estimate + L_total t={step} #{i}"), r);
    }

    let ae_cfg = AeConfig {
        widths: vec![4, 4, 4],
        c_latent: 2,
        groups: 2,
    };
    let ae = autoenc::init_params::<f64>(&ae_cfg, 70).unwrap();
    let perc = autoenc::perceptual_params::<f64>(71).unwrap();
    let crop = randn(&[1, 8, 8, 8], &mut rng).map(|v| 0.5 + 0.2 * v);
    let eps = randn(&[2, 1, 1, 1], &mut rng);
    let w = Stage1Weights::default();
    let r = fd_store(&ae, 2, &mut rng, |g, s| {
        let x = g.constant(crop.clone());
        Ok(autoenc::stage1_loss(g, s, &ae_cfg, &perc, None, x, Some(eps.clone()), &w)?.total)
    });
    t.add("stage-1 loss on 8^3 crop".into(), r);

    let net = CldmConfig {
        widths: vec![4, 4],
        c_latent: 2,
        groups: 2,
        temb_dim: 8,
        attn_blocks: 1,
        group_norm: true,
    };
    for i in 0..2 {
        let p = cldm::init_params::<f64>(&net, 80 + i).unwrap();
        let zt = randn(&[2, 2, 2, 2], &mut rng);
        let zy = randn(&[2, 2, 2, 2], &mut rng);
        let step = 1 + rng.below(1000);
        let r = fd_store(&p, 1, &mut rng, |g, s| {
            let a = g.constant(zt.clone());
            let b = g.constant(zy.clone());
            let y = cldm::predict_noise(g, s, &net, a, b, step)?;
            Ok(g.mean(y))
        });
        t.add(format!("mean(eps_theta) t={step}"), r);
    }
    let p = cldm::init_params::<f64>(&net, 90).unwrap();
    let d = cldm::init_style_disc::<f64>(2, 91).unwrap();
    let mut fd = d.clone();
    fd.freeze();
    let (zx, zy, e) = (randn(&[2, 2, 2, 2], &mut rng), randn(&[2, 2, 2, 2], &mut rng), randn(&[2, 2, 2, 2], &mut rng));
    let opts = Stage2Options {
        alpha: 0.1,
        style_mode: StyleMode::GramAdversarial,
        ablate: Ablations::default(),
        adversarial_live: true,
    };
    let r = fd_store(&p, 1, &mut rng, |g, s| {
        Ok(cldm::training_terms(g, s, &net, Some(&fd), &schedule, &zx, &zy, 25, &e, &opts)?.total)
    });
    t.add("stage-2 total loss".into(), r);
}

#[test]
fn criterion_1_gradients() {
    let _g = serial();
    let start = Instant::now();
    let mut t = Tally {
        cases: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    gradient_cases(&mut t);
    let secs = start.elapsed().as_secs_f64();
    let ok = t.failures.is_empty() && t.cases >= 50 && secs < 120.0;
    verdict(
        1,
        ok,
        &format!("{} finite-difference cases, worst rel err {:.2e}, {secs:.1}s", t.cases, t.worst),
    );
    assert!(ok, "failures: {:#?}; cases {}; {secs:.1}s", t.failures, t.cases);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_diffusion_algebra() {
    let _g = serial();
    let schedule = NoiseSchedule::linear(1000, 0.0015, 0.0195).unwrap();
    let mut rng = Rng::new(7);
    let mut worst_inv = 0.0f64;
    for _ in 0..100 {
        let z0: Tensor<f64> = Tensor::randn(&[4, 4, 4, 2], &mut rng).scale(0.5 + 2.0 * rng.uniform());
        let t = 1 + rng.below(1000);
        let eps = Tensor::randn(&[4, 4, 4, 2], &mut rng);
        let zt = fusion::fdp_with_noise(&z0, &eps, t, &schedule).unwrap();
        let back = fusion::estimate_z0(&zt, &eps, t, &schedule).unwrap();
        let err: Vec<f64> = back.data().iter().zip(z0.data()).map(|(a, b)| a - b).collect();
        worst_inv = worst_inv.max(max_abs(&err) / max_abs(z0.data()));
    }

    let cfg = SamplerConfig::default();
    let mut worst_rt = 0.0f64;
    for _ in 0..20 {
        let z0 = Tensor::<f32>::randn(&[4, 4, 4, 2], &mut rng);
        let zy = Tensor::<f32>::randn(&[4, 4, 4, 2], &mut rng);
        let noise = Tensor::<f32>::randn(&[4, 4, 4, 2], &mut rng);
        let stub = |_: &Tensor<f32>, _: &Tensor<f32>, _: usize| -> Result<Tensor<f32>> { Ok(noise.clone()) };
        let up = ddim_forward(&z0, &zy, &stub, &schedule, &cfg).unwrap();
        let down = ddim_reverse(&up, &zy, &stub, &schedule, &cfg).unwrap();
        let err: Vec<f64> = down.data().iter().zip(z0.data()).map(|(a, b)| f64::from(a - b)).collect();
        let scale = z0.data().iter().fold(0.0f64, |m, v| m.max(f64::from(v.abs())));
        worst_rt = worst_rt.max(max_abs(&err) / scale);
    }
    let ok = worst_inv <= 1e-5 && worst_rt <= 1e-4;
    verdict(
        2,
        ok,
        &format!("z0 inversion worst rel {worst_inv:.2e} (100 cases), DDIM round trip worst rel {worst_rt:.2e} (20 cases)"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_normalization_invariants() {
    let _g = serial();
    let mut rng = Rng::new(11);
    let (mut in_mu, mut in_sd, mut ad_mu, mut ad_sd, mut ident, mut content) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let shift = |rng: &mut Rng| {
            let s = 0.1 + 3.0 * rng.uniform();
            let o = 4.0 * rng.uniform() - 2.0;
            Tensor::<f64>::randn(&[4, 4, 4, 2], rng).map(|v| v * s + o)
        };
        let zx = shift(&mut rng);
        let zy = shift(&mut rng);
        let n = fusion::instance_norm(&zx, NORM_EPS).unwrap();
        for (m, s) in channel_stats(n.data(), 4) {
            in_mu = in_mu.max(m.abs());
            in_sd = in_sd.max((s - 1.0).abs());
        }
        let a = fusion::adain(&zx, &zy, NORM_EPS).unwrap();
        for ((m, s), (tm, ts)) in channel_stats(a.data(), 4).into_iter().zip(channel_stats(zy.data(), 4)) {
            ad_mu = ad_mu.max((m - tm).abs());
            ad_sd = ad_sd.max((s - ts).abs() / ts);
        }
        let same = fusion::adain(&zx, &zx, NORM_EPS).unwrap();
        ident = ident.max(same.max_abs_diff(&zx));

        let mut g = Graph::<f64>::new();
        let zc = g.constant(fusion::instance_norm(&zx, NORM_EPS).unwrap());
        let restyled = g.constant(a.clone());
        let l = cldm::loss_content(&mut g, zc, restyled, true).unwrap();
        content = content.max(g.value(l).item().abs());
    }
    let ok = in_mu <= 1e-5 && in_sd <= 1e-3 && ad_mu <= 1e-4 && ad_sd <= 1e-3 && ident <= 1e-4 && content <= 1e-4;
    verdict(
        3,
        ok,
        &format!(
            "IN |mu| {in_mu:.1e} |sd-1| {in_sd:.1e}; AdaIN |dmu| {ad_mu:.1e} rel dsd {ad_sd:.1e}; adain(z,z) {ident:.1e}; L_C after restyle {content:.1e}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 4

fn cdf_distance_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let hist = |v: &Tensor<f32>| {
        let mut h = vec![0.0f64; WD_BINS];
        let mut n = 0.0;
        for &x in v.data() {
            let x = f64::from(x);
            if x > 0.01 {
                let mut k = (x * WD_BINS as f64) as usize;
                if k >= WD_BINS {
                    k = WD_BINS - 1;
                }
                h[k] += 1.0;
                n += 1.0;
            }
        }
        h.iter().map(|c| c / n).collect::<Vec<_>>()
    };
    let (p, q) = (hist(a), hist(b));
    let (mut fp, mut fq, mut total) = (0.0, 0.0, 0.0);
    for k in 0..WD_BINS {
        fp += p[k];
        fq += q[k];
        total += (fp - fq).abs() / WD_BINS as f64;
    }
    total
}

#[test]
fn criterion_4_metric_oracles() {
    let _g = serial();
    let mut rng = Rng::new(5);
    let vol = |rng: &mut Rng| {
        let s = 0.5 + rng.uniform();
        Tensor::<f32>::from_fn(&[12, 10, 8], |_| (rng.uniform() * s).min(1.0) as f32)
    };
    let (mut wd_err, mut ssim_err, mut pcc_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let (a, b) = (vol(&mut rng), vol(&mut rng));
        wd_err = wd_err.max((metrics::volume_wd(&a, &b).unwrap() - cdf_distance_oracle(&a, &b)).abs());
        ssim_err = ssim_err.max((metrics::ssim3d(&a, &a).unwrap() - 1.0).abs());
        let (x, y): (Vec<f64>, Vec<f64>) = a.data().iter().zip(b.data()).map(|(&u, &v)| (f64::from(u), f64::from(v))).unzip();
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for i in 0..x.len() {
            sxy += (x[i] - mx) * (y[i] - my);
            sxx += (x[i] - mx).powi(2);
            syy += (y[i] - my).powi(2);
        }
        pcc_err = pcc_err.max((metrics::pcc(&a, &b).unwrap() - sxy / (sxx * syy).sqrt()).abs());
    }
    let h = histogram(vol(&mut rng).data(), WD_BINS).unwrap();
    let hist_sum = (h.iter().sum::<f64>() - 1.0).abs();
    let labels: Vec<Labeled> = (0..9)
        .flat_map(|s| (0..11).map(move |k| Labeled { subject_id: s, site_id: k }))
        .collect();
    let plan = build_pairing(&labels, true).unwrap();
    let (inter, intra) = (plan.count(Tag::Inter), plan.count(Tag::Intra));
    let ok = wd_err <= 1e-6 && ssim_err <= 1e-6 && pcc_err <= 1e-9 && inter == 495 && intra == 11 * 36 && hist_sum < 1e-9;
    verdict(
        4,
        ok,
        &format!("WD vs CDF oracle {wd_err:.1e}; |SSIM(v,v)-1| {ssim_err:.1e}; PCC vs loop {pcc_err:.1e}; 9x11 pairs inter {inter} intra {intra}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 5-7

fn desk_config(out: PathBuf) -> RunConfig {
    let mut cfg = RunConfig {
        out_dir: out,
        ..RunConfig::default()
    };
    cfg.variants = vec![
        Variant {
            name: "hcld-s".into(),
            style_mode: Some(StyleMode::Stats),
            ablate: None,
            strategy: None,
        },
        Variant {
            name: "hcld-a".into(),
            style_mode: Some(StyleMode::Adversarial),
            ablate: None,
            strategy: None,
        },
        Variant {
            name: "hcld-m".into(),
            style_mode: None,
            ablate: None,
            strategy: Some(Strategy::Ddpm),
        },
    ];
    cfg
}

fn desk_run() -> &'static std::result::Result<(Experiment, f64), String> {
    static RUN: OnceLock<std::result::Result<(Experiment, f64), String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
        let _ = std::fs::remove_dir_all(&dir);
        let start = Instant::now();
        let exp = run_experiment(&desk_config(dir)).map_err(|e| e.to_string())?;
        Ok((exp, start.elapsed().as_secs_f64()))
    })
}

fn stat(exp: &Experiment, method: &str, metric: &str) -> (f64, f64) {
    let s = exp
        .report
        .find(method, "inter:target", metric)
        .unwrap_or_else(|| panic!("no {metric} summary for {method}"));
    (s.mean, s.median)
}

#[test]
fn criterion_5_desk_harmonization() {
    let _g = serial();
    let (exp, secs) = match desk_run() {
        Ok(r) => r,
        Err(e) => {
            verdict(5, false, &format!("desk run failed: {e}"));
            panic!("{e}");
        }
    };
    let (_, wd_raw) = stat(exp, "none", "wd");
    let (_, wd_hcld) = stat(exp, "hcld", "wd");
    let (_, wd_hist) = stat(exp, "histmatch", "wd");
    let (ssim_raw, _) = stat(exp, "none", "ssim");
    let (ssim_hcld, _) = stat(exp, "hcld", "ssim");
    let a = wd_hcld <= 0.5 * wd_raw;
    let b = ssim_hcld > ssim_raw;
    let c = wd_raw - wd_hcld >= wd_raw - wd_hist;
    let in_budget = *secs <= 7200.0;
    let ok = a && b && c && in_budget;
    verdict(
        5,
        ok,
        &format!(
            "median WD raw {wd_raw:.4} hcld {wd_hcld:.4} histmatch {wd_hist:.4} [a {a}, c {c}]; mean SSIM raw {ssim_raw:.4} hcld {ssim_hcld:.4} [b {b}]; target site {}; {secs:.0}s",
            exp.corpus.target
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_6_site_probe() {
    let _g = serial();
    let (exp, _) = desk_run().as_ref().expect("desk run");
    let p = exp.probe("hcld").expect("hcld probe");
    let drop = p.margin_drop();
    let ok = p.bacc_pre > p.chance && drop >= 0.3;
    verdict(
        6,
        ok,
        &format!(
            "balanced accuracy {:.3} -> {:.3} (chance {:.3}), margin drop {:.0}%",
            p.bacc_pre,
            p.bacc_post,
            p.chance,
            100.0 * drop
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_7_ablation_ordering() {
    let _g = serial();
    let (exp, _) = desk_run().as_ref().expect("desk run");
    let (_, wd_full) = stat(exp, "hcld", "wd");
    let (_, wd_s) = stat(exp, "hcld-s", "wd");
    let (_, wd_a) = stat(exp, "hcld-a", "wd");
    let (ssim_ddim, _) = stat(exp, "hcld", "ssim");
    let (ssim_ddpm, _) = stat(exp, "hcld-m", "ssim");
    let ok = wd_s > wd_full && wd_a > wd_full && ssim_ddpm < ssim_ddim;
    verdict(
        7,
        ok,
        &format!(
            "median WD full {wd_full:.4} stats {wd_s:.4} adversarial {wd_a:.4}; mean SSIM DDIM {ssim_ddim:.4} DDPM {ssim_ddpm:.4}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 8

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    r.records().map(|row| row.unwrap().iter().map(str::to_string).collect()).collect()
}

fn csv_gap(a: &Path, b: &Path) -> std::result::Result<f64, String> {
    let (ra, rb) = (read_csv(a), read_csv(b));
    if ra.len() != rb.len() {
        return Err(format!("{} rows vs {}", ra.len(), rb.len()));
    }
    let mut worst = 0.0f64;
    for (x, y) in ra.iter().zip(&rb) {
        if x.len() != y.len() {
            return Err("ragged rows".into());
        }
        for (u, v) in x.iter().zip(y) {
            match (u.parse::<f64>(), v.parse::<f64>()) {
                (Ok(p), Ok(q)) if p.is_nan() && q.is_nan() => {}
                (Ok(p), Ok(q)) => worst = worst.max((p - q).abs()),
                _ if u == v => {}
                _ => return Err(format!("`{u}` vs `{v}`")),
            }
        }
    }
    Ok(worst)
}

#[test]
fn criterion_8_determinism() {
    let _g = serial();
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-smoke");
    let _ = std::fs::remove_dir_all(&root);
    let start = Instant::now();
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let cfg = RunConfig {
            out_dir: root.join(run),
            ..RunConfig::smoke()
        };
        run_experiment(&cfg).unwrap();
        dirs.push(cfg.report_dir());
    }
    let mut worst = 0.0f64;
    let mut problems = Vec::new();
    for f in ["pairs.csv", "summary.csv", "probe.csv"] {
        match csv_gap(&dirs[0].join(f), &dirs[1].join(f)) {
            Ok(w) => worst = worst.max(w),
            Err(e) => problems.push(format!("{f}: {e}")),
        }
    }
    let ok = problems.is_empty() && worst <= 1e-5;
    verdict(
        8,
        ok,
        &format!(
            "two smoke runs, report CSVs max cell difference {worst:.1e}, {:.0}s total {}",
            start.elapsed().as_secs_f64(),
            problems.join("; ")
        ),
    );
    assert!(ok);
}
