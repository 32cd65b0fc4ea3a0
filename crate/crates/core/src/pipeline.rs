//! End-to-end experiment: corpus, both training stages, harmonization by every
//! method, pairwise metrics, the site probe and the report bundle.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tensorlab::{Rng, Tensor};

use crate::autoenc::Autoencoder;
use crate::baselines::{histogram_match, minmax, zscore, HistogramLandmarks, Method};
use crate::checkpoint::{Checkpoint, Sidecar};
use crate::cldm::Denoiser;
use crate::config::{RunConfig, Stream, Variant};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, build_pairing, compare, pair_record, psnr, site_probe, write_rows, Labeled, MetricsReport, ProbeResult, Tag,
};
use crate::phantom::{build_corpus, load_corpus, read_vol, volume_file_name, write_vol, CorpusManifest, Split, Volume};
use crate::plot;
use crate::sampler::harmonize;
use crate::train::{train_stage1, train_stage2, Stage1Row, Stage2Row};

pub const AE_MODULE: &str = "autoenc";
pub const CLDM_MODULE: &str = "cldm";

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub volumes: Vec<Volume>,
    pub target: u32,
}

impl Corpus {
    fn select(&self, f: impl Fn(&Volume, Split) -> bool) -> Vec<&Tensor<f32>> {
        self.volumes
            .iter()
            .zip(&self.manifest.records)
            .filter(|(v, r)| f(v, r.split))
            .map(|(v, _)| &v.voxels)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Tensor<f32>> {
        self.select(|_, s| s == split)
    }

    /// Training volumes of the target site.
    pub fn target_refs(&self) -> Vec<&Tensor<f32>> {
        self.select(|v, s| s == Split::Train && v.site_id == self.target)
    }

    pub fn labels(&self) -> Vec<Labeled> {
        self.volumes
            .iter()
            .map(|v| Labeled {
                subject_id: v.subject_id,
                site_id: v.site_id,
            })
            .collect()
    }
}

/// Site whose distinct-subject volumes agree best (highest mean pairwise
/// PSNR). Ties go to the lower site id.
pub fn select_target_site(volumes: &[&Volume]) -> Result<u32> {
    let mut by_site: BTreeMap<u32, Vec<&Volume>> = BTreeMap::new();
    for v in volumes {
        by_site.entry(v.site_id).or_default().push(v);
    }
    let mut best: Option<(u32, f64)> = None;
    for (site, vs) in &by_site {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, a) in vs.iter().enumerate() {
            for b in &vs[i + 1..] {
                if a.subject_id != b.subject_id {
                    sum += psnr(&a.voxels, &b.voxels)?;
                    n += 1;
                }
            }
        }
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        if best.map_or(true, |(_, m)| mean > m) {
            best = Some((*site, mean));
        }
    }
    best.map(|(s, _)| s)
        .ok_or_else(|| Error::invalid("target site", "no site has two distinct subjects"))
}

/// Renders the corpus into `corpus_dir`, fixing the target site.
pub fn generate(cfg: &RunConfig) -> Result<Corpus> {
    cfg.validate()?;
    let dir = cfg.corpus_dir();
    let (mut manifest, volumes) = build_corpus(&cfg.corpus.spec(cfg.target_site), Some(&dir))?;
    let target = match cfg.target_site {
        Some(t) => t,
        None => {
            let train: Vec<&Volume> = volumes
                .iter()
                .zip(&manifest.records)
                .filter(|(_, r)| r.split == Split::Train)
                .map(|(v, _)| v)
                .collect();
            select_target_site(&train)?
        }
    };
    manifest.target_site = Some(target);
    manifest.save(&dir.join("manifest.json"))?;
    Ok(Corpus {
        manifest,
        volumes,
        target,
    })
}

pub fn load(cfg: &RunConfig) -> Result<Corpus> {
    let dir = cfg.corpus_dir();
    if !dir.join("manifest.json").exists() {
        return Err(Error::invalid(
            "corpus",
            format!("no corpus at {}; run `gen` first", dir.display()),
        ));
    }
    let (manifest, volumes) = load_corpus(&dir)?;
    let target = cfg
        .target_site
        .or(manifest.target_site)
        .ok_or_else(|| Error::invalid("corpus", "manifest has no target site"))?;
    if target as usize >= manifest.n_sites() {
        return Err(Error::invalid("corpus", format!("target site {target} does not exist")));
    }
    Ok(Corpus {
        manifest,
        volumes,
        target,
    })
}

fn sidecar(cfg: &RunConfig, module: &str, epoch: usize, rng_state: [u64; 2]) -> Sidecar {
    Sidecar {
        module: module.to_string(),
        epoch,
        config_hash: cfg.hash(),
        rng_state,
    }
}

/// Trains the autoencoder, writing `checkpoints/ae.*` and `stage1_loss.csv`.
pub fn run_stage1(cfg: &RunConfig, corpus: &Corpus) -> Result<(Autoencoder, Vec<Stage1Row>)> {
    let out = train_stage1(cfg, &corpus.split(Split::Train), &corpus.split(Split::Val))?;
    let dir = cfg.checkpoint_dir();
    mkdir(&dir)?;
    Checkpoint {
        params: out.ae.params.clone(),
        sidecar: sidecar(cfg, AE_MODULE, cfg.stage1.epochs, out.rng_state),
    }
    .save(&dir.join("ae"))?;
    write_rows(&dir.join("stage1_loss.csv"), &out.log)?;
    Ok((out.ae, out.log))
}

pub fn load_autoencoder(cfg: &RunConfig) -> Result<Autoencoder> {
    let c = Checkpoint::load_module(&cfg.checkpoint_dir().join("ae"), AE_MODULE)?;
    let fresh = Autoencoder::new(cfg.stage1.ae.clone(), 0)?;
    check_layout(&fresh.params, &c.params)?;
    Ok(Autoencoder {
        config: cfg.stage1.ae.clone(),
        params: c.params,
    })
}

fn check_layout(expected: &tensorlab::ParamStore<f32>, got: &tensorlab::ParamStore<f32>) -> Result<()> {
    let same = expected.len() == got.len()
        && expected
            .iter()
            .zip(got.iter())
            .all(|((a, pa), (b, pb))| a == b && pa.value().shape() == pb.value().shape());
    if same {
        Ok(())
    } else {
        Err(Error::invalid("checkpoint", "parameter layout does not match the configured network"))
    }
}

/// Checkpoint stem of the main model (`cldm`) or a variant (`cldm-<name>`).
pub fn cldm_stem(cfg: &RunConfig, name: Option<&str>) -> std::path::PathBuf {
    let file = match name {
        Some(n) => format!("cldm-{n}"),
        None => "cldm".to_string(),
    };
    cfg.checkpoint_dir().join(file)
}

/// Trains the denoiser on every training volume as a source and the target
/// site's training volumes as conditions.
pub fn run_stage2(cfg: &RunConfig, corpus: &Corpus, ae: &Autoencoder, name: Option<&str>) -> Result<(Denoiser, Vec<Stage2Row>)> {
    let out = train_stage2(
        cfg,
        ae,
        &corpus.split(Split::Train),
        &corpus.target_refs(),
        &corpus.split(Split::Val),
    )?;
    let stem = cldm_stem(cfg, name);
    mkdir(&cfg.checkpoint_dir())?;
    Checkpoint {
        params: out.denoiser.params.clone(),
        sidecar: sidecar(cfg, CLDM_MODULE, cfg.stage2.epochs, out.rng_state),
    }
    .save(&stem)?;
    write_rows(&stem.with_extension("loss.csv"), &out.log)?;
    Ok((out.denoiser, out.log))
}

pub fn load_denoiser(cfg: &RunConfig, name: Option<&str>) -> Result<Denoiser> {
    let c = Checkpoint::load_module(&cldm_stem(cfg, name), CLDM_MODULE)?;
    let net = cfg.stage2.network();
    let fresh = Denoiser::new(net.clone(), 0)?;
    check_layout(&fresh.params, &c.params)?;
    Ok(Denoiser {
        config: net,
        params: c.params,
    })
}

/// Config with a variant's overrides applied.
pub fn variant_config(cfg: &RunConfig, v: &Variant) -> RunConfig {
    let mut c = cfg.clone();
    if let Some(m) = v.style_mode {
        c.stage2.style_mode = m;
    }
    if let Some(a) = v.ablate {
        c.stage2.ablate = a;
    }
    if let Some(s) = v.strategy {
        c.sampler.strategy = s;
    }
    c
}

/// Whether a variant needs its own denoiser.
pub fn variant_trains(cfg: &RunConfig, v: &Variant) -> bool {
    let c = variant_config(cfg, v);
    c.stage2 != cfg.stage2
}

/// HCLD output for every corpus volume. Each volume draws its reference and
/// sampler noise from its own stream, so variants see the same references.
pub fn harmonize_corpus(cfg: &RunConfig, corpus: &Corpus, ae: &Autoencoder, model: &Denoiser) -> Result<Vec<Tensor<f32>>> {
    let schedule = cfg.stage2.schedule()?;
    let refs = corpus.target_refs();
    let base = Rng::new(cfg.seed_for(Stream::Harmonize));
    corpus
        .volumes
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut rng = base.split(i as u64);
            harmonize(
                &v.voxels,
                &refs,
                ae,
                model,
                &schedule,
                &cfg.sampler,
                !cfg.stage2.ablate.no_adain,
                &mut rng,
            )
        })
        .collect()
}

/// Output of a non-learning method for every corpus volume.
pub fn baseline_corpus(method: Method, corpus: &Corpus) -> Result<Vec<Tensor<f32>>> {
    let vols = corpus.volumes.iter().map(|v| &v.voxels);
    match method {
        Method::None => Ok(vols.cloned().collect()),
        Method::Minmax => Ok(vols.map(minmax).collect()),
        Method::Zscore => vols.map(|v| zscore(v).map(|z| z.stored)).collect(),
        Method::Histmatch => {
            let lm = HistogramLandmarks::learn(&corpus.target_refs())?;
            vols.map(|v| histogram_match(v, &lm)).collect()
        }
        Method::Hcld => Err(Error::invalid("baseline", "hcld needs trained models")),
    }
}

pub fn save_outputs(cfg: &RunConfig, corpus: &Corpus, method: &str, outputs: &[Tensor<f32>]) -> Result<()> {
    let dir = cfg.harmonized_dir().join(method);
    mkdir(&dir)?;
    for (v, out) in corpus.volumes.iter().zip(outputs) {
        write_vol(&dir.join(volume_file_name(v.subject_id, v.site_id)), out)?;
    }
    Ok(())
}

pub fn load_outputs(cfg: &RunConfig, corpus: &Corpus, method: &str) -> Result<Vec<Tensor<f32>>> {
    let dir = cfg.harmonized_dir().join(method);
    corpus
        .volumes
        .iter()
        .map(|v| read_vol(&dir.join(volume_file_name(v.subject_id, v.site_id))))
        .collect()
}

/// Subject-matched pairwise metrics for each method's outputs.
pub fn evaluate(corpus: &Corpus, outputs: &[(String, Vec<Tensor<f32>>)]) -> Result<MetricsReport> {
    let labels = corpus.labels();
    let plan = build_pairing(&labels, true)?;
    let mut records = Vec::new();
    for (name, vols) in outputs {
        if vols.len() != labels.len() {
            return Err(Error::invalid("evaluate", format!("method {name} has {} outputs", vols.len())));
        }
        for p in &plan.pairs {
            let m = compare(&vols[p.a], &vols[p.b])?;
            records.push(pair_record(name, p.tag, labels[p.a], labels[p.b], m));
        }
    }
    Ok(aggregate(records, Some(corpus.target)))
}

pub fn probe(cfg: &RunConfig, corpus: &Corpus, harmonized: &[Tensor<f32>]) -> Result<ProbeResult> {
    let raw: Vec<(&Tensor<f32>, u32)> = corpus.volumes.iter().map(|v| (&v.voxels, v.site_id)).collect();
    let post: Vec<(&Tensor<f32>, u32)> = harmonized.iter().zip(&corpus.volumes).map(|(h, v)| (h, v.site_id)).collect();
    site_probe(&raw, &post, cfg.seed_for(Stream::Probe))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub method: String,
    pub bacc_pre: f64,
    pub bacc_post: f64,
    pub chance: f64,
    pub margin_drop: f64,
}

/// Writes pairs, summary and probe CSVs plus the SVG figures into
/// `report_dir`, together with a copy of the config.
pub fn write_report(
    cfg: &RunConfig,
    report: &MetricsReport,
    probes: &[(String, ProbeResult)],
    curves: &[(String, Vec<f64>)],
) -> Result<()> {
    let dir = cfg.report_dir();
    mkdir(&dir)?;
    cfg.save(&dir.join("config.json"))?;
    report.write_csv(&dir.join("pairs.csv"), &dir.join("summary.csv"))?;
    let rows: Vec<ProbeRow> = probes
        .iter()
        .map(|(m, p)| ProbeRow {
            method: m.clone(),
            bacc_pre: p.bacc_pre,
            bacc_post: p.bacc_post,
            chance: p.chance,
            margin_drop: p.margin_drop(),
        })
        .collect();
    write_rows(&dir.join("probe.csv"), &rows)?;

    let mut methods: Vec<String> = Vec::new();
    for r in &report.records {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let groups: Vec<(String, Vec<f64>)> = methods
        .iter()
        .map(|m| {
            let v = report
                .records
                .iter()
                .filter(|r| &r.method == m && r.tag == Tag::Inter)
                .map(|r| r.log_wd)
                .collect();
            (m.clone(), v)
        })
        .collect();
    let svg = plot::box_plot("Inter-site Wasserstein distance", "log WD", &groups);
    std::fs::write(dir.join("wd_boxplot.svg"), svg).map_err(|e| Error::io(dir.join("wd_boxplot.svg"), e))?;
    if !curves.is_empty() {
        let svg = plot::line_plot("Validation losses (log10)", "log10 loss", curves);
        std::fs::write(dir.join("loss_curves.svg"), svg).map_err(|e| Error::io(dir.join("loss_curves.svg"), e))?;
    }
    Ok(())
}

fn log10_curve(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    xs.map(|x| x.max(1e-12).log10()).collect()
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub corpus: Corpus,
    pub report: MetricsReport,
    pub probes: Vec<(String, ProbeResult)>,
    pub stage1: Vec<Stage1Row>,
    pub stage2: Vec<(String, Vec<Stage2Row>)>,
    pub timings: Vec<(String, f64)>,
}

impl Experiment {
    pub fn probe(&self, method: &str) -> Option<&ProbeResult> {
        self.probes.iter().find(|(m, _)| m == method).map(|(_, p)| p)
    }
}

/// Full pipeline. Every artifact lands under `cfg.out_dir`.
pub fn run_experiment(cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    mkdir(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.json"))?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let corpus = generate(cfg)?;
    lap("generate", &mut timings);
    let (ae, stage1) = run_stage1(cfg, &corpus)?;
    lap("stage1", &mut timings);
    let (main, log) = run_stage2(cfg, &corpus, &ae, None)?;
    let mut stage2 = vec![("hcld".to_string(), log)];
    lap("stage2", &mut timings);

    let mut outputs: Vec<(String, Vec<Tensor<f32>>)> = Vec::new();
    for m in [Method::None, Method::Minmax, Method::Zscore, Method::Histmatch] {
        outputs.push((m.name().to_string(), baseline_corpus(m, &corpus)?));
    }
    let hcld = harmonize_corpus(cfg, &corpus, &ae, &main)?;
    outputs.push(("hcld".to_string(), hcld));
    lap("harmonize", &mut timings);

    for v in &cfg.variants {
        let vcfg = variant_config(cfg, v);
        let model = if variant_trains(cfg, v) {
            let (m, log) = run_stage2(&vcfg, &corpus, &ae, Some(&v.name))?;
            stage2.push((v.name.clone(), log));
            m
        } else {
            main.clone()
        };
        outputs.push((v.name.clone(), harmonize_corpus(&vcfg, &corpus, &ae, &model)?));
        lap(&format!("variant {}", v.name), &mut timings);
    }
    for (name, vols) in &outputs {
        if name != "none" {
            save_outputs(cfg, &corpus, name, vols)?;
        }
    }

    let report = evaluate(&corpus, &outputs)?;
    let mut probes = Vec::new();
    for (name, vols) in &outputs {
        if name != "none" {
            probes.push((name.clone(), probe(cfg, &corpus, vols)?));
        }
    }
    lap("evaluate", &mut timings);

    let mut curves = vec![("stage1 val L_R".to_string(), log10_curve(stage1.iter().map(|r| r.val_rec)))];
    for (name, log) in &stage2 {
        curves.push((format!("{name} val L_N"), log10_curve(log.iter().map(|r| r.val_noise))));
    }
    write_report(cfg, &report, &probes, &curves)?;
    Ok(Experiment {
        corpus,
        report,
        probes,
        stage1,
        stage2,
        timings,
    })
}
