use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hcld::baselines::Method;
use hcld::config::{RunConfig, Stream};
use hcld::metrics::{aggregate, MetricsReport, PairRecord};
use hcld::phantom::Split;
use hcld::pipeline::{self, Corpus};
use hcld::sampler::Strategy;
use hcld::train::{Stage1Row, Stage2Row};
use hcld::{Error, Result};

#[derive(Parser)]
#[command(name = "hcld", version, about = "Latent diffusion harmonization of synthetic multi-site volumes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the phantom corpus and pick the target site
    Gen(Common),
    /// Train the autoencoder
    TrainAe(Common),
    /// Train the conditional latent denoiser on the frozen autoencoder
    TrainCldm(Common),
    /// Harmonize every corpus volume with one method
    Harmonize(Common),
    /// Pairwise metrics and the site probe over all harmonized outputs
    Eval(Common),
    /// Redraw figures and print the headline table
    Report(Common),
    /// Everything above in one go
    Run(Common),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target_site: Option<u32>,
    /// none, minmax, zscore, histmatch or hcld
    #[arg(long, default_value = "hcld")]
    method: String,
    /// ddim or ddpm
    #[arg(long)]
    strategy: Option<String>,
    /// Repeatable: no_content, no_style, no_adain, no_in, gn_off
    #[arg(long)]
    ablate: Vec<String>,
    /// Name for a denoiser checkpoint and its harmonized outputs
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Use the small end-to-end settings as the base config
    #[arg(long)]
    smoke: bool,
    #[arg(long)]
    verbose: bool,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if self.smoke => RunConfig::smoke(),
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.target_site {
            cfg.target_site = Some(t);
        }
        if let Some(s) = &self.strategy {
            cfg.sampler.strategy = match s.as_str() {
                "ddim" => Strategy::Ddim,
                "ddpm" => Strategy::Ddpm,
                other => return Err(Error::invalid("strategy", format!("`{other}` (expected ddim or ddpm)"))),
            };
        }
        for flag in &self.ablate {
            cfg.stage2.ablate.set(flag)?;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        cfg.verbose |= self.verbose;
        cfg.validate()?;
        Ok(cfg)
    }

    fn output_name(&self, method: Method) -> String {
        match (method, &self.name) {
            (Method::Hcld, Some(n)) => n.clone(),
            _ => method.name().to_string(),
        }
    }
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn curves(cfg: &RunConfig) -> Result<Vec<(String, Vec<f64>)>> {
    let dir = cfg.checkpoint_dir();
    let mut out = Vec::new();
    let s1 = dir.join("stage1_loss.csv");
    if s1.exists() {
        let rows: Vec<Stage1Row> = read_rows(&s1)?;
        out.push(("stage1 val L_R".to_string(), rows.iter().map(|r| r.val_rec.max(1e-12).log10()).collect()));
    }
    if let Ok(entries) = std::fs::read_dir(&dir) {
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".loss.csv"))
            .collect();
        files.sort();
        for f in files {
            let rows: Vec<Stage2Row> = read_rows(&f)?;
            let name = f.file_name().unwrap_or_default().to_string_lossy().trim_end_matches(".loss.csv").to_string();
            out.push((format!("{name} val L_N"), rows.iter().map(|r| r.val_noise.max(1e-12).log10()).collect()));
        }
    }
    Ok(out)
}

fn headline(cfg: &RunConfig, report: &MetricsReport) -> serde_json::Value {
    let mut methods: Vec<&str> = Vec::new();
    for r in &report.records {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let rows: Vec<_> = methods
        .iter()
        .map(|m| {
            let get = |metric: &str, median: bool| {
                report
                    .find(m, "inter:target", metric)
                    .map(|s| if median { s.median } else { s.mean })
            };
            json!({
                "method": m,
                "ssim_mean": get("ssim", false),
                "psnr_mean": get("psnr", false),
                "wd_median": get("wd", true),
            })
        })
        .collect();
    json!({"out_dir": cfg.out_dir, "inter_target": rows})
}

fn evaluate_saved(cfg: &RunConfig, corpus: &Corpus) -> Result<serde_json::Value> {
    let mut outputs = vec![("none".to_string(), pipeline::baseline_corpus(Method::None, corpus)?)];
    let mut names: Vec<String> = std::fs::read_dir(cfg.harmonized_dir())
        .map(|it| {
            it.filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect()
        })
        .unwrap_or_default();
    names.sort();
    for n in names {
        let vols = pipeline::load_outputs(cfg, corpus, &n)?;
        outputs.push((n, vols));
    }
    let report = pipeline::evaluate(corpus, &outputs)?;
    let mut probes = Vec::new();
    for (n, vols) in &outputs[1..] {
        probes.push((n.clone(), pipeline::probe(cfg, corpus, vols)?));
    }
    pipeline::write_report(cfg, &report, &probes, &curves(cfg)?)?;
    let mut h = headline(cfg, &report);
    h["probe"] = json!(probes
        .iter()
        .map(|(m, p)| json!({"method": m, "bacc_pre": p.bacc_pre, "bacc_post": p.bacc_post, "chance": p.chance}))
        .collect::<Vec<_>>());
    Ok(h)
}

fn run(cmd: Cmd) -> Result<serde_json::Value> {
    match cmd {
        Cmd::Gen(c) => {
            let cfg = c.config()?;
            let corpus = pipeline::generate(&cfg)?;
            cfg.save(&cfg.out_dir.join("config.json"))?;
            Ok(json!({
                "corpus": cfg.corpus_dir(),
                "volumes": corpus.volumes.len(),
                "target_site": corpus.target,
            }))
        }
        Cmd::TrainAe(c) => {
            let cfg = c.config()?;
            let corpus = pipeline::load(&cfg)?;
            let (_, log) = pipeline::run_stage1(&cfg, &corpus)?;
            let last = log.last().map(|r| r.val_rec);
            Ok(json!({"checkpoint": cfg.checkpoint_dir().join("ae.ckpt"), "epochs": log.len(), "val_rec": last}))
        }
        Cmd::TrainCldm(c) => {
            let cfg = c.config()?;
            let corpus = pipeline::load(&cfg)?;
            let ae = pipeline::load_autoencoder(&cfg)?;
            let (_, log) = pipeline::run_stage2(&cfg, &corpus, &ae, c.name.as_deref())?;
            let last = log.last().map(|r| r.val_noise);
            Ok(json!({
                "checkpoint": pipeline::cldm_stem(&cfg, c.name.as_deref()).with_extension("ckpt"),
                "epochs": log.len(),
                "val_noise": last,
            }))
        }
        Cmd::Harmonize(c) => {
            let cfg = c.config()?;
            let method = Method::parse(&c.method)?;
            let corpus = pipeline::load(&cfg)?;
            let outputs = if method == Method::Hcld {
                let ae = pipeline::load_autoencoder(&cfg)?;
                let model = pipeline::load_denoiser(&cfg, c.name.as_deref())?;
                pipeline::harmonize_corpus(&cfg, &corpus, &ae, &model)?
            } else {
                pipeline::baseline_corpus(method, &corpus)?
            };
            let name = c.output_name(method);
            pipeline::save_outputs(&cfg, &corpus, &name, &outputs)?;
            Ok(json!({"method": name, "volumes": outputs.len(), "dir": cfg.harmonized_dir().join(&name)}))
        }
        Cmd::Eval(c) => {
            let cfg = c.config()?;
            let corpus = pipeline::load(&cfg)?;
            evaluate_saved(&cfg, &corpus)
        }
        Cmd::Report(c) => {
            let cfg = c.config()?;
            let dir = cfg.report_dir();
            let records: Vec<PairRecord> = read_rows(&dir.join("pairs.csv"))?;
            let corpus = pipeline::load(&cfg)?;
            let report = aggregate(records, Some(corpus.target));
            let probes: Vec<pipeline::ProbeRow> = read_rows(&dir.join("probe.csv"))?;
            let probes = probes
                .into_iter()
                .map(|p| {
                    let r = hcld::metrics::ProbeResult {
                        bacc_pre: p.bacc_pre,
                        bacc_post: p.bacc_post,
                        chance: p.chance,
                    };
                    (p.method, r)
                })
                .collect::<Vec<_>>();
            pipeline::write_report(&cfg, &report, &probes, &curves(&cfg)?)?;
            Ok(headline(&cfg, &report))
        }
        Cmd::Run(c) => {
            let cfg = c.config()?;
            let exp = pipeline::run_experiment(&cfg)?;
            let mut h = headline(&cfg, &exp.report);
            h["target_site"] = json!(exp.corpus.target);
            h["train_volumes"] = json!(exp.corpus.split(Split::Train).len());
            h["timings_s"] = json!(exp.timings);
            h["probe_seed"] = json!(cfg.seed_for(Stream::Probe));
            Ok(h)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": "usage", "message": e.to_string().trim()}}));
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            ExitCode::FAILURE
        }
    }
}
