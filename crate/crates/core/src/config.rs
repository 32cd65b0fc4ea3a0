//! Run configuration. One JSON document drives every subcommand and is copied
//! into each run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tensorlab::Rng;

use crate::autoenc::{AeConfig, Stage1Weights};
use crate::cldm::{Ablations, CldmConfig, StyleMode};
use crate::error::{Error, Result};
use crate::fusion::NoiseSchedule;
use crate::phantom::{default_sites, CorpusMode, CorpusSpec, SiteStyle, DEFAULT_EXTENT};
use crate::sampler::{SamplerConfig, Strategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_subjects: u32,
    pub n_sites: usize,
    pub extent: [usize; 3],
    pub mode: CorpusMode,
    pub site_seed: u64,
    pub content_seed: u64,
    pub noise_seed: u64,
    pub val_subjects: u32,
    pub test_subjects: u32,
    /// Explicit site styles; drawn from `site_seed` when absent.
    pub sites: Option<Vec<SiteStyle>>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            n_sites: 4,
            extent: DEFAULT_EXTENT,
            mode: CorpusMode::Traveling,
            site_seed: 7,
            content_seed: 1,
            noise_seed: 2,
            val_subjects: 1,
            test_subjects: 0,
            sites: None,
        }
    }
}

impl CorpusConfig {
    pub fn site_styles(&self) -> Vec<SiteStyle> {
        match &self.sites {
            Some(s) => s.clone(),
            None => default_sites(self.n_sites, self.site_seed),
        }
    }

    pub fn spec(&self, target_site: Option<u32>) -> CorpusSpec {
        CorpusSpec {
            n_subjects: self.n_subjects,
            sites: self.site_styles(),
            mode: self.mode,
            extent: self.extent,
            content_seed: self.content_seed,
            noise_seed: self.noise_seed,
            val_subjects: self.val_subjects,
            test_subjects: self.test_subjects,
            target_site,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weights: Stage1Weights,
    pub adversarial: bool,
    /// Weight of the patch-adversarial term when `adversarial` is set.
    pub adv_weight: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub ae: AeConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-4,
            batch: 4,
            weights: Stage1Weights::default(),
            adversarial: false,
            adv_weight: 0.1,
            plateau_patience: 10,
            plateau_factor: 0.5,
            min_lr: 1e-7,
            ae: AeConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn effective_weights(&self) -> Stage1Weights {
        Stage1Weights {
            adv: if self.adversarial { self.adv_weight } else { 0.0 },
            ..self.weights
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub alpha: f64,
    pub style_mode: StyleMode,
    pub ablate: Ablations,
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Epochs before the generator-side adversarial term switches on.
    pub adv_burn_in: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub cldm: CldmConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-4,
            batch: 4,
            alpha: 0.1,
            style_mode: StyleMode::Gram,
            ablate: Ablations::default(),
            t_total: 1000,
            beta_start: 0.0015,
            beta_end: 0.0195,
            adv_burn_in: 20,
            plateau_patience: 10,
            plateau_factor: 0.5,
            min_lr: 1e-7,
            cldm: CldmConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_total, self.beta_start, self.beta_end)
    }

    /// Denoiser architecture after applying the `gn_off` toggle.
    pub fn network(&self) -> CldmConfig {
        CldmConfig {
            group_norm: self.cldm.group_norm && !self.ablate.gn_off,
            ..self.cldm.clone()
        }
    }
}

/// An extra HCLD variant evaluated next to the main model. Fields left empty
/// inherit from the main stage-2 settings; a variant whose training settings
/// match the main model reuses it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub style_mode: Option<StyleMode>,
    #[serde(default)]
    pub ablate: Option<Ablations>,
    #[serde(default)]
    pub strategy: Option<Strategy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Fixed target site; chosen by intra-site PSNR when absent.
    pub target_site: Option<u32>,
    pub corpus: CorpusConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub sampler: SamplerConfig,
    pub variants: Vec<Variant>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            target_site: None,
            corpus: CorpusConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            sampler: SamplerConfig::default(),
            variants: Vec::new(),
            verbose: false,
        }
    }
}

/// Independent seed streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    AeInit = 1,
    AeTrain = 2,
    CldmInit = 3,
    CldmTrain = 4,
    Harmonize = 5,
    Probe = 6,
    Disc = 7,
}

impl RunConfig {
    /// Small settings for end-to-end checks: 4 subjects, 3 sites, 10 + 10 epochs.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.corpus.n_subjects = 4;
        c.corpus.n_sites = 3;
        c.stage1.epochs = 10;
        c.stage2.epochs = 10;
        c.out_dir = PathBuf::from("runs/smoke");
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.n_subjects == 0 || c.site_styles().is_empty() {
            return Err(Error::invalid("config", "corpus needs at least one subject and one site"));
        }
        if c.val_subjects + c.test_subjects >= c.n_subjects {
            return Err(Error::invalid("config", "held-out subjects leave no training subjects"));
        }
        if let Some(t) = self.target_site {
            if t as usize >= c.site_styles().len() {
                return Err(Error::invalid("config", format!("target site {t} does not exist")));
            }
        }
        if self.stage1.batch == 0 || self.stage2.batch == 0 {
            return Err(Error::invalid("config", "batch size must be positive"));
        }
        if !(self.stage1.lr > 0.0 && self.stage2.lr > 0.0) {
            return Err(Error::invalid("config", "learning rates must be positive"));
        }
        self.stage1.effective_weights().validate()?;
        self.stage1.ae.latent_shape(c.extent)?;
        if self.stage2.cldm.c_latent != self.stage1.ae.c_latent {
            return Err(Error::invalid("config", "denoiser and autoencoder latent channels differ"));
        }
        self.sampler.validate(&self.stage2.schedule()?)?;
        let mut names = std::collections::BTreeSet::new();
        for v in &self.variants {
            if v.name.is_empty() || v.name == "hcld" || !names.insert(v.name.as_str()) {
                return Err(Error::invalid("config", format!("variant name `{}` is empty or repeated", v.name)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    pub fn seed_for(&self, stream: Stream) -> u64 {
        Rng::new(self.seed).split(stream as u64).next_u64()
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.out_dir.join("corpus")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }

    pub fn harmonized_dir(&self) -> PathBuf {
        self.out_dir.join("harmonized")
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
