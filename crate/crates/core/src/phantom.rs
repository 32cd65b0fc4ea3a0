//! Synthetic multi-site corpus: subject anatomy ("content") rendered through
//! per-site intensity transforms ("style").

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensorlab::{Rng, Tensor};

use crate::error::{Error, Result};

pub const DEFAULT_EXTENT: [usize; 3] = [32, 32, 16];
/// Canonical content intensities: background, tissue A, tissue B.
pub const TISSUES: [f64; 3] = [0.0, 0.45, 0.75];

/// One scalar volume, `voxels` shaped `[w, h, d]`.
#[derive(Clone, Debug)]
pub struct Volume {
    pub voxels: Tensor<f32>,
    pub subject_id: u32,
    pub site_id: u32,
    pub content_seed: u64,
    pub style: SiteStyle,
}

impl Volume {
    pub fn extent(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn values(&self) -> &[f32] {
        self.voxels.data()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteStyle {
    pub gamma: f64,
    pub gain: f64,
    pub offset: f64,
    pub bias_amp: f64,
    pub noise_sd: f64,
    /// Output intensities of the three canonical tissue levels.
    pub anchors: [f64; 3],
    /// Phases of the three cosine factors of the bias field.
    #[serde(default)]
    pub bias_phase: [f64; 3],
}

impl SiteStyle {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            gain: 1.0,
            offset: 0.0,
            bias_amp: 0.0,
            noise_sd: 0.0,
            anchors: TISSUES,
            bias_phase: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("site style", msg.to_string()));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return bad("gain must be positive");
        }
        if !self.offset.is_finite() {
            return bad("offset must be finite");
        }
        if !(0.0..1.0).contains(&self.bias_amp) {
            return bad("bias_amp must lie in [0, 1)");
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be non-negative");
        }
        let a = self.anchors;
        if a.iter().any(|v| !(0.0..=1.0).contains(v)) || a[0] > a[1] || a[1] > a[2] {
            return bad("anchors must be non-decreasing within [0, 1]");
        }
        Ok(())
    }

    /// Noise-free intensity curve: anchors applied after the gamma curve.
    pub fn curve(&self, v: f64) -> f64 {
        let g = v.clamp(0.0, 1.0).powf(self.gamma);
        let xs = [TISSUES[0], TISSUES[1], TISSUES[2], 1.0];
        let ys = [self.anchors[0], self.anchors[1], self.anchors[2], 1.0];
        let i = match g {
            g if g <= xs[1] => 0,
            g if g <= xs[2] => 1,
            _ => 2,
        };
        ys[i] + (ys[i + 1] - ys[i]) * (g - xs[i]) / (xs[i + 1] - xs[i])
    }

    fn bias(&self, p: [f64; 3]) -> f64 {
        let mut prod = 1.0;
        for (c, ph) in p.iter().zip(self.bias_phase) {
            prod *= (PI * c + ph).cos();
        }
        1.0 + self.bias_amp * prod
    }
}

/// Normalized voxel-centre coordinates in `[-1, 1]`.
fn coord(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

struct Blobs(Vec<([f64; 3], f64, f64)>);

impl Blobs {
    fn draw(rng: &mut Rng, n: usize) -> Self {
        Self(
            (0..n)
                .map(|_| {
                    let c = [0; 3].map(|_: i32| rng.uniform() * 1.4 - 0.7);
                    let width = 0.25 + 0.2 * rng.uniform();
                    let amp = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                    (c, width, amp)
                })
                .collect(),
        )
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        self.0
            .iter()
            .map(|(c, w, a)| {
                let d2: f64 = p.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum();
                a * (-d2 / (2.0 * w * w)).exp()
            })
            .sum()
    }
}

/// Deterministic three-tissue anatomy for one subject.
pub fn generate_content(subject_id: u32, content_seed: u64, extent: [usize; 3]) -> Result<Tensor<f32>> {
    if extent.contains(&0) {
        return Err(Error::invalid("extent", "all extents must be positive"));
    }
    let mut rng = Rng::new(content_seed).split(u64::from(subject_id) + 1);
    let centre = [0; 3].map(|_: i32| (rng.uniform() - 0.5) * 0.12);
    let radii = [0.78, 0.8, 0.74].map(|r: f64| r + (rng.uniform() - 0.5) * 0.14);
    let inner = 0.55 + 0.1 * rng.uniform();
    let outer_blobs = Blobs::draw(&mut rng, 6);
    let inner_blobs = Blobs::draw(&mut rng, 6);
    let [w, h, d] = extent;
    Ok(Tensor::from_fn(&[w, h, d], |i| {
        let p = [coord(i / (h * d), w), coord(i / d % h, h), coord(i % d, d)];
        let rho = p
            .iter()
            .zip(centre)
            .zip(radii)
            .map(|((x, c), r)| ((x - c) / r).powi(2))
            .sum::<f64>()
            .sqrt();
        let v = if rho < inner + 0.15 * inner_blobs.at(p) {
            TISSUES[2]
        } else if rho < 1.0 + 0.08 * outer_blobs.at(p) {
            TISSUES[1]
        } else {
            TISSUES[0]
        };
        v as f32
    }))
}

/// Renders `content` through a site transform. Offset and noise act only
/// inside the head, so the background stays at exactly zero.
pub fn apply_style(content: &Tensor<f32>, style: &SiteStyle, noise_seed: u64) -> Result<Tensor<f32>> {
    style.validate()?;
    if content.rank() != 3 {
        return Err(Error::invalid("content", format!("expected [w, h, d], got {:?}", content.shape())));
    }
    if content.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("content", "voxels must lie in [0, 1]"));
    }
    let [w, h, d] = [content.shape()[0], content.shape()[1], content.shape()[2]];
    let mut rng = Rng::new(noise_seed);
    let mut out = Tensor::zeros(content.shape());
    for (i, (o, &v)) in out.data_mut().iter_mut().zip(content.data()).enumerate() {
        let p = [coord(i / (h * d), w), coord(i / d % h, h), coord(i % d, d)];
        let v = f64::from(v);
        let mut y = style.gain * style.bias(p) * style.curve(v);
        if v > 0.0 {
            y += style.offset;
            if style.noise_sd > 0.0 {
                y += style.noise_sd * rng.normal();
            }
        }
        *o = y.clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// A reproducible set of distinct site styles.
pub fn default_sites(n: usize, seed: u64) -> Vec<SiteStyle> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.uniform();
            let a1 = TISSUES[1] + u(-0.12, 0.12);
            let a2 = (TISSUES[2] + u(-0.1, 0.12)).max(a1 + 0.12);
            SiteStyle {
                gamma: u(0.7, 1.45),
                gain: u(0.8, 1.15),
                offset: u(-0.05, 0.08),
                bias_amp: u(0.0, 0.25),
                noise_sd: u(0.005, 0.04),
                anchors: [0.0, a1, a2.min(1.0)],
                bias_phase: [u(0.0, 2.0 * PI), u(0.0, 2.0 * PI), u(0.0, 2.0 * PI)],
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    Traveling,
    Disjoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub subject_id: u32,
    pub site_id: u32,
    pub file: String,
    pub content_seed: u64,
    pub noise_seed: u64,
    pub style: SiteStyle,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub extent: [usize; 3],
    pub mode: CorpusMode,
    pub sites: Vec<SiteStyle>,
    pub target_site: Option<u32>,
    pub records: Vec<VolumeRecord>,
}

impl CorpusManifest {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn subjects(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.subject_id).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_subjects: u32,
    pub sites: Vec<SiteStyle>,
    pub mode: CorpusMode,
    pub extent: [usize; 3],
    pub content_seed: u64,
    pub noise_seed: u64,
    /// Subjects with the highest ids are held out, first for validation
    /// and then for test.
    pub val_subjects: u32,
    pub test_subjects: u32,
    pub target_site: Option<u32>,
}

impl CorpusSpec {
    /// `(subject, site)` pairs emitted by the configured mode.
    pub fn layout(&self) -> Vec<(u32, u32)> {
        let n_sites = self.sites.len() as u32;
        match self.mode {
            CorpusMode::Traveling => (0..self.n_subjects)
                .flat_map(|s| (0..n_sites).map(move |k| (s, k)))
                .collect(),
            CorpusMode::Disjoint => (0..self.n_subjects).map(|s| (s, s % n_sites.max(1))).collect(),
        }
    }

    fn split_of(&self, subject: u32) -> Split {
        let held = self.val_subjects + self.test_subjects;
        let first_held = self.n_subjects.saturating_sub(held);
        if subject < first_held {
            Split::Train
        } else if subject < first_held + self.val_subjects {
            Split::Val
        } else {
            Split::Test
        }
    }
}

pub fn volume_file_name(subject: u32, site: u32) -> String {
    format!("sub{subject:03}_site{site:02}.vol")
}

/// Renders every `(subject, site)` pair of `layout`. When `dir` is given the
/// volumes and `manifest.json` are written there.
pub fn build_corpus_layout(
    spec: &CorpusSpec,
    layout: &[(u32, u32)],
    dir: Option<&Path>,
) -> Result<(CorpusManifest, Vec<Volume>)> {
    if spec.sites.len() < 2 {
        return Err(Error::invalid("corpus", "at least two sites are required"));
    }
    for s in &spec.sites {
        s.validate()?;
    }
    if let Some(t) = spec.target_site {
        if t as usize >= spec.sites.len() {
            return Err(Error::invalid("corpus", format!("target site {t} does not exist")));
        }
    }
    let mut seen = BTreeSet::new();
    for &(subj, site) in layout {
        if site as usize >= spec.sites.len() {
            return Err(Error::invalid("corpus", format!("site {site} does not exist")));
        }
        if !seen.insert((subj, site)) {
            return Err(Error::invalid("corpus", format!("duplicate (subject {subj}, site {site})")));
        }
    }
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut records = Vec::with_capacity(layout.len());
    let mut volumes = Vec::with_capacity(layout.len());
    for &(subj, site) in layout {
        let style = spec.sites[site as usize].clone();
        let content = generate_content(subj, spec.content_seed, spec.extent)?;
        let noise_seed = Rng::new(spec.noise_seed)
            .split((u64::from(subj) << 16) | u64::from(site))
            .next_u64();
        let voxels = apply_style(&content, &style, noise_seed)?;
        let file = volume_file_name(subj, site);
        if let Some(dir) = dir {
            write_vol(&dir.join(&file), &voxels)?;
        }
        records.push(VolumeRecord {
            subject_id: subj,
            site_id: site,
            file,
            content_seed: spec.content_seed,
            noise_seed,
            style: style.clone(),
            split: spec.split_of(subj),
        });
        volumes.push(Volume {
            voxels,
            subject_id: subj,
            site_id: site,
            content_seed: spec.content_seed,
            style,
        });
    }
    let manifest = CorpusManifest {
        extent: spec.extent,
        mode: spec.mode,
        sites: spec.sites.clone(),
        target_site: spec.target_site,
        records,
    };
    if let Some(dir) = dir {
        manifest.save(&dir.join("manifest.json"))?;
    }
    Ok((manifest, volumes))
}

pub fn build_corpus(spec: &CorpusSpec, dir: Option<&Path>) -> Result<(CorpusManifest, Vec<Volume>)> {
    build_corpus_layout(spec, &spec.layout(), dir)
}

/// Loads every volume listed in a manifest stored in `dir`.
pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<Volume>)> {
    let manifest = CorpusManifest::load(&dir.join("manifest.json"))?;
    let volumes = manifest
        .records
        .iter()
        .map(|r| {
            let voxels = read_vol(&dir.join(&r.file))?;
            let e = voxels.shape();
            if e != manifest.extent {
                return Err(Error::format(dir.join(&r.file), format!("extent {e:?} disagrees with manifest")));
            }
            Ok(Volume {
                voxels,
                subject_id: r.subject_id,
                site_id: r.site_id,
                content_seed: r.content_seed,
                style: r.style.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, volumes))
}

const VOL_MAGIC: &[u8; 8] = b"VOLUME01";

/// Encodes a `[w, h, d]` grid as VOL1 bytes (x varies fastest on disk).
pub fn encode_vol(v: &Tensor<f32>) -> Result<Vec<u8>> {
    if v.rank() != 3 {
        return Err(Error::invalid("volume", format!("expected [w, h, d], got {:?}", v.shape())));
    }
    let [w, h, d] = [v.shape()[0], v.shape()[1], v.shape()[2]];
    let mut out = Vec::with_capacity(20 + 4 * v.numel());
    out.extend_from_slice(VOL_MAGIC);
    for e in [w, h, d] {
        let e = u32::try_from(e).map_err(|_| Error::invalid("volume", "extent exceeds u32"))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out.extend_from_slice(&v.data()[(x * h + y) * d + z].to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_vol(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 20 || &bytes[..8] != VOL_MAGIC {
        return Err(Error::format(path, "missing VOLUME01 header"));
    }
    let ext = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let [w, h, d] = [ext(0), ext(1), ext(2)];
    let n = w * h * d;
    if n == 0 || bytes.len() != 20 + 4 * n {
        return Err(Error::format(path, format!("payload size does not match extent {w}x{h}x{d}")));
    }
    let mut t = Tensor::zeros(&[w, h, d]);
    let data = t.data_mut();
    for (i, chunk) in bytes[20..].chunks_exact(4).enumerate() {
        let (x, y, z) = (i % w, i / w % h, i / (w * h));
        data[(x * h + y) * d + z] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    Ok(t)
}

pub fn write_vol(path: &Path, v: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_vol(v)?).map_err(|e| Error::io(path, e))
}

pub fn read_vol(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vol(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_endpoints() {
        let s = SiteStyle::identity();
        for v in [0.0, 0.2, 0.45, 0.6, 0.75, 0.9, 1.0] {
            assert!((s.curve(v) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn vol_layout_is_x_fastest() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f32);
        let bytes = encode_vol(&t).unwrap();
        // File element 1 is (x=1, y=0, z=0), which sits at tensor index h*d = 12.
        let second = f32::from_le_bytes(bytes[24..28].try_into().unwrap());
        assert_eq!(second, 12.0);
        assert_eq!(decode_vol(&bytes, Path::new("mem")).unwrap(), t);
    }

    #[test]
    fn truncated_file_rejected() {
        let t = Tensor::<f32>::ones(&[2, 2, 2]);
        let bytes = encode_vol(&t).unwrap();
        assert!(decode_vol(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        assert!(decode_vol(b"VOLUME02", Path::new("mem")).is_err());
    }
}
