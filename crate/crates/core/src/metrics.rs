//! Image-similarity and distribution metrics, pairing protocols and the
//! linear site probe.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensorlab::{Rng, Tensor};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 99.0;
pub const FOREGROUND: f64 = 0.01;
pub const WD_BINS: usize = 64;
pub const PROBE_BINS: usize = 32;
pub const LOG_WD_FLOOR: f64 = 1e-12;

fn extent_of(t: &Tensor<f32>) -> Result<[usize; 3]> {
    match t.shape() {
        &[w, h, d] => Ok([w, h, d]),
        s => Err(Error::invalid("volume", format!("expected [w, h, d], got {s:?}"))),
    }
}

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(
            "volume pair",
            format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Inclusive prefix sums over a `[w, h, d]` grid, padded by one on each axis.
struct Integral {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Integral {
    fn new(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Self {
        let [w, h, d] = dims;
        let (sh, sd) = ((h + 1) * (d + 1), d + 1);
        let mut data = vec![0.0; (w + 1) * sh];
        for x in 0..w {
            for y in 0..h {
                for z in 0..d {
                    let v = f((x * h + y) * d + z);
                    let i = (x + 1) * sh + (y + 1) * sd + z + 1;
                    data[i] = v + data[i - sh] + data[i - sd] + data[i - 1]
                        - data[i - sh - sd]
                        - data[i - sh - 1]
                        - data[i - sd - 1]
                        + data[i - sh - sd - 1];
                }
            }
        }
        Self { dims, data }
    }

    /// Sum over the cube `[x, x+k) x [y, y+k) x [z, z+k)`.
    fn cube(&self, x: usize, y: usize, z: usize, k: usize) -> f64 {
        let [_, h, d] = self.dims;
        let (sh, sd) = ((h + 1) * (d + 1), d + 1);
        let at = |a: usize, b: usize, c: usize| self.data[a * sh + b * sd + c];
        at(x + k, y + k, z + k) - at(x, y + k, z + k) - at(x + k, y, z + k) - at(x + k, y + k, z)
            + at(x, y, z + k)
            + at(x, y + k, z)
            + at(x + k, y, z)
            - at(x, y, z)
    }
}

/// Mean SSIM over all valid 7x7x7 windows (uniform weights, population
/// moments, intensity range 1).
pub fn ssim3d(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let dims = extent_of(a)?;
    let k = SSIM_WINDOW;
    if dims.iter().any(|&e| e < k) {
        return Err(Error::invalid("ssim", format!("every extent must be at least {k}, got {dims:?}")));
    }
    let (va, vb) = (a.data(), b.data());
    let sa = Integral::new(dims, |i| f64::from(va[i]));
    let sb = Integral::new(dims, |i| f64::from(vb[i]));
    let saa = Integral::new(dims, |i| f64::from(va[i]).powi(2));
    let sbb = Integral::new(dims, |i| f64::from(vb[i]).powi(2));
    let sab = Integral::new(dims, |i| f64::from(va[i]) * f64::from(vb[i]));
    let n = (k * k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for x in 0..=dims[0] - k {
        for y in 0..=dims[1] - k {
            for z in 0..=dims[2] - k {
                let ma = sa.cube(x, y, z, k) / n;
                let mb = sb.cube(x, y, z, k) / n;
                let va = (saa.cube(x, y, z, k) / n - ma * ma).max(0.0);
                let vb = (sbb.cube(x, y, z, k) / n - mb * mb).max(0.0);
                let cov = sab.cube(x, y, z, k) / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    let s = total / count as f64;
    if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&s) {
        return Err(Error::invalid("ssim", format!("value {s} outside [-1, 1]")));
    }
    Ok(s.clamp(-1.0, 1.0))
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    Ok(sum / a.numel() as f64)
}

/// Peak-1 PSNR in dB, capped at [`PSNR_CAP`] for identical inputs.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Pearson correlation over all voxels; zero when either side is constant.
pub fn pcc(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.numel() as f64;
    let ma = a.sum_f64() / n;
    let mb = b.sum_f64() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (f64::from(x) - ma, f64::from(y) - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    let r = sab / (saa * sbb).sqrt();
    if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&r) {
        return Err(Error::invalid("pcc", format!("value {r} outside [-1, 1]")));
    }
    Ok(r.clamp(-1.0, 1.0))
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Quantile of sorted data by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Levels used to integrate the quantile-function difference when the two
/// samples have different sizes.
pub const WD_QUADRATURE_LEVELS: usize = 256;

/// 1-Wasserstein distance between two empirical samples.
pub fn wasserstein1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("wasserstein", "empty sample"));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    if sa.len() == sb.len() {
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64);
    }
    let step_quantile = |s: &[f64], p: f64| s[((p * s.len() as f64) as usize).min(s.len() - 1)];
    let n = WD_QUADRATURE_LEVELS;
    Ok((0..n)
        .map(|i| {
            let p = (i as f64 + 0.5) / n as f64;
            (step_quantile(&sa, p) - step_quantile(&sb, p)).abs()
        })
        .sum::<f64>()
        / n as f64)
}

/// 1-Wasserstein distance between two normalized histograms over the same
/// equal-width bins spanning `[0, 1]`: the L1 distance between their CDFs.
pub fn wasserstein_hist(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid("wasserstein", "histograms must share a non-empty binning"));
    }
    let width = 1.0 / p.len() as f64;
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        cp += a;
        cq += b;
        total += (cp - cq).abs() * width;
    }
    Ok(total)
}

/// Normalized histogram of foreground voxels (`> 0.01`) over `[0, 1]`.
pub fn histogram(v: &[f32], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::invalid("histogram", "bins must be positive"));
    }
    let mut h = vec![0.0; bins];
    let mut n = 0usize;
    for &x in v {
        let x = f64::from(x);
        if x > FOREGROUND {
            h[((x * bins as f64) as usize).min(bins - 1)] += 1.0;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("histogram", "volume has no foreground voxels"));
    }
    h.iter_mut().for_each(|c| *c /= n as f64);
    Ok(h)
}

/// WD between the foreground intensity histograms of two volumes.
pub fn volume_wd(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    wasserstein_hist(&histogram(a.data(), WD_BINS)?, &histogram(b.data(), WD_BINS)?)
}

pub fn log_wd(wd: f64) -> f64 {
    wd.max(LOG_WD_FLOOR).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Intra,
    Inter,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Intra => "intra",
            Tag::Inter => "inter",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Labeled {
    pub subject_id: u32,
    pub site_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub tag: Tag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairingPlan {
    pub pairs: Vec<Pair>,
    pub subject_matched: bool,
}

impl PairingPlan {
    pub fn count(&self, tag: Tag) -> usize {
        self.pairs.iter().filter(|p| p.tag == tag).count()
    }
}

/// Every within-site pair plus every cross-site pair (restricted to the same
/// subject when `subject_matched`).
pub fn build_pairing(items: &[Labeled], subject_matched: bool) -> Result<PairingPlan> {
    let sites: BTreeSet<u32> = items.iter().map(|i| i.site_id).collect();
    if sites.len() < 2 {
        return Err(Error::invalid(
            "pairing",
            "inter-site pairs need volumes from at least two sites",
        ));
    }
    let mut pairs = Vec::new();
    for a in 0..items.len() {
        for b in a + 1..items.len() {
            let (x, y) = (items[a], items[b]);
            if x.site_id == y.site_id {
                pairs.push(Pair { a, b, tag: Tag::Intra });
            } else if !subject_matched || x.subject_id == y.subject_id {
                pairs.push(Pair { a, b, tag: Tag::Inter });
            }
        }
    }
    if !pairs.iter().any(|p| p.tag == Tag::Inter) {
        return Err(Error::invalid("pairing", "no inter-site pairs share a subject"));
    }
    Ok(PairingPlan {
        pairs,
        subject_matched,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub method: String,
    pub tag: Tag,
    pub subject_a: u32,
    pub site_a: u32,
    pub subject_b: u32,
    pub site_b: u32,
    pub ssim: f64,
    pub psnr: f64,
    pub pcc: f64,
    pub wd: f64,
    pub log_wd: f64,
}

/// All four pair metrics of `(a, b)`.
pub fn compare(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<[f64; 4]> {
    Ok([ssim3d(a, b)?, psnr(a, b)?, pcc(a, b)?, volume_wd(a, b)?])
}

pub fn pair_record(method: &str, tag: Tag, a: Labeled, b: Labeled, m: [f64; 4]) -> PairRecord {
    PairRecord {
        method: method.to_string(),
        tag,
        subject_a: a.subject_id,
        site_a: a.site_id,
        subject_b: b.subject_id,
        site_b: b.site_id,
        ssim: m[0],
        psnr: m[1],
        pcc: m[2],
        wd: m[3],
        log_wd: log_wd(m[3]),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub group: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<PairRecord>,
    pub summary: Vec<Summary>,
}

pub fn mean_sd_median(xs: &[f64]) -> (f64, f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd, quantile(&sorted(xs), 0.5))
}

/// Groups records by method and tag, and by method, tag and first site. With
/// a `target` site, inter-site pairs touching it also form the group
/// `inter:target`.
pub fn aggregate(records: Vec<PairRecord>, target: Option<u32>) -> MetricsReport {
    type Key = (String, String);
    let mut groups: BTreeMap<Key, Vec<&PairRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.method.clone(), r.tag.as_str().to_string())).or_default().push(r);
        groups
            .entry((r.method.clone(), format!("{}:site{}", r.tag.as_str(), r.site_a)))
            .or_default()
            .push(r);
        if r.tag == Tag::Inter && target.is_some_and(|t| r.site_a == t || r.site_b == t) {
            groups.entry((r.method.clone(), "inter:target".to_string())).or_default().push(r);
        }
    }
    let metrics: [(&str, fn(&PairRecord) -> f64); 5] = [
        ("ssim", |r| r.ssim),
        ("psnr", |r| r.psnr),
        ("pcc", |r| r.pcc),
        ("wd", |r| r.wd),
        ("log_wd", |r| r.log_wd),
    ];
    let mut summary = Vec::new();
    for ((method, group), rs) in &groups {
        for (name, get) in metrics {
            let xs: Vec<f64> = rs.iter().map(|r| get(r)).collect();
            let (mean, sd, median) = mean_sd_median(&xs);
            summary.push(Summary {
                method: method.clone(),
                group: group.clone(),
                metric: name.to_string(),
                n: xs.len(),
                mean,
                sd,
                median,
            });
        }
    }
    MetricsReport { records, summary }
}

impl MetricsReport {
    pub fn find(&self, method: &str, group: &str, metric: &str) -> Option<&Summary> {
        self.summary
            .iter()
            .find(|s| s.method == method && s.group == group && s.metric == metric)
    }

    pub fn write_csv(&self, pairs: &Path, summary: &Path) -> Result<()> {
        write_rows(pairs, &self.records)?;
        write_rows(summary, &self.summary)
    }
}

pub fn write_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub bacc_pre: f64,
    pub bacc_post: f64,
    pub chance: f64,
}

impl ProbeResult {
    /// Fraction of the above-chance margin removed by harmonization.
    pub fn margin_drop(&self) -> f64 {
        let margin = self.bacc_pre - self.chance;
        if margin <= 0.0 {
            return 0.0;
        }
        (self.bacc_pre - self.bacc_post) / margin
    }
}

/// Multinomial logistic regression on standardized features, fit by full-batch
/// gradient descent with a small ridge penalty.
struct Softmax {
    classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes][features + 1]`, bias last.
    w: Vec<Vec<f64>>,
}

impl Softmax {
    const ITERS: usize = 400;
    const LR: f64 = 0.5;
    const RIDGE: f64 = 1e-3;

    fn fit(x: &[Vec<f64>], y: &[usize], classes: usize) -> Self {
        let f = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..f).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..f)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-12 {
                    1.0 / var.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut model = Self {
            classes,
            mean,
            scale,
            w: vec![vec![0.0; f + 1]; classes],
        };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| model.standardize(r)).collect();
        for _ in 0..Self::ITERS {
            let mut grad = vec![vec![0.0; f + 1]; classes];
            for (xi, &yi) in xs.iter().zip(y) {
                let p = model.probs_std(xi);
                for (k, gk) in grad.iter_mut().enumerate() {
                    let err = p[k] - if k == yi { 1.0 } else { 0.0 };
                    for (g, v) in gk.iter_mut().zip(xi.iter().chain([&1.0])) {
                        *g += err * v / n;
                    }
                }
            }
            for (wk, gk) in model.w.iter_mut().zip(&grad) {
                for (j, (w, g)) in wk.iter_mut().zip(gk).enumerate() {
                    let ridge = if j < f { Self::RIDGE * *w } else { 0.0 };
                    *w -= Self::LR * (g + ridge);
                }
            }
        }
        model
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn probs_std(&self, xi: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .w
            .iter()
            .map(|wk| wk.iter().zip(xi.iter().chain([&1.0])).map(|(w, v)| w * v).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn predict(&self, r: &[f64]) -> usize {
        let p = self.probs_std(&self.standardize(r));
        (0..self.classes).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0)
    }
}

/// Stratified k-fold balanced accuracy of predicting `labels` from `features`.
pub fn cv_balanced_accuracy(features: &[Vec<f64>], labels: &[u32], folds: usize, seed: u64) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::invalid("site probe", "features and labels must be non-empty and aligned"));
    }
    let classes: Vec<u32> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::invalid("site probe", "at least two sites are required"));
    }
    if folds < 2 {
        return Err(Error::invalid("site probe", "at least two folds are required"));
    }
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label listed"))
        .collect();
    let mut rng = Rng::new(seed);
    let mut fold_of = vec![0usize; y.len()];
    for k in 0..classes.len() {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == k).collect();
        rng.shuffle(&mut members);
        for (j, i) in members.into_iter().enumerate() {
            fold_of[i] = j % folds;
        }
    }
    let mut hits = vec![0usize; classes.len()];
    let mut totals = vec![0usize; classes.len()];
    for fold in 0..folds {
        let train: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] != fold).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] == fold).collect();
        if test.is_empty() || train.is_empty() {
            continue;
        }
        let xs: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
        let ys: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let model = Softmax::fit(&xs, &ys, classes.len());
        for &i in &test {
            totals[y[i]] += 1;
            if model.predict(&features[i]) == y[i] {
                hits[y[i]] += 1;
            }
        }
    }
    let recalls: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .filter(|(_, &t)| t > 0)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

pub const PROBE_FOLDS: usize = 5;

/// Site-prediction balanced accuracy on 32-bin histogram features, before and
/// after harmonization. `raw` and `harmonized` hold the same volumes in the
/// same order, labeled by their original site.
pub fn site_probe(raw: &[(&Tensor<f32>, u32)], harmonized: &[(&Tensor<f32>, u32)], seed: u64) -> Result<ProbeResult> {
    if raw.len() != harmonized.len() {
        return Err(Error::invalid("site probe", "raw and harmonized sets differ in size"));
    }
    let run = |set: &[(&Tensor<f32>, u32)]| -> Result<f64> {
        let feats = set
            .iter()
            .map(|(v, _)| histogram(v.data(), PROBE_BINS))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<u32> = set.iter().map(|(_, s)| *s).collect();
        cv_balanced_accuracy(&feats, &labels, PROBE_FOLDS, seed)
    };
    let sites: BTreeSet<u32> = raw.iter().map(|(_, s)| *s).collect();
    Ok(ProbeResult {
        bacc_pre: run(raw)?,
        bacc_post: run(harmonized)?,
        chance: 1.0 / sites.len().max(1) as f64,
    })
}
