//! Non-learning intensity normalizations: min-max, z-score and piecewise
//! linear histogram matching.

use serde::{Deserialize, Serialize};
use tensorlab::Tensor;

use crate::error::{Error, Result};
use crate::metrics::{quantile, FOREGROUND};

/// `(v - min) / (max - min)`; a constant volume maps to zeros.
pub fn minmax(v: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = v
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| {
            (l.min(f64::from(x)), h.max(f64::from(x)))
        });
    if !(hi > lo) {
        return Tensor::zeros(v.shape());
    }
    v.map(|x| ((f64::from(x) - lo) / (hi - lo)) as f32)
}

#[derive(Clone, Debug)]
pub struct ZScored {
    /// Standardized values (foreground mean 0, sd 1).
    pub z: Tensor<f32>,
    /// Stored volume `z * scale + shift`, spanning `[0, 1]`.
    pub stored: Tensor<f32>,
    pub scale: f64,
    pub shift: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Standardizes by the statistics of foreground voxels (`> 0.01`).
pub fn zscore(v: &Tensor<f32>) -> Result<ZScored> {
    let fg: Vec<f64> = v
        .data()
        .iter()
        .map(|&x| f64::from(x))
        .filter(|&x| x > FOREGROUND)
        .collect();
    if fg.is_empty() {
        return Err(Error::invalid("z-score", "volume has no foreground voxels"));
    }
    let n = fg.len() as f64;
    let mean = fg.iter().sum::<f64>() / n;
    let sd = (fg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let z = if sd > 0.0 {
        v.map(|x| ((f64::from(x) - mean) / sd) as f32)
    } else {
        Tensor::zeros(v.shape())
    };
    let (lo, hi) = z
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| {
            (l.min(f64::from(x)), h.max(f64::from(x)))
        });
    let (scale, shift) = if hi > lo { (1.0 / (hi - lo), -lo / (hi - lo)) } else { (0.0, 0.0) };
    let stored = z.map(|x| (f64::from(x) * scale + shift) as f32);
    Ok(ZScored {
        z,
        stored,
        scale,
        shift,
        mean,
        sd,
    })
}

/// Percent levels of the landmarks: 1, 10, 20, ..., 90, 99.
pub const LANDMARK_PERCENTS: [f64; 11] = [1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramLandmarks {
    pub percents: Vec<f64>,
    pub values: Vec<f64>,
}

fn foreground_sorted(v: &[f32]) -> Vec<f64> {
    let mut fg: Vec<f64> = v.iter().map(|&x| f64::from(x)).filter(|&x| x > FOREGROUND).collect();
    fg.sort_by(f64::total_cmp);
    fg
}

impl HistogramLandmarks {
    /// Landmarks of the pooled foreground intensities of `volumes`.
    pub fn learn(volumes: &[&Tensor<f32>]) -> Result<Self> {
        let pooled: Vec<f32> = volumes.iter().flat_map(|v| v.data().iter().copied()).collect();
        let fg = foreground_sorted(&pooled);
        if fg.is_empty() {
            return Err(Error::invalid("landmarks", "reference volumes have no foreground"));
        }
        Ok(Self {
            percents: LANDMARK_PERCENTS.to_vec(),
            values: LANDMARK_PERCENTS.iter().map(|p| quantile(&fg, p / 100.0)).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.percents.len() || self.values.len() < 2 {
            return Err(Error::invalid("landmarks", "need at least two aligned anchors"));
        }
        if self.values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("landmarks", "anchor values must be non-decreasing"));
        }
        Ok(())
    }
}

fn interp(x: f64, xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    // Extrapolate linearly with the end segments.
    let seg = if x <= xs[0] {
        0
    } else if x >= xs[n - 1] {
        n - 2
    } else {
        xs.partition_point(|&v| v <= x).saturating_sub(1).min(n - 2)
    };
    let (x0, x1, y0, y1) = (xs[seg], xs[seg + 1], ys[seg], ys[seg + 1]);
    if x1 > x0 {
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    } else {
        0.5 * (y0 + y1)
    }
}

/// Maps the volume's own foreground percentiles onto `landmarks` piecewise
/// linearly. Background voxels stay untouched; output is clamped to `[0, 1]`.
pub fn histogram_match(v: &Tensor<f32>, landmarks: &HistogramLandmarks) -> Result<Tensor<f32>> {
    landmarks.validate()?;
    let fg = foreground_sorted(v.data());
    if fg.is_empty() {
        return Err(Error::invalid("histogram match", "volume has no foreground voxels"));
    }
    let own: Vec<f64> = landmarks.percents.iter().map(|p| quantile(&fg, p / 100.0)).collect();
    Ok(v.map(|x| {
        let x = f64::from(x);
        if x <= FOREGROUND {
            return x as f32;
        }
        interp(x, &own, &landmarks.values).clamp(0.0, 1.0) as f32
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    None,
    Minmax,
    Zscore,
    Histmatch,
    Hcld,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Minmax => "minmax",
            Method::Zscore => "zscore",
            Method::Histmatch => "histmatch",
            Method::Hcld => "hcld",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Method::None,
            "minmax" => Method::Minmax,
            "zscore" => Method::Zscore,
            "histmatch" => Method::Histmatch,
            "hcld" => Method::Hcld,
            other => {
                return Err(Error::invalid(
                    "method",
                    format!("`{other}` (expected minmax, zscore, histmatch or hcld)"),
                ))
            }
        })
    }
}
