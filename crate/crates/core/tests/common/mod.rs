#![allow(dead_code)]

use std::io::Write;

use hcld::Result;
use tensorlab::{Graph, ParamStore, Rng, Tensor, Var};

/// Entries whose gradients are both below this are compared against it.
pub const FD_FLOOR: f64 = 1e-2;
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct Fd {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Central differences over entries of every parameter in `store`, at most
/// `per_param` randomly chosen entries each, compared with the backward pass.
pub fn fd_store<F>(store: &ParamStore<f64>, per_param: usize, rng: &mut Rng, f: F) -> Result<Fd>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let analytic: std::collections::HashMap<String, Tensor<f64>> =
        g.param_grads().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };
    let mut work = store.clone();
    let mut out = Fd::default();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let base = store.get(&name)?.clone();
        let zeros = Tensor::zeros(base.shape());
        let grad = analytic.get(&name).unwrap_or(&zeros);
        let mut idx: Vec<usize> = (0..base.numel()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(per_param);
        for j in idx {
            let mut p = base.clone();
            p.data_mut()[j] += FD_STEP;
            work.set(&name, p)?;
            let plus = eval(&work)?;
            let mut m = base.clone();
            m.data_mut()[j] -= FD_STEP;
            work.set(&name, m)?;
            let minus = eval(&work)?;
            work.set(&name, base.clone())?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            out.checked += 1;
            if rel >= out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{name}[{j}] analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    Ok(out)
}

pub fn store_of(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(*n, t.clone()).unwrap();
    }
    s
}

/// Merges `extra` into a copy of `base`.
pub fn with(base: &ParamStore<f64>, extra: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = base.clone();
    for (n, t) in extra {
        s.insert(*n, t.clone()).unwrap();
    }
    s
}

/// Weighted sum with fixed random weights, so each output element carries a
/// distinct upstream gradient.
pub fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(Tensor::randn(g.shape(y), &mut Rng::new(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Writes straight to the process stdout so the line survives test capture.
pub fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn channel_stats(data: &[f64], channels: usize) -> Vec<(f64, f64)> {
    let n = data.len() / channels;
    (0..channels)
        .map(|c| {
            let xs = &data[c * n..(c + 1) * n];
            let mut mean = 0.0;
            for x in xs {
                mean += x;
            }
            mean /= n as f64;
            let mut var = 0.0;
            for x in xs {
                var += (x - mean) * (x - mean);
            }
            (mean, (var / n as f64).sqrt())
        })
        .collect()
}
