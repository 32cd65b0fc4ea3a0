//! Central finite-difference gradient checker.
//!
//! Only ever evaluates forward passes for its reference values, so it stays
//! independent of the backward rules it verifies.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Entries with `max(|analytic|, |numeric|)` below this floor are compared
/// against the floor instead, so near-zero gradients do not blow up the ratio.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Compares backward-pass gradients of the scalar `f(inputs)` against
/// central differences with step `h`. At most `samples` randomly chosen
/// entries per input are probed (all of them when `None`).
pub fn check<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    samples: Option<usize>,
    rng: &mut Rng,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..input.numel()).collect();
        if let Some(n) = samples {
            rng.shuffle(&mut idx);
            idx.truncate(n);
        }
        for j in idx {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe, &f)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe, &f)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e >= report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}
