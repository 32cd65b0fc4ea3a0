//! Named trainable arrays and the adaptive-moment optimizer.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::graph::Graph;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param<T> {
    value: Arc<Tensor<T>>,
    grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }
}

/// Ordered collection of named parameters with gradient slots.
///
/// A frozen store hands out leaves that never receive gradients and refuses
/// optimizer updates.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real = f32> {
    entries: IndexMap<String, Param<T>>,
    frozen: bool,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
            frozen: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(
            name,
            Param {
                value: Arc::new(value),
                grad,
            },
        );
        Ok(())
    }

    /// Uniform init in `±1/sqrt(fan_in)`.
    pub fn insert_fan_in(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &*p.value)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub(crate) fn shared(&self, name: &str) -> Result<Arc<Tensor<T>>> {
        self.entries
            .get(name)
            .map(|p| Arc::clone(&p.value))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Replaces a value in place, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        p.value.expect_shape("set", value.shape())?;
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    /// Adds the parameter-leaf gradients of a finished backward pass.
    pub fn accumulate(&mut self, graph: &Graph<T>) -> Result<()> {
        for (name, g) in graph.param_grads() {
            if let Some(p) = self.entries.get_mut(name) {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self
            .entries
            .values()
            .flat_map(|p| p.grad.data())
            .map(|g| g.as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = T::lit(max_norm / norm);
            for p in self.entries.values_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: Arc::new(p.value.cast()),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
            frozen: self.frozen,
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn same_values(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update from the accumulated gradients. Gradients are left intact.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.frozen {
            return Err(TensorError::invalid("adam", "parameter store is frozen"));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in store.entries.iter_mut() {
            let n = p.grad.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let value = Arc::make_mut(&mut p.value);
            for (((w, g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g.as_f64();
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w = T::lit(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Halves the learning rate after `patience` epochs without improvement.
#[derive(Clone, Debug)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: f64,
    stale: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feeds one epoch's monitored value; returns the new learning rate.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale > self.patience {
            self.stale = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}
