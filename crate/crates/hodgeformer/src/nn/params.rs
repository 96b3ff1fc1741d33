//! Named parameter tensors, their initialization, binding onto tapes,
//! batch-gradient accumulation, and the Adam optimizer with cosine annealing.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Scalar, Tape, Tensor};

/// How a parameter tensor is filled at registration time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))` with fan_in = row count.
    UniformFanIn,
    /// All zeros (biases; output projections, so layers start as identities).
    Zero,
}

/// Handle into a [`ParamStore`]; indexes the registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Param(pub(crate) usize);

struct Entry<T> {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

/// Owns every trainable tensor of a model, keyed by a unique name. The
/// registration order is the canonical parameter order used by tape binding,
/// gradient accumulation, optimizer state, and checkpoints.
pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> ParamStore<T> {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Param {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let values = match init {
            Init::UniformFanIn => {
                let bound = 1.0 / (rows as f64).sqrt();
                (0..rows * cols)
                    .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                    .collect()
            }
            Init::Zero => vec![T::zero(); rows * cols],
        };
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            rows,
            cols,
            values,
        });
        Param(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn params(&self) -> impl ExactSizeIterator<Item = Param> + '_ {
        (0..self.entries.len()).map(Param)
    }

    pub fn name(&self, p: Param) -> &str {
        &self.entries[p.0].name
    }

    pub fn shape(&self, p: Param) -> (usize, usize) {
        (self.entries[p.0].rows, self.entries[p.0].cols)
    }

    pub fn values(&self, p: Param) -> &[T] {
        &self.entries[p.0].values
    }

    pub fn values_mut(&mut self, p: Param) -> &mut [T] {
        &mut self.entries[p.0].values
    }

    pub fn find(&self, name: &str) -> Option<Param> {
        self.by_name.get(name).copied().map(Param)
    }

    /// Copies every parameter onto a tape as a leaf. `trainable` controls
    /// whether gradients flow back to them (trainable for training, frozen
    /// for evaluation-only passes).
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let tensors = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.rows, e.cols, e.values.clone(), trainable))
            .collect();
        Bound { tensors }
    }
}

/// Tape handles for every parameter of one store, in registration order.
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn t(&self, p: Param) -> Tensor {
        self.tensors[p.0]
    }
}

/// Per-parameter gradient buffers accumulated across the meshes of a batch.
/// Accumulation order is the caller's iteration order, which keeps batch
/// reduction deterministic.
pub struct GradAccum<T: Scalar> {
    bufs: Vec<Vec<T>>,
}

impl<T: Scalar> GradAccum<T> {
    pub fn zeros(store: &ParamStore<T>) -> GradAccum<T> {
        GradAccum {
            bufs: store
                .entries
                .iter()
                .map(|e| vec![T::zero(); e.values.len()])
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for buf in &mut self.bufs {
            buf.fill(T::zero());
        }
    }

    /// Adds the gradients one tape produced for the bound parameters.
    pub fn accumulate(&mut self, bound: &Bound, grads: &mut Gradients<T>) {
        for (buf, &tensor) in self.bufs.iter_mut().zip(&bound.tensors) {
            if let Some(g) = grads.take(tensor) {
                for (o, x) in buf.iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
    }

    /// Merges another accumulator (used for ordered cross-worker reduction).
    pub fn merge(&mut self, other: &GradAccum<T>) {
        for (buf, src) in self.bufs.iter_mut().zip(&other.bufs) {
            for (o, &x) in buf.iter_mut().zip(src) {
                *o += x;
            }
        }
    }

    pub fn get(&self, p: Param) -> &[T] {
        &self.bufs[p.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|&g| g.to_f64() * g.to_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Adam with bias correction (β1=0.9, β2=0.999, ε=1e-8 by default).
pub struct Adam<T: Scalar> {
    pub(crate) m: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
    pub(crate) t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Adam<T> {
        Adam {
            m: store
                .entries
                .iter()
                .map(|e| vec![T::zero(); e.values.len()])
                .collect(),
            v: store
                .entries
                .iter()
                .map(|e| vec![T::zero(); e.values.len()])
                .collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradAccum<T>, lr: f64) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        for (idx, entry) in store.entries.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (((p, &g), m), v) in entry
                .values
                .iter_mut()
                .zip(&grads.bufs[idx])
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Cosine annealing from `lr_max` (step 0) down to `lr_min` (final step).
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let frac = (step as f64 / total_steps as f64).clamp(0.0, 1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
