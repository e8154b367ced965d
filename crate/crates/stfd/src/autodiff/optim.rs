use std::collections::HashMap;

use indexmap::IndexMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Ordered collection of named tensors. Iteration order is insertion
/// order, which makes checkpoints and optimizer sweeps deterministic.
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn zero_grads(&self) {
        for t in self.entries.values() {
            t.zero_grad();
        }
    }

    /// Deep copy of all values (gradients are not copied).
    pub fn snapshot(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape(), t.to_vec()))
            .collect()
    }

    pub fn restore(&self, snap: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        for (name, _, data) in snap {
            self.get(name)?.set_data(data.clone())?;
        }
        Ok(())
    }
}

/// Adam with bias correction. Per-parameter moment state is keyed by
/// parameter name and lives for the duration of one training run.
pub struct Adam<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
    m: HashMap<String, Vec<T>>,
    v: HashMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over every `requires_grad` tensor in the store.
    pub fn step(&mut self, params: &ParamStore<T>) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (name, p) in params.iter() {
            if !p.requires_grad() {
                continue;
            }
            let g = p
                .grad()
                .ok_or_else(|| Error::Usage(format!("adam_step: parameter `{name}` has no gradient")))?;
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let mut data = p.to_vec();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// Kaiming-uniform fan-in initialization: U(-b, b), b = sqrt(6 / fan_in).
pub fn kaiming_uniform<T: Scalar>(rng: &mut SplitMix64, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.uniform_range(-bound, bound)))
        .collect();
    Tensor::param(shape, data).expect("shape/data length agree by construction")
}
