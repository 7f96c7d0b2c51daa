use std::collections::BTreeMap;
use std::sync::Arc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors plus AdamW moment buffers.
///
/// Names iterate in sorted order, which fixes the serialization order.
/// Values sit behind `Arc` so binding them to a tape is a pointer copy; an
/// optimizer step copies-on-write only if a tape still holds the old value.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    values: BTreeMap<String, Arc<Tensor>>,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(Error::KeyMismatch(format!("duplicate parameter {name}")));
        }
        self.first_moment.insert(name.clone(), Tensor::zeros(value.shape()));
        self.second_moment.insert(name.clone(), Tensor::zeros(value.shape()));
        self.values.insert(name, Arc::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name).map(|v| v.as_ref())
    }

    pub fn shared(&self, name: &str) -> Option<Arc<Tensor>> {
        self.values.get(name).cloned()
    }

    /// Binds a parameter to the tape as a named leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Var {
        let value = self.values.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        tape.param(name, Arc::clone(value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name).map(Arc::make_mut)
    }

    /// Same names and shapes, bitwise-equal values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    /// Copy of the values only, with fresh optimizer state.
    pub fn snapshot(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in &self.values {
            out.insert(k.clone(), v.as_ref().clone()).expect("unique names");
        }
        out
    }

    /// One decoupled-weight-decay Adam update.
    pub fn adamw_step(&mut self, grads: &BTreeMap<String, Tensor>, opt: &AdamW) -> Result<()> {
        if grads.len() != self.values.len() || grads.keys().zip(self.values.keys()).any(|(a, b)| a != b) {
            let missing: Vec<_> = self.values.keys().filter(|k| !grads.contains_key(*k)).collect();
            let extra: Vec<_> = grads.keys().filter(|k| !self.values.contains_key(*k)).collect();
            return Err(Error::KeyMismatch(format!("missing {missing:?}, unexpected {extra:?}")));
        }
        for (name, g) in grads {
            if g.shape() != self.values[name].shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    shapes: vec![self.values[name].shape().to_vec(), g.shape().to_vec()],
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adamw" });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for (name, g) in grads {
            let m = self.first_moment.get_mut(name).unwrap().data_mut();
            let v = self.second_moment.get_mut(name).unwrap().data_mut();
            let w = Arc::make_mut(self.values.get_mut(name).unwrap()).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= opt.lr * (mhat / (vhat.sqrt() + opt.eps) + opt.weight_decay * w[i]);
            }
        }
        Ok(())
    }
}

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}
