use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor};
use super::NnError;

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub(crate) m: Option<Tensor<T>>,
    pub(crate) v: Option<Tensor<T>>,
}

/// Named parameters in insertion order, with gradients and AdamW moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
    pub(crate) step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                value,
                grad: None,
                m: None,
                v: None,
            },
        );
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Set every gradient buffer to zeros of the parameter's shape.
    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = Some(Tensor::zeros(e.value.shape()));
        }
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    /// True when no gradient buffer has ever been allocated.
    pub fn grads_untouched(&self) -> bool {
        self.entries.values().all(|e| e.grad.is_none())
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[T]) -> Result<(), NnError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if g.len() != e.value.len() {
            return Err(NnError::Shape(format!("gradient for {name}")));
        }
        let shape = e.value.shape().to_vec();
        let buf = e.grad.get_or_insert_with(|| Tensor::zeros(&shape));
        for (x, &y) in buf.data_mut().iter_mut().zip(g) {
            *x = *x + y;
        }
        Ok(())
    }

    /// Multiply every gradient by `s` (e.g. to average over workers).
    pub fn scale_grads(&mut self, s: T) {
        for e in self.entries.values_mut() {
            if let Some(g) = e.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }

    /// Flattened copy of all gradients in store order (missing ones as zeros).
    pub fn flat_grads(&self) -> Vec<T> {
        self.entries
            .values()
            .flat_map(|e| match &e.grad {
                Some(g) => g.data().to_vec(),
                None => vec![T::zero(); e.value.len()],
            })
            .collect()
    }

    /// Same names and shapes, values cast to another precision; optimizer state dropped.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            out.insert(name.clone(), e.value.cast());
        }
        out
    }

    /// Values-only copy.
    pub fn detached(&self) -> Self {
        self.cast()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ea), (b, eb))| a == b && ea.value.shape() == eb.value.shape())
    }

    /// L2 distance between two stores with the same layout.
    pub fn distance(&self, other: &Self) -> Result<f64, NnError> {
        if !self.same_layout(other) {
            return Err(NnError::Layout("distance between mismatched stores".into()));
        }
        let mut acc = 0.0;
        for (a, b) in self.entries.values().zip(other.entries.values()) {
            for (&x, &y) in a.value.data().iter().zip(b.value.data()) {
                let d = x.f64() - y.f64();
                acc += d * d;
            }
        }
        Ok(acc.sqrt())
    }
}

/// Truncated normal (resampled beyond two standard deviations).
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break T::c(x);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::c(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
