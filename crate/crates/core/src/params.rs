//! Named parameter storage and binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, ValueId};

/// Parameters keyed by canonical dotted path (`pgn.0.w_in`, `head.readout`, …),
/// iterated in key order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(key.into(), t);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor<T>> {
        self.tensors.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same keys and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (k, t) in &mut self.tensors {
            let o = other
                .get(k)
                .ok_or_else(|| Error::Data(format!("missing parameter `{k}`")))?;
            if o.shape() != t.shape() {
                return Err(Error::Shape(format!("parameter `{k}` shape {:?} vs {:?}", t.shape(), o.shape())));
            }
            t.add_assign(o);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v * s;
            }
        }
    }

    /// Zeroes every tensor whose key starts with one of `prefixes`.
    pub fn zero_matching(&mut self, prefixes: &[&str]) {
        for (k, t) in &mut self.tensors {
            if prefixes.iter().any(|p| k.starts_with(p)) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Order-sensitive FNV-1a digest over keys and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (k, t) in &self.tensors {
            feed(k.as_bytes());
            for v in t.data() {
                feed(&v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Registers every tensor as a learnable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            ids: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    /// Collects gradients of bound parameters; unreached ones are zero.
    pub fn grads_from(&self, tape: &Tape<T>, bound: &Bound) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    let g = bound
                        .ids
                        .get(k)
                        .and_then(|&id| tape.grad(id).cloned())
                        .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
                    (k.clone(), g)
                })
                .collect(),
        }
    }
}

/// Tape ids of a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    ids: BTreeMap<String, ValueId>,
}

impl Bound {
    pub fn get(&self, key: &str) -> ValueId {
        *self
            .ids
            .get(key)
            .unwrap_or_else(|| panic!("parameter `{key}` not bound"))
    }

    pub fn try_get(&self, key: &str) -> Option<ValueId> {
        self.ids.get(key).copied()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, ValueId)>) -> Self {
        Bound {
            ids: pairs.into_iter().collect(),
        }
    }
}

pub(crate) fn normal<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// `N(0, 1/fan_in)` weights, the fan-in being the row count.
pub(crate) fn lecun<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    normal(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}
