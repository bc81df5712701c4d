//! Named parameter collections and initialization.

use rand::Rng;

use super::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<R: Real> {
    pub name: String,
    pub value: Tensor<R>,
    /// Whether weight decay applies (false for norms, biases and mask tokens).
    pub decay: bool,
}

/// Ordered list of named tensors; a parameter's position is its index in the
/// autodiff graph.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<R: Real> {
    entries: Vec<Param<R>>,
}

impl<R: Real> Params<R> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<R>, decay: bool) -> usize {
        self.entries.push(Param { name: name.into(), value, decay });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param<R> {
        &self.entries[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param<R> {
        &mut self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<R>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.entries.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<R>> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<S: Real>(&self) -> Params<S> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), decay: p.decay })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.all_finite())
    }

    /// FNV-1a hash over the bit patterns of every value, for change detection.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.entries {
            for v in p.value.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform<R: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<R> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| R::of(rng.gen_range(-bound..=bound))).collect())
}

/// He-uniform bound for ReLU layers.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Glorot-uniform bound.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
