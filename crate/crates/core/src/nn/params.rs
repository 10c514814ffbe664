use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Normal(f64),
}

/// Named parameter tensors. Initial values depend only on the store seed and
/// the parameter name, never on registration order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let value = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a).expect("valid bounds");
                Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
            }
        };
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copies values from `other` by name; both stores must hold the same
    /// names with the same shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, value) in other.names.iter().zip(&other.values) {
            self.set(name, value.clone())?;
        }
        Ok(())
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.values[id.0].dim() != value.dim() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                self.values[id.0].dim(),
                value.dim()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// Stable 64-bit FNV-1a hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Sparse gradient buffers paired with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn empty(store: &ParamStore) -> Self {
        Grads {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: Array2<f64>) {
        match &mut self.grads[id.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Value of the gradient at one scalar position; zero when the parameter
    /// received no gradient.
    pub fn scalar(&self, id: ParamId, row: usize, col: usize) -> f64 {
        self.grads[id.0].as_ref().map_or(0.0, |g| g[[row, col]])
    }

    pub(crate) fn slots(&self) -> &[Option<Array2<f64>>] {
        &self.grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(7);
        a.add("x", 3, 3, Init::Xavier);
        a.add("y", 2, 2, Init::Normal(0.1));
        let mut b = ParamStore::new(7);
        b.add("y", 2, 2, Init::Normal(0.1));
        b.add("x", 3, 3, Init::Xavier);
        assert_eq!(a.value(a.id("x").unwrap()), b.value(b.id("x").unwrap()));
        assert_eq!(a.value(a.id("y").unwrap()), b.value(b.id("y").unwrap()));
    }

    #[test]
    fn set_rejects_wrong_shape() {
        let mut a = ParamStore::new(0);
        a.add("x", 2, 2, Init::Zeros);
        assert!(a.set("x", Array2::zeros((3, 2))).is_err());
        assert!(a.set("nope", Array2::zeros((2, 2))).is_err());
    }
}
