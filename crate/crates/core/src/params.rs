//! Named trainable parameters and their accumulated gradients.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{math, Error, Result};

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    path: String,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Map from unique parameter path to tensor. Insertion order is kept so that
/// iteration, serialization and reductions are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(Error::contract(alloc::format!("duplicate parameter path `{path}`")));
        }
        let id = self.entries.len();
        self.index.insert(path.clone(), id);
        self.entries.push(Entry {
            path,
            value,
            grad: None,
        });
        Ok(ParamId(id))
    }

    /// Gaussian init with standard deviation `std`.
    pub fn insert_normal(
        &mut self,
        path: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut RngStream,
    ) -> Result<ParamId> {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        self.insert(path, Tensor::matrix(rows, cols, data)?)
    }

    /// Weight matrix with fan-in scaled init `N(0, 1/rows)`.
    pub fn insert_linear(&mut self, path: &str, rows: usize, cols: usize, rng: &mut RngStream) -> Result<ParamId> {
        self.insert_normal(path, rows, cols, 1.0 / math::sqrt(rows as f64), rng)
    }

    /// Fan-in scaled init drawn from a substream of `base` keyed by `path`,
    /// so the values do not depend on creation order.
    pub fn insert_linear_keyed(&mut self, path: &str, rows: usize, cols: usize, base: &RngStream) -> Result<ParamId> {
        self.insert_linear(path, rows, cols, &mut base.substream_named(path))
    }

    pub fn insert_normal_keyed(
        &mut self,
        path: &str,
        rows: usize,
        cols: usize,
        std: f64,
        base: &RngStream,
    ) -> Result<ParamId> {
        self.insert_normal(path, rows, cols, std, &mut base.substream_named(path))
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).map(|&i| ParamId(i))
    }

    pub fn require(&self, path: &str) -> Result<ParamId> {
        self.id(path)
            .ok_or_else(|| Error::contract(alloc::format!("missing parameter `{path}`")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.index.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.id(path).map(|id| &self.entries[id.0].value)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        let id = self.id(path)?;
        Some(&mut self.entries[id.0].value)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.entries[id.0].path
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn grad_by_path(&self, path: &str) -> Option<&Tensor> {
        self.id(path).and_then(|id| self.grad(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.path.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Scalar parameter count of every path starting with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.path.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Add `g` to the gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let e = &mut self.entries[id.0];
        match &mut e.grad {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                let mut t = e.value.clone();
                t.data_mut().copy_from_slice(g);
                e.grad = Some(t);
            }
        }
    }

    /// Multiply every accumulated gradient by `s`.
    pub fn scale_grads(&mut self, s: f64) {
        for e in &mut self.entries {
            if let Some(g) = &mut e.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .entries
            .iter()
            .filter_map(|e| e.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum();
        math::sqrt(sq)
    }

    /// Copy values from `other` for every path both stores share.
    pub fn copy_values_from(&mut self, other: &ParameterStore) {
        for e in &mut self.entries {
            if let Some(v) = other.get(&e.path) {
                if v.shape() == e.value.shape() {
                    e.value = v.clone();
                }
            }
        }
    }

    pub fn paths(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.path.to_string()).collect()
    }
}
