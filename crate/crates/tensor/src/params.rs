use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::Tensor;

/// Stable handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Arc<Tensor>,
    grad: Option<Tensor>,
}

/// Named, trainable tensors. Insertion order is preserved and defines the
/// order of checkpoints and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: Arc::new(value),
            grad: None,
        });
        Ok(ParamId(id))
    }

    /// Inserts a tensor drawn from `N(0, std^2)`.
    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// All parameters whose name starts with `prefix`, in insertion order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.id(name)?))
    }

    /// Mutable access; copies the tensor first if a tape still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = self.value(id);
        if current.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set",
                left: current.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    /// Adds `delta` (same element count as the parameter) into its gradient.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let p = &mut self.params[id.0];
        let grad = p
            .grad
            .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (g, d) in grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Adds per-row gradients for an embedding-style gather of `rows`.
    pub fn accumulate_rows(&mut self, id: ParamId, rows: &[usize], delta: &[f64]) {
        let p = &mut self.params[id.0];
        let cols = p.value.cols();
        let grad = p
            .grad
            .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        let g = grad.data_mut();
        for (r, chunk) in rows.iter().zip(delta.chunks_exact(cols)) {
            for (dst, src) in g[r * cols..(r + 1) * cols].iter_mut().zip(chunk) {
                *dst += src;
            }
        }
    }

    /// Adds another store's gradients (same layout) into this one.
    pub fn merge_grads(&mut self, other: &ParamStore) {
        for (i, p) in other.params.iter().enumerate() {
            if let Some(g) = &p.grad {
                self.accumulate_grad(ParamId(i), g.data());
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// `(name, tensor)` pairs in insertion order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), p.value.as_ref()))
    }

    /// Rebuilds a store from named tensors, e.g. a loaded checkpoint.
    pub fn from_named(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut store = Self::new();
        for (name, t) in tensors {
            store.insert(name, t)?;
        }
        Ok(store)
    }

    /// True when both stores hold the same names and bit-identical values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
