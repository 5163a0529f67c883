//! Named dense tensors and the arithmetic every other module is built on.
//!
//! Storage is `f32`; every reduction (norms, inner products) accumulates in
//! `f64`. A [`TensorMap`] iterates its entries in lexicographic name order,
//! which fixes the summation order of every multi-tensor reduction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// A 1-D or 2-D row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::InvalidTensor(format!(
                "only 1-D and 2-D tensors are supported, got rank {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count; a 1-D tensor is treated as a single row.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor rank is at least 1")
    }

    /// Bitwise equality of shape and payload (distinguishes `0.0` from `-0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }
}

/// Ordered collection of named tensors plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidTensor(format!("duplicate tensor name `{name}`")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Replaces the tensor stored under an existing name.
    pub(crate) fn replace(&mut self, name: &str, tensor: Tensor) {
        let slot = self.entries.get_mut(name).expect("replace targets an existing name");
        *slot = tensor;
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    /// Looks up a tensor, failing with a structural-mismatch error naming it.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::mismatch(name, "tensor is missing"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all zeros, no metadata.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
            metadata: BTreeMap::new(),
        }
    }

    /// Checks that `other` has exactly the same names and per-name shapes.
    pub fn check_same_structure(&self, other: &TensorMap) -> Result<()> {
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                None => return Err(Error::mismatch(name, "missing from second operand")),
                Some(o) if o.shape != t.shape => {
                    return Err(Error::mismatch(
                        name,
                        format!("shape {:?} vs {:?}", t.shape, o.shape),
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::mismatch(extra, "missing from first operand"));
        }
        Ok(())
    }

    /// Bitwise equality of every tensor (metadata ignored).
    pub fn bit_eq(&self, other: &TensorMap) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .all(|(k, t)| other.entries.get(k).is_some_and(|o| t.bit_eq(o)))
    }

    /// Largest absolute entry over all tensors.
    pub fn max_abs(&self) -> f32 {
        self.entries
            .values()
            .flat_map(|t| t.data.iter())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }

    fn zip_map(
        &self,
        other: &TensorMap,
        mut f: impl FnMut(f32, f32) -> f32,
    ) -> Result<TensorMap> {
        self.check_same_structure(other)?;
        let entries = self
            .entries
            .iter()
            .map(|(name, x)| {
                let y = &other.entries[name];
                let data = x.data.iter().zip(&y.data).map(|(&a, &b)| f(a, b)).collect();
                (
                    name.clone(),
                    Tensor {
                        shape: x.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        Ok(TensorMap {
            entries,
            metadata: BTreeMap::new(),
        })
    }
}

impl FromIterator<(String, Tensor)> for TensorMap {
    /// Later duplicates overwrite earlier ones; use [`TensorMap::insert`] to reject them.
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
            metadata: BTreeMap::new(),
        }
    }
}

/// `a·x + y`, elementwise.
pub fn axpy(a: f32, x: &TensorMap, y: &TensorMap) -> Result<TensorMap> {
    if a == 0.0 {
        x.check_same_structure(y)?;
        let mut out = y.clone();
        out.metadata.clear();
        return Ok(out);
    }
    x.zip_map(y, |xv, yv| a * xv + yv)
}

/// `x − y`, elementwise.
pub fn sub(x: &TensorMap, y: &TensorMap) -> Result<TensorMap> {
    x.zip_map(y, |a, b| a - b)
}

/// `x + y`, elementwise.
pub fn add(x: &TensorMap, y: &TensorMap) -> Result<TensorMap> {
    x.zip_map(y, |a, b| a + b)
}

/// `a·x`, elementwise.
pub fn scale(a: f32, x: &TensorMap) -> TensorMap {
    TensorMap {
        entries: x
            .entries
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data: t.data.iter().map(|v| a * v).collect(),
                    },
                )
            })
            .collect(),
        metadata: BTreeMap::new(),
    }
}

/// Frobenius inner product, accumulated in `f64`.
pub fn dot(x: &TensorMap, y: &TensorMap) -> Result<f64> {
    x.check_same_structure(y)?;
    Ok(x
        .entries
        .iter()
        .map(|(name, t)| {
            t.data
                .iter()
                .zip(&y.entries[name].data)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum::<f64>()
        })
        .sum())
}

pub fn frobenius_norm(x: &TensorMap) -> f64 {
    x.entries.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Cosine similarity `⟨x,y⟩ / (‖x‖‖y‖)`, clamped to `[-1, 1]`.
pub fn cosine(x: &TensorMap, y: &TensorMap) -> Result<f64> {
    let inner = dot(x, y)?;
    let nx = frobenius_norm(x);
    let ny = frobenius_norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine of a zero-norm tensor map is undefined".into(),
        ));
    }
    Ok((inner / (nx * ny)).clamp(-1.0, 1.0))
}

/// Number of elements where `x − y` is not exactly representable in `f32`,
/// i.e. where `y + (x − y)` may not reproduce `x` bit-exactly.
pub fn inexact_difference_count(x: &TensorMap, y: &TensorMap) -> Result<usize> {
    x.check_same_structure(y)?;
    Ok(x.entries
        .iter()
        .map(|(name, t)| {
            t.data
                .iter()
                .zip(&y.entries[name].data)
                .filter(|(&a, &b)| f64::from(a - b) != f64::from(a) - f64::from(b))
                .count()
        })
        .sum())
}
