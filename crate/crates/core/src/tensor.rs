//! Named parameter groups and whole-model weight sets.
//!
//! Weights are stored as `f32` (the on-disk dtype) but every arithmetic
//! combination routes through `f64` accumulation and rounds once on store.
//! Groups are the unit of merge arithmetic: per-group angles, norms, and
//! interpolation coefficients all operate on the flattened `data` of one
//! [`TensorGroup`] at a time.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("duplicate group name `{0}`")]
    DuplicateGroup(String),
    #[error("group `{name}`: shape {shape:?} implies {expected} elements, data has {got}")]
    ShapeDataMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("group `{name}`: non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

/// One named, flattened parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorGroup {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        TensorGroup {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An ordered collection of uniquely named groups; the whole model.
///
/// Group order is fixed at construction and preserved by every operation, so
/// two weight sets with equal schemas combine group-by-group without lookup
/// ambiguity and serialization is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    groups: Vec<TensorGroup>,
}

impl WeightSet {
    /// Validates uniqueness, shape/data consistency, and finiteness.
    pub fn new(groups: Vec<TensorGroup>) -> Result<Self, TensorError> {
        let mut seen = BTreeMap::new();
        for (i, g) in groups.iter().enumerate() {
            if seen.insert(g.name.clone(), i).is_some() {
                return Err(TensorError::DuplicateGroup(g.name.clone()));
            }
            let expected: usize = g.shape.iter().product();
            if expected != g.data.len() {
                return Err(TensorError::ShapeDataMismatch {
                    name: g.name.clone(),
                    shape: g.shape.clone(),
                    expected,
                    got: g.data.len(),
                });
            }
            if let Some(index) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    name: g.name.clone(),
                    index,
                });
            }
        }
        Ok(WeightSet { groups })
    }

    pub fn groups(&self) -> &[TensorGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Result<&TensorGroup, TensorError> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| TensorError::UnknownGroup(name.to_string()))
    }

    /// `(name, shape)` pairs in group order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        self.groups
            .iter()
            .map(|g| (g.name.clone(), g.shape.clone()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(|g| g.data.len()).sum()
    }

    /// Errors unless `other` has identical group names and shapes in the
    /// same order.
    pub fn check_same_schema(&self, other: &WeightSet) -> Result<(), TensorError> {
        if self.groups.len() != other.groups.len() {
            return Err(TensorError::SchemaMismatch(format!(
                "{} groups vs {}",
                self.groups.len(),
                other.groups.len()
            )));
        }
        for (a, b) in self.groups.iter().zip(&other.groups) {
            if a.name != b.name {
                return Err(TensorError::SchemaMismatch(format!(
                    "group `{}` vs `{}`",
                    a.name, b.name
                )));
            }
            if a.shape != b.shape {
                return Err(TensorError::SchemaMismatch(format!(
                    "group `{}`: shape {:?} vs {:?}",
                    a.name, a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Pointwise combination of two schema-equal sets. `f` runs in `f64`;
    /// the result is rounded to `f32` once per element.
    pub fn combine2(
        &self,
        other: &WeightSet,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<WeightSet, TensorError> {
        self.check_same_schema(other)?;
        let groups = self
            .groups
            .iter()
            .zip(&other.groups)
            .map(|(a, b)| {
                let data = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(&x, &y)| f(f64::from(x), f64::from(y)) as f32)
                    .collect();
                TensorGroup::new(a.name.clone(), a.shape.clone(), data)
            })
            .collect();
        WeightSet::new(groups)
    }

    /// Per-group L2 norms, accumulated in `f64`.
    pub fn group_norms(&self) -> Vec<(String, f64)> {
        self.groups
            .iter()
            .map(|g| (g.name.clone(), norm_f32(&g.data)))
            .collect()
    }

    /// Whole-model L2 norm.
    pub fn l2_norm(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| norm_sq_f32(&g.data))
            .sum::<f64>()
            .sqrt()
    }

    /// Whole-model L2 distance to a schema-equal set.
    pub fn l2_distance(&self, other: &WeightSet) -> Result<f64, TensorError> {
        self.check_same_schema(other)?;
        let mut acc = 0.0f64;
        for (a, b) in self.groups.iter().zip(&other.groups) {
            for (&x, &y) in a.data.iter().zip(&b.data) {
                let d = f64::from(x) - f64::from(y);
                acc += d * d;
            }
        }
        Ok(acc.sqrt())
    }
}

/// Fixed-order dot product of `f64` slices with four running sums.
///
/// The accumulation order is a constant of the implementation (lane-strided,
/// then lane 0 + 1 + 2 + 3), which keeps results bit-reproducible while still
/// letting the compiler vectorize.
pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0f64;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

pub(crate) fn norm_sq_f32(a: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        for k in 0..4 {
            let v = f64::from(a[j + k]);
            acc[k] += v * v;
        }
    }
    let mut tail = 0.0f64;
    for &x in &a[chunks * 4..] {
        let v = f64::from(x);
        tail += v * v;
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

pub(crate) fn norm_f32(a: &[f32]) -> f64 {
    norm_sq_f32(a).sqrt()
}
