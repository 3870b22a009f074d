//! Merge operators over weight sets.
//!
//! All operators act per parameter group and compute in `f64`, rounding to
//! `f32` storage once per element. Interpolation endpoints short-circuit to
//! clones of the inputs so `lambda = 0` and `lambda = 1` are bit-exact, not
//! merely close.
//!
//! Spherical interpolation works on *task vectors* — differences from a
//! shared initialization — with one rotation angle per group:
//!
//! ```text
//! slerp(init, a, b, L):  out = init + sin((1-L)*W)/sin(W) * d1
//!                                   + sin(L*W)/sin(W)     * d2
//!        where d1 = a - init, d2 = b - init, cos(W) = <d1,d2>/(|d1||d2|)
//! ```
//!
//! When the task vectors of a group are (anti-)collinear or one of them is
//! numerically zero, `sin(W)` is unusable and the group falls back to linear
//! interpolation of the same coefficients; the fallback is surfaced in the
//! angle report rather than hidden.

use crate::tensor::{dot_f64, TensorError, TensorGroup, WeightSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this L2 norm a task vector counts as zero for angle purposes.
pub const NORM_EPS: f64 = 1e-12;
/// `|cos W|` above this triggers the collinear LERP fallback.
pub const COLLINEAR_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("lambda {lambda} outside [{lo}, {hi}]")]
    LambdaOutOfRange { lambda: f64, lo: f64, hi: f64 },
    #[error("eta {eta} outside [{lo}, {hi}]")]
    EtaOutOfRange { eta: f64, lo: f64, hi: f64 },
    #[error("ema rate mu {0} outside [0, 1]")]
    MuOutOfRange(f64),
    #[error("slerpm needs at least one model")]
    EmptyModelList,
}

/// A task vector: per-group `theta - init` held in `f64` so that
/// `init + delta` reproduces `theta` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub groups: Vec<TaskVectorGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVectorGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TaskVector {
    pub fn group_norms(&self) -> Vec<(String, f64)> {
        self.groups
            .iter()
            .map(|g| (g.name.clone(), dot_f64(&g.data, &g.data).sqrt()))
            .collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| dot_f64(&g.data, &g.data))
            .sum::<f64>()
            .sqrt()
    }
}

/// `theta - init`, group by group.
pub fn task_vector(init: &WeightSet, theta: &WeightSet) -> Result<TaskVector, MergeError> {
    init.check_same_schema(theta)?;
    let groups = init
        .groups()
        .iter()
        .zip(theta.groups())
        .map(|(i, t)| TaskVectorGroup {
            name: i.name.clone(),
            shape: i.shape.clone(),
            data: i
                .data
                .iter()
                .zip(&t.data)
                .map(|(&a, &b)| f64::from(b) - f64::from(a))
                .collect(),
        })
        .collect();
    Ok(TaskVector { groups })
}

/// `init + delta`. Exact inverse of [`task_vector`] for finite weights.
pub fn apply_task_vector(init: &WeightSet, delta: &TaskVector) -> Result<WeightSet, MergeError> {
    if init.groups().len() != delta.groups.len() {
        return Err(TensorError::SchemaMismatch(format!(
            "{} groups vs {}",
            init.groups().len(),
            delta.groups.len()
        ))
        .into());
    }
    let mut groups = Vec::with_capacity(delta.groups.len());
    for (i, d) in init.groups().iter().zip(&delta.groups) {
        if i.name != d.name || i.shape != d.shape {
            return Err(TensorError::SchemaMismatch(format!(
                "group `{}` {:?} vs `{}` {:?}",
                i.name, i.shape, d.name, d.shape
            ))
            .into());
        }
        let data = i
            .data
            .iter()
            .zip(&d.data)
            .map(|(&a, &b)| (f64::from(a) + b) as f32)
            .collect();
        groups.push(TensorGroup::new(i.name.clone(), i.shape.clone(), data));
    }
    Ok(WeightSet::new(groups)?)
}

fn lerp_unchecked(a: &WeightSet, b: &WeightSet, lambda: f64) -> Result<WeightSet, MergeError> {
    if lambda == 0.0 {
        a.check_same_schema(b)?;
        return Ok(a.clone());
    }
    if lambda == 1.0 {
        a.check_same_schema(b)?;
        return Ok(b.clone());
    }
    Ok(a.combine2(b, |x, y| (1.0 - lambda) * x + lambda * y)?)
}

/// Linear interpolation `(1-lambda)*a + lambda*b`, `lambda` in `[0, 1]`.
pub fn lerp(a: &WeightSet, b: &WeightSet, lambda: f64) -> Result<WeightSet, MergeError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MergeError::LambdaOutOfRange {
            lambda,
            lo: 0.0,
            hi: 1.0,
        });
    }
    lerp_unchecked(a, b, lambda)
}

/// Linear interpolation extended to `lambda` in `[-1, 2]` for extrapolation
/// studies. Deliberately a separate entry point: ordinary call sites keep
/// the tight `[0, 1]` validation.
pub fn lerp_extrapolate(
    a: &WeightSet,
    b: &WeightSet,
    lambda: f64,
) -> Result<WeightSet, MergeError> {
    if !(-1.0..=2.0).contains(&lambda) {
        return Err(MergeError::LambdaOutOfRange {
            lambda,
            lo: -1.0,
            hi: 2.0,
        });
    }
    lerp_unchecked(a, b, lambda)
}

/// One anchor update `anchor <- (1-mu)*anchor + mu*policy`.
pub fn ema_update(
    anchor: &WeightSet,
    policy: &WeightSet,
    mu: f64,
) -> Result<WeightSet, MergeError> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(MergeError::MuOutOfRange(mu));
    }
    lerp_unchecked(anchor, policy, mu)
}

/// Interpolation towards init: `(1-eta)*init + eta*merged`, `eta` in `[0, 1]`.
/// `eta = 0` returns `init` bit-identically.
pub fn liti(init: &WeightSet, merged: &WeightSet, eta: f64) -> Result<WeightSet, MergeError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(MergeError::EtaOutOfRange {
            eta,
            lo: 0.0,
            hi: 1.0,
        });
    }
    lerp_unchecked(init, merged, eta)
}

/// LITI extended to `eta` in `[0, 2]`; `eta > 1` moves past the merged model
/// away from init.
pub fn liti_extrapolate(
    init: &WeightSet,
    merged: &WeightSet,
    eta: f64,
) -> Result<WeightSet, MergeError> {
    if !(0.0..=2.0).contains(&eta) {
        return Err(MergeError::EtaOutOfRange {
            eta,
            lo: 0.0,
            hi: 2.0,
        });
    }
    lerp_unchecked(init, merged, eta)
}

/// Per-group geometry of two task vectors rooted at the same init.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupAngle {
    pub name: String,
    pub norm_a: f64,
    pub norm_b: f64,
    /// Clamped to [-1, 1]; meaningless when `fallback` is set for a zero norm.
    pub cos_omega: f64,
    pub omega_deg: f64,
    /// True when slerp on this group would take the LERP fallback.
    pub fallback: bool,
}

/// Angles between `a - init` and `b - init`, group by group.
pub fn angle_report(
    init: &WeightSet,
    a: &WeightSet,
    b: &WeightSet,
) -> Result<Vec<GroupAngle>, MergeError> {
    let ta = task_vector(init, a)?;
    let tb = task_vector(init, b)?;
    Ok(ta
        .groups
        .iter()
        .zip(&tb.groups)
        .map(|(ga, gb)| {
            let na = dot_f64(&ga.data, &ga.data).sqrt();
            let nb = dot_f64(&gb.data, &gb.data).sqrt();
            if na < NORM_EPS || nb < NORM_EPS {
                return GroupAngle {
                    name: ga.name.clone(),
                    norm_a: na,
                    norm_b: nb,
                    cos_omega: 1.0,
                    omega_deg: 0.0,
                    fallback: true,
                };
            }
            let cos = (dot_f64(&ga.data, &gb.data) / (na * nb)).clamp(-1.0, 1.0);
            GroupAngle {
                name: ga.name.clone(),
                norm_a: na,
                norm_b: nb,
                cos_omega: cos,
                omega_deg: cos.acos().to_degrees(),
                fallback: cos.abs() > 1.0 - COLLINEAR_EPS,
            }
        })
        .collect())
}

/// Spherical interpolation of two task vectors around `init`.
pub fn slerp(
    init: &WeightSet,
    a: &WeightSet,
    b: &WeightSet,
    lambda: f64,
) -> Result<WeightSet, MergeError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MergeError::LambdaOutOfRange {
            lambda,
            lo: 0.0,
            hi: 1.0,
        });
    }
    init.check_same_schema(a)?;
    init.check_same_schema(b)?;
    if lambda == 0.0 {
        return Ok(a.clone());
    }
    if lambda == 1.0 {
        return Ok(b.clone());
    }

    let mut groups = Vec::with_capacity(init.groups().len());
    for ((gi, ga), gb) in init.groups().iter().zip(a.groups()).zip(b.groups()) {
        let d1: Vec<f64> = ga
            .data
            .iter()
            .zip(&gi.data)
            .map(|(&t, &i)| f64::from(t) - f64::from(i))
            .collect();
        let d2: Vec<f64> = gb
            .data
            .iter()
            .zip(&gi.data)
            .map(|(&t, &i)| f64::from(t) - f64::from(i))
            .collect();
        let (c1, c2) = slerp_coefficients(&d1, &d2, lambda);
        let data = gi
            .data
            .iter()
            .enumerate()
            .map(|(k, &i)| (f64::from(i) + c1 * d1[k] + c2 * d2[k]) as f32)
            .collect();
        groups.push(TensorGroup::new(gi.name.clone(), gi.shape.clone(), data));
    }
    Ok(WeightSet::new(groups)?)
}

/// Coefficients `(c1, c2)` such that the merged task vector is
/// `c1*d1 + c2*d2`. Falls back to `(1-lambda, lambda)` off the sphere.
fn slerp_coefficients(d1: &[f64], d2: &[f64], lambda: f64) -> (f64, f64) {
    let n1 = dot_f64(d1, d1).sqrt();
    let n2 = dot_f64(d2, d2).sqrt();
    if n1 < NORM_EPS || n2 < NORM_EPS {
        return (1.0 - lambda, lambda);
    }
    let cos = (dot_f64(d1, d2) / (n1 * n2)).clamp(-1.0, 1.0);
    if cos.abs() > 1.0 - COLLINEAR_EPS {
        return (1.0 - lambda, lambda);
    }
    let omega = cos.acos();
    let sin_omega = omega.sin();
    (
        (((1.0 - lambda) * omega).sin()) / sin_omega,
        ((lambda * omega).sin()) / sin_omega,
    )
}

/// Iterative M-way merge: fold models in list order with `lambda = 1/m` at
/// step `m`, so every model ends with weight `1/M` on the sphere.
pub fn slerpm(init: &WeightSet, models: &[WeightSet]) -> Result<WeightSet, MergeError> {
    let first = models.first().ok_or(MergeError::EmptyModelList)?;
    init.check_same_schema(first)?;
    let mut merged = first.clone();
    for (m, model) in models.iter().enumerate().skip(1) {
        merged = slerp(init, &merged, model, 1.0 / (m as f64 + 1.0))?;
    }
    Ok(merged)
}

/// SLERP applied directly to raw weights instead of task vectors — a
/// diagnostic foil. With high-dimensional nearly-orthogonal updates around a
/// dominant shared init this nearly coincides with LERP.
pub fn slerp_full_weights(
    a: &WeightSet,
    b: &WeightSet,
    lambda: f64,
) -> Result<WeightSet, MergeError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MergeError::LambdaOutOfRange {
            lambda,
            lo: 0.0,
            hi: 1.0,
        });
    }
    a.check_same_schema(b)?;
    if lambda == 0.0 {
        return Ok(a.clone());
    }
    if lambda == 1.0 {
        return Ok(b.clone());
    }
    let mut groups = Vec::with_capacity(a.groups().len());
    for (ga, gb) in a.groups().iter().zip(b.groups()) {
        let va: Vec<f64> = ga.data.iter().map(|&x| f64::from(x)).collect();
        let vb: Vec<f64> = gb.data.iter().map(|&x| f64::from(x)).collect();
        let (c1, c2) = slerp_coefficients(&va, &vb, lambda);
        let data = va
            .iter()
            .zip(&vb)
            .map(|(&x, &y)| (c1 * x + c2 * y) as f32)
            .collect();
        groups.push(TensorGroup::new(ga.name.clone(), ga.shape.clone(), data));
    }
    Ok(WeightSet::new(groups)?)
}
