//! TIES: trim each task vector to its largest entries, elect a sign per
//! coordinate, and average only the entries that agree with it.

use alloc::vec;
use alloc::vec::Vec;

use super::MergeError;
use crate::tensor::FlatVector;

/// Where the top-k trim is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TrimScope {
    /// Rank over the whole flat vector.
    #[default]
    Global,
    /// Rank within each tensor separately.
    PerTensor,
}

/// `⌈k·d⌉`, clamped to `[1, d]`. Products within 1e-9 of an integer count as
/// that integer so decimal keep rates like 0.7 behave as written.
pub fn keep_count(k: f64, d: usize) -> usize {
    if d == 0 {
        return 0;
    }
    let x = k * d as f64;
    let nearest = libm::round(x);
    let c = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        libm::ceil(x)
    };
    (c as usize).clamp(1, d)
}

/// Zeroes all but the `keep` largest-magnitude entries. Ties at the threshold
/// keep the lower index.
pub fn trim_top_k(tau: &[f64], keep: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..tau.len()).collect();
    order.sort_by(|&a, &b| {
        tau[b]
            .abs()
            .partial_cmp(&tau[a].abs())
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; tau.len()];
    for &j in order.iter().take(keep) {
        out[j] = tau[j];
    }
    out
}

/// `sign(Σᵢ τᵢⱼ)` with 0 for an exact zero sum.
pub fn elect_sign(column: impl IntoIterator<Item = f64>) -> f64 {
    let s: f64 = column.into_iter().sum();
    if s > 0.0 {
        1.0
    } else if s < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn ties_merge(
    models: &[&FlatVector],
    theta_pre: &FlatVector,
    k: f64,
    lambda: f64,
    scope: TrimScope,
) -> Result<FlatVector, MergeError> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(MergeError::InvalidParameter(
            "trim_fraction must lie in (0, 1]".into(),
        ));
    }
    if models.is_empty() {
        return Err(MergeError::NoModels);
    }
    for m in models {
        theta_pre.ensure_same_schema(m)?;
    }
    let d = theta_pre.len();
    let pre = theta_pre.values();

    // Differences of two f32 values are exact in f64, so pre + τ reproduces θ.
    let trimmed: Vec<Vec<f64>> = models
        .iter()
        .map(|m| {
            let tau: Vec<f64> = m
                .values()
                .iter()
                .zip(pre)
                .map(|(&t, &p)| f64::from(t) - f64::from(p))
                .collect();
            match scope {
                TrimScope::Global => trim_top_k(&tau, keep_count(k, d)),
                TrimScope::PerTensor => {
                    let mut out = vec![0.0; d];
                    for slot in theta_pre.schema().slots() {
                        let r = slot.range();
                        let t = trim_top_k(&tau[r.clone()], keep_count(k, slot.len));
                        out[r].copy_from_slice(&t);
                    }
                    out
                }
            }
        })
        .collect();

    let values = (0..d)
        .map(|j| {
            let sign = elect_sign(trimmed.iter().map(|t| t[j]));
            let mut sum = 0.0;
            let mut count = 0usize;
            for t in &trimmed {
                let v = t[j];
                if v != 0.0 && v.signum() == sign {
                    sum += v;
                    count += 1;
                }
            }
            let merged = if count == 0 { 0.0 } else { sum / count as f64 };
            (f64::from(pre[j]) + lambda * merged) as f32
        })
        .collect();
    Ok(theta_pre.with_values(values)?)
}
