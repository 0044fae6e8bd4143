use alloc::vec::Vec;

use super::{check_weights, sorted_sum, MergeError};
use crate::tensor::FlatVector;

/// Added to every Fisher entry at merge time so coordinates no model is
/// confident about fall back to the (weighted) plain average.
pub const FISHER_FLOOR: f64 = 1e-8;

/// Diagonal Fisher information of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherState {
    pub diag: FlatVector,
    /// Number of gradient draws averaged into `diag`.
    pub samples: usize,
}

/// Per coordinate `Σᵢ wᵢ F'ᵢⱼ θᵢⱼ / Σᵢ wᵢ F'ᵢⱼ` with `F' = F + FISHER_FLOOR`.
pub fn fisher_merge(
    models: &[&FlatVector],
    fishers: &[FisherState],
    weights: Option<&[f64]>,
) -> Result<FlatVector, MergeError> {
    let first = *models.first().ok_or(MergeError::NoModels)?;
    if fishers.len() != models.len() {
        return Err(MergeError::InvalidParameter(alloc::format!(
            "{} Fisher diagonals for {} models",
            fishers.len(),
            models.len()
        )));
    }
    if let Some(w) = weights {
        check_weights(w, models.len())?;
    }
    for (i, (m, f)) in models.iter().zip(fishers).enumerate() {
        first.ensure_same_schema(m)?;
        first.ensure_same_schema(&f.diag)?;
        if let Some(index) = f.diag.values().iter().position(|&v| v.is_nan() || v < 0.0) {
            return Err(MergeError::NegativeFisher { model: i, index });
        }
    }

    // terms are summed in sorted order so model order does not matter
    let mut num = Vec::with_capacity(models.len());
    let mut den = Vec::with_capacity(models.len());
    let values = (0..first.len())
        .map(|j| {
            num.clear();
            den.clear();
            for (i, (m, f)) in models.iter().zip(fishers).enumerate() {
                let w = weights.map_or(1.0, |w| w[i]);
                let fj = w * (f64::from(f.diag.values()[j]) + FISHER_FLOOR);
                num.push(fj * f64::from(m.values()[j]));
                den.push(fj);
            }
            (sorted_sum(&mut num) / sorted_sum(&mut den)) as f32
        })
        .collect();
    Ok(first.with_values(values)?)
}
