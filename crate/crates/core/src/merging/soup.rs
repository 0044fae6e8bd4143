use alloc::vec::Vec;

use super::{simple_average, MergeError};
use crate::eval::Evaluator;
use crate::tensor::FlatVector;

#[derive(Debug, Clone)]
pub struct SoupOutcome {
    pub weights: FlatVector,
    /// Indices of the accepted models, in acceptance order.
    pub ingredients: Vec<usize>,
    /// Dev score of the returned soup.
    pub score: f64,
    pub individual_scores: Vec<f64>,
}

/// Greedy soup: visit models by descending dev score (ties by index) and keep
/// each one whose inclusion in the uniform average does not lower the score.
pub fn greedy_soup(
    models: &[&FlatVector],
    evaluator: &dyn Evaluator,
) -> Result<SoupOutcome, MergeError> {
    if models.is_empty() {
        return Err(MergeError::NoModels);
    }
    crate::tensor::ensure_shared_schema(models.iter().copied())?;
    let individual_scores = evaluator
        .evaluate_batch(models)
        .into_iter()
        .collect::<Result<Vec<f64>, _>>()?;

    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| {
        individual_scores[b]
            .partial_cmp(&individual_scores[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let best = order[0];
    let mut ingredients = alloc::vec![best];
    let mut weights = models[best].clone();
    let mut score = individual_scores[best];
    for &candidate in &order[1..] {
        let mut trial: Vec<&FlatVector> = ingredients.iter().map(|&i| models[i]).collect();
        trial.push(models[candidate]);
        let soup = simple_average(&trial, None)?;
        let s = evaluator.evaluate(&soup)?;
        if s >= score {
            ingredients.push(candidate);
            weights = soup;
            score = s;
        }
    }
    Ok(SoupOutcome {
        weights,
        ingredients,
        score,
        individual_scores,
    })
}
