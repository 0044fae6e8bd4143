use alloc::vec::Vec;

use crate::inference::{argmax, Matrix};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnsembleError {
    #[error("no member logits")]
    Empty,
    #[error("logit shape {actual:?} differs from {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
}

/// Averages the members' logits per example and takes the argmax (lowest
/// class on ties).
pub fn ensemble_predict(logits: &[Matrix]) -> Result<Vec<usize>, EnsembleError> {
    let first = logits.first().ok_or(EnsembleError::Empty)?;
    let shape = (first.rows(), first.cols());
    if let Some(m) = logits.iter().find(|m| (m.rows(), m.cols()) != shape) {
        return Err(EnsembleError::ShapeMismatch {
            expected: shape,
            actual: (m.rows(), m.cols()),
        });
    }
    let n = logits.len() as f64;
    let mut avg = alloc::vec![0.0; shape.1];
    Ok((0..shape.0)
        .map(|i| {
            avg.iter_mut().for_each(|a| *a = 0.0);
            for m in logits {
                for (a, v) in avg.iter_mut().zip(m.row(i)) {
                    *a += v;
                }
            }
            avg.iter_mut().for_each(|a| *a /= n);
            argmax(&avg)
        })
        .collect())
}
