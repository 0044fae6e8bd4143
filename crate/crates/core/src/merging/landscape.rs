use alloc::vec::Vec;

use super::MergeError;
use crate::eval::Evaluator;
use crate::tensor::{FlatVector, TensorError};

/// `τ = θ_ft − θ_pre`. Both endpoints are kept so the difference can be taken
/// exactly in f64 when it is applied.
#[derive(Debug, Clone)]
pub struct TaskVector {
    base: FlatVector,
    tuned: FlatVector,
}

impl TaskVector {
    pub fn new(base: FlatVector, tuned: FlatVector) -> Result<Self, TensorError> {
        base.ensure_same_schema(&tuned)?;
        Ok(Self { base, tuned })
    }

    pub fn base(&self) -> &FlatVector {
        &self.base
    }

    pub fn tuned(&self) -> &FlatVector {
        &self.tuned
    }

    pub fn delta(&self) -> impl Iterator<Item = f64> + '_ {
        self.tuned
            .values()
            .iter()
            .zip(self.base.values())
            .map(|(&t, &b)| f64::from(t) - f64::from(b))
    }

    /// The delta rounded to f32.
    pub fn delta_vector(&self) -> FlatVector {
        let values = self.delta().map(|d| d as f32).collect();
        self.base.with_values(values).expect("same schema")
    }
}

/// Scores over a rectangular `(a, b)` grid; `scores[i][j]` belongs to
/// `(a_values[i], b_values[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    pub scores: Vec<Vec<f64>>,
}

impl Landscape {
    /// Point of the grid with the highest score (first in row-major order on ties).
    pub fn argmax(&self) -> Option<(f64, f64, f64)> {
        let mut best: Option<(f64, f64, f64)> = None;
        for (i, row) in self.scores.iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                if best.is_none_or(|b| s > b.2) {
                    best = Some((self.a_values[i], self.b_values[j], s));
                }
            }
        }
        best
    }
}

/// The point `θ_pre + a·τ₁ + b·τ₂`, computed in f64.
pub fn landscape_point(
    theta_pre: &FlatVector,
    tau1: &TaskVector,
    tau2: &TaskVector,
    a: f64,
    b: f64,
) -> Result<FlatVector, MergeError> {
    theta_pre.ensure_same_schema(tau1.base())?;
    theta_pre.ensure_same_schema(tau2.base())?;
    let values = theta_pre
        .values()
        .iter()
        .zip(tau1.delta().zip(tau2.delta()))
        .map(|(&p, (d1, d2))| (f64::from(p) + a * d1 + b * d2) as f32)
        .collect();
    Ok(theta_pre.with_values(values)?)
}

/// Evaluates every grid point. Each row is scored as one batch so the
/// evaluator may parallelize within it.
pub fn landscape_slice(
    theta_pre: &FlatVector,
    tau1: &TaskVector,
    tau2: &TaskVector,
    grid_a: &[f64],
    grid_b: &[f64],
    evaluator: &dyn Evaluator,
) -> Result<Landscape, MergeError> {
    let mut scores = Vec::with_capacity(grid_a.len());
    for &a in grid_a {
        let points = grid_b
            .iter()
            .map(|&b| landscape_point(theta_pre, tau1, tau2, a, b))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&FlatVector> = points.iter().collect();
        let row = evaluator
            .evaluate_batch(&refs)
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        scores.push(row);
    }
    Ok(Landscape {
        a_values: grid_a.to_vec(),
        b_values: grid_b.to_vec(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamSchema;
    use alloc::sync::Arc;
    use alloc::vec;

    fn v(values: &[f32]) -> FlatVector {
        let schema = Arc::new(ParamSchema::new([("w", vec![values.len()])]).unwrap());
        FlatVector::new(schema, values.to_vec()).unwrap()
    }

    #[test]
    fn unit_coordinates_reconstruct_endpoints() {
        let pre = v(&[0.1, 0.7, -3.3]);
        let ft1 = v(&[1.1e-3, 5.5, 2.0]);
        let ft2 = v(&[-0.25, 0.0, 1e7]);
        let t1 = TaskVector::new(pre.clone(), ft1.clone()).unwrap();
        let t2 = TaskVector::new(pre.clone(), ft2.clone()).unwrap();
        assert!(landscape_point(&pre, &t1, &t2, 1.0, 0.0)
            .unwrap()
            .bits_eq(&ft1));
        assert!(landscape_point(&pre, &t1, &t2, 0.0, 1.0)
            .unwrap()
            .bits_eq(&ft2));
        assert!(landscape_point(&pre, &t1, &t2, 0.0, 0.0)
            .unwrap()
            .bits_eq(&pre));
    }

    #[test]
    fn argmax_of_grid() {
        let l = Landscape {
            a_values: vec![0.0, 1.0],
            b_values: vec![0.0, 1.0],
            scores: vec![vec![0.1, 0.5], vec![0.5, 0.2]],
        };
        assert_eq!(l.argmax(), Some((0.0, 1.0, 0.5)));
    }
}
