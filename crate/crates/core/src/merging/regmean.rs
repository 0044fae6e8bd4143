//! RegMean: per linear layer, the weights minimizing `Σᵢ ‖Xᵢ W − Xᵢ Wᵢ‖²`,
//! i.e. `W = (Σ Gᵢ)⁻¹ Σ Gᵢ Wᵢ` with `Gᵢ = XᵢᵀXᵢ`.
//!
//! Weight tensors are stored `[out, in]`, so the solve runs on their
//! transposes. Parameters without a Gram entry are simple-averaged.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use super::MergeError;
use crate::tensor::FlatVector;

/// Relative pivot size below which the LU solve counts as singular.
const PIVOT_TOLERANCE: f64 = 1e-12;
const RIDGE_SCALE: f64 = 1e-6;

/// Symmetric `dim × dim` input inner-product matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    dim: usize,
    data: Vec<f64>,
}

impl Gram {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn from_data(dim: usize, data: Vec<f64>) -> Result<Self, MergeError> {
        if data.len() != dim * dim {
            return Err(MergeError::GramMismatch(alloc::format!(
                "{} values for a {dim}x{dim} Gram",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `G += x xᵀ`
    pub fn add_outer(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        for (i, &xi) in x.iter().enumerate() {
            let row = &mut self.data[i * self.dim..(i + 1) * self.dim];
            for (g, &xj) in row.iter_mut().zip(x) {
                *g += xi * xj;
            }
        }
    }

    pub fn add(&mut self, other: &Gram) -> Result<(), MergeError> {
        if other.dim != self.dim {
            return Err(MergeError::GramMismatch(alloc::format!(
                "cannot add {}x{} Gram to {}x{}",
                other.dim,
                other.dim,
                self.dim,
                self.dim
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// Gram matrices of one model, keyed by the weight tensor they belong to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GramState {
    grams: BTreeMap<String, Gram>,
    samples: usize,
}

impl GramState {
    pub fn new(samples: usize) -> Self {
        Self {
            grams: BTreeMap::new(),
            samples,
        }
    }

    pub fn insert(&mut self, weight_name: impl Into<String>, gram: Gram) {
        self.grams.insert(weight_name.into(), gram);
    }

    pub fn get(&self, weight_name: &str) -> Option<&Gram> {
        self.grams.get(weight_name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Gram)> {
        self.grams.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Accumulates another capture of the same network.
    pub fn merge_from(&mut self, other: &GramState) -> Result<(), MergeError> {
        for (name, g) in &other.grams {
            match self.grams.get_mut(name) {
                Some(mine) => mine.add(g)?,
                None => {
                    self.grams.insert(name.clone(), g.clone());
                }
            }
        }
        self.samples += other.samples;
        Ok(())
    }
}

pub fn regmean_merge(
    models: &[&FlatVector],
    grams: &[GramState],
    alpha: f64,
) -> Result<FlatVector, MergeError> {
    let first = *models.first().ok_or(MergeError::NoModels)?;
    if grams.len() != models.len() {
        return Err(MergeError::InvalidParameter(alloc::format!(
            "{} Gram states for {} models",
            grams.len(),
            models.len()
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MergeError::InvalidParameter(
            "alpha must lie in (0, 1]".into(),
        ));
    }
    for m in models {
        first.ensure_same_schema(m)?;
    }
    let schema = first.schema();
    for (name, _) in grams[0].iter() {
        if schema.slot(name).is_none() {
            return Err(MergeError::GramMismatch(alloc::format!(
                "Gram for unknown tensor `{name}`"
            )));
        }
    }

    let n = models.len() as f64;
    let mut out: Vec<f32> = Vec::with_capacity(first.len());
    for slot in schema.slots() {
        let Some(_) = grams[0].get(&slot.name) else {
            for j in slot.range() {
                let s: f64 = models.iter().map(|m| f64::from(m.values()[j])).sum();
                out.push((s / n) as f32);
            }
            continue;
        };
        let [rows, cols] = slot.shape[..] else {
            return Err(MergeError::GramMismatch(alloc::format!(
                "`{}` has shape {:?}, expected a 2-d weight",
                slot.name,
                slot.shape
            )));
        };
        // rows = out features, cols = in features
        let mut lhs = DMatrix::<f64>::zeros(cols, cols);
        let mut rhs = DMatrix::<f64>::zeros(cols, rows);
        for (i, (model, state)) in models.iter().zip(grams).enumerate() {
            let gram = state.get(&slot.name).ok_or_else(|| {
                MergeError::GramMismatch(alloc::format!(
                    "model {i} has no Gram for `{}`",
                    slot.name
                ))
            })?;
            if gram.dim() != cols {
                return Err(MergeError::GramMismatch(alloc::format!(
                    "Gram for `{}` is {}x{}, layer input width is {cols}",
                    slot.name,
                    gram.dim(),
                    gram.dim()
                )));
            }
            let scaled = DMatrix::from_fn(cols, cols, |r, c| {
                let g = gram.get(r, c);
                if r == c {
                    g
                } else {
                    alpha * g
                }
            });
            // Wᵢᵀ as an (in × out) matrix
            let w = &model.values()[slot.range()];
            let wt = DMatrix::from_fn(cols, rows, |r, c| f64::from(w[c * cols + r]));
            rhs += &scaled * wt;
            lhs += scaled;
        }
        let solution = solve_with_ridge(lhs, &rhs).ok_or_else(|| MergeError::Singular {
            layer: slot.name.clone(),
        })?;
        // back to [out, in] row-major
        for o in 0..rows {
            for i in 0..cols {
                out.push(solution[(i, o)] as f32);
            }
        }
    }
    Ok(first.with_values(out)?)
}

fn solve_with_ridge(lhs: DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(x) = solve(lhs.clone(), rhs) {
        return Some(x);
    }
    let dim = lhs.nrows();
    let ridge = RIDGE_SCALE * lhs.trace() / dim as f64;
    if ridge.is_nan() || ridge <= 0.0 {
        return None;
    }
    let mut regularized = lhs;
    for i in 0..dim {
        regularized[(i, i)] += ridge;
    }
    solve(regularized, rhs)
}

fn solve(lhs: DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let lu = lhs.lu();
    let u = lu.u();
    let pivots = u.diagonal();
    let largest = pivots.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    let smallest = pivots.iter().fold(f64::INFINITY, |m, p| m.min(p.abs()));
    if largest.is_nan() || largest <= 0.0 || smallest <= PIVOT_TOLERANCE * largest {
        return None;
    }
    lu.solve(rhs)
}
