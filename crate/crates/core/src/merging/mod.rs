//! Closed-form merging algorithms over flattened checkpoints.
//!
//! [`merge`] dispatches on [`MergeSpec::method`]. Every method returns the
//! single input unchanged when given one model.

mod ensemble;
mod fisher;
mod landscape;
mod regmean;
mod search;
mod soup;
mod ties;

use alloc::string::String;
use alloc::vec::Vec;

pub use ensemble::{ensemble_predict, EnsembleError};
pub use fisher::{fisher_merge, FisherState, FISHER_FLOOR};
pub use landscape::{landscape_point, landscape_slice, Landscape, TaskVector};
pub use regmean::{regmean_merge, Gram, GramState};
pub use search::{default_grid, grid_search, GridSearch, SearchError};
pub use soup::{greedy_soup, SoupOutcome};
pub use ties::{elect_sign, keep_count, ties_merge, trim_top_k, TrimScope};

use crate::eval::{EvalError, Evaluator};
use crate::tensor::{ensure_shared_schema, FlatVector, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MergeError {
    #[error("no models to merge")]
    NoModels,
    #[error("{method} merging needs {what}")]
    MissingAux {
        method: &'static str,
        what: &'static str,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid merge parameter: {0}")]
    InvalidParameter(String),
    #[error("model {model} has negative Fisher entry at coordinate {index}")]
    NegativeFisher { model: usize, index: usize },
    #[error("Gram/layer mismatch: {0}")]
    GramMismatch(String),
    #[error("singular RegMean system for `{layer}` even after ridge")]
    Singular { layer: String },
    #[error("evaluator failed: {0}")]
    Evaluator(#[from] EvalError),
    /// Fisher or Gram statistics could not be computed for a model.
    #[error("merge statistics: {0}")]
    Statistics(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MergeMethod {
    #[default]
    Simple,
    Fisher,
    #[cfg_attr(feature = "serde", serde(rename = "regmean"))]
    RegMean,
    Ties,
    GreedySoup,
    PairwiseInterp,
}

impl MergeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Simple => "simple",
            MergeMethod::Fisher => "fisher",
            MergeMethod::RegMean => "regmean",
            MergeMethod::Ties => "ties",
            MergeMethod::GreedySoup => "greedy_soup",
            MergeMethod::PairwiseInterp => "pairwise_interp",
        }
    }
}

/// A merging method and its parameters. Only the fields the method uses are
/// consulted.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MergeSpec {
    pub method: MergeMethod,
    /// Per-model weights for simple and Fisher averaging; uniform when absent.
    pub weights: Option<Vec<f64>>,
    /// RegMean off-diagonal scale, `1 / (1 + γ)`.
    pub alpha: f64,
    /// TIES keep rate `k`.
    pub trim_fraction: f64,
    /// TIES task-vector scale `λ`.
    pub lambda: f64,
    pub trim_scope: TrimScope,
    /// Weight of the first model in pairwise interpolation.
    pub interp: f64,
}

impl Default for MergeSpec {
    fn default() -> Self {
        Self {
            method: MergeMethod::Simple,
            weights: None,
            alpha: 0.9,
            trim_fraction: 0.2,
            lambda: 1.0,
            trim_scope: TrimScope::Global,
            interp: 0.5,
        }
    }
}

impl MergeSpec {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MergeError> {
        let bad = |msg: &str| Err(MergeError::InvalidParameter(msg.into()));
        match self.method {
            MergeMethod::RegMean if !(self.alpha > 0.0 && self.alpha <= 1.0) => {
                bad("alpha must lie in (0, 1]")
            }
            MergeMethod::Ties if !(self.trim_fraction > 0.0 && self.trim_fraction <= 1.0) => {
                bad("trim_fraction must lie in (0, 1]")
            }
            MergeMethod::Ties if !self.lambda.is_finite() => bad("lambda must be finite"),
            MergeMethod::PairwiseInterp if !(0.0..=1.0).contains(&self.interp) => {
                bad("interp must lie in [0, 1]")
            }
            _ => Ok(()),
        }
    }
}

/// Auxiliary inputs some methods need, aligned with the model list.
#[derive(Clone, Copy, Default)]
pub struct MergeAux<'a> {
    pub fishers: Option<&'a [FisherState]>,
    pub grams: Option<&'a [GramState]>,
    pub theta_pre: Option<&'a FlatVector>,
    pub evaluator: Option<&'a dyn Evaluator>,
}

impl core::fmt::Debug for MergeAux<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("MergeAux")
            .field("fishers", &self.fishers.map(<[_]>::len))
            .field("grams", &self.grams.map(<[_]>::len))
            .field("theta_pre", &self.theta_pre.is_some())
            .field("evaluator", &self.evaluator.is_some())
            .finish()
    }
}

/// Something that can merge a slot-aligned list of models. The evolution loop
/// uses it in combined mode.
pub trait Merger {
    fn merge(&self, models: &[&FlatVector], spec: &MergeSpec) -> Result<FlatVector, MergeError>;
}

impl Merger for MergeAux<'_> {
    fn merge(&self, models: &[&FlatVector], spec: &MergeSpec) -> Result<FlatVector, MergeError> {
        merge(models, spec, self)
    }
}

pub fn merge(
    models: &[&FlatVector],
    spec: &MergeSpec,
    aux: &MergeAux<'_>,
) -> Result<FlatVector, MergeError> {
    spec.validate()?;
    let first = *models.first().ok_or(MergeError::NoModels)?;
    ensure_shared_schema(models.iter().copied())?;
    if models.len() == 1 {
        return Ok(first.clone());
    }
    let missing = |what| MergeError::MissingAux {
        method: spec.method.as_str(),
        what,
    };
    match spec.method {
        MergeMethod::Simple => simple_average(models, spec.weights.as_deref()),
        MergeMethod::Fisher => {
            let fishers = aux
                .fishers
                .ok_or_else(|| missing("one Fisher diagonal per model"))?;
            fisher_merge(models, fishers, spec.weights.as_deref())
        }
        MergeMethod::RegMean => {
            let grams = aux
                .grams
                .ok_or_else(|| missing("Gram matrices per model"))?;
            regmean_merge(models, grams, spec.alpha)
        }
        MergeMethod::Ties => {
            let pre = aux
                .theta_pre
                .ok_or_else(|| missing("the pre-trained weights"))?;
            ties_merge(
                models,
                pre,
                spec.trim_fraction,
                spec.lambda,
                spec.trim_scope,
            )
        }
        MergeMethod::GreedySoup => {
            let evaluator = aux.evaluator.ok_or_else(|| missing("a dev evaluator"))?;
            greedy_soup(models, evaluator).map(|s| s.weights)
        }
        MergeMethod::PairwiseInterp => {
            if models.len() != 2 {
                return Err(MergeError::InvalidParameter(alloc::format!(
                    "pairwise interpolation takes 2 models, got {}",
                    models.len()
                )));
            }
            pairwise_interp(models[0], models[1], spec.interp)
        }
    }
}

/// Weighted mean, accumulated in f64. Each coordinate's terms are summed in
/// sorted order, so the result does not depend on model order, and uniform
/// weights average without multiplying so identical inputs come back
/// bit-exact.
pub fn simple_average(
    models: &[&FlatVector],
    weights: Option<&[f64]>,
) -> Result<FlatVector, MergeError> {
    let first = *models.first().ok_or(MergeError::NoModels)?;
    ensure_shared_schema(models.iter().copied())?;
    if let Some(w) = weights {
        check_weights(w, models.len())?;
    }
    let total = match weights {
        None => models.len() as f64,
        Some(w) => sorted_sum(&mut w.to_vec()),
    };
    let mut terms = Vec::with_capacity(models.len());
    let values = (0..first.len())
        .map(|j| {
            terms.clear();
            terms.extend(models.iter().enumerate().map(|(i, m)| {
                let v = f64::from(m.values()[j]);
                weights.map_or(v, |w| w[i] * v)
            }));
            (sorted_sum(&mut terms) / total) as f32
        })
        .collect();
    Ok(first.with_values(values)?)
}

pub(crate) fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

pub(crate) fn check_weights(w: &[f64], n: usize) -> Result<(), MergeError> {
    if w.len() != n {
        return Err(MergeError::InvalidParameter(alloc::format!(
            "{} weights for {} models",
            w.len(),
            n
        )));
    }
    if w.iter().any(|&x| !x.is_finite() || x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
        return Err(MergeError::InvalidParameter(
            "weights must be non-negative with a positive sum".into(),
        ));
    }
    Ok(())
}

/// `alpha * a + (1 - alpha) * b`.
pub fn pairwise_interp(
    a: &FlatVector,
    b: &FlatVector,
    alpha: f64,
) -> Result<FlatVector, MergeError> {
    a.ensure_same_schema(b)?;
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| (alpha * f64::from(x) + (1.0 - alpha) * f64::from(y)) as f32)
        .collect();
    Ok(a.with_values(values)?)
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
    fn simple_average_of_two() {
        let out = merge(
            &[&v(&[0.0, 2.0]), &v(&[2.0, 0.0])],
            &MergeSpec::default(),
            &MergeAux::default(),
        )
        .unwrap();
        assert_eq!(out.values(), &[1.0, 1.0]);
    }

    #[test]
    fn single_model_is_returned_for_every_method() {
        let m = v(&[0.1, -3.7, 1e-20]);
        for method in [
            MergeMethod::Simple,
            MergeMethod::Fisher,
            MergeMethod::RegMean,
            MergeMethod::Ties,
            MergeMethod::GreedySoup,
            MergeMethod::PairwiseInterp,
        ] {
            let out = merge(&[&m], &MergeSpec::new(method), &MergeAux::default()).unwrap();
            assert!(out.bits_eq(&m), "{method:?}");
        }
    }

    #[test]
    fn missing_aux_is_reported() {
        let a = v(&[1.0]);
        let b = v(&[2.0]);
        for method in [
            MergeMethod::Fisher,
            MergeMethod::RegMean,
            MergeMethod::Ties,
            MergeMethod::GreedySoup,
        ] {
            let err = merge(&[&a, &b], &MergeSpec::new(method), &MergeAux::default()).unwrap_err();
            assert!(matches!(err, MergeError::MissingAux { .. }), "{method:?}");
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(
            merge(&[], &MergeSpec::default(), &MergeAux::default()),
            Err(MergeError::NoModels)
        );
    }

    #[test]
    fn identical_models_average_exactly() {
        let m = v(&[0.1, 0.7, -1.3, 3.3e-7]);
        let out = simple_average(&[&m, &m, &m], None).unwrap();
        assert!(out.bits_eq(&m));
    }

    #[test]
    fn weighted_average() {
        let out = simple_average(&[&v(&[0.0]), &v(&[4.0])], Some(&[3.0, 1.0])).unwrap();
        assert_eq!(out.values(), &[1.0]);
        assert!(simple_average(&[&v(&[0.0]), &v(&[4.0])], Some(&[1.0])).is_err());
    }

    #[test]
    fn interpolation_endpoints() {
        let a = v(&[1.0, 2.0]);
        let b = v(&[3.0, -2.0]);
        assert!(pairwise_interp(&a, &b, 1.0).unwrap().bits_eq(&a));
        assert!(pairwise_interp(&a, &b, 0.0).unwrap().bits_eq(&b));
        assert_eq!(pairwise_interp(&a, &b, 0.5).unwrap().values(), &[2.0, 0.0]);
    }

    #[test]
    fn spec_defaults() {
        let s = MergeSpec::default();
        assert_eq!(
            (s.alpha, s.trim_fraction, s.lambda, s.interp),
            (0.9, 0.2, 1.0, 0.5)
        );
    }

    #[test]
    fn invalid_parameters_rejected() {
        let a = v(&[1.0]);
        let spec = MergeSpec {
            trim_fraction: 0.0,
            ..MergeSpec::new(MergeMethod::Ties)
        };
        assert!(matches!(
            merge(
                &[&a, &a],
                &spec,
                &MergeAux {
                    theta_pre: Some(&a),
                    ..MergeAux::default()
                }
            ),
            Err(MergeError::InvalidParameter(_))
        ));
    }
}
