//! Fitness evaluation abstraction.
//!
//! An [`Evaluator`] maps a weight vector to a dev-set score in `[0, 1]`. The
//! evolution loop relies on evaluators being deterministic: scoring the same
//! weights twice must give the same value.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::FlatVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EvalErrorKind {
    /// The evaluator could not be started or the handshake failed.
    Spawn,
    /// The peer broke the wire contract (bad JSON, id mismatch, out-of-range score).
    Protocol,
    Timeout,
    /// The evaluator answered with `ok: false`.
    Rejected,
    /// The session was already marked unusable by an earlier failure.
    SessionClosed,
    /// In-process failure (dimension mismatch, empty data, ...).
    Internal,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{kind:?}: {message}")]
pub struct EvalError {
    pub kind: EvalErrorKind,
    pub message: String,
}

impl EvalError {
    pub fn new(kind: EvalErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(EvalErrorKind::Internal, message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Metric {
    Accuracy,
    MacroF1,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
        }
    }
}

/// A dev-set score with the metadata an evaluator reports alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessReport {
    pub score: f64,
    pub metric: Metric,
    pub n_examples: usize,
}

pub trait Evaluator {
    fn evaluate(&self, weights: &FlatVector) -> Result<f64, EvalError>;

    /// Scores several candidates. Implementations may run them concurrently up
    /// to [`capacity`](Self::capacity); results stay aligned with `batch`.
    fn evaluate_batch(&self, batch: &[&FlatVector]) -> Vec<Result<f64, EvalError>> {
        batch.iter().map(|w| self.evaluate(w)).collect()
    }

    /// Maximum number of concurrent evaluations this evaluator accepts.
    fn capacity(&self) -> usize {
        1
    }

    /// Name/version string recorded in run manifests.
    fn identity(&self) -> String {
        String::from("anonymous")
    }
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn evaluate(&self, weights: &FlatVector) -> Result<f64, EvalError> {
        (**self).evaluate(weights)
    }
    fn evaluate_batch(&self, batch: &[&FlatVector]) -> Vec<Result<f64, EvalError>> {
        (**self).evaluate_batch(batch)
    }
    fn capacity(&self) -> usize {
        (**self).capacity()
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&self, weights: &FlatVector) -> Result<f64, EvalError> {
        (**self).evaluate(weights)
    }
    fn evaluate_batch(&self, batch: &[&FlatVector]) -> Vec<Result<f64, EvalError>> {
        (**self).evaluate_batch(batch)
    }
    fn capacity(&self) -> usize {
        (**self).capacity()
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
}

/// Wraps a closure as an evaluator. Handy for synthetic objectives.
pub struct FnEvaluator<F>(pub F);

impl<F> core::fmt::Debug for FnEvaluator<F> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("FnEvaluator")
    }
}

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&FlatVector) -> Result<f64, EvalError>,
{
    fn evaluate(&self, weights: &FlatVector) -> Result<f64, EvalError> {
        (self.0)(weights)
    }
}
