//! Fitness from the built-in network engine: the macro-average of a metric
//! over one or more labelled sets.

use std::sync::Arc;

use demerge_core::eval::{EvalError, Evaluator, FitnessReport, Metric};
use demerge_core::inference::{self, Batch, MlpSpec};
use demerge_core::FlatVector;
use rayon::prelude::*;
use rayon::ThreadPool;

#[derive(Clone)]
pub struct InProcessEvaluator {
    spec: MlpSpec,
    sets: Vec<Batch>,
    metric: Metric,
    pool: Option<Arc<ThreadPool>>,
}

impl std::fmt::Debug for InProcessEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InProcessEvaluator")
            .field("spec", &self.spec)
            .field("sets", &self.sets.len())
            .field("metric", &self.metric)
            .field("threads", &self.capacity())
            .finish()
    }
}

impl InProcessEvaluator {
    /// Scores are averaged over `sets` with equal weight per set.
    pub fn new(spec: MlpSpec, sets: Vec<Batch>, metric: Metric) -> Result<Self, EvalError> {
        spec.validate()
            .map_err(|e| EvalError::internal(e.to_string()))?;
        if sets.is_empty() {
            return Err(EvalError::internal(
                "evaluator needs at least one labelled set",
            ));
        }
        for set in &sets {
            if set.is_empty() {
                return Err(EvalError::internal("evaluation set is empty"));
            }
            if set.input_dim() != spec.input_dim() {
                return Err(EvalError::internal(format!(
                    "evaluation set has {} features, model expects {}",
                    set.input_dim(),
                    spec.input_dim()
                )));
            }
        }
        Ok(Self {
            spec,
            sets,
            metric,
            pool: None,
        })
    }

    /// Scores batches on `threads` workers; 1 keeps everything on the caller.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.pool = (threads > 1).then(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .expect("thread pool"),
            )
        });
        self
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn n_examples(&self) -> usize {
        self.sets.iter().map(Batch::len).sum()
    }

    pub fn per_set(&self, weights: &FlatVector) -> Result<Vec<f64>, EvalError> {
        self.sets
            .iter()
            .map(|set| {
                match self.metric {
                    Metric::Accuracy => inference::accuracy(&self.spec, weights, set),
                    Metric::MacroF1 => inference::macro_f1(&self.spec, weights, set),
                }
                .map_err(|e| EvalError::internal(e.to_string()))
            })
            .collect()
    }

    pub fn report(&self, weights: &FlatVector) -> Result<FitnessReport, EvalError> {
        let scores = self.per_set(weights)?;
        Ok(FitnessReport {
            score: scores.iter().sum::<f64>() / scores.len() as f64,
            metric: self.metric,
            n_examples: self.n_examples(),
        })
    }
}

impl Evaluator for InProcessEvaluator {
    fn evaluate(&self, weights: &FlatVector) -> Result<f64, EvalError> {
        self.report(weights).map(|r| r.score)
    }

    fn evaluate_batch(&self, batch: &[&FlatVector]) -> Vec<Result<f64, EvalError>> {
        match &self.pool {
            Some(pool) => pool.install(|| batch.par_iter().map(|w| self.evaluate(w)).collect()),
            None => batch.iter().map(|w| self.evaluate(w)).collect(),
        }
    }

    fn capacity(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    fn identity(&self) -> String {
        format!(
            "in-process {} {}",
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION")
        )
    }
}
