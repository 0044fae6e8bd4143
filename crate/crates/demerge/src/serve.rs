//! Protocol backend over the built-in network engine and the configured
//! synthetic data. `demerge serve` runs it on stdio so the engine can be
//! tested against a real child process.

use std::collections::HashMap;
use std::path::Path;

use demerge_core::eval::Metric;
use demerge_core::inference::MlpSpec;
use demerge_core::tensor::flatten;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::evaluator::InProcessEvaluator;
use crate::harness::{self, HarnessError};
use crate::protocol::{Backend, Split};

#[derive(Debug)]
pub struct ToyBackend {
    spec: MlpSpec,
    evaluators: HashMap<(Split, Metric), InProcessEvaluator>,
}

impl ToyBackend {
    /// Dev is the macro-average over in-domain dev splits (cut to the
    /// configured fraction); test likewise over in-domain test splits.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let data = harness::load_data(cfg)?;
        let spec = cfg.mlp_spec();
        let mut evaluators = HashMap::new();
        for metric in [Metric::Accuracy, Metric::MacroF1] {
            let dev = data.dev_sets().into_iter().cloned().collect();
            let test = data.test_sets().into_iter().cloned().collect();
            evaluators.insert(
                (Split::Dev, metric),
                InProcessEvaluator::new(spec.clone(), dev, metric)?,
            );
            evaluators.insert(
                (Split::Test, metric),
                InProcessEvaluator::new(spec.clone(), test, metric)?,
            );
        }
        Ok(Self { spec, evaluators })
    }
}

impl Backend for ToyBackend {
    fn name(&self) -> String {
        "demerge-toy".into()
    }

    fn version(&self) -> String {
        env!("CARGO_PKG_VERSION").into()
    }

    /// Reads the checkpoint into the served network's layout. A spec in the
    /// metadata, when present, must match.
    fn evaluate(
        &self,
        weights_path: &Path,
        split: Split,
        metric: Metric,
    ) -> Result<(f64, usize), String> {
        let map = checkpoint::load_checkpoint(weights_path).map_err(|e| e.to_string())?;
        if let Some(raw) = map.metadata().get(checkpoint::SPEC_KEY) {
            let spec: MlpSpec = serde_json::from_str(raw)
                .map_err(|e| format!("bad `{}`: {e}", checkpoint::SPEC_KEY))?;
            if spec != self.spec {
                return Err(format!(
                    "checkpoint describes {spec:?}, evaluator serves {:?}",
                    self.spec
                ));
            }
        }
        let weights = flatten(&map, &self.spec.schema()).map_err(|e| e.to_string())?;
        let evaluator = &self.evaluators[&(split, metric)];
        let report = evaluator.report(&weights).map_err(|e| e.to_string())?;
        Ok((report.score, report.n_examples))
    }
}
