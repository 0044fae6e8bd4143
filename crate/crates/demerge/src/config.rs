//! Experiment configuration, read from JSON. Every field has a default, so
//! `{}` is a valid config describing the 5-domain toy suite.

use std::path::{Path, PathBuf};

use demerge_core::datasets::DomainSpec;
use demerge_core::eval::Metric;
use demerge_core::evolution::EvolveConfig;
use demerge_core::inference::{Activation, FisherLabels, MlpSpec, TrainConfig};
use demerge_core::merging::MergeSpec;
use demerge_core::rng;
use rand::RngCore;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: TrainHyper,
    pub finetune: TrainHyper,
    pub population: PopulationSource,
    /// Base evolution settings; the run seed replaces `seed` and evolver
    /// methods replace `mode`.
    pub evolve: EvolveConfig,
    pub methods: Vec<MethodConfig>,
    pub fisher: FisherConfig,
    pub metric: Metric,
    pub seeds: Vec<u64>,
    /// Share of each dev split used for fitness and merge statistics.
    pub dev_fraction: f64,
    /// Merge every pair of models instead of all of them at once.
    pub pairwise: bool,
    pub output_dir: PathBuf,
    /// External evaluator command line. Fitness comes from this process when
    /// set; reporting stays in-process.
    pub evaluator: Option<String>,
    /// Worker threads for independent seeds; 0 uses every core.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainHyper {
                lr: 0.05,
                epochs: 3,
                batch_size: 32,
            },
            finetune: TrainHyper {
                lr: 0.05,
                epochs: 5,
                batch_size: 32,
            },
            population: PopulationSource::Train,
            evolve: EvolveConfig::default(),
            methods: vec![
                MethodConfig::merge(MergeSpec::default()),
                MethodConfig::Evolve {
                    merge: None,
                    label: None,
                },
            ],
            fisher: FisherConfig::default(),
            metric: Metric::Accuracy,
            seeds: vec![1, 2, 3, 4, 5],
            dev_fraction: 1.0,
            pairwise: false,
            output_dir: PathBuf::from("out"),
            evaluator: None,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_domains: usize,
    pub n_ood: usize,
    pub domain: DomainSpec,
    pub seed: u64,
    /// Split one domain's training data into label-skewed parts instead of
    /// using separate domains.
    pub partition: Option<PartitionConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_domains: 5,
            n_ood: 2,
            domain: DomainSpec::default(),
            seed: 0,
            partition: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub n_parts: usize,
    pub per_part: usize,
    /// Over-representation of even classes in even parts (odd in odd parts);
    /// 1 means no skew.
    pub skew_factor: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            n_parts: 2,
            per_part: 1000,
            skew_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            activation: Activation::Tanh,
        }
    }
}

/// Training hyperparameters; the shuffle seed comes from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl TrainHyper {
    pub fn with_seed(self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum PopulationSource {
    /// Pre-train on pooled data, then fine-tune per domain or partition.
    Train,
    /// Previously written checkpoints. Paths are relative to the config file.
    Checkpoints { pre: PathBuf, models: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodConfig {
    Merge {
        #[serde(flatten)]
        spec: MergeSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    /// Plain evolution when `merge` is absent, otherwise evolution scored
    /// through that merge.
    Evolve {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        merge: Option<MergeSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    /// Logits averaged over the population, then argmax.
    Ensemble,
}

impl MethodConfig {
    pub fn merge(spec: MergeSpec) -> Self {
        Self::Merge { spec, label: None }
    }

    pub fn evolve(merge: Option<MergeSpec>) -> Self {
        Self::Evolve { merge, label: None }
    }

    /// Row name in reports.
    pub fn label(&self) -> String {
        match self {
            Self::Merge { label: Some(l), .. } | Self::Evolve { label: Some(l), .. } => l.clone(),
            Self::Merge { spec, .. } => spec.method.as_str().to_owned(),
            Self::Evolve { merge: None, .. } => "evolver".to_owned(),
            Self::Evolve {
                merge: Some(spec), ..
            } => format!("{}_evolver", spec.method.as_str()),
            Self::Ensemble => "ensemble".to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherConfig {
    pub labels: FisherLabels,
    /// Examples drawn per Fisher estimate; 0 means one pass over the data.
    pub draws: usize,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            labels: FisherLabels::Sampled,
            draws: 0,
        }
    }
}

const HARNESS_STREAM: u64 = (1 << 63) | (1 << 62);
pub const PRETRAIN_TAG: u64 = 1;
pub const INIT_TAG: u64 = 2;
pub const FISHER_TAG: u64 = 3;
/// Fine-tuning of slot `i` uses `FINETUNE_TAG + i`.
pub const FINETUNE_TAG: u64 = 1 << 20;

/// A seed for one pipeline stage, derived from the run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    rng::stream(seed, HARNESS_STREAM | tag).next_u64()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let PopulationSource::Checkpoints { pre, models } = &mut cfg.population {
            for p in std::iter::once(pre).chain(models.iter_mut()) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction <= 1.0) {
            return bad(format!("dev_fraction {} outside (0, 1]", self.dev_fraction));
        }
        if self.dataset.n_domains == 0 {
            return bad("n_domains must be at least 1".into());
        }
        self.dataset
            .domain
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(p) = &self.dataset.partition {
            if p.n_parts == 0 || p.per_part == 0 || p.skew_factor.is_nan() || p.skew_factor <= 0.0 {
                return bad("partition needs n_parts, per_part and skew_factor positive".into());
            }
        }
        self.mlp_spec()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.evolve
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for m in &self.methods {
            let spec = match m {
                MethodConfig::Merge { spec, .. }
                | MethodConfig::Evolve {
                    merge: Some(spec), ..
                } => spec,
                _ => continue,
            };
            spec.validate()
                .map_err(|e| ConfigError::Invalid(format!("{}: {e}", m.label())))?;
        }
        let mut labels: Vec<String> = self.methods.iter().map(MethodConfig::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!(
                "two methods share the label `{}`; set `label` on one",
                w[0]
            ));
        }
        Ok(())
    }

    pub fn mlp_spec(&self) -> MlpSpec {
        let mut dims = vec![self.dataset.domain.input_dim];
        dims.extend(&self.model.hidden);
        dims.push(self.dataset.domain.classes);
        MlpSpec {
            layer_dims: dims,
            activation: self.model.activation,
        }
    }

    /// Number of models in the population.
    pub fn population_size(&self) -> usize {
        match (&self.population, &self.dataset.partition) {
            (PopulationSource::Checkpoints { models, .. }, _) => models.len(),
            (PopulationSource::Train, Some(p)) => p.n_parts,
            (PopulationSource::Train, None) => self.dataset.n_domains,
        }
    }
}
