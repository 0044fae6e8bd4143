//! Experiment orchestration: synthetic data, population building, one report
//! cell per (method, seed), traces and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use demerge_core::datasets::{
    self, class_counts, make_domains, non_iid_partition, parity_skew, DatasetError, SplitSet,
};
use demerge_core::eval::{EvalError, Evaluator, Metric};
use demerge_core::evolution::{
    evolve, EvolveConfig, EvolveContext, EvolveError, EvolveMode, EvolveOutcome, Population,
};
use demerge_core::inference::{self, init_weights, Batch, InferenceError, MlpSpec};
use demerge_core::merging::{
    self, GridSearch, Landscape, MergeError, Merger, SearchError, TaskVector,
};
use demerge_core::{FlatVector, ParamSchema, TensorError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointError};
use crate::config::{self, ConfigError, ExperimentConfig, MethodConfig, PopulationSource};
use crate::evaluator::InProcessEvaluator;
use crate::merger::ModelAwareMerger;
use crate::protocol::{Session, SessionConfig};
use crate::report::{Cell, CheckpointHash, ReportRow, ReportTable, RunManifest, Scores};
use crate::timing::StdClock;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("population: {0}")]
    Population(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// The configured domains with dev splits already cut to `dev_fraction`.
/// In partition mode there is a single domain whose training pool is large
/// enough for every part.
pub fn load_data(cfg: &ExperimentConfig) -> Result<SplitSet, HarnessError> {
    let ds = &cfg.dataset;
    let full = match &ds.partition {
        None => make_domains(ds.n_domains, &ds.domain, ds.n_ood, ds.seed)?,
        Some(p) => {
            let classes = ds.domain.classes;
            let mut needed = vec![0usize; classes];
            for props in parity_skew(classes, p.n_parts, p.skew_factor) {
                for (c, n) in class_counts(&props, p.per_part).into_iter().enumerate() {
                    needed[c] += n;
                }
            }
            let mut spec = ds.domain.clone();
            spec.n_train = needed.into_iter().max().unwrap_or(0).max(1) * classes;
            make_domains(1, &spec, ds.n_ood, ds.seed)?
        }
    };
    Ok(datasets::dev_fraction(&full, cfg.dev_fraction)?)
}

/// A pre-trained model and the models fine-tuned from it.
#[derive(Debug, Clone)]
pub struct PopulationSet {
    pub spec: MlpSpec,
    pub pre: FlatVector,
    pub models: Vec<FlatVector>,
    /// Domain whose dev split belongs to each model.
    pub slot_domain: Vec<usize>,
}

/// Trains `θ_pre` on pooled training data, then fine-tunes one model per
/// domain (or per partition) from it. All randomness derives from `seed`.
pub fn build_population(
    cfg: &ExperimentConfig,
    data: &SplitSet,
    seed: u64,
) -> Result<PopulationSet, HarnessError> {
    let spec = cfg.mlp_spec();
    let init = init_weights(&spec, config::derive_seed(seed, config::INIT_TAG));
    let pre = inference::train(
        &spec,
        &init,
        &data.pooled_train(),
        &cfg.pretrain
            .with_seed(config::derive_seed(seed, config::PRETRAIN_TAG)),
    )?;
    let (train_sets, slot_domain): (Vec<Batch>, Vec<usize>) = match &cfg.dataset.partition {
        None => data.domains.iter().map(|d| (d.train.clone(), d.id)).unzip(),
        Some(p) => {
            let classes = cfg.dataset.domain.classes;
            let props = parity_skew(classes, p.n_parts, p.skew_factor);
            let parts = non_iid_partition(
                &data.domains[0].train,
                classes,
                p.per_part,
                &props,
                cfg.dataset.seed,
            )?;
            let n = parts.len();
            (parts, vec![0; n])
        }
    };
    let models = train_sets
        .par_iter()
        .enumerate()
        .map(|(i, set)| {
            let hyper = cfg
                .finetune
                .with_seed(config::derive_seed(seed, config::FINETUNE_TAG + i as u64));
            inference::train(&spec, &pre, set, &hyper)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PopulationSet {
        spec,
        pre,
        models,
        slot_domain,
    })
}

/// The population the config asks for: trained with `seed`, or loaded.
pub fn obtain_population(
    cfg: &ExperimentConfig,
    data: &SplitSet,
    seed: u64,
) -> Result<PopulationSet, HarnessError> {
    let (pre_path, paths) = match &cfg.population {
        PopulationSource::Train => return build_population(cfg, data, seed),
        PopulationSource::Checkpoints { pre, models } => (pre, models),
    };
    let spec = cfg.mlp_spec();
    let load = |path: &PathBuf| -> Result<FlatVector, HarnessError> {
        let (found, w) = checkpoint::load_weights(path)?;
        if found != spec {
            return Err(HarnessError::Population(format!(
                "{} holds {found:?}, config describes {spec:?}",
                path.display()
            )));
        }
        Ok(w)
    };
    let pre = load(pre_path)?;
    let models = paths.iter().map(load).collect::<Result<Vec<_>, _>>()?;
    let slot_domain: Vec<usize> = match cfg.dataset.partition {
        Some(_) => vec![0; models.len()],
        None if models.len() <= data.domains.len() => (0..models.len()).collect(),
        None => {
            return Err(HarnessError::Population(format!(
                "{} checkpoints but only {} domains",
                models.len(),
                data.domains.len()
            )))
        }
    };
    Ok(PopulationSet {
        spec,
        pre,
        models,
        slot_domain,
    })
}

pub fn schema_hash(schema: &ParamSchema) -> String {
    let mut h = Sha256::new();
    for slot in schema.slots() {
        h.update(format!("{}:{:?};", slot.name, slot.shape));
    }
    hex::encode(h.finalize())
}

/// SHA-256 of the checkpoint bytes `weights` would be saved as.
pub fn checkpoint_hash(spec: &MlpSpec, weights: &FlatVector) -> String {
    hex::encode(Sha256::digest(checkpoint::encode(
        &checkpoint::weights_to_map(spec, weights),
    )))
}

pub fn population_hashes(pop: &PopulationSet) -> Vec<CheckpointHash> {
    std::iter::once(("pre".to_owned(), &pop.pre))
        .chain(
            pop.models
                .iter()
                .enumerate()
                .map(|(i, m)| (format!("model_{i}"), m)),
        )
        .map(|(role, w)| CheckpointHash {
            sha256: checkpoint_hash(&pop.spec, w),
            role,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationManifest {
    pub seed: u64,
    pub spec: MlpSpec,
    pub schema_hash: String,
    pub files: Vec<PopulationFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationFile {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Writes `pre.safetensors`, `model_{i}.safetensors` and `population.json`.
pub fn write_population(
    dir: &Path,
    pop: &PopulationSet,
    seed: u64,
) -> Result<PopulationManifest, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();
    for (hash, w) in population_hashes(pop)
        .into_iter()
        .zip(std::iter::once(&pop.pre).chain(&pop.models))
    {
        let name = format!("{}.safetensors", hash.role);
        checkpoint::save_weights(&pop.spec, w, &dir.join(&name))?;
        files.push(PopulationFile {
            role: hash.role,
            path: name,
            sha256: hash.sha256,
        });
    }
    let manifest = PopulationManifest {
        seed,
        spec: pop.spec.clone(),
        schema_hash: schema_hash(pop.pre.schema()),
        files,
    };
    write_file(
        &dir.join("population.json"),
        serde_json::to_string_pretty(&manifest).expect("plain struct"),
    )?;
    Ok(manifest)
}

/// What a method produces.
#[derive(Debug, Clone)]
pub enum Artifact {
    Weights(FlatVector),
    /// Predictions come from averaged logits of these models.
    Ensemble(Vec<FlatVector>),
}

fn score_batch(
    spec: &MlpSpec,
    artifact: &Artifact,
    batch: &Batch,
    metric: Metric,
) -> Result<f64, InferenceError> {
    let predictions = match artifact {
        Artifact::Weights(w) => inference::predict(spec, w, batch)?,
        Artifact::Ensemble(models) => {
            let refs: Vec<&FlatVector> = models.iter().collect();
            inference::ensemble_logits(spec, &refs, batch)?
        }
    };
    if batch.is_empty() {
        return Err(InferenceError::EmptyBatch);
    }
    Ok(match metric {
        Metric::Accuracy => inference::accuracy_of(&predictions, &batch.labels),
        Metric::MacroF1 => inference::macro_f1_of(&predictions, &batch.labels, spec.classes()),
    })
}

#[derive(Debug)]
pub struct MethodOutcome {
    pub artifact: Artifact,
    pub dev_score: f64,
    pub evolve: Option<(EvolveConfig, EvolveOutcome)>,
}

/// Data plus population for one run seed.
#[derive(Debug)]
pub struct Suite<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a SplitSet,
    pub pop: PopulationSet,
    pub seed: u64,
}

impl<'a> Suite<'a> {
    pub fn new(
        cfg: &'a ExperimentConfig,
        data: &'a SplitSet,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        Ok(Self {
            pop: obtain_population(cfg, data, seed)?,
            cfg,
            data,
            seed,
        })
    }

    pub fn all_slots(&self) -> Vec<usize> {
        (0..self.pop.models.len()).collect()
    }

    /// Every slot together, or every pair when the config asks for it.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let n = self.pop.models.len();
        if self.cfg.pairwise {
            (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| vec![i, j]))
                .collect()
        } else {
            vec![self.all_slots()]
        }
    }

    /// Dev splits of the domains `group` covers, each once, in domain order.
    pub fn dev_sets(&self, group: &[usize]) -> Vec<Batch> {
        let mut domains: Vec<usize> = group.iter().map(|&i| self.pop.slot_domain[i]).collect();
        domains.sort_unstable();
        domains.dedup();
        domains
            .into_iter()
            .map(|d| self.data.domains[d].dev.clone())
            .collect()
    }

    /// Macro-average dev metric over the domains `group` covers.
    pub fn fitness(&self, group: &[usize]) -> Result<InProcessEvaluator, HarnessError> {
        Ok(InProcessEvaluator::new(
            self.pop.spec.clone(),
            self.dev_sets(group),
            self.cfg.metric,
        )?)
    }

    pub fn models(&self, group: &[usize]) -> Vec<FlatVector> {
        group.iter().map(|&i| self.pop.models[i].clone()).collect()
    }

    pub fn merger<'e>(&self, group: &[usize], fitness: &'e dyn Evaluator) -> ModelAwareMerger<'e> {
        let slot_data = group
            .iter()
            .map(|&i| self.data.domains[self.pop.slot_domain[i]].dev.clone())
            .collect();
        ModelAwareMerger::new(
            self.pop.spec.clone(),
            slot_data,
            self.cfg.fisher,
            config::derive_seed(self.seed, config::FISHER_TAG),
        )
        .with_theta_pre(self.pop.pre.clone())
        .with_evaluator(fitness)
    }

    /// Test scores on every in-domain and OOD test split.
    pub fn scores(&self, artifact: &Artifact) -> Result<Scores, HarnessError> {
        let spec = &self.pop.spec;
        let metric = self.cfg.metric;
        Ok(Scores {
            in_domain: self
                .data
                .domains
                .iter()
                .map(|d| score_batch(spec, artifact, &d.test, metric))
                .collect::<Result<_, _>>()?,
            ood: self
                .data
                .ood
                .iter()
                .map(|d| score_batch(spec, artifact, &d.test, metric))
                .collect::<Result<_, _>>()?,
        })
    }

    fn dev_score(
        &self,
        artifact: &Artifact,
        group: &[usize],
        fitness: &dyn Evaluator,
    ) -> Result<f64, HarnessError> {
        match artifact {
            Artifact::Weights(w) => Ok(fitness.evaluate(w)?),
            Artifact::Ensemble(_) => {
                let sets = self.dev_sets(group);
                let total = sets
                    .iter()
                    .map(|b| score_batch(&self.pop.spec, artifact, b, self.cfg.metric))
                    .sum::<Result<f64, _>>()?;
                Ok(total / sets.len() as f64)
            }
        }
    }

    /// Evolution settings for this seed, optionally scored through `merge`.
    pub fn evolve_config(&self, mode: EvolveMode) -> EvolveConfig {
        EvolveConfig {
            seed: self.seed,
            mode,
            ..self.cfg.evolve.clone()
        }
    }

    pub fn run_evolve(
        &self,
        group: &[usize],
        ecfg: &EvolveConfig,
        fitness: &dyn Evaluator,
    ) -> Result<EvolveOutcome, HarnessError> {
        let merger = self.merger(group, fitness);
        let clock = StdClock::new();
        let ctx = EvolveContext::new(fitness)
            .with_merger(&merger)
            .with_clock(&clock);
        let pop = Population::new(self.models(group))?;
        Ok(evolve(&pop, ecfg, &ctx)?)
    }

    pub fn run_method(
        &self,
        method: &MethodConfig,
        group: &[usize],
        fitness: &dyn Evaluator,
    ) -> Result<MethodOutcome, HarnessError> {
        let (artifact, evolved) = match method {
            MethodConfig::Merge { spec, .. } => {
                let models = self.models(group);
                let refs: Vec<&FlatVector> = models.iter().collect();
                let merged = self.merger(group, fitness).merge(&refs, spec)?;
                (Artifact::Weights(merged), None)
            }
            MethodConfig::Evolve { merge, .. } => {
                let mode = merge
                    .clone()
                    .map_or(EvolveMode::Simple, EvolveMode::Combined);
                let ecfg = self.evolve_config(mode);
                let out = self.run_evolve(group, &ecfg, fitness)?;
                (Artifact::Weights(out.best.clone()), Some((ecfg, out)))
            }
            MethodConfig::Ensemble => (Artifact::Ensemble(self.models(group)), None),
        };
        let dev_score = match &evolved {
            Some((_, out)) => out.best_fitness,
            None => self.dev_score(&artifact, group, fitness)?,
        };
        Ok(MethodOutcome {
            artifact,
            dev_score,
            evolve: evolved,
        })
    }
}

/// An evolve trace and its run manifest, ready to be written.
#[derive(Debug, Clone)]
pub struct TraceFile {
    pub stem: String,
    pub csv: String,
    pub manifest: serde_json::Value,
}

/// `generation,best,mean,replacements,t_mutate_ms,t_eval_ms`; generation 0
/// is the initial scoring.
pub fn trace_csv(out: &EvolveOutcome) -> String {
    let t = &out.trace;
    let mut csv = String::from("generation,best,mean,replacements,t_mutate_ms,t_eval_ms\n");
    csv.push_str(&format!(
        "0,{},{},0,0,{:.6}\n",
        t.initial_best,
        t.initial_mean,
        t.initial_eval_nanos as f64 / 1e6
    ));
    for r in &t.records {
        csv.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.generation,
            r.best,
            r.mean,
            r.replacements,
            r.mutate_nanos as f64 / 1e6,
            r.eval_nanos as f64 / 1e6
        ));
    }
    csv
}

pub fn trace_manifest(
    label: &str,
    ecfg: &EvolveConfig,
    out: &EvolveOutcome,
    pop: &PopulationSet,
    group: &[usize],
    evaluator: &str,
) -> serde_json::Value {
    let hashes = population_hashes(pop);
    serde_json::json!({
        "method": label,
        "seed": ecfg.seed,
        "config": ecfg,
        "schema_hash": schema_hash(pop.pre.schema()),
        "evaluator": evaluator,
        "group": group,
        "population": group.iter().map(|&i| &hashes[i + 1]).collect::<Vec<_>>(),
        "pre": &hashes[0],
        "best_fitness": out.best_fitness,
        "generations": out.trace.records.len(),
    })
}

const BASELINES: [&str; 3] = ["pretrained", "avg", "best"];

/// Test scores and dev score of one method on one group, or why it failed.
type CellResult = Result<(Scores, Option<f64>), String>;

struct SeedResult {
    manifest: RunManifest,
    /// Aligned with the report rows.
    cells: Vec<Cell>,
    traces: Vec<TraceFile>,
}

fn connect_external(
    cmd: &str,
    cfg: &ExperimentConfig,
    probe: &FlatVector,
) -> Result<Session, HarnessError> {
    let mut sc = SessionConfig::from_command_line(cmd)?;
    sc.metric = cfg.metric;
    let session = Session::connect(sc)?;
    session.probe_determinism(probe)?;
    Ok(session)
}

fn run_seed(cfg: &ExperimentConfig, data: &SplitSet, seed: u64) -> SeedResult {
    let n_rows = BASELINES.len() + cfg.methods.len();
    let fail_all = |e: &HarnessError| SeedResult {
        manifest: RunManifest {
            seed,
            schema_hash: String::new(),
            checkpoints: vec![],
            evaluator: String::new(),
            dev_fraction: cfg.dev_fraction,
            groups: vec![],
            error: Some(e.to_string()),
        },
        cells: (0..n_rows)
            .map(|_| Cell::failed(seed, e.to_string()))
            .collect(),
        traces: vec![],
    };
    let suite = match Suite::new(cfg, data, seed) {
        Ok(s) => s,
        Err(e) => return fail_all(&e),
    };
    let external = match &cfg.evaluator {
        Some(cmd) => match connect_external(cmd, cfg, &suite.pop.pre) {
            Ok(s) => Some(s),
            Err(e) => return fail_all(&e),
        },
        None => None,
    };
    let groups = suite.groups();
    let individual: Vec<Result<Scores, String>> = suite
        .pop
        .models
        .iter()
        .map(|m| {
            suite
                .scores(&Artifact::Weights(m.clone()))
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut per_row: Vec<Vec<CellResult>> = vec![Vec::new(); n_rows];
    let mut traces = Vec::new();
    let mut identity = String::new();
    for group in &groups {
        let in_process = suite.fitness(group);
        let fitness: &dyn Evaluator = match (&external, &in_process) {
            (Some(s), _) => s,
            (None, Ok(e)) => e,
            (None, Err(e)) => {
                let msg = e.to_string();
                per_row.iter_mut().for_each(|r| r.push(Err(msg.clone())));
                continue;
            }
        };
        identity = fitness.identity();

        let pre = suite
            .scores(&Artifact::Weights(suite.pop.pre.clone()))
            .map_err(|e| e.to_string())
            .and_then(|s| {
                Ok((
                    s,
                    Some(
                        fitness
                            .evaluate(&suite.pop.pre)
                            .map_err(|e| e.to_string())?,
                    ),
                ))
            });
        per_row[0].push(pre);
        let members: Result<Vec<Scores>, String> =
            group.iter().map(|&i| individual[i].clone()).collect();
        per_row[1].push(
            members
                .clone()
                .map(|m| (Scores::average(&m).expect("non-empty group"), None)),
        );
        per_row[2].push(members.map(|m| (Scores::best_of(&m).expect("non-empty group"), None)));

        for (k, method) in cfg.methods.iter().enumerate() {
            let label = method.label();
            let result = suite.run_method(method, group, fitness).and_then(|out| {
                if let Some((ecfg, evolved)) = &out.evolve {
                    let suffix = if cfg.pairwise {
                        format!(
                            "_g{}",
                            group
                                .iter()
                                .map(usize::to_string)
                                .collect::<Vec<_>>()
                                .join("-")
                        )
                    } else {
                        String::new()
                    };
                    traces.push(TraceFile {
                        stem: format!("trace_{label}_seed{seed}{suffix}"),
                        csv: trace_csv(evolved),
                        manifest: trace_manifest(
                            &label, ecfg, evolved, &suite.pop, group, &identity,
                        ),
                    });
                }
                Ok((suite.scores(&out.artifact)?, Some(out.dev_score)))
            });
            per_row[BASELINES.len() + k].push(result.map_err(|e| format!("{label}: {e}")));
        }
    }

    let cells = per_row
        .into_iter()
        .map(
            |results| match results.into_iter().collect::<Result<Vec<_>, _>>() {
                Err(e) => Cell::failed(seed, e),
                Ok(parts) => {
                    let scores: Vec<Scores> = parts.iter().map(|p| p.0.clone()).collect();
                    let devs: Option<Vec<f64>> = parts.iter().map(|p| p.1).collect();
                    let dev = devs.map(|d| d.iter().sum::<f64>() / d.len() as f64);
                    match Scores::average(&scores) {
                        Some(avg) => Cell::ok(seed, &avg, dev),
                        None => Cell::failed(seed, "no model groups"),
                    }
                }
            },
        )
        .collect();
    SeedResult {
        manifest: RunManifest {
            seed,
            schema_hash: schema_hash(suite.pop.pre.schema()),
            checkpoints: population_hashes(&suite.pop),
            evaluator: identity,
            dev_fraction: cfg.dev_fraction,
            groups,
            error: None,
        },
        cells,
        traces,
    }
}

/// Computes every (method, seed) cell. A failing cell records its error and
/// the rest of the table is still filled in.
pub fn run_experiment(
    cfg: &ExperimentConfig,
) -> Result<(ReportTable, Vec<TraceFile>), HarnessError> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| HarnessError::Population(format!("thread pool: {e}")))?;
    let results: Vec<SeedResult> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| run_seed(cfg, &data, s))
            .collect()
    });

    let mut rows: Vec<ReportRow> = BASELINES
        .iter()
        .map(|&b| ReportRow {
            method: b.to_owned(),
            params: serde_json::Value::Null,
            cells: vec![],
            mean: None,
        })
        .chain(cfg.methods.iter().map(|m| ReportRow {
            method: m.label(),
            params: serde_json::to_value(m).expect("plain enum"),
            cells: vec![],
            mean: None,
        }))
        .collect();
    let mut runs = Vec::new();
    let mut traces = Vec::new();
    for r in results {
        for (row, cell) in rows.iter_mut().zip(r.cells) {
            row.cells.push(cell);
        }
        runs.push(r.manifest);
        traces.extend(r.traces);
    }
    let mut table = ReportTable {
        columns: ReportTable::columns_for(data.domains.len(), !data.ood.is_empty()),
        seeds: cfg.seeds.clone(),
        rows,
        runs,
    };
    table.finish();
    Ok((table, traces))
}

/// Writes `report.csv`, `report.json` and `trace_*.csv`/`trace_*.json`.
pub fn write_report(
    dir: &Path,
    table: &ReportTable,
    traces: &[TraceFile],
) -> Result<(), HarnessError> {
    write_file(&dir.join("report.csv"), table.to_csv())?;
    write_file(
        &dir.join("report.json"),
        serde_json::to_string_pretty(table).expect("plain struct"),
    )?;
    for t in traces {
        write_file(&dir.join(format!("{}.csv", t.stem)), &t.csv)?;
        write_file(
            &dir.join(format!("{}.json", t.stem)),
            serde_json::to_string_pretty(&t.manifest).expect("json value"),
        )?;
    }
    Ok(())
}

/// Loss-landscape slice around `θ_pre` spanned by the task vectors of models
/// `i` and `j`, scored on the two models' dev splits.
pub fn landscape(
    suite: &Suite<'_>,
    (i, j): (usize, usize),
    grid_a: &[f64],
    grid_b: &[f64],
    evaluator: Option<&dyn Evaluator>,
) -> Result<Landscape, HarnessError> {
    let n = suite.pop.models.len();
    if i >= n || j >= n || i == j {
        return Err(HarnessError::Population(format!(
            "pair ({i}, {j}) invalid for {n} models"
        )));
    }
    let fitness = suite.fitness(&[i, j])?;
    let evaluator = evaluator.unwrap_or(&fitness);
    let tau1 = TaskVector::new(suite.pop.pre.clone(), suite.pop.models[i].clone())?;
    let tau2 = TaskVector::new(suite.pop.pre.clone(), suite.pop.models[j].clone())?;
    Ok(merging::landscape_slice(
        &suite.pop.pre,
        &tau1,
        &tau2,
        grid_a,
        grid_b,
        evaluator,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SearchObjective {
    /// `α·θᵢ + (1−α)·θⱼ` scored on the pair's dev splits.
    Interp,
    /// A full evolve run per scale factor, scored by its best dev fitness.
    ScaleFactor,
}

pub fn coefficient_search(
    suite: &Suite<'_>,
    objective: SearchObjective,
    (i, j): (usize, usize),
    grid: &[f64],
    evaluator: Option<&dyn Evaluator>,
) -> Result<GridSearch, HarnessError> {
    let wrap = |e: SearchError<HarnessError>| match e {
        SearchError::EmptyGrid => HarnessError::Population("empty search grid".into()),
        SearchError::Objective { source, .. } => source,
    };
    match objective {
        SearchObjective::Interp => {
            let fitness = suite.fitness(&[i, j])?;
            let evaluator = evaluator.unwrap_or(&fitness);
            let (a, b) = (&suite.pop.models[i], &suite.pop.models[j]);
            merging::grid_search(grid, |alpha| {
                let w = merging::pairwise_interp(a, b, alpha)?;
                Ok(evaluator.evaluate(&w)?)
            })
            .map_err(wrap)
        }
        SearchObjective::ScaleFactor => {
            let group = suite.all_slots();
            let fitness = suite.fitness(&group)?;
            let evaluator = evaluator.unwrap_or(&fitness);
            merging::grid_search(grid, |f| {
                let ecfg = EvolveConfig {
                    scale_factor: f,
                    ..suite.evolve_config(suite.cfg.evolve.mode.clone())
                };
                Ok(suite.run_evolve(&group, &ecfg, evaluator)?.best_fitness)
            })
            .map_err(wrap)
        }
    }
}
