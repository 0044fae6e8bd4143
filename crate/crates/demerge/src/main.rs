use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demerge::checkpoint;
use demerge::config::{ExperimentConfig, MethodConfig};
use demerge::harness::{self, Artifact, HarnessError, SearchObjective, Suite};
use demerge::plot;
use demerge::protocol::{self, Fault, Session, SessionConfig};
use demerge::serve::ToyBackend;
use demerge::timing;
use demerge_core::evolution::EvolveMode;
use demerge_core::merging::{default_grid, MergeMethod, MergeSpec};
use demerge_core::{Evaluator, FlatVector};

#[derive(Parser)]
#[command(
    name = "demerge",
    version,
    about = "Evolve and merge fine-tuned model checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults describe the 5-domain toy suite.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use this seed instead of the config's seed list.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// External evaluator command line used for fitness instead of the
    /// built-in engine.
    #[arg(long)]
    evaluator: Option<String>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    scale_factor: Option<f64>,
    #[arg(long)]
    crossover: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train θ_pre and the fine-tuned models and write them as checkpoints.
    BuildPopulation(Common),
    /// Run one evolution over the whole population.
    Evolve {
        #[command(flatten)]
        common: Common,
        /// Score offspring through this merge (combined mode).
        #[arg(long)]
        merge: Option<String>,
    },
    /// Merge the whole population with one method.
    Merge {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "simple")]
        method: String,
    },
    /// Score a checkpoint on every dev and test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Score the plane θ_pre + a·τ_i + b·τ_j on a grid.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "0,1")]
        pair: String,
        #[arg(long, default_value_t = -0.5)]
        min: f64,
        #[arg(long, default_value_t = 1.5)]
        max: f64,
        #[arg(long, default_value_t = 9)]
        steps: usize,
    },
    /// Grid-search an interpolation weight or the evolver scale factor.
    CoeffSearch {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "interp")]
        objective: SearchObjective,
        #[arg(long, default_value = "0,1")]
        pair: String,
    },
    /// Run every configured method for every seed and write the report.
    Report(Common),
    /// Answer evaluator-protocol requests on stdin/stdout.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none", hide = true)]
        fault: Fault,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("{0}")]
    Usage(String),
}

impl<T> From<T> for Box<CliError>
where
    HarnessError: From<T>,
{
    fn from(e: T) -> Self {
        Box::new(CliError::Harness(HarnessError::from(e)))
    }
}

type Result<T> = std::result::Result<T, Box<CliError>>;

fn usage(msg: impl Into<String>) -> Box<CliError> {
    Box::new(CliError::Usage(msg.into()))
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed_override {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(e) = &common.evaluator {
        cfg.evaluator = Some(e.clone());
    }
    if let Some(g) = common.generations {
        cfg.evolve.generations = g;
    }
    if let Some(f) = common.scale_factor {
        cfg.evolve.scale_factor = f;
    }
    if let Some(c) = common.crossover {
        cfg.evolve.crossover_ratio = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_method(name: &str) -> Result<MergeMethod> {
    serde_json::from_value(serde_json::Value::String(name.to_owned()))
        .map_err(|_| usage(format!("unknown merge method `{name}`")))
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("pair must look like `0,1`, got `{s}`")))?;
    match parts[..] {
        [i, j] => Ok((i, j)),
        _ => Err(usage(format!("pair must have two indices, got `{s}`"))),
    }
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json value")
    );
}

/// External fitness session when the config names one.
fn external(cfg: &ExperimentConfig, probe: &FlatVector) -> Result<Option<Session>> {
    let Some(cmd) = &cfg.evaluator else {
        return Ok(None);
    };
    let mut sc = SessionConfig::from_command_line(cmd).map_err(HarnessError::from)?;
    sc.metric = cfg.metric;
    let session = Session::connect(sc).map_err(HarnessError::from)?;
    session
        .probe_determinism(probe)
        .map_err(HarnessError::from)?;
    Ok(Some(session))
}

fn build_population(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let data = harness::load_data(&cfg)?;
    let seed = cfg.seeds[0];
    let pop = harness::build_population(&cfg, &data, seed)?;
    let manifest = harness::write_population(&cfg.output_dir, &pop, seed)?;
    print_json(&serde_json::to_value(&manifest).expect("plain struct"));
    Ok(())
}

fn evolve(common: &Common, merge: Option<&str>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(m) = merge {
        cfg.evolve.mode = EvolveMode::Combined(MergeSpec::new(parse_method(m)?));
    }
    let data = harness::load_data(&cfg)?;
    let seed = cfg.seeds[0];
    let suite = Suite::new(&cfg, &data, seed)?;
    let group = suite.all_slots();
    let in_process = suite.fitness(&group)?;
    let session = external(&cfg, &suite.pop.pre)?;
    let fitness: &dyn Evaluator = match &session {
        Some(s) => s,
        None => &in_process,
    };
    let ecfg = suite.evolve_config(cfg.evolve.mode.clone());
    let calibration = timing::calibrate(
        suite.pop.models.as_slice(),
        &ecfg,
        fitness,
        in_process.n_examples(),
        10,
    )
    .map_err(HarnessError::from)?;
    let out = suite.run_evolve(&group, &ecfg, fitness)?;
    let time = timing::time_report(
        &out.trace,
        in_process.n_examples(),
        group.len(),
        ecfg.generations,
        Some(calibration),
    );
    let scores = suite.scores(&Artifact::Weights(out.best.clone()))?;

    let label = MethodConfig::evolve(match &ecfg.mode {
        EvolveMode::Simple => None,
        EvolveMode::Combined(s) => Some(s.clone()),
    })
    .label();
    let dir = &cfg.output_dir;
    let stem = format!("trace_{label}_seed{seed}");
    harness::write_file(&dir.join(format!("{stem}.csv")), harness::trace_csv(&out))?;
    let manifest =
        harness::trace_manifest(&label, &ecfg, &out, &suite.pop, &group, &fitness.identity());
    harness::write_file(
        &dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&manifest).expect("json"),
    )?;
    harness::write_file(
        &dir.join("time_model.json"),
        serde_json::to_string_pretty(&time).expect("plain struct"),
    )?;
    checkpoint::save_weights(
        &suite.pop.spec,
        &out.best,
        &dir.join(format!("{label}.safetensors")),
    )?;
    print_json(&serde_json::json!({
        "method": label,
        "seed": seed,
        "best_fitness": out.best_fitness,
        "initial_best": out.trace.initial_best,
        "test": scores,
        "in_domain_macro": scores.in_domain_macro(),
        "time_model": time,
    }));
    Ok(())
}

fn merge(common: &Common, method: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let spec = MergeSpec::new(parse_method(method)?);
    let data = harness::load_data(&cfg)?;
    let suite = Suite::new(&cfg, &data, cfg.seeds[0])?;
    let group = suite.all_slots();
    let in_process = suite.fitness(&group)?;
    let session = external(&cfg, &suite.pop.pre)?;
    let fitness: &dyn Evaluator = match &session {
        Some(s) => s,
        None => &in_process,
    };
    let out = suite.run_method(&MethodConfig::merge(spec), &group, fitness)?;
    let scores = suite.scores(&out.artifact)?;
    if let Artifact::Weights(w) = &out.artifact {
        checkpoint::save_weights(
            &suite.pop.spec,
            w,
            &cfg.output_dir.join(format!("{method}.safetensors")),
        )?;
    }
    print_json(&serde_json::json!({
        "method": method,
        "dev_score": out.dev_score,
        "test": scores,
        "in_domain_macro": scores.in_domain_macro(),
    }));
    Ok(())
}

fn eval(common: &Common, weights: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let (spec, w) = checkpoint::load_weights(weights).map_err(HarnessError::from)?;
    if spec != cfg.mlp_spec() {
        return Err(usage(format!(
            "checkpoint describes {spec:?}, config describes {:?}",
            cfg.mlp_spec()
        )));
    }
    let data = harness::load_data(&cfg)?;
    let dev: Vec<f64> = data
        .domains
        .iter()
        .map(|d| {
            demerge::evaluator::InProcessEvaluator::new(
                spec.clone(),
                vec![d.dev.clone()],
                cfg.metric,
            )
            .and_then(|e| e.evaluate(&w))
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(HarnessError::from)?;
    let test = data
        .domains
        .iter()
        .map(|d| &d.test)
        .chain(data.ood.iter().map(|d| &d.test))
        .map(|b| {
            demerge::evaluator::InProcessEvaluator::new(spec.clone(), vec![b.clone()], cfg.metric)
                .and_then(|e| e.evaluate(&w))
        })
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(HarnessError::from)?;
    let (in_domain, ood) = test.split_at(data.domains.len());
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    print_json(&serde_json::json!({
        "metric": cfg.metric,
        "dev": dev,
        "dev_macro": mean(&dev),
        "test": in_domain,
        "in_domain_macro": mean(in_domain),
        "ood": ood,
        "ood_macro": mean(ood),
    }));
    Ok(())
}

fn landscape(common: &Common, pair: &str, min: f64, max: f64, steps: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let pair = parse_pair(pair)?;
    let data = harness::load_data(&cfg)?;
    let suite = Suite::new(&cfg, &data, cfg.seeds[0])?;
    let session = external(&cfg, &suite.pop.pre)?;
    let grid = plot::linspace(min, max, steps);
    let slice = harness::landscape(
        &suite,
        pair,
        &grid,
        &grid,
        session.as_ref().map(|s| s as &dyn Evaluator),
    )?;
    let stem = format!("landscape_{}_{}", pair.0, pair.1);
    harness::write_file(
        &cfg.output_dir.join(format!("{stem}.csv")),
        plot::landscape_csv(&slice),
    )?;
    let title = format!(
        "dev score around θ_pre along τ{} (a) and τ{} (b)",
        pair.0, pair.1
    );
    harness::write_file(
        &cfg.output_dir.join(format!("{stem}.svg")),
        plot::landscape_svg(&slice, &title),
    )?;
    let best = slice.argmax();
    print_json(&serde_json::json!({ "csv": format!("{stem}.csv"), "argmax": best }));
    Ok(())
}

fn coeff_search(common: &Common, objective: SearchObjective, pair: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let pair = parse_pair(pair)?;
    let data = harness::load_data(&cfg)?;
    let suite = Suite::new(&cfg, &data, cfg.seeds[0])?;
    let session = external(&cfg, &suite.pop.pre)?;
    let result = harness::coefficient_search(
        &suite,
        objective,
        pair,
        &default_grid(),
        session.as_ref().map(|s| s as &dyn Evaluator),
    )?;
    harness::write_file(
        &cfg.output_dir.join("coeff_search.csv"),
        plot::search_csv(&result),
    )?;
    print_json(&serde_json::json!({
        "objective": objective,
        "best_value": result.best_value,
        "best_score": result.best_score,
    }));
    Ok(())
}

fn report(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let (table, traces) = harness::run_experiment(&cfg)?;
    harness::write_report(&cfg.output_dir, &table, &traces)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn serve(config: Option<&Path>, fault: Fault) -> Result<()> {
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let backend = ToyBackend::from_config(&cfg)?;
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    protocol::serve_with_fault(&backend, fault, stdin, stdout)
        .map_err(|e| usage(format!("serving: {e}")))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildPopulation(c) => build_population(c),
        Command::Evolve { common, merge } => evolve(common, merge.as_deref()),
        Command::Merge { common, method } => merge(common, method),
        Command::Eval { common, weights } => eval(common, weights),
        Command::Landscape {
            common,
            pair,
            min,
            max,
            steps,
        } => landscape(common, pair, *min, *max, *steps),
        Command::CoeffSearch {
            common,
            objective,
            pair,
        } => coeff_search(common, *objective, pair),
        Command::Report(c) => report(c),
        Command::Serve { config, fault } => serve(config.as_deref(), *fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
