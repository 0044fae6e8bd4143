//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails.
//!
//! Run with `cargo test --release -p demerge --test acceptance`.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use demerge::checkpoint;
use demerge::config::{ExperimentConfig, MethodConfig};
use demerge::evaluator::InProcessEvaluator;
use demerge::harness::{self, Suite};
use demerge::protocol::{Session, SessionConfig};
use demerge::timing;
use demerge_core::datasets::SplitSet;
use demerge_core::eval::{EvalErrorKind, Evaluator, Metric};
use demerge_core::evolution::{
    evolve, step_generation, EvolveConfig, EvolveContext, EvolveError, EvolveMode, EvolveOutcome,
    Population,
};
use demerge_core::inference::{
    capture_grams, fisher_diagonal, init_weights, Activation, Batch, FisherLabels, Matrix, Mlp,
    MlpSpec,
};
use demerge_core::merging::{
    default_grid, fisher_merge, regmean_merge, simple_average, ties_merge, FisherState,
    MergeMethod, MergeSpec, TrimScope,
};
use demerge_core::{rng, FlatVector, ParamSchema};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn merge_method(method: MergeMethod) -> MethodConfig {
    MethodConfig::merge(MergeSpec::new(method))
}

fn evolver(merge: Option<MergeMethod>) -> MethodConfig {
    MethodConfig::evolve(merge.map(MergeSpec::new))
}

/// Everything one seed of the toy suite produces for the ordering and floor
/// criteria.
struct SeedRun {
    seed: u64,
    /// In-domain test macro per method label.
    scores: Vec<(String, f64)>,
    traces: Vec<(String, EvolveOutcome)>,
    soup_dev: f64,
    best_single_dev: f64,
}

impl SeedRun {
    fn score(&self, label: &str) -> f64 {
        self.scores
            .iter()
            .find(|(l, _)| l == label)
            .expect("method ran")
            .1
    }
}

fn suite_methods() -> Vec<MethodConfig> {
    let mut methods = vec![merge_method(MergeMethod::Simple), evolver(None)];
    for m in [MergeMethod::Fisher, MergeMethod::RegMean, MergeMethod::Ties] {
        methods.push(merge_method(m));
        methods.push(evolver(Some(m)));
    }
    methods
}

fn run_seed(cfg: &ExperimentConfig, data: &SplitSet, seed: u64) -> Result<SeedRun, String> {
    let suite = Suite::new(cfg, data, seed).map_err(fail)?;
    let group = suite.all_slots();
    let fitness = suite.fitness(&group).map_err(fail)?;
    let mut scores = Vec::new();
    let mut traces = Vec::new();
    for method in suite_methods() {
        let out = suite.run_method(&method, &group, &fitness).map_err(fail)?;
        let s = suite.scores(&out.artifact).map_err(fail)?;
        scores.push((method.label(), s.in_domain_macro()));
        if let Some((_, evolved)) = out.evolve {
            traces.push((method.label(), evolved));
        }
    }
    let soup = suite
        .run_method(&merge_method(MergeMethod::GreedySoup), &group, &fitness)
        .map_err(fail)?;
    let best_single_dev = suite
        .models(&group)
        .iter()
        .map(|m| fitness.evaluate(m))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(fail)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SeedRun {
        seed,
        scores,
        traces,
        soup_dev: soup.dev_score,
        best_single_dev,
    })
}

fn monotone(out: &EvolveOutcome) -> bool {
    let mut prev = out.trace.initial_best;
    for r in &out.trace.records {
        if r.best < prev {
            return false;
        }
        prev = r.best;
    }
    true
}

// ---------------------------------------------------------------------------

fn p1(runs: &[SeedRun], p11: &[(f64, u64, EvolveOutcome)]) -> Outcome {
    let mut total = 0;
    let mut bad = Vec::new();
    for run in runs {
        for (label, out) in &run.traces {
            total += 1;
            if !monotone(out) {
                bad.push(format!("{label}/seed{}", run.seed));
            }
        }
    }
    for (fraction, seed, out) in p11 {
        total += 1;
        if !monotone(out) {
            bad.push(format!("evolver@{fraction}/seed{seed}"));
        }
    }
    check(
        bad.is_empty(),
        format!(
            "{} of {total} evolve runs non-decreasing {bad:?}",
            total - bad.len()
        ),
    )
}

fn p2(cfg: &ExperimentConfig, data: &SplitSet) -> Outcome {
    let suite = Suite::new(cfg, data, 1).map_err(fail)?;
    let group = suite.all_slots();
    let fitness = suite.fitness(&group).map_err(fail)?;
    let pop = Population::new(suite.models(&group)).map_err(fail)?;
    let mut parts = Vec::new();
    let mut ok = true;
    for (f, cr) in [(0.0, 0.5), (0.5, 0.0)] {
        let ecfg = EvolveConfig {
            scale_factor: f,
            crossover_ratio: cr,
            generations: 20,
            ..suite.evolve_config(EvolveMode::Simple)
        };
        let out = evolve(&pop, &ecfg, &EvolveContext::new(&fitness)).map_err(fail)?;
        let same = out.population.same_members(&pop);
        let replaced: usize = out.trace.records.iter().map(|r| r.replacements).sum();
        ok &= same && replaced == 0;
        parts.push(format!(
            "F={f} Cr={cr}: unchanged={same} replacements={replaced}"
        ));
    }
    check(ok, parts.join("; "))
}

fn p3(runs: &[SeedRun]) -> Outcome {
    let mean = |label: &str| runs.iter().map(|r| r.score(label)).sum::<f64>() / runs.len() as f64;
    let wins = |a: &str, b: &str, strict: bool| {
        runs.iter()
            .filter(|r| {
                if strict {
                    r.score(a) > r.score(b)
                } else {
                    r.score(a) >= r.score(b)
                }
            })
            .count()
    };
    let mut ok = true;
    let mut parts = Vec::new();
    let (e, s) = (mean("evolver"), mean("simple"));
    let w = wins("evolver", "simple", true);
    ok &= e > s && w >= 4;
    parts.push(format!("evolver {e:.4} > simple {s:.4} ({w}/5)"));
    for x in ["fisher", "regmean", "ties"] {
        let xe = format!("{x}_evolver");
        let (a, b) = (mean(&xe), mean(x));
        let w = wins(&xe, x, false);
        ok &= a >= b && w >= 4;
        parts.push(format!("{xe} {a:.4} >= {x} {b:.4} ({w}/5)"));
    }
    check(ok, parts.join("; "))
}

fn random_batch(n: usize, dim: usize, classes: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, 5);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    Batch::new(
        Matrix::from_rows(&rows).unwrap(),
        (0..n).map(|i| i % classes).collect(),
    )
    .unwrap()
}

fn p4() -> Outcome {
    // equal diagonals reduce to the plain mean
    let spec = MlpSpec::toy(4, 6);
    let models: Vec<FlatVector> = (0..3).map(|s| init_weights(&spec, 40 + s)).collect();
    let refs: Vec<&FlatVector> = models.iter().collect();
    let mut r = rng::stream(8, 1);
    let diag = FlatVector::from_fn(spec.schema(), |_| r.random_range(0.0f32..3.0));
    let fishers = vec![FisherState { diag, samples: 1 }; 3];
    let fm = fisher_merge(&refs, &fishers, None).map_err(fail)?;
    let avg = simple_average(&refs, None).map_err(fail)?;
    let merge_err = fm
        .values()
        .iter()
        .zip(avg.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);

    // the squared gradients inside the Fisher against central differences
    let spec = MlpSpec::new(vec![3, 8, 6, 4], Activation::Tanh).map_err(fail)?;
    let n_params = spec.num_params();
    let mut r = rng::stream(9, 2);
    let params: Vec<f64> = (0..n_params).map(|_| r.random_range(-0.8..0.8)).collect();
    let net = Mlp::from_params(&spec, params.clone()).map_err(fail)?;
    let batch = random_batch(3, 3, 4, 3);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for n in 0..batch.len() {
        let (x, y) = (batch.features.row(n), batch.labels[n]);
        let (_, grad) = net.log_prob_grad(x, y);
        for j in 0..n_params {
            let mut p = params.clone();
            p[j] += h;
            let fp = Mlp::from_params(&spec, p.clone()).unwrap().log_prob(x, y);
            p[j] -= 2.0 * h;
            let fm = Mlp::from_params(&spec, p).unwrap().log_prob(x, y);
            let fd = (fp - fm) / (2.0 * h);
            let scale = grad[j].abs().max(fd.abs());
            if scale > 1e-7 {
                worst = worst.max((grad[j] - fd).abs() / scale);
            }
        }
    }
    // one empirical draw makes the Fisher exactly the squared gradient
    let flat = net.to_flat();
    let one = Batch::new(
        Matrix::from_rows(&[batch.features.row(0).to_vec()]).unwrap(),
        vec![batch.labels[0]],
    )
    .unwrap();
    let fisher =
        fisher_diagonal(&spec, &flat, &one, FisherLabels::Empirical, 1, 0).map_err(fail)?;
    let (_, g) = Mlp::from_flat(&spec, &flat)
        .map_err(fail)?
        .log_prob_grad(one.features.row(0), one.labels[0]);
    let sq_ok = fisher
        .diag
        .values()
        .iter()
        .zip(&g)
        .all(|(&f, g)| (f64::from(f) - g * g).abs() <= 1e-6 * (g * g).max(1e-12));
    check(
        merge_err < 1e-6 && worst < 1e-4 && sq_ok && n_params <= 500,
        format!(
            "equal-Fisher merge max|Δ| {merge_err:.2e}; gradient rel err {worst:.2e} over {n_params} params; F = g² {sq_ok}"
        ),
    )
}

fn p5() -> Outcome {
    let spec = MlpSpec::new(vec![4, 3], Activation::Tanh).map_err(fail)?;
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let models: Vec<FlatVector> = (0..2).map(|i| init_weights(&spec, seed * 10 + i)).collect();
        let batches: Vec<Batch> = (0..2)
            .map(|i| random_batch(50, 4, 3, seed * 10 + i + 100))
            .collect();
        let grams: Vec<_> = models
            .iter()
            .zip(&batches)
            .map(|(m, b)| capture_grams(&spec, m, b).unwrap())
            .collect();
        let refs: Vec<&FlatVector> = models.iter().collect();
        let merged = regmean_merge(&refs, &grams, 1.0).map_err(fail)?;
        let mut a = DMatrix::zeros(100, 4);
        let mut b = DMatrix::zeros(100, 3);
        for (k, (batch, m)) in batches.iter().zip(&models).enumerate() {
            let x = DMatrix::from_row_slice(50, 4, batch.features.data());
            let w = m.tensor("layer0.weight").unwrap();
            let w = DMatrix::from_fn(4, 3, |i, o| f64::from(w[o * 4 + i]));
            a.rows_mut(k * 50, 50).copy_from(&x);
            b.rows_mut(k * 50, 50).copy_from(&(&x * w));
        }
        let expected = a.svd(true, true).solve(&b, 1e-12).map_err(fail)?;
        let got = merged.tensor("layer0.weight").unwrap();
        for o in 0..3 {
            for i in 0..4 {
                worst = worst.max((f64::from(got[o * 4 + i]) - expected[(i, o)]).abs());
            }
        }
    }
    let toy = MlpSpec::toy(4, 6);
    let w = init_weights(&toy, 4);
    let g = capture_grams(&toy, &w, &random_batch(40, 4, 6, 8)).map_err(fail)?;
    let same = regmean_merge(&[&w, &w, &w], &[g.clone(), g.clone(), g], 0.9).map_err(fail)?;
    let idem = same
        .values()
        .iter()
        .zip(w.values())
        .map(|(a, b)| f64::from((a - b).abs()))
        .fold(0.0, f64::max);
    check(
        worst < 1e-4 && idem < 1e-5,
        format!("least-squares max|Δ| {worst:.2e}; idempotence max|Δ| {idem:.2e}"),
    )
}

fn vec_of(values: &[f32]) -> FlatVector {
    let schema = Arc::new(ParamSchema::new([("w", vec![values.len()])]).unwrap());
    FlatVector::new(schema, values.to_vec()).unwrap()
}

fn ties_oracle(pre: &[f32], models: &[Vec<f32>], keep: usize, lambda: f64) -> Vec<f32> {
    let d = pre.len();
    let trimmed: Vec<Vec<f64>> = models
        .iter()
        .map(|m| {
            let tau: Vec<f64> = (0..d)
                .map(|j| f64::from(m[j]) - f64::from(pre[j]))
                .collect();
            let mut rank: Vec<usize> = (0..d).collect();
            rank.sort_by(|&a, &b| tau[b].abs().total_cmp(&tau[a].abs()).then(a.cmp(&b)));
            let mut out = vec![0.0; d];
            for &j in &rank[..keep] {
                out[j] = tau[j];
            }
            out
        })
        .collect();
    (0..d)
        .map(|j| {
            let total: f64 = trimmed.iter().map(|t| t[j]).sum();
            let agreeing: Vec<f64> = trimmed
                .iter()
                .map(|t| t[j])
                .filter(|&v| v != 0.0 && total != 0.0 && (v > 0.0) == (total > 0.0))
                .collect();
            let mean = if agreeing.is_empty() {
                0.0
            } else {
                agreeing.iter().sum::<f64>() / agreeing.len() as f64
            };
            (f64::from(pre[j]) + lambda * mean) as f32
        })
        .collect()
}

fn p6() -> Outcome {
    let mut r = rng::stream(77, 0);
    let mut mismatches = 0;
    for instance in 0..200 {
        let mut draw = || f32::from(r.random_range(-4i8..=4)) * 0.5;
        let pre: Vec<f32> = (0..10).map(|_| draw()).collect();
        let models: Vec<Vec<f32>> = (0..3).map(|_| (0..10).map(|_| draw()).collect()).collect();
        let keep = r.random_range(1..=10usize);
        let lambda = [1.0, 0.5, 1.3][instance % 3];
        let expected = ties_oracle(&pre, &models, keep, lambda);
        let mv: Vec<FlatVector> = models.iter().map(|m| vec_of(m)).collect();
        let refs: Vec<&FlatVector> = mv.iter().collect();
        let got = ties_merge(
            &refs,
            &vec_of(&pre),
            keep as f64 / 10.0,
            lambda,
            TrimScope::Global,
        )
        .map_err(fail)?;
        if got.values() != &expected[..] {
            mismatches += 1;
        }
    }
    let pre = vec_of(&[0.5, -1.0, 2.0, 0.0]);
    let ft = vec_of(&[1.5, -1.25, 2.0, -3.0]);
    let lambda = 0.7;
    let got = ties_merge(&[&ft, &ft, &ft], &pre, 1.0, lambda, TrimScope::Global).map_err(fail)?;
    let expected: Vec<f32> = pre
        .values()
        .iter()
        .zip(ft.values())
        .map(|(&p, &t)| (f64::from(p) + lambda * (f64::from(t) - f64::from(p))) as f32)
        .collect();
    let identical = got.values() == &expected[..];
    check(
        mismatches == 0 && identical,
        format!(
            "{} of 200 instances exact; identical task vectors exact {identical}",
            200 - mismatches
        ),
    )
}

fn p7(runs: &[SeedRun]) -> Outcome {
    let bad: Vec<String> = runs
        .iter()
        .filter(|r| r.soup_dev < r.best_single_dev)
        .map(|r| format!("seed{}: {} < {}", r.seed, r.soup_dev, r.best_single_dev))
        .collect();
    let margins: Vec<String> = runs
        .iter()
        .map(|r| format!("{:+.3}", r.soup_dev - r.best_single_dev))
        .collect();
    check(
        bad.is_empty(),
        format!(
            "soup minus best single dev per seed [{}] {bad:?}",
            margins.join(", ")
        ),
    )
}

fn p8() -> Outcome {
    let expected: Vec<f64> = [
        "0.10", "0.15", "0.20", "0.25", "0.30", "0.35", "0.40", "0.45", "0.50", "0.55", "0.60",
        "0.65", "0.70", "0.75", "0.80", "0.85", "0.90",
    ]
    .iter()
    .map(|s| s.parse().unwrap())
    .collect();
    let grid = default_grid();
    let d = EvolveConfig::default();
    let cfg = ExperimentConfig::default();
    check(
        grid == expected
            && d.scale_factor == 0.5
            && d.crossover_ratio == 0.5
            && cfg.evolve.scale_factor == 0.5
            && cfg.evolve.crossover_ratio == 0.5,
        format!(
            "grid has {} points {:?}..{:?}; F={} Cr={}",
            grid.len(),
            grid.first(),
            grid.last(),
            d.scale_factor,
            d.crossover_ratio
        ),
    )
}

fn p9(cfg: &ExperimentConfig, data: &SplitSet) -> Outcome {
    let suite = Suite::new(cfg, data, 2).map_err(fail)?;
    let (i, j) = (0, 1);
    let grid = [0.0, 0.5, 1.0];
    let slice = harness::landscape(&suite, (i, j), &grid, &grid, None).map_err(fail)?;
    let fitness = suite.fitness(&[i, j]).map_err(fail)?;
    let direct_i = fitness.evaluate(&suite.pop.models[i]).map_err(fail)?;
    let direct_j = fitness.evaluate(&suite.pop.models[j]).map_err(fail)?;
    let direct_pre = fitness.evaluate(&suite.pop.pre).map_err(fail)?;
    let tau_i =
        demerge_core::merging::TaskVector::new(suite.pop.pre.clone(), suite.pop.models[i].clone())
            .map_err(fail)?;
    let tau_j =
        demerge_core::merging::TaskVector::new(suite.pop.pre.clone(), suite.pop.models[j].clone())
            .map_err(fail)?;
    let corner = demerge_core::merging::landscape_point(&suite.pop.pre, &tau_i, &tau_j, 1.0, 0.0)
        .map_err(fail)?;
    let ok = slice.scores[2][0] == direct_i
        && slice.scores[0][2] == direct_j
        && slice.scores[0][0] == direct_pre
        && corner.bits_eq(&suite.pop.models[i]);
    check(
        ok,
        format!(
            "(1,0) {} vs model {}; (0,1) {} vs {}; (0,0) {} vs θ_pre {}; weights bitwise {}",
            slice.scores[2][0],
            direct_i,
            slice.scores[0][2],
            direct_j,
            slice.scores[0][0],
            direct_pre,
            corner.bits_eq(&suite.pop.models[i])
        ),
    )
}

/// Evaluation time of one evolve run with dev splits cut to `per_domain`.
fn timed_evolve(
    suite: &Suite<'_>,
    data: &SplitSet,
    per_domain: usize,
    generations: usize,
) -> Result<(u64, timing::TimeModel), String> {
    let sets: Vec<Batch> = data
        .domains
        .iter()
        .map(|d| d.dev.prefix(per_domain))
        .collect();
    let fitness =
        InProcessEvaluator::new(suite.pop.spec.clone(), sets, Metric::Accuracy).map_err(fail)?;
    let dev_len = fitness.n_examples();
    let ecfg = EvolveConfig {
        generations,
        ..suite.evolve_config(EvolveMode::Simple)
    };
    let cal = timing::calibrate(&suite.pop.models, &ecfg, &fitness, dev_len, 20).map_err(fail)?;
    let pop = Population::new(suite.pop.models.clone()).map_err(fail)?;
    let clock = timing::StdClock::new();
    let out = evolve(
        &pop,
        &ecfg,
        &EvolveContext::new(&fitness).with_clock(&clock),
    )
    .map_err(fail)?;
    let model = timing::time_report(&out.trace, dev_len, pop.len(), generations, Some(cal));
    Ok((out.trace.total_eval_nanos(), model))
}

fn p10(cfg: &ExperimentConfig) -> Outcome {
    let mut big = cfg.clone();
    big.dataset.domain.n_dev = 800;
    let data = harness::load_data(&big).map_err(fail)?;
    let suite = Suite::new(&big, &data, 1).map_err(fail)?;
    let generations = 10;
    // best of three repetitions damps scheduler noise
    let mut best = [(u64::MAX, None), (u64::MAX, None)];
    for _ in 0..3 {
        for (slot, per_domain) in [400, 800].into_iter().enumerate() {
            let (eval, model) = timed_evolve(&suite, &data, per_domain, generations)?;
            if eval < best[slot].0 {
                best[slot] = (eval, Some(model));
            }
        }
    }
    let ratio = best[1].0 as f64 / best[0].0 as f64;
    let models: Vec<timing::TimeModel> = best
        .into_iter()
        .map(|(_, m)| m.expect("measured"))
        .collect();
    let within = models.iter().all(|m| m.deviation <= 2.0);
    check(
        (1.5..=2.5).contains(&ratio) && within,
        format!(
            "eval time ×{ratio:.2} for 2L; predicted/measured L={}: {:.1}/{:.1} ms, L={}: {:.1}/{:.1} ms",
            models[0].dev_len,
            models[0].predicted_nanos / 1e6,
            models[0].measured_nanos / 1e6,
            models[1].dev_len,
            models[1].predicted_nanos / 1e6,
            models[1].measured_nanos / 1e6,
        ),
    )
}

/// Evolved runs per (fraction, seed), (fraction, macro) points, baseline macro.
type P11Runs = (Vec<(f64, u64, EvolveOutcome)>, Vec<(f64, f64)>, f64);

fn p11_runs(cfg: &ExperimentConfig) -> Result<P11Runs, String> {
    let fractions = [0.25, 0.5, 1.0];
    let jobs: Vec<(f64, u64)> = fractions
        .iter()
        .flat_map(|&f| SEEDS.iter().map(move |&s| (f, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(fraction, seed)| {
            let mut c = cfg.clone();
            c.dev_fraction = fraction;
            let data = harness::load_data(&c).map_err(fail)?;
            let suite = Suite::new(&c, &data, seed).map_err(fail)?;
            let group = suite.all_slots();
            let fitness = suite.fitness(&group).map_err(fail)?;
            let out = suite
                .run_method(&evolver(None), &group, &fitness)
                .map_err(fail)?;
            let evolved = suite.scores(&out.artifact).map_err(fail)?.in_domain_macro();
            let base = suite
                .run_method(&merge_method(MergeMethod::Simple), &group, &fitness)
                .map_err(fail)?;
            let base = suite
                .scores(&base.artifact)
                .map_err(fail)?
                .in_domain_macro();
            Ok((
                fraction,
                seed,
                out.evolve.expect("evolver").1,
                evolved,
                base,
            ))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let means: Vec<(f64, f64)> = fractions
        .iter()
        .map(|&f| {
            let xs: Vec<f64> = results.iter().filter(|r| r.0 == f).map(|r| r.3).collect();
            (f, xs.iter().sum::<f64>() / xs.len() as f64)
        })
        .collect();
    let base: Vec<f64> = results.iter().filter(|r| r.0 == 1.0).map(|r| r.4).collect();
    let base = base.iter().sum::<f64>() / base.len() as f64;
    let traces = results
        .into_iter()
        .map(|(f, s, t, _, _)| (f, s, t))
        .collect();
    Ok((traces, means, base))
}

fn p11(means: &[(f64, f64)], base: f64) -> Outcome {
    let increasing = means.windows(2).all(|w| w[1].1 >= w[0].1);
    let above = means.iter().all(|&(_, m)| m > base);
    let listed: Vec<String> = means.iter().map(|(f, m)| format!("{f}: {m:.4}")).collect();
    check(
        increasing && above,
        format!(
            "evolver mean by dev fraction [{}]; simple-average baseline {base:.4}",
            listed.join(", ")
        ),
    )
}

fn serve_session(
    config: &std::path::Path,
    fault: &str,
    timeout: Duration,
) -> Result<Session, demerge_core::EvalError> {
    let mut sc = SessionConfig::new(
        env!("CARGO_BIN_EXE_demerge"),
        vec![
            "serve".into(),
            "--config".into(),
            config.display().to_string(),
            "--fault".into(),
            fault.into(),
        ],
    );
    sc.evaluate_timeout = timeout;
    Session::connect(sc)
}

fn p12(cfg: &ExperimentConfig, data: &SplitSet) -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let mut parts = Vec::new();
    let mut ok = true;

    // format
    let suite = Suite::new(cfg, data, 3).map_err(fail)?;
    let a = dir.path().join("a.safetensors");
    let b = dir.path().join("b.safetensors");
    checkpoint::save_weights(&suite.pop.spec, &suite.pop.models[0], &a).map_err(fail)?;
    checkpoint::save_checkpoint(&checkpoint::load_checkpoint(&a).map_err(fail)?, &b)
        .map_err(fail)?;
    let (_, back) = checkpoint::load_weights(&b).map_err(fail)?;
    let bytes_same = std::fs::read(&a).map_err(fail)? == std::fs::read(&b).map_err(fail)?;
    let round = bytes_same && back.bits_eq(&suite.pop.models[0]);
    ok &= round;
    parts.push(format!("round trip byte-identical {round}"));

    // faults
    let config = dir.path().join("config.json");
    std::fs::write(&config, serde_json::to_string(cfg).map_err(fail)?).map_err(fail)?;
    let group = suite.all_slots();
    let local = suite.fitness(&group).map_err(fail)?;
    let ecfg = EvolveConfig {
        generations: 1,
        ..suite.evolve_config(EvolveMode::Simple)
    };
    let scored = evolve(
        &Population::new(suite.models(&group)).map_err(fail)?,
        &ecfg,
        &EvolveContext::new(&local),
    )
    .map_err(fail)?
    .population;
    let snapshot = scored.clone();
    for (fault, kind, timeout) in [
        (
            "malformed",
            EvalErrorKind::Protocol,
            Duration::from_secs(60),
        ),
        (
            "out-of-range",
            EvalErrorKind::Protocol,
            Duration::from_secs(60),
        ),
        (
            "id-mismatch",
            EvalErrorKind::Protocol,
            Duration::from_secs(60),
        ),
        ("hang", EvalErrorKind::Timeout, Duration::from_millis(500)),
    ] {
        let session = serve_session(&config, fault, timeout).map_err(fail)?;
        let got = match step_generation(&scored, &ecfg, &EvolveContext::new(&session)) {
            Err(EvolveError::Evaluation { source, .. }) => Some(source.kind),
            _ => None,
        };
        let intact = scored.same_members(&snapshot) && scored.fitness() == snapshot.fitness();
        let good = got == Some(kind) && intact && !session.is_usable();
        ok &= good;
        parts.push(format!("{fault} -> {got:?} intact={intact}"));
    }

    // trajectories
    let full = suite.evolve_config(EvolveMode::Simple);
    let x = suite.run_evolve(&group, &full, &local).map_err(fail)?;
    let session = serve_session(&config, "none", Duration::from_secs(60)).map_err(fail)?;
    session.probe_determinism(&suite.pop.pre).map_err(fail)?;
    let y = suite.run_evolve(&group, &full, &session).map_err(fail)?;
    let same = x.trace.initial_best == y.trace.initial_best
        && x.trace
            .records
            .iter()
            .zip(&y.trace.records)
            .all(|(p, q)| (p.best, p.mean, p.replacements) == (q.best, q.mean, q.replacements))
        && x.population.same_members(&y.population)
        && x.best.bits_eq(&y.best);
    ok &= same;
    parts.push(format!(
        "in-process vs external trajectory identical {same}"
    ));
    check(ok, parts.join("; "))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let started = Instant::now();
    let cfg = ExperimentConfig {
        seeds: SEEDS.to_vec(),
        ..Default::default()
    };
    let data = harness::load_data(&cfg).expect("toy suite data");

    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    // timing first, before the parallel work
    results.push(("P10", "time model", p10(&cfg)));

    let runs: Result<Vec<SeedRun>, String> = SEEDS
        .par_iter()
        .map(|&s| run_seed(&cfg, &data, s))
        .collect();
    let p11_data = p11_runs(&cfg);
    let (p11_traces, p11_outcome) = match &p11_data {
        Ok((traces, means, base)) => (traces.as_slice(), p11(means, *base)),
        Err(e) => (&[][..], Err(e.clone())),
    };
    match &runs {
        Ok(runs) => {
            results.push(("P1", "greedy monotonicity", p1(runs, p11_traces)));
            results.push(("P3", "qualitative ordering", p3(runs)));
            results.push(("P7", "greedy soup floor", p7(runs)));
        }
        Err(e) => {
            for (id, name) in [
                ("P1", "greedy monotonicity"),
                ("P3", "qualitative ordering"),
                ("P7", "greedy soup floor"),
            ] {
                results.push((id, name, Err(e.clone())));
            }
        }
    }
    results.push(("P2", "degenerate fixed points", p2(&cfg, &data)));
    results.push(("P4", "Fisher reductions", p4()));
    results.push(("P5", "RegMean optimality", p5()));
    results.push(("P6", "TIES oracle", p6()));
    results.push(("P8", "coefficient grid and defaults", p8()));
    results.push(("P9", "landscape identity", p9(&cfg, &data)));
    results.push(("P11", "dev-length trend", p11_outcome));
    results.push(("P12", "format and protocol", p12(&cfg, &data)));
    results.sort_by_key(|(id, _, _)| id[1..].parse::<u32>().unwrap_or(0));

    let mut failed = 0;
    for (id, name, outcome) in &results {
        let (verdict, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{id:<4} {verdict}  {name}: {detail}");
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
