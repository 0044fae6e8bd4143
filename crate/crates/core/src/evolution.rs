//! Differential evolution over a population of flattened checkpoints.
//!
//! Each generation forms one offspring per member: the mutant
//! `θᵢ + F·(θ_r1 − θ_r2)` with `r1 ≠ r2 ≠ i`, crossed with the parent
//! coordinate-wise (mutant value when a uniform draw is `≤ Cr`). An offspring
//! replaces its parent only when it scores strictly higher.
//!
//! In combined mode the fitness of the population is the score of the model
//! obtained by merging it, and an offspring is scored by merging the
//! population with the offspring substituted at its parent's slot.
//!
//! Randomness comes from [`rng::member_stream`], one stream per
//! (generation, member), so both update semantics draw identical numbers.

use alloc::borrow::Cow;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::Open01;
use rand::Rng;

use crate::eval::{EvalError, Evaluator};
use crate::merging::{MergeError, MergeSpec, Merger};
use crate::rng;
use crate::tensor::{ensure_shared_schema, FlatVector, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvolveError {
    #[error("population of {size} is too small; mutation needs at least 3 members")]
    PopulationTooSmall { size: usize },
    #[error("invalid evolution config: {0}")]
    InvalidConfig(String),
    #[error("evaluating candidate {index:?} failed: {source}")]
    Evaluation {
        index: Option<usize>,
        source: EvalError,
    },
    #[error("merging for candidate {index:?} failed: {source}")]
    Merge {
        index: Option<usize>,
        source: MergeError,
    },
    #[error("combined mode needs a merger")]
    MissingMerger,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum UpdateSemantics {
    /// Offspring are formed from the generation-start population and scored
    /// as one batch; replacements are applied afterwards.
    #[default]
    Synchronous,
    /// Offspring `i` is formed and scored after replacement `i - 1` has been
    /// applied.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EvolveMode {
    /// Offspring are scored on their own; the result is the fittest member.
    #[default]
    Simple,
    /// Offspring are scored through the merge of the population; the result
    /// is the merged final population.
    Combined(MergeSpec),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EvolveConfig {
    /// `F`, weight of the donor difference vector.
    pub scale_factor: f64,
    /// `Cr`, probability of taking the mutant's coordinate.
    pub crossover_ratio: f64,
    pub generations: usize,
    pub seed: u64,
    pub mode: EvolveMode,
    pub update: UpdateSemantics,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            scale_factor: 0.5,
            crossover_ratio: 0.5,
            generations: 20,
            seed: 0,
            mode: EvolveMode::Simple,
            update: UpdateSemantics::Synchronous,
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<(), EvolveError> {
        let bad = |m: &str| Err(EvolveError::InvalidConfig(m.into()));
        if !(0.0..=2.0).contains(&self.scale_factor) {
            return bad("scale_factor must lie in [0, 2]");
        }
        if !(0.0..=1.0).contains(&self.crossover_ratio) {
            return bad("crossover_ratio must lie in [0, 1]");
        }
        if self.generations == 0 {
            return bad("generations must be at least 1");
        }
        if let EvolveMode::Combined(spec) = &self.mode {
            spec.validate()
                .map_err(|e| EvolveError::InvalidConfig(alloc::format!("{e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Population {
    members: Vec<FlatVector>,
    fitness: Vec<Option<f64>>,
    generation: u64,
}

impl Population {
    pub fn new(members: Vec<FlatVector>) -> Result<Self, EvolveError> {
        ensure_shared_schema(&members)?;
        let fitness = alloc::vec![None; members.len()];
        Ok(Self {
            members,
            fitness,
            generation: 0,
        })
    }

    pub fn members(&self) -> &[FlatVector] {
        &self.members
    }

    pub fn fitness(&self) -> &[Option<f64>] {
        &self.fitness
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_scored(&self) -> bool {
        self.fitness.iter().all(Option::is_some)
    }

    /// Fittest scored member; ties go to the lowest index.
    pub fn best(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in self.fitness.iter().enumerate() {
            if let Some(f) = *f {
                if best.is_none_or(|(_, b)| f > b) {
                    best = Some((i, f));
                }
            }
        }
        best
    }

    /// Bitwise comparison of the members, ignoring fitness.
    pub fn same_members(&self, other: &Population) -> bool {
        self.members.len() == other.members.len()
            && self.members.iter().zip(&other.members).all(|(a, b)| a == b)
    }

    fn mean_fitness(&self) -> f64 {
        let scored: Vec<f64> = self.fitness.iter().flatten().copied().collect();
        scored.iter().sum::<f64>() / scored.len().max(1) as f64
    }
}

/// Monotonic nanosecond clock used for per-phase timings.
pub trait Clock {
    fn now_nanos(&self) -> u64;
}

/// Clock that never advances; timings come out as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_nanos(&self) -> u64 {
        0
    }
}

/// Everything the loop needs besides the population and config.
#[derive(Clone, Copy)]
pub struct EvolveContext<'a> {
    pub evaluator: &'a dyn Evaluator,
    pub merger: Option<&'a dyn Merger>,
    pub clock: &'a dyn Clock,
}

impl core::fmt::Debug for EvolveContext<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("EvolveContext")
            .field("evaluator", &self.evaluator.identity())
            .field("merger", &self.merger.is_some())
            .finish()
    }
}

impl<'a> EvolveContext<'a> {
    pub fn new(evaluator: &'a dyn Evaluator) -> Self {
        Self {
            evaluator,
            merger: None,
            clock: &NoClock,
        }
    }

    pub fn with_merger(mut self, merger: &'a dyn Merger) -> Self {
        self.merger = Some(merger);
        self
    }

    pub fn with_clock(mut self, clock: &'a dyn Clock) -> Self {
        self.clock = clock;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    /// Generation number after the step (1-based).
    pub generation: u64,
    pub best: f64,
    pub mean: f64,
    pub replacements: usize,
    /// Time spent forming offspring (mutation + crossover).
    pub mutate_nanos: u64,
    /// Time spent merging and evaluating.
    pub eval_nanos: u64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvolveTrace {
    pub initial_best: f64,
    pub initial_mean: f64,
    pub initial_eval_nanos: u64,
    pub records: Vec<GenerationRecord>,
}

impl EvolveTrace {
    /// Best fitness never decreases, starting from the initial population.
    pub fn is_monotone(&self) -> bool {
        let mut prev = self.initial_best;
        for r in &self.records {
            if r.best < prev {
                return false;
            }
            prev = r.best;
        }
        true
    }

    pub fn total_mutate_nanos(&self) -> u64 {
        self.records.iter().map(|r| r.mutate_nanos).sum()
    }

    pub fn total_eval_nanos(&self) -> u64 {
        self.records.iter().map(|r| r.eval_nanos).sum()
    }
}

#[derive(Debug, Clone)]
pub struct EvolveOutcome {
    pub population: Population,
    pub trace: EvolveTrace,
    /// Fittest member (simple mode) or merged final population (combined).
    pub best: FlatVector,
    pub best_fitness: f64,
}

/// `θᵢ + F·(θ_r1 − θ_r2)` with `r1`, `r2` drawn by rejection so that `i`,
/// `r1`, `r2` are pairwise distinct.
pub fn mutate<R: Rng + ?Sized>(
    members: &[FlatVector],
    i: usize,
    scale_factor: f64,
    rng: &mut R,
) -> Result<FlatVector, EvolveError> {
    let n = members.len();
    if n < 3 {
        return Err(EvolveError::PopulationTooSmall { size: n });
    }
    if i >= n {
        return Err(EvolveError::InvalidConfig(alloc::format!(
            "member {i} out of range for population of {n}"
        )));
    }
    let r1 = loop {
        let r = rng.random_range(0..n);
        if r != i {
            break r;
        }
    };
    let r2 = loop {
        let r = rng.random_range(0..n);
        if r != i && r != r1 {
            break r;
        }
    };
    let diff = crate::tensor::sub(&members[r1], &members[r2])?;
    Ok(crate::tensor::axpy(
        scale_factor as f32,
        &diff,
        &members[i],
    )?)
}

/// Takes the mutant's coordinate where an open-interval uniform draw is
/// `≤ Cr`, one draw per coordinate in index order.
pub fn crossover<R: Rng + ?Sized>(
    parent: &FlatVector,
    mutant: &FlatVector,
    crossover_ratio: f64,
    rng: &mut R,
) -> Result<FlatVector, EvolveError> {
    parent.ensure_same_schema(mutant)?;
    let values = parent
        .values()
        .iter()
        .zip(mutant.values())
        .map(|(&p, &m)| {
            let draw: f64 = rng.sample(Open01);
            if draw <= crossover_ratio {
                m
            } else {
                p
            }
        })
        .collect();
    Ok(parent.with_values(values)?)
}

/// Offspring of member `i`, drawn from that member's stream for `generation`.
pub fn offspring(
    members: &[FlatVector],
    i: usize,
    cfg: &EvolveConfig,
    generation: u64,
) -> Result<FlatVector, EvolveError> {
    let mut rng = rng::member_stream(cfg.seed, generation, i);
    let mutant = mutate(members, i, cfg.scale_factor, &mut rng)?;
    crossover(&members[i], &mutant, cfg.crossover_ratio, &mut rng)
}

/// The vector the evaluator actually scores for candidate `i`.
fn prepare<'v>(
    candidate: &'v FlatVector,
    members: &[FlatVector],
    i: usize,
    mode: &EvolveMode,
    merger: Option<&dyn Merger>,
) -> Result<Cow<'v, FlatVector>, EvolveError> {
    match mode {
        EvolveMode::Simple => Ok(Cow::Borrowed(candidate)),
        EvolveMode::Combined(spec) => {
            let merger = merger.ok_or(EvolveError::MissingMerger)?;
            let slots: Vec<&FlatVector> = members
                .iter()
                .enumerate()
                .map(|(j, m)| if j == i { candidate } else { m })
                .collect();
            merger
                .merge(&slots, spec)
                .map(Cow::Owned)
                .map_err(|source| EvolveError::Merge {
                    index: Some(i),
                    source,
                })
        }
    }
}

/// Scores `candidate` as a replacement for member `i`: on its own in simple
/// mode, or through the merged population in combined mode.
pub fn score_candidate(
    candidate: &FlatVector,
    members: &[FlatVector],
    i: usize,
    mode: &EvolveMode,
    ctx: &EvolveContext<'_>,
) -> Result<f64, EvolveError> {
    let prepared = prepare(candidate, members, i, mode, ctx.merger)?;
    ctx.evaluator
        .evaluate(&prepared)
        .map_err(|source| EvolveError::Evaluation {
            index: Some(i),
            source,
        })
}

/// Merged model of a population under `spec`.
pub fn merge_population(
    members: &[FlatVector],
    spec: &MergeSpec,
    merger: &dyn Merger,
) -> Result<FlatVector, EvolveError> {
    let refs: Vec<&FlatVector> = members.iter().collect();
    merger
        .merge(&refs, spec)
        .map_err(|source| EvolveError::Merge {
            index: None,
            source,
        })
}

fn evaluate_all(
    evaluator: &dyn Evaluator,
    batch: &[&FlatVector],
    indices: &[usize],
) -> Result<Vec<f64>, EvolveError> {
    evaluator
        .evaluate_batch(batch)
        .into_iter()
        .zip(indices)
        .map(|(r, &i)| {
            r.map_err(|source| EvolveError::Evaluation {
                index: Some(i),
                source,
            })
        })
        .collect()
}

/// Fills in missing fitness values. Returns the number of evaluator calls.
fn score_population(
    pop: &mut Population,
    mode: &EvolveMode,
    ctx: &EvolveContext<'_>,
) -> Result<usize, EvolveError> {
    match mode {
        EvolveMode::Simple => {
            let missing: Vec<usize> = (0..pop.len())
                .filter(|&i| pop.fitness[i].is_none())
                .collect();
            let batch: Vec<&FlatVector> = missing.iter().map(|&i| &pop.members[i]).collect();
            let scores = evaluate_all(ctx.evaluator, &batch, &missing)?;
            for (&i, s) in missing.iter().zip(scores) {
                pop.fitness[i] = Some(s);
            }
            Ok(missing.len())
        }
        EvolveMode::Combined(spec) => {
            if pop.is_scored() {
                return Ok(0);
            }
            let merger = ctx.merger.ok_or(EvolveError::MissingMerger)?;
            let merged = merge_population(&pop.members, spec, merger)?;
            let s = ctx
                .evaluator
                .evaluate(&merged)
                .map_err(|source| EvolveError::Evaluation {
                    index: None,
                    source,
                })?;
            pop.fitness.iter_mut().for_each(|f| *f = Some(s));
            Ok(1)
        }
    }
}

/// Runs one generation. The input population is never modified; on error
/// nothing is committed.
pub fn step_generation(
    pop: &Population,
    cfg: &EvolveConfig,
    ctx: &EvolveContext<'_>,
) -> Result<(Population, GenerationRecord), EvolveError> {
    cfg.validate()?;
    let n = pop.len();
    if n < 3 {
        return Err(EvolveError::PopulationTooSmall { size: n });
    }
    if n > rng::MAX_MEMBERS {
        return Err(EvolveError::InvalidConfig("population too large".into()));
    }
    let clock = ctx.clock;
    let g = pop.generation;
    let mut next = pop.clone();
    let mut mutate_nanos = 0u64;
    let mut eval_nanos = 0u64;
    let mut replacements = 0usize;

    let t = clock.now_nanos();
    let mut evaluations = score_population(&mut next, &cfg.mode, ctx)?;
    eval_nanos += clock.now_nanos().saturating_sub(t);

    match cfg.update {
        UpdateSemantics::Synchronous => {
            let t = clock.now_nanos();
            let children = (0..n)
                .map(|i| offspring(&pop.members, i, cfg, g))
                .collect::<Result<Vec<_>, _>>()?;
            mutate_nanos += clock.now_nanos().saturating_sub(t);

            let t = clock.now_nanos();
            let prepared = children
                .iter()
                .enumerate()
                .map(|(i, c)| prepare(c, &pop.members, i, &cfg.mode, ctx.merger))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&FlatVector> = prepared.iter().map(|c| c.as_ref()).collect();
            let indices: Vec<usize> = (0..n).collect();
            let scores = evaluate_all(ctx.evaluator, &refs, &indices)?;
            evaluations += n;
            drop(prepared);

            match &cfg.mode {
                EvolveMode::Simple => {
                    for (i, (child, score)) in children.into_iter().zip(scores).enumerate() {
                        if score > next.fitness[i].expect("scored") {
                            next.members[i] = child;
                            next.fitness[i] = Some(score);
                            replacements += 1;
                        }
                    }
                }
                EvolveMode::Combined(_) => {
                    // Each offspring was scored against the snapshot. The first
                    // improvement commits as scored; later ones are re-scored
                    // against the updated population before they commit.
                    let snapshot_score = next.fitness[0].expect("scored");
                    let mut current = snapshot_score;
                    for (i, (child, score)) in children.into_iter().zip(scores).enumerate() {
                        if score <= snapshot_score {
                            continue;
                        }
                        let confirmed = if replacements == 0 {
                            score
                        } else {
                            evaluations += 1;
                            score_candidate(&child, &next.members, i, &cfg.mode, ctx)?
                        };
                        if confirmed > current {
                            next.members[i] = child;
                            current = confirmed;
                            replacements += 1;
                        }
                    }
                    next.fitness.iter_mut().for_each(|f| *f = Some(current));
                }
            }
            eval_nanos += clock.now_nanos().saturating_sub(t);
        }
        UpdateSemantics::Sequential => {
            for i in 0..n {
                let t = clock.now_nanos();
                let child = offspring(&next.members, i, cfg, g)?;
                mutate_nanos += clock.now_nanos().saturating_sub(t);

                let t = clock.now_nanos();
                let score = score_candidate(&child, &next.members, i, &cfg.mode, ctx)?;
                evaluations += 1;
                if score > next.fitness[i].expect("scored") {
                    next.members[i] = child;
                    replacements += 1;
                    match cfg.mode {
                        EvolveMode::Simple => next.fitness[i] = Some(score),
                        EvolveMode::Combined(_) => {
                            next.fitness.iter_mut().for_each(|f| *f = Some(score))
                        }
                    }
                }
                eval_nanos += clock.now_nanos().saturating_sub(t);
            }
        }
    }

    next.generation = g + 1;
    let record = GenerationRecord {
        generation: next.generation,
        best: next.best().map_or(f64::NAN, |b| b.1),
        mean: next.mean_fitness(),
        replacements,
        mutate_nanos,
        eval_nanos,
        evaluations,
    };
    Ok((next, record))
}

/// Runs `cfg.generations` generations and returns the final population, the
/// per-generation trace and the evolved model.
pub fn evolve(
    pop: &Population,
    cfg: &EvolveConfig,
    ctx: &EvolveContext<'_>,
) -> Result<EvolveOutcome, EvolveError> {
    cfg.validate()?;
    if pop.len() < 3 {
        return Err(EvolveError::PopulationTooSmall { size: pop.len() });
    }
    let mut current = pop.clone();
    let t = ctx.clock.now_nanos();
    score_population(&mut current, &cfg.mode, ctx)?;
    let mut trace = EvolveTrace {
        initial_best: current.best().map_or(f64::NAN, |b| b.1),
        initial_mean: current.mean_fitness(),
        initial_eval_nanos: ctx.clock.now_nanos().saturating_sub(t),
        records: Vec::with_capacity(cfg.generations),
    };
    for _ in 0..cfg.generations {
        let (next, record) = step_generation(&current, cfg, ctx)?;
        trace.records.push(record);
        current = next;
    }

    let (best, best_fitness) = match &cfg.mode {
        EvolveMode::Simple => {
            let (i, f) = current.best().expect("scored population");
            (current.members[i].clone(), f)
        }
        EvolveMode::Combined(spec) => {
            let merger = ctx.merger.ok_or(EvolveError::MissingMerger)?;
            let merged = merge_population(&current.members, spec, merger)?;
            (merged, current.fitness[0].expect("scored"))
        }
    };
    Ok(EvolveOutcome {
        population: current,
        trace,
        best,
        best_fitness,
    })
}
