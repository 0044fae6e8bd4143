//! Wall-clock accounting for evolution runs: `T = G·N·(t₁ + L·t₂)`, where
//! `t₁` is the time to form one offspring and `t₂` the evaluation time per
//! dev example.

use std::time::Instant;

use demerge_core::evolution::{self, Clock, EvolveConfig, EvolveTrace};
use demerge_core::{Evaluator, FlatVector};
use serde::{Deserialize, Serialize};

/// Nanoseconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now_nanos(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Per-offspring mutation plus crossover time.
    pub t1_nanos: f64,
    /// Evaluation time per dev example.
    pub t2_nanos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeModel {
    pub generations: usize,
    pub population: usize,
    pub dev_len: usize,
    pub t1_nanos: f64,
    pub t2_nanos: f64,
    pub predicted_nanos: f64,
    pub measured_nanos: f64,
    /// `max(predicted, measured) / min(predicted, measured)`; 1 when both are 0.
    pub deviation: f64,
    /// Prediction and measurement differ by more than a factor of two.
    pub flagged: bool,
}

/// Compares `G·N·(t₁ + L·t₂)` with the mutate and evaluate time recorded in
/// `trace`. Without a calibration, `t₁` and `t₂` are read off the trace
/// itself, which makes the prediction exact by construction.
pub fn time_report(
    trace: &EvolveTrace,
    dev_len: usize,
    population: usize,
    generations: usize,
    calibration: Option<Calibration>,
) -> TimeModel {
    let measured = (trace.total_mutate_nanos() + trace.total_eval_nanos()) as f64;
    let offspring = (generations * population) as f64;
    let Calibration { t1_nanos, t2_nanos } = calibration.unwrap_or_else(|| {
        if offspring == 0.0 || dev_len == 0 {
            Calibration {
                t1_nanos: 0.0,
                t2_nanos: 0.0,
            }
        } else {
            Calibration {
                t1_nanos: trace.total_mutate_nanos() as f64 / offspring,
                t2_nanos: trace.total_eval_nanos() as f64 / (offspring * dev_len as f64),
            }
        }
    });
    let predicted = offspring * (t1_nanos + dev_len as f64 * t2_nanos);
    let deviation = match (predicted > 0.0, measured > 0.0) {
        (true, true) => predicted.max(measured) / predicted.min(measured),
        (false, false) => 1.0,
        _ => f64::INFINITY,
    };
    TimeModel {
        generations,
        population,
        dev_len,
        t1_nanos,
        t2_nanos,
        predicted_nanos: predicted,
        measured_nanos: measured,
        deviation,
        flagged: deviation > 2.0,
    }
}

/// Times offspring formation and single evaluations outside any evolve run.
/// `dev_len` is the number of examples one evaluation scores.
pub fn calibrate(
    members: &[FlatVector],
    cfg: &EvolveConfig,
    evaluator: &dyn Evaluator,
    dev_len: usize,
    reps: usize,
) -> Result<Calibration, demerge_core::EvolveError> {
    let reps = reps.max(1);
    let start = Instant::now();
    for r in 0..reps {
        let i = r % members.len();
        std::hint::black_box(evolution::offspring(members, i, cfg, r as u64)?);
    }
    let t1 = start.elapsed().as_nanos() as f64 / reps as f64;
    let start = Instant::now();
    for r in 0..reps {
        let score = evaluator
            .evaluate(&members[r % members.len()])
            .map_err(|source| demerge_core::EvolveError::Evaluation {
                index: None,
                source,
            })?;
        std::hint::black_box(score);
    }
    let t2 = start.elapsed().as_nanos() as f64 / (reps * dev_len.max(1)) as f64;
    Ok(Calibration {
        t1_nanos: t1,
        t2_nanos: t2,
    })
}
