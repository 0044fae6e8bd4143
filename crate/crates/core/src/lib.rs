//! Merging fine-tuned checkpoints by differential evolution.
//!
//! This crate holds the pure numerical machinery and needs only `alloc`:
//!
//! - [`tensor`]: named tensors, the flat parameter layout, and vector arithmetic.
//! - [`evolution`]: mutation, crossover, greedy replacement and the generation loop.
//! - [`merging`]: simple averaging, Fisher weighting, RegMean, TIES, greedy soup,
//!   interpolation, grid search and loss-landscape slices.
//! - [`inference`]: a small MLP engine (forward, backward, Gram capture, SGD).
//! - [`datasets`]: deterministic synthetic multi-domain classification data.
//! - [`eval`]: the evaluator abstraction the evolution loop scores candidates with.
//!
//! File formats, the external evaluator protocol and the command-line harness
//! live in the `demerge` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![deny(missing_debug_implementations)]

extern crate alloc;

pub mod datasets;
pub mod eval;
pub mod evolution;
pub mod inference;
pub mod merging;
pub mod rng;
pub mod tensor;

pub use eval::{EvalError, EvalErrorKind, Evaluator, FitnessReport};
pub use evolution::{
    evolve, step_generation, EvolveConfig, EvolveContext, EvolveError, EvolveMode, EvolveOutcome,
    EvolveTrace, GenerationRecord, Population, UpdateSemantics,
};
pub use merging::{merge, MergeAux, MergeError, MergeMethod, MergeSpec, Merger};
pub use tensor::{axpy, FlatVector, ParamSchema, Tensor, TensorError, TensorMap};
