//! Checkpoint IO, the external evaluator protocol, the experiment harness and
//! the `demerge` command line, on top of [`demerge_core`].

pub use demerge_core as core;

pub mod checkpoint;
pub mod config;
pub mod evaluator;
pub mod harness;
pub mod merger;
pub mod plot;
pub mod protocol;
pub mod report;
pub mod serve;
pub mod timing;
