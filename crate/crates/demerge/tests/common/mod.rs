#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Duration;

use demerge::config::ExperimentConfig;
use demerge::protocol::{Fault, Session, SessionConfig};
use demerge_core::eval::EvalError;

/// A suite small enough to train in well under a second.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.domain.n_train = 120;
    cfg.dataset.domain.n_dev = 24;
    cfg.dataset.domain.n_test = 60;
    cfg.pretrain.epochs = 2;
    cfg.finetune.epochs = 3;
    cfg.evolve.generations = 3;
    cfg.seeds = vec![7];
    cfg.threads = 1;
    cfg
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

pub fn fault_name(fault: Fault) -> &'static str {
    match fault {
        Fault::None => "none",
        Fault::Malformed => "malformed",
        Fault::OutOfRange => "out-of-range",
        Fault::IdMismatch => "id-mismatch",
        Fault::Hang => "hang",
        Fault::Exit => "exit",
        Fault::Noisy => "noisy",
        Fault::Reject => "reject",
    }
}

pub fn serve_config(config: &Path, fault: Fault) -> SessionConfig {
    let mut sc = SessionConfig::new(
        env!("CARGO_BIN_EXE_demerge"),
        vec![
            "serve".into(),
            "--config".into(),
            config.display().to_string(),
            "--fault".into(),
            fault_name(fault).into(),
        ],
    );
    sc.evaluate_timeout = Duration::from_secs(60);
    sc
}

pub fn connect(config: &Path, fault: Fault) -> Result<Session, EvalError> {
    Session::connect(serve_config(config, fault))
}
