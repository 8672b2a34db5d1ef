#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fsw_cli::ExperimentConfig;
use fsw_core::attacks::{AttackSpec, DistillConfig};

/// Small corpora and short schedules; still detects at every default level.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let c = &mut cfg.corpus;
    (c.train, c.calibration, c.embedding, c.challenge, c.evaluation, c.attack) = (1024, 256, 256, 32, 256, 256);
    cfg.training.steps = 600;
    cfg.subspace.k = 8;
    cfg.key.message = "1011".into();
    cfg.embed.steps = 300;
    cfg.embed.lr = 0.01;
    cfg.verification.null_trials = 200;
    cfg.attacks = vec![
        AttackSpec::BackboneDistill(DistillConfig { steps: 50, ..DistillConfig::default() }),
        AttackSpec::LowRankFt { rank: 4, steps: 20, lr: 0.01, seed: 0 },
        AttackSpec::Noise { eta: 0.01, seed: 0 },
        AttackSpec::Prune { ratio: 0.1 },
        AttackSpec::Quantize { bits: 8 },
    ];
    cfg
}

pub fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

pub fn fsw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsw")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}
