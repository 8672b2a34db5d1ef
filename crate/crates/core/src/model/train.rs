use serde::{Deserialize, Serialize};

use super::{grad_lm, Corpus, ModelParams};
use crate::error::{Error, Result};

/// SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<ModelParams>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: None }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        if self.momentum == 0.0 {
            params.axpy(-self.lr, grads);
            return;
        }
        let v = self.velocity.get_or_insert_with(|| grads.zeros_like());
        v.scale(self.momentum);
        v.axpy(1.0, grads);
        params.axpy(-self.lr, v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 0.1, momentum: 0.9, batch_size: 32 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Plain next-token training on cyclic mini-batches of `corpus`.
pub fn train_lm(params: &ModelParams, corpus: &Corpus, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut p = params.clone();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = corpus.batch(step, cfg.batch_size);
        let (loss, grads) = grad_lm(&p, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        log.losses.push(loss);
        opt.step(&mut p, &grads);
    }
    Ok((p, log))
}
