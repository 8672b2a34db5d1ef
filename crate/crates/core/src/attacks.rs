//! Removal attacks: quantization, weight noise, magnitude pruning, low-rank
//! fine-tuning and backbone distillation. All are pure `params -> params`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::LowRankAdapter;
use crate::error::{Error, Result};
use crate::model::{
    backward, forward_cached, grad_lm, log_softmax, softmax, split_sequence, Corpus, ModelConfig, ModelParams,
    SequenceGrad, Sgd, TensorKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Student depth; `None` halves the teacher's.
    #[serde(default)]
    pub student_layers: Option<usize>,
    #[serde(default = "DistillConfig::default_steps")]
    pub steps: usize,
    #[serde(default = "DistillConfig::default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "one")]
    pub rep_weight: f64,
    #[serde(default = "one")]
    pub logit_weight: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DistillConfig {
    fn default_steps() -> usize {
        800
    }
    fn default_lr() -> f64 {
        0.05
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student_layers: None,
            steps: Self::default_steps(),
            lr: Self::default_lr(),
            momentum: default_momentum(),
            batch_size: default_batch(),
            rep_weight: 1.0,
            logit_weight: 1.0,
            seed: 0,
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    32
}
fn one() -> f64 {
    1.0
}
fn default_bits() -> u32 {
    8
}
fn default_eta() -> f64 {
    0.01
}
fn default_ratio() -> f64 {
    0.1
}
fn default_rank() -> usize {
    4
}
fn default_ft_steps() -> usize {
    300
}
fn default_ft_lr() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    Quantize {
        #[serde(default = "default_bits")]
        bits: u32,
    },
    Noise {
        #[serde(default = "default_eta")]
        eta: f64,
        #[serde(default)]
        seed: u64,
    },
    Prune {
        #[serde(default = "default_ratio")]
        ratio: f64,
    },
    LowRankFt {
        #[serde(default = "default_rank")]
        rank: usize,
        #[serde(default = "default_ft_steps")]
        steps: usize,
        #[serde(default = "default_ft_lr")]
        lr: f64,
        #[serde(default)]
        seed: u64,
    },
    BackboneDistill(DistillConfig),
}

impl AttackSpec {
    /// The default-parameter attack suite, in reporting order.
    pub fn default_suite() -> Vec<Self> {
        vec![
            Self::BackboneDistill(DistillConfig::default()),
            Self::LowRankFt { rank: default_rank(), steps: default_ft_steps(), lr: default_ft_lr(), seed: 0 },
            Self::Noise { eta: default_eta(), seed: 0 },
            Self::Prune { ratio: default_ratio() },
            Self::Quantize { bits: default_bits() },
        ]
    }

    /// Short label used in report rows.
    pub fn label(&self) -> String {
        match self {
            Self::Quantize { bits } => format!("quantize_int{bits}"),
            Self::Noise { eta, .. } => format!("noise_eta{eta}"),
            Self::Prune { ratio } => format!("prune_{ratio}"),
            Self::LowRankFt { rank, steps, .. } => format!("lowrank_ft_r{rank}_s{steps}"),
            Self::BackboneDistill(c) => match c.student_layers {
                Some(l) => format!("distill_l{l}"),
                None => "distill".to_string(),
            },
        }
    }

    /// Whether the attack needs a training corpus.
    pub fn needs_corpus(&self) -> bool {
        matches!(self, Self::LowRankFt { .. } | Self::BackboneDistill(_))
    }

    /// Same attack with every seed offset by `base`.
    pub fn reseeded(&self, base: u64) -> Self {
        let mut s = self.clone();
        match &mut s {
            Self::Noise { seed, .. } | Self::LowRankFt { seed, .. } => *seed = seed.wrapping_add(base),
            Self::BackboneDistill(c) => c.seed = c.seed.wrapping_add(base),
            _ => {}
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("{}: {m}", self.label())));
        match *self {
            Self::Quantize { bits } if !(2..=32).contains(&bits) => bad("bits must lie in 2..=32"),
            Self::Noise { eta, .. } if !(eta >= 0.0) => bad("eta must be non-negative"),
            Self::Prune { ratio } if !(0.0..1.0).contains(&ratio) => bad("ratio must lie in [0, 1)"),
            Self::LowRankFt { rank, lr, .. } if rank == 0 || !(lr >= 0.0) => bad("rank must be positive"),
            Self::BackboneDistill(ref c) if c.batch_size == 0 || c.student_layers == Some(0) => {
                bad("student needs at least one layer and a positive batch")
            }
            _ => Ok(()),
        }
    }
}

/// Applies `spec`; `corpus` feeds the training-based attacks.
pub fn apply_attack(params: &ModelParams, spec: &AttackSpec, corpus: &Corpus) -> Result<ModelParams> {
    spec.validate()?;
    match spec {
        AttackSpec::Quantize { bits } => quantize(params, *bits),
        AttackSpec::Noise { eta, seed } => Ok(add_noise(params, *eta, *seed)),
        AttackSpec::Prune { ratio } => Ok(prune(params, *ratio)),
        AttackSpec::LowRankFt { rank, steps, lr, seed } => lowrank_finetune(params, corpus, *rank, *steps, *lr, *seed),
        AttackSpec::BackboneDistill(cfg) => {
            let student = student_config(&params.config, cfg.student_layers, cfg.seed)?;
            distill_backbone(params, &student, corpus, cfg)
        }
    }
}

fn is_weight(kind: TensorKind) -> bool {
    kind != TensorKind::Bias
}

/// Per-tensor symmetric uniform quantization to `bits` bits.
///
/// Entries at the extreme level map back to `±max|w|` exactly so that the
/// scale, and therefore the grid, is a fixed point of the operation.
pub fn quantize(params: &ModelParams, bits: u32) -> Result<ModelParams> {
    if !(2..=32).contains(&bits) {
        return Err(Error::InvalidConfig(format!("quantization bits must lie in 2..=32, got {bits}")));
    }
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    let mut out = params.clone();
    for (_, _, t) in out.tensors_mut() {
        let max = t.max_abs();
        if max == 0.0 {
            continue;
        }
        let scale = max / levels;
        for w in t.as_mut_slice() {
            let n = (*w / scale).round();
            *w = if n.abs() >= levels { max.copysign(n) } else { n * scale };
        }
    }
    Ok(out)
}

/// Adds `N(0, (η·std(W))²)` noise to every non-bias tensor.
pub fn add_noise(params: &ModelParams, eta: f64, seed: u64) -> ModelParams {
    let mut out = params.clone();
    if eta == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, kind, t) in out.tensors_mut() {
        if !is_weight(kind) {
            continue;
        }
        let data = t.as_slice();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let std = (data.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, eta * std).expect("positive std");
        t.as_mut_slice().iter_mut().for_each(|w| *w += normal.sample(&mut rng));
    }
    out
}

/// Global magnitude pruning over every non-bias tensor: zeroes exactly
/// `⌊ratio·N⌋` entries, ties broken by (tensor, index) order.
pub fn prune(params: &ModelParams, ratio: f64) -> ModelParams {
    let mut out = params.clone();
    let slices = out.tensors_mut().into_iter().filter(|(_, k, _)| is_weight(*k)).map(|(_, _, t)| t.as_mut_slice()).collect();
    prune_slices(slices, ratio);
    out
}

fn prune_slices(mut slices: Vec<&mut [f64]>, ratio: f64) {
    let mut entries: Vec<(f64, usize, usize)> =
        slices.iter().enumerate().flat_map(|(ti, t)| t.iter().enumerate().map(move |(i, w)| (w.abs(), ti, i))).collect();
    let count = (ratio * entries.len() as f64).floor() as usize;
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, ti, i) in &entries[..count] {
        slices[ti][i] = 0.0;
    }
}

/// Trains zero-initialized rank-`rank` factors on the plain LM loss and
/// merges them into the square weight matrices.
pub fn lowrank_finetune(params: &ModelParams, corpus: &Corpus, rank: usize, steps: usize, lr: f64, seed: u64) -> Result<ModelParams> {
    if rank == 0 {
        return Err(Error::InvalidConfig("adapter rank must be positive".into()));
    }
    if steps == 0 {
        return Ok(params.clone());
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut adapter = LowRankAdapter::new(params, rank, seed);
    let mut current = params.clone();
    for step in 0..steps {
        let (loss, grads) = grad_lm(&current, &corpus.batch(step, default_batch()))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        adapter.step(&grads, lr, default_momentum());
        current = adapter.merged();
    }
    Ok(current)
}

/// Student architecture: same width, vocabulary and context, `layers`
/// blocks (half the teacher's by default) and the bottleneck at the same
/// relative depth.
pub fn student_config(teacher: &ModelConfig, layers: Option<usize>, seed: u64) -> Result<ModelConfig> {
    let num_layers = layers.unwrap_or((teacher.num_layers / 2).max(1));
    if num_layers == 0 {
        return Err(Error::InvalidConfig("student needs at least one layer".into()));
    }
    let relative = teacher.bottleneck_layer as f64 * num_layers as f64 / teacher.num_layers as f64;
    let bottleneck_layer = (relative.round() as usize).clamp(1, num_layers);
    let cfg = ModelConfig { num_layers, bottleneck_layer, seed, ..teacher.clone() };
    cfg.validate()?;
    Ok(cfg)
}

/// Per-sequence distillation objective terms for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillLoss {
    pub kl: f64,
    pub rep: f64,
}

/// Mean `KL(teacher ‖ student)` per position and mean `‖r_t − r_s‖²` per
/// sequence over `corpus`.
pub fn distill_loss(teacher: &ModelParams, student: &ModelParams, corpus: &Corpus) -> Result<DistillLoss> {
    let mut kl = 0.0;
    let mut rep = 0.0;
    let mut positions = 0;
    for seq in &corpus.sequences {
        let input = split_sequence(seq).0;
        let t = forward_cached(teacher, input)?;
        let s = forward_cached(student, input)?;
        for (lt, ls) in t.logits.iter().zip(&s.logits) {
            let (pt, qs) = (log_softmax(lt), log_softmax(ls));
            kl += pt.iter().zip(&qs).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
        }
        positions += input.len();
        let rt = t.representation(teacher.config.bottleneck_layer);
        let rs = s.representation(student.config.bottleneck_layer);
        rep += rt.iter().zip(rs).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(DistillLoss { kl: kl / positions as f64, rep: rep / corpus.len() as f64 })
}

/// Trains a fresh student (seeded from `student_cfg.seed`) on
/// `logit_weight·KL(teacher ‖ student) + rep_weight·‖r_t − r_s‖²`.
pub fn distill_backbone(teacher: &ModelParams, student_cfg: &ModelConfig, corpus: &Corpus, cfg: &DistillConfig) -> Result<ModelParams> {
    let tc = &teacher.config;
    if student_cfg.hidden_dim != tc.hidden_dim {
        return Err(Error::DimensionMismatch { expected: tc.hidden_dim, got: student_cfg.hidden_dim });
    }
    if student_cfg.vocab_size != tc.vocab_size {
        return Err(Error::DimensionMismatch { expected: tc.vocab_size, got: student_cfg.vocab_size });
    }
    let mut student = ModelParams::init(student_cfg)?;
    if cfg.steps == 0 {
        return Ok(student);
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    for step in 0..cfg.steps {
        let batch = corpus.batch(step, cfg.batch_size);
        let positions: usize = batch.iter().map(|s| s.len() - 1).sum();
        let pos_scale = cfg.logit_weight / positions as f64;
        let seq_scale = 2.0 * cfg.rep_weight / batch.len() as f64;
        let mut grads = student.zeros_like();
        let mut objective = 0.0;
        for seq in &batch {
            let input = split_sequence(seq).0;
            let t = forward_cached(teacher, input)?;
            let s = forward_cached(&student, input)?;
            let logits = if cfg.logit_weight > 0.0 {
                t.logits
                    .iter()
                    .zip(&s.logits)
                    .map(|(lt, ls)| {
                        let pt = softmax(lt);
                        let qs = softmax(ls);
                        objective += pos_scale * pt.iter().zip(&qs).map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum::<f64>();
                        qs.iter().zip(&pt).map(|(q, p)| pos_scale * (q - p)).collect()
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let rt = t.representation(tc.bottleneck_layer);
            let rs = s.representation(student_cfg.bottleneck_layer);
            let diff: Vec<f64> = rs.iter().zip(rt).map(|(a, b)| a - b).collect();
            objective += 0.5 * seq_scale * diff.iter().map(|v| v * v).sum::<f64>();
            let representation = (cfg.rep_weight > 0.0).then(|| diff.iter().map(|v| seq_scale * v).collect());
            backward(&student, &s, &SequenceGrad { logits, representation }, &mut grads);
        }
        if !objective.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        opt.step(&mut student, &grads);
    }
    Ok(student)
}
