//! Watermark keys, message coding, the margin and consistency losses, and
//! the joint fine-tuning loop that embeds the watermark.

mod hamming;

pub use hamming::{hamming74_decode, hamming74_encode};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::adapter::LowRankAdapter;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, orthonormal_basis};
use crate::model::{
    ce_logit_grads, forward_cached, log_softmax, split_sequence, Corpus, ModelParams, SequenceGrad, Sgd,
};
use crate::subspace::FunctionalSubspace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ecc {
    None,
    Hamming74,
}

/// Parses a string of `0`/`1` characters.
pub fn parse_bits(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != '_')
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(Error::LengthError { len: s.len(), reason: "bit strings contain only 0 and 1" }),
        })
        .collect()
}

pub fn format_bits(bits: &[u8]) -> String {
    bits.iter().map(|b| if *b == 0 { '0' } else { '1' }).collect()
}

/// Channel bits for a message: Hamming(7,4) per 4-bit block or the raw bits.
pub fn encode_message(message: &[u8], ecc: Ecc) -> Result<Vec<u8>> {
    match ecc {
        Ecc::None => {
            if message.iter().any(|&b| b > 1) {
                return Err(Error::LengthError { len: message.len(), reason: "bits must be 0 or 1" });
            }
            Ok(message.to_vec())
        }
        Ecc::Hamming74 => {
            if message.is_empty() || message.len() % 4 != 0 {
                return Err(Error::LengthError { len: message.len(), reason: "hamming74 needs a multiple of 4 bits" });
            }
            let mut out = Vec::with_capacity(message.len() / 4 * 7);
            for block in message.chunks(4) {
                out.extend_from_slice(&hamming74_encode(block)?);
            }
            Ok(out)
        }
    }
}

/// Inverse of [`encode_message`]; also returns how many blocks were corrected.
pub fn decode_message(codeword: &[u8], ecc: Ecc) -> Result<(Vec<u8>, usize)> {
    match ecc {
        Ecc::None => Ok((codeword.to_vec(), 0)),
        Ecc::Hamming74 => {
            if codeword.len() % 7 != 0 {
                return Err(Error::LengthError { len: codeword.len(), reason: "hamming74 needs a multiple of 7 bits" });
            }
            let mut message = Vec::with_capacity(codeword.len() / 7 * 4);
            let mut corrected = 0;
            for block in codeword.chunks(7) {
                let (data, fixed) = hamming74_decode(block)?;
                message.extend_from_slice(&data);
                corrected += usize::from(fixed);
            }
            Ok((message, corrected))
        }
    }
}

/// Bit 1 ↦ +1, bit 0 ↦ −1.
pub fn bits_to_signs(bits: &[u8]) -> Vec<f64> {
    bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }).collect()
}

/// Sign ≥ 0 ↦ bit 1 (so a zero statistic decodes as 1).
pub fn signs_to_bits(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| u8::from(v >= 0.0)).collect()
}

/// The owner's secret.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkKey {
    pub seed: u64,
    pub k: usize,
    pub m: usize,
    /// `m` orthonormal vectors in the `k`-dimensional backbone.
    pub keys: Vec<Vec<f64>>,
    pub message_bits: Vec<u8>,
    pub codeword_bits: Vec<u8>,
    pub signs: Vec<f64>,
    pub gamma: f64,
    pub ecc: Ecc,
}

pub fn make_key(seed: u64, k: usize, message_bits: &[u8], gamma: f64, ecc: Ecc) -> Result<WatermarkKey> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig(format!("margin must be positive, got {gamma}")));
    }
    let codeword_bits = encode_message(message_bits, ecc)?;
    let m = codeword_bits.len();
    if m == 0 {
        return Err(Error::LengthError { len: 0, reason: "empty message" });
    }
    let keys = orthonormal_basis(seed, k, m)?;
    Ok(WatermarkKey {
        seed,
        k,
        m,
        keys,
        message_bits: message_bits.to_vec(),
        signs: bits_to_signs(&codeword_bits),
        codeword_bits,
        gamma,
        ecc,
    })
}

impl WatermarkKey {
    /// `b_jᵀz / ‖b_j‖` for every key.
    pub fn projections(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.k {
            return Err(Error::DimensionMismatch { expected: self.k, got: z.len() });
        }
        Ok(self.keys.iter().map(|b| dot(b, z) / norm(b)).collect())
    }

    fn check_shape(&self) -> Result<()> {
        if self.keys.len() != self.m || self.signs.len() != self.m || self.keys.iter().any(|b| b.len() != self.k) {
            return Err(Error::DimensionMismatch { expected: self.m, got: self.keys.len() });
        }
        Ok(())
    }
}

/// `Σ_j max(0, γ − y_j·b_jᵀz/‖b_j‖)`
pub fn wm_loss(z: &[f64], key: &WatermarkKey) -> Result<f64> {
    key.check_shape()?;
    let proj = key.projections(z)?;
    Ok(proj.iter().zip(&key.signs).map(|(p, y)| (key.gamma - y * p).max(0.0)).sum())
}

/// Subgradient of [`wm_loss`] with respect to `z`; zero at the kink.
pub fn wm_loss_grad(z: &[f64], key: &WatermarkKey) -> Result<Vec<f64>> {
    let proj = key.projections(z)?;
    let mut g = vec![0.0; key.k];
    for ((b, p), y) in key.keys.iter().zip(&proj).zip(&key.signs) {
        if key.gamma - y * p > 0.0 {
            let nb = norm(b);
            g.iter_mut().zip(b).for_each(|(gi, bi)| *gi -= y * bi / nb);
        }
    }
    Ok(g)
}

/// Mean of [`wm_loss`] over a batch of projections.
pub fn wm_loss_batch(zs: &[Vec<f64>], key: &WatermarkKey) -> Result<f64> {
    if zs.is_empty() {
        return Err(Error::EmptyChallenge);
    }
    let mut total = 0.0;
    for z in zs {
        total += wm_loss(z, key)?;
    }
    Ok(total / zs.len() as f64)
}

/// `‖z − z0‖²`
pub fn consistency_loss(z: &[f64], z0: &[f64]) -> Result<f64> {
    if z.len() != z0.len() {
        return Err(Error::DimensionMismatch { expected: z0.len(), got: z.len() });
    }
    Ok(z.iter().zip(z0).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn consistency_loss_grad(z: &[f64], z0: &[f64]) -> Result<Vec<f64>> {
    if z.len() != z0.len() {
        return Err(Error::DimensionMismatch { expected: z0.len(), got: z.len() });
    }
    Ok(z.iter().zip(z0).map(|(a, b)| 2.0 * (a - b)).collect())
}

/// Mean of [`consistency_loss`] over paired batches.
pub fn consistency_loss_batch(zs: &[Vec<f64>], z0s: &[Vec<f64>]) -> Result<f64> {
    if zs.len() != z0s.len() {
        return Err(Error::DimensionMismatch { expected: z0s.len(), got: zs.len() });
    }
    if zs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (z, z0) in zs.iter().zip(z0s) {
        total += consistency_loss(z, z0)?;
    }
    Ok(total / zs.len() as f64)
}

/// Ablation switches, one per removable design component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Drop the consistency term (`λ_con = 0`).
    #[serde(default)]
    pub no_consistency: bool,
    /// Project `r` without subtracting the calibration mean.
    #[serde(default)]
    pub no_anchor: bool,
    /// Build the backbone with an identity invariance matrix.
    #[serde(default)]
    pub no_invariance: bool,
    /// Take the top-k spectrum with no band filter.
    #[serde(default)]
    pub naive_topk: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 4] = ["consistency", "anchor", "invariance", "adaptive"];

    /// Parses comma-separated component names (`consistency`, `anchor`,
    /// `invariance`, `adaptive`), each naming the part that is removed.
    pub fn parse(list: &str) -> Result<Self> {
        let mut out = Self::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "consistency" => out.no_consistency = true,
                "anchor" => out.no_anchor = true,
                "invariance" => out.no_invariance = true,
                "adaptive" => out.naive_topk = true,
                "none" => {}
                other => return Err(Error::InvalidConfig(format!("unknown ablation '{other}'"))),
            }
        }
        Ok(out)
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub lambda_wm: f64,
    pub lambda_con: f64,
    pub steps: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Embedding-corpus sequences per step.
    pub batch_size: usize,
    /// Challenge sequences per step for the margin loss.
    pub challenge_batch: usize,
    /// Restrict updates to rank-r additive factors instead of all weights.
    #[serde(default)]
    pub adapter_rank: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            lambda_wm: 10.0,
            lambda_con: 0.1,
            steps: 1000,
            lr: 0.005,
            momentum: 0.9,
            batch_size: 32,
            challenge_batch: 32,
            adapter_rank: None,
            seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_wm < 0.0 || self.lambda_con < 0.0 || !(self.lr >= 0.0) {
            return Err(Error::InvalidConfig("loss weights and learning rate must be non-negative".into()));
        }
        if self.batch_size == 0 || self.challenge_batch == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub lm: f64,
    pub wm: f64,
    pub con: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbedLog {
    pub steps: Vec<StepLoss>,
    /// Window-level notes, e.g. a 100-step window whose mean objective rose.
    pub diagnostics: Vec<String>,
}

/// Length of the windows compared by the training diagnostic.
pub const DIAGNOSTIC_WINDOW: usize = 100;

impl EmbedLog {
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.steps.chunks(window).filter(|c| c.len() == window).map(|c| c.iter().map(|s| s.total).sum::<f64>() / window as f64).collect()
    }
}

/// Fine-tunes `params0` on `L_LM + λ_wm·L_wm + λ_con·L_con`.
///
/// `L_LM` and `L_con` are averaged over mini-batches of `embed_corpus`,
/// `L_wm` over mini-batches of `challenge`. The projection basis and anchor
/// stay fixed and the consistency targets `z0` are taken from `params0`.
pub fn embed(
    params0: &ModelParams,
    sub: &FunctionalSubspace,
    key: &WatermarkKey,
    embed_corpus: &Corpus,
    challenge: &Corpus,
    cfg: &EmbedConfig,
    ablations: Ablations,
) -> Result<(ModelParams, EmbedLog)> {
    cfg.validate()?;
    key.check_shape()?;
    if embed_corpus.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if challenge.is_empty() {
        return Err(Error::EmptyChallenge);
    }
    if key.k != sub.k {
        return Err(Error::DimensionMismatch { expected: sub.k, got: key.k });
    }
    let unanchored;
    let sub = if ablations.no_anchor && sub.anchored {
        unanchored = sub.unanchored();
        &unanchored
    } else {
        sub
    };
    let lambda_con = if ablations.no_consistency { 0.0 } else { cfg.lambda_con };

    let z0 = if lambda_con > 0.0 { sub.project_batch(params0, embed_corpus)? } else { Vec::new() };

    let mut params = params0.clone();
    let mut adapter = cfg.adapter_rank.map(|r| LowRankAdapter::new(params0, r, cfg.seed));
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut log = EmbedLog::default();
    let n_embed = embed_corpus.len();
    let n_chal = challenge.len();

    for step in 0..cfg.steps {
        let mut grads = params.zeros_like();
        let mut loss = StepLoss { total: 0.0, lm: 0.0, wm: 0.0, con: 0.0 };

        let be = cfg.batch_size.min(n_embed);
        let targets_per_seq = embed_corpus.sequences[0].len() - 1;
        let lm_scale = 1.0 / (be * targets_per_seq) as f64;
        for i in 0..be {
            let idx = (step * cfg.batch_size + i) % n_embed;
            let (input, targets) = split_sequence(&embed_corpus.sequences[idx]);
            let cache = forward_cached(&params, input)?;
            loss.lm += cache.logits.iter().zip(targets).map(|(l, &y)| -log_softmax(l)[y]).sum::<f64>() * lm_scale;
            let mut upstream = SequenceGrad { logits: ce_logit_grads(&cache, targets, lm_scale), representation: None };
            if lambda_con > 0.0 {
                let z = sub.project(cache.representation(params.config.bottleneck_layer))?;
                loss.con += consistency_loss(&z, &z0[idx])? / be as f64;
                let dz: Vec<f64> =
                    consistency_loss_grad(&z, &z0[idx])?.iter().map(|g| g * lambda_con / be as f64).collect();
                upstream.representation = Some(sub.pull_back(&dz));
            }
            crate::model::backward(&params, &cache, &upstream, &mut grads);
        }

        let bc = cfg.challenge_batch.min(n_chal);
        for i in 0..bc {
            let idx = (step * cfg.challenge_batch + i) % n_chal;
            let seq = &challenge.sequences[idx];
            let input = if seq.len() > params.config.context_len { split_sequence(seq).0 } else { seq.as_slice() };
            let cache = forward_cached(&params, input)?;
            let z = sub.project(cache.representation(params.config.bottleneck_layer))?;
            loss.wm += wm_loss(&z, key)? / bc as f64;
            if cfg.lambda_wm > 0.0 {
                let dz: Vec<f64> = wm_loss_grad(&z, key)?.iter().map(|g| g * cfg.lambda_wm / bc as f64).collect();
                if dz.iter().any(|&g| g != 0.0) {
                    let upstream = SequenceGrad { logits: Vec::new(), representation: Some(sub.pull_back(&dz)) };
                    crate::model::backward(&params, &cache, &upstream, &mut grads);
                }
            }
        }

        loss.total = loss.lm + cfg.lambda_wm * loss.wm + lambda_con * loss.con;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        log.steps.push(loss);

        match adapter.as_mut() {
            Some(a) => {
                a.step(&grads, cfg.lr, cfg.momentum);
                params = a.merged();
            }
            None => opt.step(&mut params, &grads),
        }

        if (step + 1) % DIAGNOSTIC_WINDOW == 0 && step + 1 >= 2 * DIAGNOSTIC_WINDOW {
            let means = log.window_means(DIAGNOSTIC_WINDOW);
            let (prev, last) = (means[means.len() - 2], means[means.len() - 1]);
            if last >= prev {
                let msg = format!("steps {}..{}: windowed objective rose from {prev:.6} to {last:.6}", step + 1 - DIAGNOSTIC_WINDOW, step + 1);
                warn!("{msg}");
                log.diagnostics.push(msg);
            }
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_e1(gamma: f64, bit: u8) -> WatermarkKey {
        WatermarkKey {
            seed: 0,
            k: 3,
            m: 1,
            keys: vec![vec![1.0, 0.0, 0.0]],
            message_bits: vec![bit],
            codeword_bits: vec![bit],
            signs: bits_to_signs(&[bit]),
            gamma,
            ecc: Ecc::None,
        }
    }

    #[test]
    fn key_for_zero_message() {
        let key = make_key(3, 8, &[0, 0, 0, 0], 5.0, Ecc::Hamming74).unwrap();
        assert_eq!(key.codeword_bits, vec![0; 7]);
        assert!(key.signs.iter().all(|&s| s == -1.0));
        assert_eq!(key.m, 7);
    }

    #[test]
    fn key_sizes_and_determinism() {
        let key = make_key(3, 16, &parse_bits("10110010").unwrap(), 5.0, Ecc::Hamming74).unwrap();
        assert_eq!(key.m, 14);
        assert_eq!(key, make_key(3, 16, &parse_bits("10110010").unwrap(), 5.0, Ecc::Hamming74).unwrap());
        for i in 0..14 {
            assert!((norm(&key.keys[i]) - 1.0).abs() <= 1e-12);
            for j in 0..i {
                assert!(dot(&key.keys[i], &key.keys[j]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn key_errors() {
        assert!(matches!(make_key(1, 8, &[1, 0, 1, 1, 0, 0, 1, 0], 5.0, Ecc::Hamming74), Err(Error::TooManyKeys { requested: 14, dim: 8 })));
        assert!(matches!(make_key(1, 8, &[1, 0, 1], 5.0, Ecc::Hamming74), Err(Error::LengthError { .. })));
    }

    #[test]
    fn sign_bit_round_trip() {
        let bits = parse_bits("1101001").unwrap();
        assert_eq!(signs_to_bits(&bits_to_signs(&bits)), bits);
        assert_eq!(signs_to_bits(&[0.0, -0.0, -1e-300]), vec![1, 1, 0]);
        assert_eq!(format_bits(&bits), "1101001");
    }

    #[test]
    fn message_coding_round_trip() {
        let msg = parse_bits("10110010").unwrap();
        let code = encode_message(&msg, Ecc::Hamming74).unwrap();
        assert_eq!(code.len(), 14);
        assert_eq!(decode_message(&code, Ecc::Hamming74).unwrap(), (msg.clone(), 0));
        let mut bad = code.clone();
        bad[3] ^= 1;
        bad[12] ^= 1;
        assert_eq!(decode_message(&bad, Ecc::Hamming74).unwrap(), (msg, 2));
    }

    #[test]
    fn wm_loss_satisfied_point_is_zero() {
        let key = make_key(5, 6, &[1, 0, 1, 1], 5.0, Ecc::None).unwrap();
        let mut z = vec![0.0; 6];
        for (b, y) in key.keys.iter().zip(&key.signs) {
            z.iter_mut().zip(b).for_each(|(zi, bi)| *zi += key.gamma * y * bi);
        }
        assert!(wm_loss(&z, &key).unwrap() < 1e-12);
    }

    #[test]
    fn wm_loss_hinge_arithmetic() {
        let key = key_e1(5.0, 1);
        assert_eq!(wm_loss(&[4.0, 0.0, 0.0], &key).unwrap(), 1.0);
        assert_eq!(wm_loss(&[6.0, 0.0, 0.0], &key).unwrap(), 0.0);
        assert_eq!(wm_loss(&[1.0, 0.0], &key), Err(Error::DimensionMismatch { expected: 3, got: 2 }));
    }

    #[test]
    fn wm_loss_gradient_matches_finite_differences() {
        let key = make_key(9, 6, &[1, 0, 1, 1], 5.0, Ecc::None).unwrap();
        let z = vec![0.3, -2.0, 1.1, 0.7, -0.4, 2.5];
        let g = wm_loss_grad(&z, &key).unwrap();
        for i in 0..6 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += 1e-6;
            zm[i] -= 1e-6;
            let fd = (wm_loss(&zp, &key).unwrap() - wm_loss(&zm, &key).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn consistency_cases() {
        assert_eq!(consistency_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(consistency_loss(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 25.0);
        assert!(consistency_loss(&[1.0], &[1.0, 2.0]).is_err());
        let z = [0.5, -1.5, 2.0];
        let z0 = [0.1, 0.2, -0.3];
        let g = consistency_loss_grad(&z, &z0).unwrap();
        for i in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[i] += 1e-6;
            zm[i] -= 1e-6;
            let fd = (consistency_loss(&zp, &z0).unwrap() - consistency_loss(&zm, &z0).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs());
        }
        assert_eq!(consistency_loss_batch(&[vec![3.0, 4.0], vec![0.0, 0.0]], &[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap(), 12.5);
    }

    #[test]
    fn ablation_parsing() {
        let a = Ablations::parse("consistency, adaptive").unwrap();
        assert!(a.no_consistency && a.naive_topk && !a.no_anchor && !a.no_invariance);
        assert!(Ablations::parse("").unwrap().is_empty());
        assert!(Ablations::parse("bogus").is_err());
    }
}
