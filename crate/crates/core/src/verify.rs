//! Ownership verification: detection score, Gaussian-null calibration,
//! significance thresholds, multi-bit decoding, AUC and retention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{erfc, erfc_inv, orthonormal_basis};
use crate::model::{Corpus, ModelParams};
use crate::subspace::FunctionalSubspace;
use crate::watermark::{decode_message, signs_to_bits, WatermarkKey};

/// Lower bound on the null standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-12;
pub const MIN_NULL_TRIALS: usize = 100;
/// Significance levels reported by default.
pub const DEFAULT_ALPHA_GRID: [f64; 5] = [1e-2, 1e-3, 1e-4, 1e-6, 1e-8];

/// `b_jᵀz(x)/‖b_j‖` for every challenge `x` (rows) and key `j` (columns).
pub fn key_projections(params: &ModelParams, sub: &FunctionalSubspace, key: &WatermarkKey, challenge: &Corpus) -> Result<Vec<Vec<f64>>> {
    if challenge.is_empty() {
        return Err(Error::EmptyChallenge);
    }
    if key.k != sub.k {
        return Err(Error::DimensionMismatch { expected: sub.k, got: key.k });
    }
    sub.project_batch(params, challenge)?.iter().map(|z| key.projections(z)).collect()
}

/// `S = (1/(|C|·M)) Σ_x Σ_j y_j·b_jᵀz(x)/‖b_j‖` from precomputed projections.
pub fn score_from_projections(proj: &[Vec<f64>], signs: &[f64]) -> f64 {
    let m = signs.len() as f64;
    let total: f64 = proj.iter().map(|row| row.iter().zip(signs).map(|(p, y)| y * p).sum::<f64>()).sum();
    total / (proj.len() as f64 * m)
}

/// Per-bit means `S_j = (1/|C|) Σ_x b_jᵀz(x)/‖b_j‖`.
pub fn per_bit_from_projections(proj: &[Vec<f64>]) -> Vec<f64> {
    let m = proj.first().map_or(0, Vec::len);
    let mut s = vec![0.0; m];
    for row in proj {
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    s.iter_mut().for_each(|a| *a /= proj.len() as f64);
    s
}

/// Per-challenge statistic `s(x) = (1/M) Σ_j y_j·b_jᵀz(x)/‖b_j‖`.
pub fn per_challenge_from_projections(proj: &[Vec<f64>], signs: &[f64]) -> Vec<f64> {
    let m = signs.len() as f64;
    proj.iter().map(|row| row.iter().zip(signs).map(|(p, y)| y * p).sum::<f64>() / m).collect()
}

pub fn detection_score(params: &ModelParams, sub: &FunctionalSubspace, key: &WatermarkKey, challenge: &Corpus) -> Result<f64> {
    let proj = key_projections(params, sub, key, challenge)?;
    Ok(score_from_projections(&proj, &key.signs))
}

pub fn per_challenge_scores(params: &ModelParams, sub: &FunctionalSubspace, key: &WatermarkKey, challenge: &Corpus) -> Result<Vec<f64>> {
    let proj = key_projections(params, sub, key, challenge)?;
    Ok(per_challenge_from_projections(&proj, &key.signs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullSource {
    CleanModelScores,
    PermutedKeyScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullModel {
    pub sigma0: f64,
    pub source: NullSource,
    pub n_samples: usize,
    /// Mean of the sampled null scores, kept as a sanity check.
    pub mean: f64,
}

/// Null scores: `S` of the clean model under `n_trials` fresh random key
/// sets of shape `(k, m)` with random signs.
pub fn null_scores(params_clean: &ModelParams, sub: &FunctionalSubspace, key_shape: (usize, usize), challenge: &Corpus, n_trials: usize, seed: u64) -> Result<Vec<f64>> {
    let (k, m) = key_shape;
    if k != sub.k {
        return Err(Error::DimensionMismatch { expected: sub.k, got: k });
    }
    let zs = sub.project_batch(params_clean, challenge)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let keys = orthonormal_basis(rng.random(), k, m)?;
        let signs: Vec<f64> = (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let proj: Vec<Vec<f64>> = zs.iter().map(|z| keys.iter().map(|b| crate::linalg::dot(b, z)).collect()).collect();
        scores.push(score_from_projections(&proj, &signs));
    }
    Ok(scores)
}

/// Estimates `σ0` as the sample standard deviation of [`null_scores`].
pub fn estimate_null_sigma(params_clean: &ModelParams, sub: &FunctionalSubspace, key_shape: (usize, usize), challenge: &Corpus, n_trials: usize, seed: u64) -> Result<NullModel> {
    if n_trials < MIN_NULL_TRIALS {
        return Err(Error::InsufficientTrials { got: n_trials, min: MIN_NULL_TRIALS });
    }
    let scores = null_scores(params_clean, sub, key_shape, challenge, n_trials, seed)?;
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(NullModel { sigma0: var.sqrt().max(SIGMA_FLOOR), source: NullSource::PermutedKeyScores, n_samples: scores.len(), mean })
}

/// `FPR(T) = ½·erfc(T / (√2·σ0))`
pub fn fpr(t: f64, sigma0: f64) -> Result<f64> {
    if !(sigma0 > 0.0) {
        return Err(Error::DomainError { value: sigma0, domain: "sigma0 > 0" });
    }
    Ok(0.5 * erfc(t / (std::f64::consts::SQRT_2 * sigma0)))
}

/// `T_α = √2·σ0·erfc⁻¹(2α)`, the threshold with `FPR(T_α) = α`.
pub fn threshold(alpha: f64, sigma0: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::DomainError { value: alpha, domain: "alpha in (0, 0.5]" });
    }
    if !(sigma0 > 0.0) {
        return Err(Error::DomainError { value: sigma0, domain: "sigma0 > 0" });
    }
    Ok(std::f64::consts::SQRT_2 * sigma0 * erfc_inv(2.0 * alpha)?)
}

/// Mann–Whitney AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut neg = negative.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positive {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (positive.len() * negative.len()) as f64)
}

/// `100·post/pre`
pub fn retention(pre_score: f64, post_score: f64) -> Result<f64> {
    if pre_score == 0.0 {
        return Err(Error::DivisionByZero);
    }
    Ok(100.0 * post_score / pre_score)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub alpha: f64,
    pub threshold: f64,
    pub detected: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub score: f64,
    pub per_bit: Vec<f64>,
    pub decoded_bits: Vec<u8>,
    pub decoded_message: Vec<u8>,
    pub corrected_blocks: usize,
    pub bit_accuracy: f64,
    pub message_accuracy: bool,
    pub alpha: f64,
    pub threshold: f64,
    pub sigma0: f64,
    pub detected: bool,
    pub margin: f64,
    pub significance: Vec<SignificanceRow>,
    pub auc: Option<f64>,
    pub retention: Option<f64>,
}

/// Decoded bits and message from precomputed projections; threshold fields
/// are left at zero for [`DetectionReport::with_threshold`] to fill.
pub fn decode_from_projections(proj: &[Vec<f64>], key: &WatermarkKey) -> Result<DetectionReport> {
    let per_bit = per_bit_from_projections(proj);
    let decoded_bits = signs_to_bits(&per_bit);
    let (decoded_message, corrected_blocks) = decode_message(&decoded_bits, key.ecc)?;
    let matches = decoded_bits.iter().zip(&key.codeword_bits).filter(|(a, b)| a == b).count();
    Ok(DetectionReport {
        score: score_from_projections(proj, &key.signs),
        per_bit,
        decoded_bits,
        message_accuracy: decoded_message == key.message_bits,
        decoded_message,
        corrected_blocks,
        bit_accuracy: matches as f64 / key.m as f64,
        alpha: 0.0,
        threshold: 0.0,
        sigma0: 0.0,
        detected: false,
        margin: 0.0,
        significance: Vec::new(),
        auc: None,
        retention: None,
    })
}

/// Score, per-bit statistics and the ECC-decoded message.
pub fn decode(params: &ModelParams, sub: &FunctionalSubspace, key: &WatermarkKey, challenge: &Corpus) -> Result<DetectionReport> {
    decode_from_projections(&key_projections(params, sub, key, challenge)?, key)
}

impl DetectionReport {
    /// Fills the decision at `alpha` and the rows of `grid`.
    pub fn with_threshold(mut self, alpha: f64, grid: &[f64], null: &NullModel) -> Result<Self> {
        let sigma0 = null.sigma0;
        self.alpha = alpha;
        self.sigma0 = sigma0;
        self.threshold = threshold(alpha, sigma0)?;
        self.margin = self.score - self.threshold;
        self.detected = self.score > self.threshold;
        self.significance = grid
            .iter()
            .map(|&a| {
                let t = threshold(a, sigma0)?;
                Ok(SignificanceRow { alpha: a, threshold: t, detected: self.score > t, margin: self.score - t })
            })
            .collect::<Result<_>>()?;
        Ok(self)
    }
}
