//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use fsw_core::attacks::AttackSpec;
use fsw_core::geometry::OperatorSpec;
use fsw_core::model::{ModelConfig, TrainConfig};
use fsw_core::subspace::{SelectionMode, DEFAULT_TAU_LOWER, DEFAULT_TAU_UPPER};
use fsw_core::verify::DEFAULT_ALPHA_GRID;
use fsw_core::watermark::{parse_bits, Ablations, EmbedConfig, Ecc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Per-phase seed offsets from the global seed.
pub mod seed_offset {
    pub const CHAIN: u64 = 0;
    pub const TRAIN_CORPUS: u64 = 1;
    pub const CALIBRATION_CORPUS: u64 = 2;
    pub const EMBEDDING_CORPUS: u64 = 3;
    pub const CHALLENGE_CORPUS: u64 = 4;
    pub const EVALUATION_CORPUS: u64 = 5;
    pub const ATTACK_CORPUS: u64 = 6;
    pub const MODEL_INIT: u64 = 10;
    pub const OPERATORS: u64 = 20;
    pub const KEY: u64 = 30;
    pub const EMBED: u64 = 40;
    pub const ATTACKS: u64 = 50;
    pub const NULL: u64 = 60;
    pub const SWEEP_MESSAGE: u64 = 70;
}

/// Architecture without the seed, which derives from the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub bottleneck_layer: usize,
    pub context_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self {
            vocab_size: c.vocab_size,
            hidden_dim: c.hidden_dim,
            num_layers: c.num_layers,
            bottleneck_layer: c.bottleneck_layer,
            context_len: c.context_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// Sequences sampled from a seeded second-order Markov chain.
    Synthetic,
    /// Byte-level windows of a text file; requires `vocab_size = 256`.
    TextFile { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub source: CorpusSource,
    pub train: usize,
    pub calibration: usize,
    pub embedding: usize,
    pub challenge: usize,
    pub evaluation: usize,
    /// Data available to the training-based attacks.
    pub attack: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { source: CorpusSource::Synthetic, train: 4096, calibration: 512, embedding: 1024, challenge: 64, evaluation: 512, attack: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    /// `None` selects the default three-operator family.
    #[serde(default)]
    pub operators: Option<Vec<OperatorSpec>>,
    pub n_draws: usize,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self { operators: None, n_draws: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceSection {
    pub k: usize,
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub mode: SelectionMode,
    /// Shrink `k` to the band size instead of failing when the band is narrow.
    #[serde(default)]
    pub auto_shrink: bool,
}

impl Default for SubspaceSection {
    fn default() -> Self {
        Self { k: 16, tau_lower: DEFAULT_TAU_LOWER, tau_upper: DEFAULT_TAU_UPPER, mode: SelectionMode::Adaptive, auto_shrink: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySection {
    /// Owner message as a string of `0`/`1` characters.
    pub message: String,
    pub gamma: f64,
    pub ecc: Ecc,
}

impl Default for KeySection {
    fn default() -> Self {
        Self { message: "10110010".into(), gamma: 5.0, ecc: Ecc::Hamming74 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationSection {
    /// Significance level for the headline decision.
    pub alpha: f64,
    pub alpha_grid: Vec<f64>,
    pub null_trials: usize,
}

impl Default for VerificationSection {
    fn default() -> Self {
        Self { alpha: 1e-4, alpha_grid: DEFAULT_ALPHA_GRID.to_vec(), null_trials: 1000 }
    }
}

/// Values enumerated by `fsw sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default)]
    pub bits: Vec<usize>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub tau: Vec<(f64, f64)>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { k: vec![8, 12, 16], bits: vec![4, 8, 16], alpha: DEFAULT_ALPHA_GRID.to_vec(), tau: vec![(1e-4, 0.6), (1e-3, 0.6), (1e-4, 0.9)] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelSection,
    pub corpus: CorpusSection,
    pub training: TrainConfig,
    pub geometry: GeometrySection,
    pub subspace: SubspaceSection,
    pub key: KeySection,
    pub embed: EmbedConfig,
    /// Removed components: `consistency`, `anchor`, `invariance`, `adaptive`.
    #[serde(default)]
    pub ablations: Vec<String>,
    pub attacks: Vec<AttackSpec>,
    pub verification: VerificationSection,
    #[serde(default)]
    pub sweep: SweepSection,
    /// Default output directory, relative to the working directory.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            model: ModelSection::default(),
            corpus: CorpusSection::default(),
            training: TrainConfig::default(),
            geometry: GeometrySection::default(),
            subspace: SubspaceSection::default(),
            key: KeySection::default(),
            embed: EmbedConfig::default(),
            ablations: Vec::new(),
            attacks: AttackSpec::default_suite(),
            verification: VerificationSection::default(),
            sweep: SweepSection::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})", self.schema_version));
        }
        self.model_config().validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        if let CorpusSource::TextFile { path } = &self.corpus.source {
            if !path.exists() {
                return bad(format!("corpus text file {} does not exist", path.display()));
            }
            if self.model.vocab_size != 256 {
                return bad("text-file corpora are byte-level and need vocab_size = 256".into());
            }
        }
        let c = &self.corpus;
        if [c.train, c.calibration, c.embedding, c.challenge, c.evaluation].contains(&0) {
            return bad("every corpus split except attack must be non-empty".into());
        }
        if self.geometry.n_draws == 0 {
            return bad("geometry.n_draws must be at least 1".into());
        }
        if let Some(ops) = &self.geometry.operators {
            if ops.is_empty() {
                return bad("geometry.operators must be non-empty when given".into());
            }
            for op in ops {
                op.validate().map_err(|e| CliError::Config(format!("operator: {e}")))?;
            }
        }
        if self.subspace.k == 0 {
            return bad("subspace.k must be positive".into());
        }
        parse_bits(&self.key.message).map_err(|e| CliError::Config(format!("key.message: {e}")))?;
        if !(self.key.gamma > 0.0) {
            return bad("key.gamma must be positive".into());
        }
        self.embed.validate().map_err(|e| CliError::Config(format!("embed: {e}")))?;
        self.ablation_flags()?;
        for a in &self.attacks {
            a.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        let v = &self.verification;
        for &a in v.alpha_grid.iter().chain(std::iter::once(&v.alpha)) {
            if !(a > 0.0 && a <= 0.5) {
                return bad(format!("alpha {a} outside (0, 0.5]"));
            }
        }
        Ok(())
    }

    pub fn ablation_flags(&self) -> Result<Ablations, CliError> {
        Ablations::parse(&self.ablations.join(",")).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size: m.vocab_size,
            hidden_dim: m.hidden_dim,
            num_layers: m.num_layers,
            bottleneck_layer: m.bottleneck_layer,
            context_len: m.context_len,
            seed: self.seed.wrapping_add(seed_offset::MODEL_INIT),
        }
    }

    pub fn operators(&self) -> Vec<OperatorSpec> {
        let seed = self.seed.wrapping_add(seed_offset::OPERATORS);
        match &self.geometry.operators {
            Some(ops) => ops.iter().map(|o| OperatorSpec { seed: o.seed.wrapping_add(seed), ..o.clone() }).collect(),
            None => OperatorSpec::default_family(seed),
        }
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig { seed: self.embed.seed.wrapping_add(self.seed).wrapping_add(seed_offset::EMBED), ..self.embed.clone() }
    }

    /// Seed used for phase `offset`.
    pub fn derived_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_add(offset)
    }

    /// SHA-256 of the canonical JSON with the output directory cleared.
    pub fn hash(&self) -> String {
        let canonical = Self { output_dir: None, ..self.clone() };
        hex::encode(Sha256::digest(serde_json::to_vec(&canonical).expect("config serializes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output_dir: Some("elsewhere".into()), ..a.clone() };
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.verification.alpha_grid.push(0.7);
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let cfg = ExperimentConfig { ablations: vec!["everything".into()], ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig { schema_version: 99, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
