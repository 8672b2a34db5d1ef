//! The end-to-end pipeline and its individual phases. Each phase reads its
//! inputs from the run directory (hash-checked) and writes its outputs back.

use std::path::Path;
use std::time::Instant;

use fsw_core::attacks::{apply_attack, AttackSpec};
use fsw_core::geometry::{estimate_geometry, GeometryEstimate};
use fsw_core::model::{gen_corpus, perplexity, train_lm, Corpus, CorpusRole, ModelParams, TrainLog};
use fsw_core::subspace::{build_backbone, naive_topk_backbone, FunctionalSubspace, SelectionMode};
use fsw_core::verify::{
    auc, decode_from_projections, estimate_null_sigma, key_projections, per_challenge_from_projections, retention,
    DetectionReport, NullModel,
};
use fsw_core::watermark::{embed, make_key, parse_bits, EmbedConfig, EmbedLog, WatermarkKey};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::artifacts::{RunDir, RunManifest, KEY_ARTIFACT};
use crate::config::{seed_offset, CorpusSource, ExperimentConfig};
use crate::error::{CliError, PhaseExt};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Artifact names and kinds.
pub mod names {
    pub const TRAIN: &str = "corpus_train";
    pub const CALIBRATION: &str = "corpus_calibration";
    pub const EMBEDDING: &str = "corpus_embedding";
    pub const CHALLENGE: &str = "corpus_challenge";
    pub const EVALUATION: &str = "corpus_evaluation";
    pub const ATTACK: &str = "corpus_attack";
    pub const BASE_MODEL: &str = "base_model";
    pub const TRAIN_LOG: &str = "train_log";
    pub const GEOMETRY: &str = "geometry";
    pub const SUBSPACE: &str = "subspace";
    pub const WATERMARKED: &str = "watermarked_model";
    pub const CLEAN_FINETUNE: &str = "clean_finetune_model";
    pub const EMBED_LOG: &str = "embed_log";
    pub const NULL: &str = "null_model";
    pub const ATTACKED_PREFIX: &str = "attacked:";
    pub const REPORT_PREFIX: &str = "report:";

    pub const KIND_MODEL: &str = "model";
    pub const KIND_GEOMETRY: &str = "geometry";
    pub const KIND_SUBSPACE: &str = "subspace";
    pub const KIND_KEY: &str = "key";
    pub const KIND_NULL: &str = "null_model";
    pub const KIND_LOG: &str = "log";
    pub const KIND_REPORT: &str = "detection_report";
}

/// A saved model with the attack that produced it, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub role: String,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    pub params: ModelParams,
}

/// Verification outcome for one model, with utility numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub model: String,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    pub perplexity: f64,
    /// Clean fine-tune PPL for unattacked models, watermarked PPL for attacked ones.
    pub reference_perplexity: f64,
    /// `perplexity − reference_perplexity`
    pub delta_ppl: f64,
    /// `delta_ppl / reference_perplexity`
    pub relative_delta_ppl: f64,
    pub detection: DetectionReport,
}

/// Result of a full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: RunManifest,
    pub reports: Vec<ModelReport>,
}

fn timed<T>(run: &mut RunDir, phase: &str, f: impl FnOnce(&mut RunDir) -> Result<T, CliError>) -> Result<T, CliError> {
    let start = Instant::now();
    info!("phase {phase}: start");
    let out = f(run)?;
    run.record_timing(phase, start.elapsed().as_secs_f64())?;
    info!("phase {phase}: done in {:.2}s", start.elapsed().as_secs_f64());
    Ok(out)
}

/// Runs every phase in order and writes the reports and tables.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<PipelineOutcome, CliError> {
    cfg.validate()?;
    let mut run = RunDir::create(out, cfg)?;
    timed(&mut run, "train", |r| phase_train(r, cfg))?;
    timed(&mut run, "analyze", |r| phase_analyze(r, cfg))?;
    timed(&mut run, "embed", |r| phase_embed(r, cfg))?;
    timed(&mut run, "attack", |r| phase_attack(r, cfg))?;
    let reports = timed(&mut run, "verify", |r| phase_verify(r, cfg))?;
    timed(&mut run, "report", |r| crate::report::write_tables(r, &reports).map(|_| ()))?;
    Ok(PipelineOutcome { manifest: run.manifest.clone(), reports })
}

fn build_corpora(cfg: &ExperimentConfig) -> Result<Vec<(&'static str, Corpus)>, CliError> {
    let model = cfg.model_config();
    let c = &cfg.corpus;
    let splits = [
        (names::TRAIN, CorpusRole::Training, c.train, seed_offset::TRAIN_CORPUS),
        (names::CALIBRATION, CorpusRole::Calibration, c.calibration, seed_offset::CALIBRATION_CORPUS),
        (names::EMBEDDING, CorpusRole::Embedding, c.embedding, seed_offset::EMBEDDING_CORPUS),
        (names::CHALLENGE, CorpusRole::Challenge, c.challenge, seed_offset::CHALLENGE_CORPUS),
        (names::EVALUATION, CorpusRole::Evaluation, c.evaluation, seed_offset::EVALUATION_CORPUS),
        (names::ATTACK, CorpusRole::Training, c.attack, seed_offset::ATTACK_CORPUS),
    ];
    match &c.source {
        CorpusSource::Synthetic => {
            let chain_seed = cfg.derived_seed(seed_offset::CHAIN);
            Ok(splits
                .iter()
                .map(|&(name, role, n, off)| (name, gen_corpus(chain_seed, cfg.derived_seed(off), &model, n, role)))
                .collect())
        }
        CorpusSource::TextFile { path } => {
            let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
            let windows = Corpus::from_bytes(CorpusRole::Training, &text, model.context_len + 1).sequences;
            let needed: usize = splits.iter().map(|s| s.2).sum();
            if windows.len() < needed {
                return Err(CliError::Config(format!("{} yields {} windows, splits need {needed}", path.display(), windows.len())));
            }
            let mut start = 0;
            Ok(splits
                .iter()
                .map(|&(name, role, n, _)| {
                    let part = Corpus::new(role, windows[start..start + n].to_vec());
                    start += n;
                    (name, part)
                })
                .collect())
        }
    }
}

/// Corpus generation and base-model training.
pub fn phase_train(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let model_cfg = cfg.model_config();
    for (name, corpus) in build_corpora(cfg)? {
        corpus.validate(model_cfg.vocab_size).phase("train")?;
        run.write_corpus(name, &corpus)?;
    }
    let train = run.read_corpus(names::TRAIN, CorpusRole::Training)?;
    let init = ModelParams::init(&model_cfg).phase("train")?;
    let (base, log) = train_lm(&init, &train, &cfg.training).phase("train")?;
    let ckpt = ModelCheckpoint { role: "base".into(), attack: None, params: base };
    run.write(names::BASE_MODEL, "models/base.json", names::KIND_MODEL, &ckpt, &[names::TRAIN])?;
    run.write(names::TRAIN_LOG, "logs/train.json", names::KIND_LOG, &log, &[names::TRAIN])?;
    Ok(())
}

pub fn read_model(run: &RunDir, name: &str) -> Result<ModelCheckpoint, CliError> {
    run.read(name, names::KIND_MODEL)
}

/// Geometry estimation and backbone construction.
pub fn phase_analyze(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let base = read_model(run, names::BASE_MODEL)?.params;
    let calib = run.read_corpus(names::CALIBRATION, CorpusRole::Calibration)?;
    let geom = estimate_geometry(&base, &calib, &cfg.operators(), cfg.geometry.n_draws).phase("analyze")?;
    run.write(names::GEOMETRY, "geometry.json", names::KIND_GEOMETRY, &geom, &[names::BASE_MODEL, names::CALIBRATION])?;
    let sub = build_subspace(&geom, cfg)?;
    run.write(names::SUBSPACE, "subspace.json", names::KIND_SUBSPACE, &sub, &[names::GEOMETRY])?;
    Ok(())
}

/// Applies the subspace section and the ablation switches to a geometry.
pub fn build_subspace(geom: &GeometryEstimate, cfg: &ExperimentConfig) -> Result<FunctionalSubspace, CliError> {
    let ablations = cfg.ablation_flags()?;
    let s = &cfg.subspace;
    let identity;
    let geom = if ablations.no_invariance {
        identity = geom.with_identity_invariance();
        &identity
    } else {
        geom
    };
    let naive = ablations.naive_topk || s.mode == SelectionMode::NaiveTopk;
    let sub = if naive {
        naive_topk_backbone(geom, s.k)
    } else {
        match build_backbone(geom, s.k, s.tau_lower, s.tau_upper) {
            Err(fsw_core::Error::BandTooNarrow { available, requested }) if s.auto_shrink && available > 0 => {
                warn!("spectral band holds {available} directions, shrinking k from {requested}");
                build_backbone(geom, available, s.tau_lower, s.tau_upper)
            }
            other => other,
        }
    }
    .phase("analyze")?;
    Ok(if ablations.no_anchor { sub.unanchored() } else { sub })
}

/// Key generation, watermark embedding and the seed-matched clean fine-tune.
pub fn phase_embed(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let base = read_model(run, names::BASE_MODEL)?.params;
    let sub: FunctionalSubspace = run.read(names::SUBSPACE, names::KIND_SUBSPACE)?;
    let embed_corpus = run.read_corpus(names::EMBEDDING, CorpusRole::Embedding)?;
    let challenge = run.read_corpus(names::CHALLENGE, CorpusRole::Challenge)?;
    let message = parse_bits(&cfg.key.message).map_err(|e| CliError::Config(e.to_string()))?;
    let key = make_key(cfg.derived_seed(seed_offset::KEY), sub.k, &message, cfg.key.gamma, cfg.key.ecc).phase("embed")?;
    run.write(KEY_ARTIFACT, "key.json", names::KIND_KEY, &key, &[names::SUBSPACE])?;

    let ecfg = cfg.embed_config();
    let ablations = cfg.ablation_flags()?;
    let (wm, log) = embed(&base, &sub, &key, &embed_corpus, &challenge, &ecfg, ablations).phase("embed")?;
    let sources = [names::BASE_MODEL, names::SUBSPACE, KEY_ARTIFACT, names::EMBEDDING, names::CHALLENGE];
    run.write(names::WATERMARKED, "models/watermarked.json", names::KIND_MODEL, &ModelCheckpoint { role: "watermarked".into(), attack: None, params: wm }, &sources)?;
    run.write(names::EMBED_LOG, "logs/embed.json", names::KIND_LOG, &log, &sources)?;

    let clean_cfg = EmbedConfig { lambda_wm: 0.0, lambda_con: 0.0, ..ecfg };
    let (clean, _) = embed(&base, &sub, &key, &embed_corpus, &challenge, &clean_cfg, ablations).phase("embed")?;
    run.write(names::CLEAN_FINETUNE, "models/clean_finetune.json", names::KIND_MODEL, &ModelCheckpoint { role: "clean_finetune".into(), attack: None, params: clean }, &[names::BASE_MODEL, names::EMBEDDING])?;
    Ok(())
}

/// Unique artifact name for the `index`-th attack.
pub fn attack_name(index: usize, spec: &AttackSpec) -> String {
    format!("{}{index:02}_{}", names::ATTACKED_PREFIX, spec.label())
}

/// Runs every configured attack on the watermarked model.
pub fn phase_attack(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.attacks.is_empty() {
        warn!("attack list is empty; nothing to do");
        return Ok(());
    }
    let wm = read_model(run, names::WATERMARKED)?.params;
    let corpus_name = if cfg.corpus.attack > 0 { names::ATTACK } else { names::TRAIN };
    let corpus = run.read_corpus(corpus_name, CorpusRole::Training)?;
    for (i, spec) in cfg.attacks.iter().enumerate() {
        let seeded = spec.reseeded(cfg.derived_seed(seed_offset::ATTACKS + i as u64));
        let attacked = apply_attack(&wm, &seeded, &corpus).phase("attack")?;
        let name = attack_name(i, spec);
        let rel = format!("models/{}.json", name.trim_start_matches(names::ATTACKED_PREFIX));
        let ckpt = ModelCheckpoint { role: "attacked".into(), attack: Some(seeded), params: attacked };
        run.write(&name, &rel, names::KIND_MODEL, &ckpt, &[names::WATERMARKED, corpus_name])?;
    }
    Ok(())
}

/// Everything verification needs besides the suspect model.
pub struct VerifyContext {
    pub sub: FunctionalSubspace,
    pub key: WatermarkKey,
    pub challenge: Corpus,
    pub evaluation: Corpus,
    pub null: NullModel,
    /// Per-challenge scores of the clean base model, the AUC negatives.
    pub negatives: Vec<f64>,
    pub alpha: f64,
    pub alpha_grid: Vec<f64>,
    pub config_hash: String,
}

impl VerifyContext {
    /// Builds the context from a run, estimating (and storing) the null model
    /// if it is not present yet.
    pub fn from_run(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let base = read_model(run, names::BASE_MODEL)?.params;
        let sub: FunctionalSubspace = run.read(names::SUBSPACE, names::KIND_SUBSPACE)?;
        let key: WatermarkKey = run.read(KEY_ARTIFACT, names::KIND_KEY)?;
        let challenge = run.read_corpus(names::CHALLENGE, CorpusRole::Challenge)?;
        let evaluation = run.read_corpus(names::EVALUATION, CorpusRole::Evaluation)?;
        let null = if run.has(names::NULL) {
            run.read(names::NULL, names::KIND_NULL)?
        } else {
            let null = estimate_null_sigma(&base, &sub, (key.k, key.m), &challenge, cfg.verification.null_trials, cfg.derived_seed(seed_offset::NULL))
                .phase("verify")?;
            run.write(names::NULL, "null_model.json", names::KIND_NULL, &null, &[names::BASE_MODEL, names::SUBSPACE, names::CHALLENGE])?;
            null
        };
        let negatives = per_challenge_from_projections(&key_projections(&base, &sub, &key, &challenge).phase("verify")?, &key.signs);
        Ok(Self {
            sub,
            key,
            challenge,
            evaluation,
            null,
            negatives,
            alpha: cfg.verification.alpha,
            alpha_grid: cfg.verification.alpha_grid.clone(),
            config_hash: run.manifest.config_hash.clone(),
        })
    }

    /// Detection report for one model; `pre` carries the watermarked score and
    /// PPL that attacked models are compared against.
    pub fn detect(&self, params: &ModelParams) -> Result<DetectionReport, CliError> {
        let proj = key_projections(params, &self.sub, &self.key, &self.challenge).phase("verify")?;
        let mut report = decode_from_projections(&proj, &self.key).phase("verify")?.with_threshold(self.alpha, &self.alpha_grid, &self.null).phase("verify")?;
        let positives = per_challenge_from_projections(&proj, &self.key.signs);
        report.auc = Some(auc(&positives, &self.negatives).phase("verify")?);
        Ok(report)
    }

    pub fn model_report(&self, model: &str, ckpt: &ModelCheckpoint, reference_ppl: f64, pre_score: Option<f64>) -> Result<ModelReport, CliError> {
        let mut detection = self.detect(&ckpt.params)?;
        if let Some(pre) = pre_score {
            detection.retention = Some(retention(pre, detection.score).phase("verify")?);
        }
        let ppl = perplexity(&ckpt.params, &self.evaluation).phase("verify")?;
        Ok(ModelReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config_hash: self.config_hash.clone(),
            model: model.to_string(),
            attack: ckpt.attack.clone(),
            perplexity: ppl,
            reference_perplexity: reference_ppl,
            delta_ppl: ppl - reference_ppl,
            relative_delta_ppl: (ppl - reference_ppl) / reference_ppl,
            detection,
        })
    }
}

/// Verifies the base, clean fine-tune, watermarked and every attacked model.
pub fn phase_verify(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<Vec<ModelReport>, CliError> {
    let ctx = VerifyContext::from_run(run, cfg)?;
    let clean = read_model(run, names::CLEAN_FINETUNE)?;
    let clean_ppl = perplexity(&clean.params, &ctx.evaluation).phase("verify")?;
    let mut reports = Vec::new();
    for name in [names::BASE_MODEL, names::CLEAN_FINETUNE, names::WATERMARKED] {
        let ckpt = read_model(run, name)?;
        reports.push(ctx.model_report(name, &ckpt, clean_ppl, None)?);
    }
    let wm = &reports[2];
    let (wm_score, wm_ppl) = (wm.detection.score, wm.perplexity);
    let attacked: Vec<String> = run.manifest.artifacts.keys().filter(|k| k.starts_with(names::ATTACKED_PREFIX)).cloned().collect();
    for name in attacked {
        let ckpt = read_model(run, &name)?;
        reports.push(ctx.model_report(name.trim_start_matches(names::ATTACKED_PREFIX), &ckpt, wm_ppl, Some(wm_score))?);
    }
    for r in &reports {
        let name = format!("{}{}", names::REPORT_PREFIX, r.model);
        let rel = format!("reports/{}.json", r.model);
        run.write(&name, &rel, names::KIND_REPORT, r, &[names::SUBSPACE, KEY_ARTIFACT, names::NULL])?;
    }
    Ok(reports)
}

/// Embed log of a run, for diagnostics.
pub fn read_embed_log(run: &RunDir) -> Result<EmbedLog, CliError> {
    run.read(names::EMBED_LOG, names::KIND_LOG)
}

pub fn read_train_log(run: &RunDir) -> Result<TrainLog, CliError> {
    run.read(names::TRAIN_LOG, names::KIND_LOG)
}
