use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsw_cli::artifacts::{load_file, RunDir, KEY_ARTIFACT};
use fsw_cli::pipeline::{self, names, ModelCheckpoint, VerifyContext};
use fsw_cli::report;
use fsw_cli::sweep::{run_sweep, SweepAxis};
use fsw_cli::{CliError, ExperimentConfig};
use fsw_core::subspace::FunctionalSubspace;
use fsw_core::watermark::WatermarkKey;

/// Environment variable naming the default output root.
const OUTPUT_ROOT_ENV: &str = "FSW_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Parser)]
#[command(name = "fsw", version, about = "Functional subspace watermarking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to $FSW_OUTPUT_ROOT/<config name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated significance levels; the first is the decision level.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Comma-separated removed components: consistency, anchor, invariance, adaptive.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every phase and write reports.
    Pipeline(Common),
    /// Generate corpora and train the base model.
    Train(Common),
    /// Estimate the geometry and build the backbone subspace.
    Analyze(Common),
    /// Create the key and embed the watermark.
    Embed(Common),
    /// Run the configured attacks on the watermarked model.
    Attack(Common),
    /// Verify ownership of one checkpoint, or of every model in the run.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to verify; defaults to every model in the run.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        subspace: Option<PathBuf>,
        #[arg(long)]
        key: Option<PathBuf>,
    },
    /// Run the pipeline once per value along an axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: SweepAxis,
    },
    /// Print and write the summary tables of a finished run.
    Report(Common),
}

/// Loads `--config` with the `--seed`, `--ablation` and (when `with_alpha`)
/// `--alpha` overrides applied.
fn load_config_with(common: &Common, with_alpha: bool) -> Result<ExperimentConfig, CliError> {
    let path = common.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if with_alpha {
        apply_alpha(&mut cfg, common);
    }
    if let Some(ablation) = &common.ablation {
        cfg.ablations = ablation.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_alpha(cfg: &mut ExperimentConfig, common: &Common) {
    if let Some(alpha) = common.alpha.as_ref().filter(|a| !a.is_empty()) {
        cfg.verification.alpha = alpha[0];
        cfg.verification.alpha_grid = alpha.clone();
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    load_config_with(common, true)
}

fn output_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> Result<PathBuf, CliError> {
    if let Some(out) = &common.out {
        return Ok(out.clone());
    }
    if let Some(dir) = cfg.and_then(|c| c.output_dir.clone()) {
        return Ok(dir);
    }
    let stem = common
        .config
        .as_deref()
        .and_then(Path::file_stem)
        .ok_or_else(|| CliError::Config("--out is required without --config".into()))?;
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from);
    Ok(root.join(stem))
}

/// Opens an existing run and its stored configuration.
fn open_run(common: &Common) -> Result<(RunDir, ExperimentConfig), CliError> {
    let cfg = common.config.as_ref().map(|_| load_config_with(common, false)).transpose()?;
    let run = RunDir::open(&output_dir(common, cfg.as_ref())?)?;
    let stored = run.config()?;
    if let Some(cfg) = cfg {
        if cfg.hash() != stored.hash() {
            return Err(CliError::StaleArtifact { name: "config".into(), expected: run.manifest.config_hash.clone(), actual: cfg.hash() });
        }
    }
    Ok((run, stored))
}

fn run_phase(common: &Common, phase: &'static str, f: fn(&mut RunDir, &ExperimentConfig) -> Result<(), CliError>) -> Result<(), CliError> {
    let (mut run, cfg) = open_run(common)?;
    let start = std::time::Instant::now();
    f(&mut run, &cfg)?;
    run.record_timing(phase, start.elapsed().as_secs_f64())?;
    println!("{phase} complete: {}", run.root.display());
    Ok(())
}

fn verify_one(common: &Common, model: &Path, subspace: Option<&Path>, key: Option<&Path>) -> Result<(), CliError> {
    let (mut run, mut cfg) = open_run(common)?;
    apply_alpha(&mut cfg, common);
    let mut ctx = VerifyContext::from_run(&mut run, &cfg)?;
    if let Some(p) = subspace {
        ctx.sub = load_file::<FunctionalSubspace>(p, names::KIND_SUBSPACE)?.payload;
    }
    if let Some(p) = key {
        ctx.key = load_file::<WatermarkKey>(p, KEY_ARTIFACT)?.payload;
    }
    let ckpt: ModelCheckpoint = load_file(model, names::KIND_MODEL)?.payload;
    let detection = ctx.detect(&ckpt.params)?;
    println!("{}", serde_json::to_string_pretty(&detection).expect("report serializes"));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pipeline(common) => {
            let cfg = load_config(&common)?;
            let out = output_dir(&common, Some(&cfg))?;
            let outcome = pipeline::run_pipeline(&cfg, &out)?;
            print!("{}", report::render(&outcome.reports));
            println!("\n{} artifacts in {}", outcome.manifest.artifacts.len(), out.display());
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let out = output_dir(&common, Some(&cfg))?;
            let mut run = RunDir::create(&out, &cfg)?;
            let start = std::time::Instant::now();
            pipeline::phase_train(&mut run, &cfg)?;
            run.record_timing("train", start.elapsed().as_secs_f64())?;
            println!("train complete: {}", out.display());
        }
        Command::Analyze(common) => run_phase(&common, "analyze", pipeline::phase_analyze)?,
        Command::Embed(common) => run_phase(&common, "embed", pipeline::phase_embed)?,
        Command::Attack(common) => run_phase(&common, "attack", pipeline::phase_attack)?,
        Command::Verify { common, model: Some(model), subspace, key } => {
            verify_one(&common, &model, subspace.as_deref(), key.as_deref())?
        }
        Command::Verify { common, .. } => {
            let (mut run, mut cfg) = open_run(&common)?;
            apply_alpha(&mut cfg, &common);
            let start = std::time::Instant::now();
            let reports = pipeline::phase_verify(&mut run, &cfg)?;
            run.record_timing("verify", start.elapsed().as_secs_f64())?;
            print!("{}", report::render(&reports));
        }
        Command::Sweep { common, axis } => {
            let cfg = load_config(&common)?;
            let out = output_dir(&common, Some(&cfg))?;
            let rows = run_sweep(&cfg, axis, &out)?;
            print!("{}", report::to_csv(&rows)?);
        }
        Command::Report(common) => {
            let (mut run, _) = open_run(&common)?;
            let reports = report::load_reports(&run)?;
            print!("{}", report::write_tables(&mut run, &reports)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
