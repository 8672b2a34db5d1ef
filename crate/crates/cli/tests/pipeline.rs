mod common;

use fsw_cli::artifacts::RunDir;
use fsw_cli::pipeline::{self, names, run_pipeline, ModelReport};
use fsw_cli::report::{from_csv, load_reports, RobustnessRow, SummaryRow, UtilityRow};
use fsw_cli::{CliError, ExperimentConfig};

use common::small_config;

fn report<'a>(reports: &'a [ModelReport], model: &str) -> &'a ModelReport {
    reports.iter().find(|r| r.model == model).unwrap()
}

#[test]
fn small_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let outcome = run_pipeline(&cfg, dir.path()).unwrap();
    assert!(outcome.manifest.artifacts.len() >= 10);
    for phase in ["train", "analyze", "embed", "attack", "verify", "report"] {
        assert!(outcome.manifest.timings.contains_key(phase), "no timing for {phase}");
    }
    let run = RunDir::open(dir.path()).unwrap();
    run.verify_all().unwrap();

    let reports = &outcome.reports;
    assert_eq!(reports.len(), 3 + cfg.attacks.len());
    let base = report(reports, names::BASE_MODEL);
    let wm = report(reports, names::WATERMARKED);
    let alpha_01 = |r: &ModelReport| r.detection.significance.iter().find(|s| s.alpha == 1e-2).unwrap().detected;
    assert!(!alpha_01(base));
    assert!(wm.detection.significance.iter().all(|s| s.detected));
    assert!(wm.detection.message_accuracy);
    assert_eq!(wm.detection.auc, Some(1.0));

    for r in reports {
        assert!((r.delta_ppl - (r.perplexity - r.reference_perplexity)).abs() < 1e-12);
        assert!((r.relative_delta_ppl - r.delta_ppl / r.reference_perplexity).abs() < 1e-12);
        assert_eq!(r.detection.retention.is_some(), r.attack.is_some());
    }
    assert_eq!(report(reports, names::CLEAN_FINETUNE).delta_ppl, 0.0);

    // Tables reload from CSV with one summary row per (model, level).
    let read = |name: &str| std::fs::read_to_string(dir.path().join("reports").join(name)).unwrap();
    let summary: Vec<SummaryRow> = from_csv(&read("summary.csv")).unwrap();
    assert_eq!(summary.len(), reports.len() * cfg.verification.alpha_grid.len());
    let utility: Vec<UtilityRow> = from_csv(&read("utility.csv")).unwrap();
    assert_eq!(utility.len(), 3);
    let robust: Vec<RobustnessRow> = from_csv(&read("robustness.csv")).unwrap();
    assert_eq!(robust.len(), cfg.attacks.len());
    let wm_row = utility.iter().find(|u| u.model == names::WATERMARKED).unwrap();
    assert_eq!(wm_row.perplexity, wm.perplexity);

    // Stored reports reload in table order.
    let loaded = load_reports(&run).unwrap();
    assert_eq!(loaded.len(), reports.len());
    assert_eq!(loaded[0].model, names::BASE_MODEL);
    assert_eq!(loaded[2].model, names::WATERMARKED);
}

#[test]
fn oversized_backbone_fails_in_analyze_and_keeps_earlier_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.training.steps = 50;
    cfg.subspace.k = cfg.model.hidden_dim + 1;
    let err = run_pipeline(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, CliError::Phase { phase: "analyze", .. }), "{err}");
    let run = RunDir::open(dir.path()).unwrap();
    assert!(run.has(names::BASE_MODEL) && run.has(names::TRAIN));
    assert!(!run.has(names::SUBSPACE));
    run.verify_all().unwrap();
}

#[test]
fn empty_attack_list_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.training.steps = 100;
    cfg.embed.steps = 20;
    cfg.attacks.clear();
    let outcome = run_pipeline(&cfg, dir.path()).unwrap();
    assert!(!outcome.manifest.artifacts.keys().any(|k| k.starts_with(names::ATTACKED_PREFIX)));
    assert_eq!(outcome.reports.len(), 3);
}

#[test]
fn stale_and_missing_artifacts_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.training.steps = 50;
    let mut run = RunDir::create(dir.path(), &cfg).unwrap();
    pipeline::phase_train(&mut run, &cfg).unwrap();

    // Embedding before analysis: the subspace does not exist yet.
    let err = pipeline::phase_embed(&mut run, &cfg).unwrap_err();
    assert!(matches!(err, CliError::MissingArtifact { ref name, .. } if name == names::SUBSPACE), "{err}");

    // Retraining a different model on disk without the manifest noticing.
    let path = run.path_of(names::BASE_MODEL).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("\"role\": \"base\"", "\"role\": \"other\"", 1)).unwrap();
    let err = pipeline::phase_analyze(&mut run, &cfg).unwrap_err();
    assert!(matches!(err, CliError::StaleArtifact { ref name, .. } if name == names::BASE_MODEL), "{err}");
    assert_eq!(err.exit_code(), fsw_cli::error::exit_code::ARTIFACT);
}

#[test]
fn default_attacks_preserve_utility() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_pipeline(&ExperimentConfig::default(), dir.path()).unwrap();
    for r in outcome.reports.iter().filter(|r| r.attack.is_some()) {
        assert!(r.perplexity <= 1.3 * r.reference_perplexity, "{}: {} vs {}", r.model, r.perplexity, r.reference_perplexity);
    }
}
