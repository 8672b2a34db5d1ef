//! Summary tables rendered from stored model reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::artifacts::RunDir;
use crate::error::CliError;
use crate::pipeline::{names, ModelReport};

/// One row per (model, attack, α).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub attack: String,
    pub alpha: f64,
    pub threshold: f64,
    pub score: f64,
    pub margin: f64,
    pub detected: bool,
    pub bit_accuracy: f64,
    pub message_accuracy: bool,
    pub retention: Option<f64>,
    pub auc: Option<f64>,
    pub perplexity: f64,
    pub delta_ppl: f64,
    pub config_hash: String,
}

/// Utility and detection of the unattacked models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub model: String,
    pub perplexity: f64,
    pub delta_ppl: f64,
    pub relative_delta_ppl: f64,
    pub score: f64,
    pub bit_accuracy: f64,
    pub auc: Option<f64>,
    pub detected: bool,
}

/// Per-attack robustness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub attack: String,
    pub score: f64,
    pub retention: Option<f64>,
    pub bit_accuracy: f64,
    pub message_accuracy: bool,
    pub detected: bool,
    pub perplexity: f64,
    pub delta_ppl: f64,
}

fn attack_label(r: &ModelReport) -> String {
    r.attack.as_ref().map_or_else(|| "none".to_string(), |a| a.label())
}

pub fn summary_rows(reports: &[ModelReport]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for r in reports {
        let d = &r.detection;
        let mut levels: Vec<(f64, f64, bool, f64)> = d.significance.iter().map(|s| (s.alpha, s.threshold, s.detected, s.margin)).collect();
        if !levels.iter().any(|l| l.0 == d.alpha) {
            levels.insert(0, (d.alpha, d.threshold, d.detected, d.margin));
        }
        for (alpha, threshold, detected, margin) in levels {
            rows.push(SummaryRow {
                model: r.model.clone(),
                attack: attack_label(r),
                alpha,
                threshold,
                score: d.score,
                margin,
                detected,
                bit_accuracy: d.bit_accuracy,
                message_accuracy: d.message_accuracy,
                retention: d.retention,
                auc: d.auc,
                perplexity: r.perplexity,
                delta_ppl: r.delta_ppl,
                config_hash: r.config_hash.clone(),
            });
        }
    }
    rows
}

pub fn utility_rows(reports: &[ModelReport]) -> Vec<UtilityRow> {
    reports
        .iter()
        .filter(|r| r.attack.is_none())
        .map(|r| UtilityRow {
            model: r.model.clone(),
            perplexity: r.perplexity,
            delta_ppl: r.delta_ppl,
            relative_delta_ppl: r.relative_delta_ppl,
            score: r.detection.score,
            bit_accuracy: r.detection.bit_accuracy,
            auc: r.detection.auc,
            detected: r.detection.detected,
        })
        .collect()
}

pub fn robustness_rows(reports: &[ModelReport]) -> Vec<RobustnessRow> {
    reports
        .iter()
        .filter(|r| r.attack.is_some())
        .map(|r| RobustnessRow {
            attack: attack_label(r),
            score: r.detection.score,
            retention: r.detection.retention,
            bit_accuracy: r.detection.bit_accuracy,
            message_accuracy: r.detection.message_accuracy,
            detected: r.detection.detected,
            perplexity: r.perplexity,
            delta_ppl: r.delta_ppl,
        })
        .collect()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

pub fn render(reports: &[ModelReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Utility and detection");
    let _ = writeln!(out, "{:<24} {:>9} {:>9} {:>9} {:>8} {:>7} {:>8}", "model", "PPL", "dPPL", "score", "bit acc", "AUC", "detected");
    for r in utility_rows(reports) {
        let _ = writeln!(
            out,
            "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>8.3} {:>7} {:>8}",
            r.model, r.perplexity, r.delta_ppl, r.score, r.bit_accuracy, opt(r.auc, 3), r.detected
        );
    }
    let robust = robustness_rows(reports);
    if !robust.is_empty() {
        let _ = writeln!(out, "\nRobustness");
        let _ = writeln!(out, "{:<24} {:>9} {:>8} {:>8} {:>8} {:>8} {:>9}", "attack", "score", "ret %", "bit acc", "message", "detected", "dPPL");
        for r in robust {
            let _ = writeln!(
                out,
                "{:<24} {:>9.4} {:>8} {:>8.3} {:>8} {:>8} {:>9.4}",
                r.attack, r.score, opt(r.retention, 2), r.bit_accuracy, r.message_accuracy, r.detected, r.delta_ppl
            );
        }
    }
    out
}

/// Writes summary, utility and robustness CSVs plus a text rendering.
pub fn write_tables(run: &mut RunDir, reports: &[ModelReport]) -> Result<String, CliError> {
    run.write_text("summary_csv", "reports/summary.csv", &to_csv(&summary_rows(reports))?)?;
    run.write_text("utility_csv", "reports/utility.csv", &to_csv(&utility_rows(reports))?)?;
    run.write_text("robustness_csv", "reports/robustness.csv", &to_csv(&robustness_rows(reports))?)?;
    let text = render(reports);
    run.write_text("summary_txt", "reports/summary.txt", &text)?;
    Ok(text)
}

/// Every stored model report of a run, in manifest order.
pub fn load_reports(run: &RunDir) -> Result<Vec<ModelReport>, CliError> {
    let names: Vec<String> = run.manifest.artifacts.keys().filter(|k| k.starts_with(names::REPORT_PREFIX)).cloned().collect();
    if names.is_empty() {
        return Err(CliError::MissingArtifact { name: "reports".into(), path: run.root.join("reports") });
    }
    let mut reports: Vec<ModelReport> = names.iter().map(|n| run.read(n, names::KIND_REPORT)).collect::<Result<_, _>>()?;
    // Unattacked models first, then attacks in configuration order.
    let order = |r: &ModelReport| match r.model.as_str() {
        names::BASE_MODEL => 0,
        names::CLEAN_FINETUNE => 1,
        names::WATERMARKED => 2,
        _ => 3,
    };
    reports.sort_by(|a, b| order(a).cmp(&order(b)).then(a.model.cmp(&b.model)));
    Ok(reports)
}
