//! Parameter sweeps: one pipeline run per value, one CSV row per value.

use std::path::Path;

use fsw_core::verify::threshold;
use fsw_core::watermark::{format_bits, parse_bits, Ecc};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::{names, run_pipeline, ModelReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    Bits,
    Alpha,
    Tau,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::K => "k",
            Self::Bits => "bits",
            Self::Alpha => "alpha",
            Self::Tau => "tau",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub k: usize,
    pub message_bits: usize,
    pub keys: usize,
    pub pre_score: Option<f64>,
    /// Mean over the attack suite.
    pub post_score: Option<f64>,
    pub retention: Option<f64>,
    pub bit_accuracy: Option<f64>,
    pub message_accuracy: Option<bool>,
    pub threshold: Option<f64>,
    pub detected: Option<bool>,
    pub perplexity: Option<f64>,
    pub relative_delta_ppl: Option<f64>,
    /// Empty on success.
    pub error: String,
}

/// Number of keys a message of `bits` bits needs under `ecc`.
pub fn key_count(bits: usize, ecc: Ecc) -> usize {
    match ecc {
        Ecc::None => bits,
        Ecc::Hamming74 => bits / 4 * 7,
    }
}

/// `bits` message bits obtained by cycling the configured message.
pub fn cycled_message(base: &str, bits: usize) -> Result<String, CliError> {
    let pattern = parse_bits(base).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(format_bits(&pattern.iter().copied().cycle().take(bits).collect::<Vec<_>>()))
}

fn empty_row(axis: SweepAxis, value: String, cfg: &ExperimentConfig) -> SweepRow {
    let message_bits = cfg.key.message.len();
    SweepRow {
        axis: axis.name().into(),
        value,
        k: cfg.subspace.k,
        message_bits,
        keys: key_count(message_bits, cfg.key.ecc),
        pre_score: None,
        post_score: None,
        retention: None,
        bit_accuracy: None,
        message_accuracy: None,
        threshold: None,
        detected: None,
        perplexity: None,
        relative_delta_ppl: None,
        error: String::new(),
    }
}

fn fill_row(row: &mut SweepRow, reports: &[ModelReport]) {
    let Some(wm) = reports.iter().find(|r| r.model == names::WATERMARKED) else { return };
    let attacked: Vec<&ModelReport> = reports.iter().filter(|r| r.attack.is_some()).collect();
    let mean = |f: &dyn Fn(&ModelReport) -> Option<f64>| {
        let vals: Vec<f64> = attacked.iter().filter_map(|r| f(r)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    row.pre_score = Some(wm.detection.score);
    row.post_score = mean(&|r| Some(r.detection.score));
    row.retention = mean(&|r| r.detection.retention);
    row.bit_accuracy = Some(wm.detection.bit_accuracy);
    row.message_accuracy = Some(wm.detection.message_accuracy);
    row.threshold = Some(wm.detection.threshold);
    row.detected = Some(wm.detection.detected);
    row.perplexity = Some(wm.perplexity);
    row.relative_delta_ppl = Some(wm.relative_delta_ppl);
}

fn run_point(axis: SweepAxis, value: String, cfg: ExperimentConfig, dir: &Path) -> SweepRow {
    let mut row = empty_row(axis, value, &cfg);
    match run_pipeline(&cfg, dir) {
        Ok(outcome) => fill_row(&mut row, &outcome.reports),
        Err(e) => {
            warn!("sweep point {}={} failed: {e}", row.axis, row.value);
            row.error = e.to_string();
        }
    }
    row
}

/// Runs the sweep along `axis` with values from the config's sweep section.
/// Failing points become rows with an error tag.
pub fn run_sweep(cfg: &ExperimentConfig, axis: SweepAxis, out: &Path) -> Result<Vec<SweepRow>, CliError> {
    cfg.validate()?;
    let s = &cfg.sweep;
    let dir = out.join(format!("sweep_{}", axis.name()));
    let point_dir = |i: usize, v: &str| dir.join(format!("{i:02}_{v}"));
    let mut rows = Vec::new();
    match axis {
        SweepAxis::K => {
            for (i, &k) in s.k.iter().enumerate() {
                let mut c = cfg.clone();
                c.subspace.k = k;
                rows.push(run_point(axis, k.to_string(), c, &point_dir(i, &k.to_string())));
            }
        }
        SweepAxis::Bits => {
            for (i, &bits) in s.bits.iter().enumerate() {
                let mut c = cfg.clone();
                c.key.message = cycled_message(&cfg.key.message, bits)?;
                rows.push(run_point(axis, bits.to_string(), c, &point_dir(i, &bits.to_string())));
            }
        }
        SweepAxis::Tau => {
            for (i, &(lo, hi)) in s.tau.iter().enumerate() {
                let mut c = cfg.clone();
                c.subspace.tau_lower = lo;
                c.subspace.tau_upper = hi;
                let v = format!("{lo}-{hi}");
                rows.push(run_point(axis, v.clone(), c, &point_dir(i, &v)));
            }
        }
        SweepAxis::Alpha => {
            // Thresholds only depend on σ0, so one run serves every level.
            let base = run_point(axis, "base".into(), cfg.clone(), &dir.join("base"));
            let outcome = crate::artifacts::RunDir::open(&dir.join("base")).ok();
            let sigma0 = outcome
                .as_ref()
                .and_then(|run| run.read::<fsw_core::verify::NullModel>(names::NULL, names::KIND_NULL).ok())
                .map(|n| n.sigma0);
            for &alpha in &s.alpha {
                let mut row = SweepRow { value: alpha.to_string(), ..base.clone() };
                match sigma0.map(|s0| threshold(alpha, s0)) {
                    Some(Ok(t)) => {
                        row.threshold = Some(t);
                        row.detected = row.pre_score.map(|s| s > t);
                    }
                    Some(Err(e)) => row.error = e.to_string(),
                    None if row.error.is_empty() => row.error = "null model unavailable".into(),
                    None => {}
                }
                rows.push(row);
            }
        }
    }
    std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let csv_path = dir.join("sweep.csv");
    std::fs::write(&csv_path, crate::report::to_csv(&rows)?).map_err(CliError::io(&csv_path))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_count_expands_by_ecc() {
        for bits in [4, 8, 16] {
            assert_eq!(key_count(bits, Ecc::Hamming74), 7 * bits / 4);
            assert_eq!(key_count(bits, Ecc::None), bits);
        }
    }

    #[test]
    fn cycled_messages() {
        assert_eq!(cycled_message("1011", 10).unwrap(), "1011101110");
        assert_eq!(cycled_message("10110010", 4).unwrap(), "1011");
        assert!(cycled_message("12", 4).is_err());
    }

    #[test]
    fn empty_row_reports_configured_shape() {
        let cfg = ExperimentConfig::default();
        let row = empty_row(SweepAxis::Alpha, "0.01".into(), &cfg);
        assert_eq!(row.keys, 14);
        assert!(row.error.is_empty());
    }
}
