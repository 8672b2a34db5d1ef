//! The `fsw` binary: phase commands, exit codes and key handling.

mod common;

use fsw_cli::error::exit_code;

use common::{code, fsw, small_config, write_config};

#[test]
fn phases_run_separately_and_verify_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "small.json", &small_config());
    let out = dir.path().join("run");
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    for phase in ["train", "analyze", "embed", "attack", "verify", "report"] {
        let res = fsw(&[phase, "--config", c, "--out", o]);
        assert_eq!(code(&res), 0, "{phase}: {}", String::from_utf8_lossy(&res.stderr));
    }
    for table in ["summary.csv", "utility.csv", "robustness.csv", "summary.txt"] {
        assert!(out.join("reports").join(table).exists(), "{table}");
    }

    let verify = |model: &str, alpha: &str| {
        let model = out.join("models").join(model);
        let res = fsw(&["verify", "--config", c, "--out", o, "--model", model.to_str().unwrap(), "--alpha", alpha]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        serde_json::from_slice::<serde_json::Value>(&res.stdout).unwrap()
    };
    let base = verify("base.json", "0.01");
    assert_eq!(base["detected"], false);
    assert_eq!(base["alpha"], 0.01);
    let wm = verify("watermarked.json", "0.01,1e-8");
    assert_eq!(wm["detected"], true);
    assert!(wm["significance"].as_array().unwrap().iter().all(|s| s["detected"] == true));
    assert_eq!(wm["decoded_message"], serde_json::json!([1, 0, 1, 1]));

    // The key is private; opening it up draws a warning but still works.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let key = out.join("key.json");
        assert_eq!(std::fs::metadata(&key).unwrap().permissions().mode() & 0o777, 0o600);
        std::fs::set_permissions(&key, std::fs::Permissions::from_mode(0o644)).unwrap();
        let model = out.join("models/watermarked.json");
        let res = fsw(&["verify", "--config", c, "--out", o, "--model", model.to_str().unwrap(), "--key", key.to_str().unwrap()]);
        assert_eq!(code(&res), 0);
        assert!(String::from_utf8_lossy(&res.stderr).contains("world-readable"));
    }

    // Tampering with a stored model is an artifact error.
    let wm_path = out.join("models/watermarked.json");
    let mut text = std::fs::read_to_string(&wm_path).unwrap();
    text.push(' ');
    std::fs::write(&wm_path, text).unwrap();
    assert_eq!(code(&fsw(&["verify", "--config", c, "--out", o])), exit_code::ARTIFACT);

    // A config that differs from the run's is refused.
    let mut other = small_config();
    other.seed = 99;
    let other = write_config(dir.path(), "other.json", &other);
    assert_eq!(code(&fsw(&["report", "--config", other.to_str().unwrap(), "--out", o])), exit_code::ARTIFACT);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    assert_eq!(code(&fsw(&["pipeline", "--config", missing.to_str().unwrap()])), exit_code::CONFIG);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1, "unknown_field": 3}"#).unwrap();
    assert_eq!(code(&fsw(&["pipeline", "--config", bad.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()])), exit_code::CONFIG);

    let mut cfg = small_config();
    cfg.ablations = vec!["everything".into()];
    let cfg_path = write_config(dir.path(), "ablate.json", &cfg);
    assert_eq!(code(&fsw(&["train", "--config", cfg_path.to_str().unwrap(), "--out", dir.path().join("y").to_str().unwrap()])), exit_code::CONFIG);

    // No run directory yet.
    let ok = write_config(dir.path(), "ok.json", &small_config());
    let empty = dir.path().join("empty");
    assert_eq!(code(&fsw(&["analyze", "--config", ok.to_str().unwrap(), "--out", empty.to_str().unwrap()])), exit_code::ARTIFACT);

    // k beyond the width is a numeric failure in analysis.
    let mut wide = small_config();
    wide.training.steps = 20;
    wide.subspace.k = 40;
    let wide_path = write_config(dir.path(), "wide.json", &wide);
    let res = fsw(&["pipeline", "--config", wide_path.to_str().unwrap(), "--out", dir.path().join("z").to_str().unwrap()]);
    assert_eq!(code(&res), exit_code::NUMERIC);
    assert!(String::from_utf8_lossy(&res.stderr).contains("analyze"));
}
