//! End-to-end checks of the `band` binary: exit codes, flag precedence,
//! JSON output shape, and byte determinism.

use std::path::Path;
use std::process::{Command, Output};

fn band(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_band"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("clean exit")
}

fn gen_corpus(dir: &Path) -> serde_json::Value {
    let out = band(&[
        "gen-data",
        "--data",
        dir.to_str().unwrap(),
        "--subjects",
        "6",
        "--seed",
        "3",
    ]);
    stdout_json(&out)
}

#[test]
fn gen_data_reports_the_seven_stock_classes() {
    let dir = tempfile::tempdir().unwrap();
    let v = gen_corpus(dir.path());
    assert_eq!(v["command"], "gen-data");
    assert_eq!(v["result"]["native_lens"], serde_json::json!([25, 38, 28, 16, 22, 31, 38]));
    assert_eq!(v["result"]["classes"].as_array().unwrap().len(), 7);
    assert_eq!(v["result"]["instances"], 42);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn nonpositive_k_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_corpus(dir.path());
    for k in ["0", "-3"] {
        let out = band(&["train", "--data", dir.path().to_str().unwrap(), "--k", k]);
        assert_eq!(code(&out), 2, "k={k}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("k must be >= 1"));
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = band(&["train", "--no-such-flag"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = band(&["train", "--data", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn corrupt_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
    let out = band(&["train", "--data", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_single_op_passes() {
    let out = band(&["gradcheck", "--op", "softmax"]);
    let v = stdout_json(&out);
    assert_eq!(v["result"]["all_pass"], true);
    assert_eq!(v["result"]["ops"][0]["op"], "softmax");
}

#[test]
fn gradcheck_unknown_op_lists_names() {
    let out = band(&["gradcheck", "--op", "warp-drive"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("conv3d") && err.contains("softmax"), "{err}");
}

#[test]
fn gradcheck_needs_a_selection() {
    let out = band(&["gradcheck"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    gen_corpus(dir.path());
    let run = || {
        let out = band(&[
            "train",
            "--data",
            dir.path().to_str().unwrap(),
            "--model",
            "cnn3d",
            "--epochs",
            "2",
            "--seed",
            "9",
            "--fractions",
            "0.5,0.25,0.25",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    assert_eq!(run(), run());
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    gen_corpus(dir.path());
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "data": dir.path().to_str().unwrap(),
            "model": "cnn3d",
            "epochs": 1,
            "k": 5,
            "fractions": [0.5, 0.25, 0.25],
            "seed": 11,
        })
        .to_string(),
    )
    .unwrap();
    let out = band(&["train", "--config", cfg.to_str().unwrap()]);
    let v = stdout_json(&out);
    assert_eq!(v["config"]["model"]["window"], 5);
    assert_eq!(v["config"]["seed"], 11);
    assert_eq!(v["config"]["model"]["kind"], "cnn3d");

    // The flag beats the file.
    let out = band(&["train", "--config", cfg.to_str().unwrap(), "--k", "4", "--seed", "12"]);
    let v = stdout_json(&out);
    assert_eq!(v["config"]["model"]["window"], 4);
    assert_eq!(v["config"]["seed"], 12);
}

#[test]
fn config_file_with_unknown_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"epoch": 3}"#).unwrap();
    let out = band(&["gradcheck", "--op", "relu", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn out_flag_writes_file_and_keeps_stdout_clean() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let out = band(&["gradcheck", "--op", "relu", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["result"]["all_pass"], true);
}

#[test]
fn help_lists_every_global_flag() {
    let out = band(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--seed", "--profile", "--out", "--workers"] {
        assert!(text.contains(flag), "missing {flag}");
    }
    for sub in ["gen-data", "train", "eval", "transfer", "connectome", "analyze", "gradcheck"] {
        assert!(text.contains(sub), "missing {sub}");
    }
}

#[test]
fn train_help_lists_model_flags() {
    let out = band(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--model", "--k", "--heads", "--layers", "--head", "--stage2", "--fractions"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn head_flag_rejected_for_single_pass_models() {
    let dir = tempfile::tempdir().unwrap();
    gen_corpus(dir.path());
    let out = band(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--model",
        "cnn3d",
        "--head",
        "lstm",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_roundtrips_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    gen_corpus(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    let out = band(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--model",
        "cnn3d",
        "--epochs",
        "1",
        "--fractions",
        "0.5,0.25,0.25",
        "--save",
        ckpt.to_str().unwrap(),
    ]);
    let trained = stdout_json(&out);
    let out = band(&[
        "eval",
        "--data",
        dir.path().to_str().unwrap(),
        "--init",
        ckpt.to_str().unwrap(),
        "--split",
        "test",
        "--fractions",
        "0.5,0.25,0.25",
    ]);
    let evald = stdout_json(&out);
    assert_eq!(evald["result"]["accuracy"], trained["result"]["test_acc"]);
}

#[test]
fn connectome_l1_reports_filter_gains_and_cv() {
    let out = band(&[
        "connectome", "--regions", "10", "--frames", "240", "--classes", "2", "--per-class", "6",
        "--seed", "4",
    ]);
    let v = stdout_json(&out);
    let r = &v["result"];
    let half = 1.0 / 2.0f64.sqrt();
    for edge in ["gain_low", "gain_high"] {
        let g = r["response"][edge].as_f64().unwrap();
        assert!((g - half).abs() < 0.05 * half, "{edge} = {g}");
    }
    assert!(r["response"]["gain_center"].as_f64().unwrap() > 0.9);
    assert!(r["selected_c"].as_f64().is_some());
    assert_eq!(r["cv_table"].as_array().unwrap().len(), 7);
    assert_eq!(r["features"], serde_json::json!(45));
}

#[test]
fn analyze_temporal_requires_single_head_model() {
    let dir = tempfile::tempdir().unwrap();
    gen_corpus(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    band(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--epochs",
        "1",
        "--fractions",
        "0.5,0.25,0.25",
        "--save",
        ckpt.to_str().unwrap(),
    ]);
    let out = band(&[
        "analyze",
        "--data",
        dir.path().to_str().unwrap(),
        "--init",
        ckpt.to_str().unwrap(),
        "--mode",
        "temporal",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("heads = 1"));
}
