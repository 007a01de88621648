//! End-to-end checks of the `contam-moe` binary: exit codes, manifests,
//! seed overrides, and config round trips.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_contam-moe"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn easy_gen(seed: u64) -> Value {
    json!({
        "n": 1500, "d": 2, "k": 2, "q": 2,
        "beta_star": [1.0, -0.5], "tau_star": 0.3,
        "eta0": [[1.5, 0.0], [-1.0, 0.0]],
        "adapter_rule": { "fixed": { "eta_star": [[-1.5, 0.0], [2.0, 0.0]] } },
        "family_pretrained": "linear", "family_adapter": "tanh",
        "seed": seed
    })
}

fn easy_study() -> Value {
    json!({
        "regime": "heterogeneous",
        "gen": easy_gen(7),
        "n_grid": [1000, 2000, 4000, 8000],
        "n_seeds": 3,
        "fit": { "method": "direct_mle" }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn relu_verdict_is_a_successful_diagnosis() {
    let out = run(&["check-identifiability", "--family", "relu"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "relu: FAIL (non-smooth)");
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["generate", "--out", "x"])), 1);
    assert_eq!(code(&run(&["generate", "--set", "no-equals-sign"])), 1);
    assert_eq!(code(&run(&["check-identifiability", "--family", "cubic"])), 1);
    assert_eq!(code(&run(&["check-identifiability", "--jobs", "0"])), 1);
}

#[test]
fn malformed_json_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"n\": 10,\n  \"d\": \n}").unwrap();
    let out = run(&["generate", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("line 4") && err.contains("column"), "{err}");
}

#[test]
fn unknown_keys_are_all_listed() {
    let dir = tempfile::tempdir().unwrap();
    let mut study = easy_study();
    study["fit"]["gtoll"] = json!(1e-6);
    study["grid"] = json!([1, 2]);
    let cfg = write_json(dir.path(), "study.json", &study);
    let out = run(&["rate-study", "--config", s(&cfg), "--out", s(&dir.path().join("r")), "--set", "gen.nn=4"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    for key in ["fit.gtoll", "grid", "gen.nn"] {
        assert!(err.contains(key), "{key} missing from: {err}");
    }
}

#[test]
fn missing_data_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "fit.json", &json!({ "data": dir.path().join("none.csv") }));
    let out = run(&["fit", "--config", s(&cfg), "--out", s(&dir.path().join("f"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn aborted_study_exits_three_and_keeps_its_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut study = easy_study();
    study["fit"] = json!({ "method": "em", "em_max_iter": 1 });
    let cfg = write_json(dir.path(), "study.json", &study);
    let prefix = dir.path().join("a");
    let out = run(&["rate-study", "--config", s(&cfg), "--out", s(&prefix)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let manifest = read_json(&dir.path().join("a_manifest.json"));
    assert!(manifest["error"].as_str().unwrap().contains("aborted"));
    assert_eq!(manifest["artifacts"][0]["file"], "a_records.csv");
}

#[test]
fn manifest_hashes_match_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "gen.json", &easy_gen(3));
    let prefix = dir.path().join("d");
    let out = run(&["generate", "--config", s(&cfg), "--out", s(&prefix)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = read_json(&dir.path().join("d_manifest.json"));
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seed"], 3);
    let artifacts = manifest["artifacts"].as_array().unwrap();
    assert_eq!(artifacts.len(), 2);
    for a in artifacts {
        let bytes = fs::read(dir.path().join(a["file"].as_str().unwrap())).unwrap();
        assert_eq!(a["sha256"], hex::encode(Sha256::digest(&bytes)));
        assert_eq!(a["bytes"], bytes.len());
    }
}

#[test]
fn seed_override_changes_only_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "gen.json", &easy_gen(3));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(&["generate", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&run(&["generate", "--config", s(&cfg), "--out", s(&b), "--seed", "99"])), 0);
    let ma = read_json(&dir.path().join("a_manifest.json"));
    let mb = read_json(&dir.path().join("b_manifest.json"));
    assert_eq!(mb["seed"], 99);
    assert_eq!(mb["config"]["seed"], 99);
    let strip = |m: &Value| {
        let mut m = m.clone();
        m["seed"] = Value::Null;
        m["config"]["seed"] = Value::Null;
        m["artifacts"] = Value::Null;
        m
    };
    assert_eq!(strip(&ma), strip(&mb));
    assert_ne!(fs::read(dir.path().join("a.csv")).unwrap(), fs::read(dir.path().join("b.csv")).unwrap());
}

/// Runs a command, feeds its resolved config back in, and compares every artifact.
fn assert_round_trip(command: &str, first_args: &[&str]) {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let mut args = vec![command];
    args.extend_from_slice(first_args);
    args.extend_from_slice(&["--out", s(&a)]);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ma = read_json(&dir.path().join("a_manifest.json"));
    let resolved = write_json(dir.path(), "resolved.json", &ma["config"]);
    let b = dir.path().join("b");
    let out = run(&[command, "--config", s(&resolved), "--out", s(&b)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mb = read_json(&dir.path().join("b_manifest.json"));
    let hashes = |m: &Value| -> Vec<Value> { m["artifacts"].as_array().unwrap().iter().map(|a| a["sha256"].clone()).collect() };
    assert!(!hashes(&ma).is_empty());
    assert_eq!(hashes(&ma), hashes(&mb), "{command}");
}

#[test]
fn resolved_config_reproduces_generate_and_scan() {
    let dir = tempfile::tempdir().unwrap();
    let gen = write_json(dir.path(), "gen.json", &easy_gen(5));
    assert_round_trip("generate", &["--config", s(&gen), "--set", "n=300"]);

    let truth = contam_moe::datagen::ground_truth(&serde_json::from_value(easy_gen(5)).unwrap()).unwrap();
    let scan = json!({
        "regime": "heterogeneous",
        "g_star": truth,
        "scan": { "n_pairs": 8, "radii": [0.2, 0.1, 0.05, 0.025], "mc": { "m": 400, "seed": 2 }, "seed": 1 }
    });
    let scan = write_json(dir.path(), "scan.json", &scan);
    assert_round_trip("hellinger-scan", &["--config", s(&scan), "--seed", "4"]);
}

#[test]
fn resolved_config_reproduces_rate_study() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "study.json", &easy_study());
    assert_round_trip("rate-study", &["--config", s(&cfg), "--jobs", "2"]);
}

#[test]
fn rate_study_writes_every_artifact_and_plot_redraws_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "study.json", &easy_study());
    let prefix = dir.path().join("h1");
    let out = run(&["rate-study", "--config", s(&cfg), "--out", s(&prefix)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for series in ["err_exp_tau", "err_beta", "err_eta"] {
        assert!(dir.path().join(format!("h1_{series}.svg")).exists());
        assert!(dir.path().join(format!("h1_{series}.csv")).exists());
    }
    let slopes = read_json(&dir.path().join("h1_slopes.json"));
    assert!(slopes["err_beta"]["slope"].as_f64().unwrap() < 0.0);

    let replot = dir.path().join("again");
    let records = dir.path().join("h1_records.csv");
    let out = run(&["plot", "--records", s(&records), "--out", s(&replot)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(dir.path().join("again_slopes.json")).unwrap(),
        fs::read(dir.path().join("h1_slopes.json")).unwrap()
    );
}

#[test]
fn fit_uses_the_dataset_truth_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let gen = write_json(dir.path(), "gen.json", &easy_gen(8));
    let data = dir.path().join("d");
    assert_eq!(code(&run(&["generate", "--config", s(&gen), "--out", s(&data), "--set", "n=4000"])), 0);
    let job = write_json(dir.path(), "fit.json", &json!({ "data": dir.path().join("d.csv"), "seed": 2 }));
    let out = run(&["fit", "--config", s(&job), "--out", s(&dir.path().join("f"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let fit = read_json(&dir.path().join("f_fit.json"));
    assert_eq!(fit["result"]["status"], "converged");
    assert!(fit["errors"]["err_beta"].as_f64().unwrap() < 0.5);
}

#[test]
fn shipped_presets_match_the_library() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in contam_moe::rate_study::PRESETS {
        let text = fs::read_to_string(dir.join(format!("{name}.json"))).unwrap();
        let shipped: contam_moe::rate_study::StudyConfig = contam_moe::config::from_json_str(&text).unwrap();
        assert_eq!(shipped, contam_moe::rate_study::preset(name).unwrap(), "{name}");
    }
}
