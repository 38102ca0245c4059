use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/toy6.json")
}

fn splitopf<S: AsRef<std::ffi::OsStr>>(dir: &Path, args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitopf"))
        .args(args)
        .args(["--run-dir", dir.to_str().unwrap()])
        .output()
        .unwrap()
}

fn toy_args(extra: &[&str]) -> Vec<String> {
    let toy = toy();
    let mut v = vec!["--case", toy.to_str().unwrap(), "--seed", "3", "--samples", "30", "--regions", "2"];
    v.extend_from_slice(&["--epochs-lambda", "2", "--epochs-w", "2"]);
    v.extend_from_slice(extra);
    v.into_iter().map(String::from).collect()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(dir: &Path) {
    for step in [
        &["partition"][..],
        &["gen-data"],
        &["train-stage1"],
        &["train-stage2"],
        &["train-direct"],
        &["predict", "--model", "decomposed"],
        &["loadflow", "--model", "decomposed"],
        &["evaluate", "--model", "decomposed"],
    ] {
        ok(&splitopf(dir, &toy_args(step)));
    }
}

#[test]
fn toy_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path());
    for f in ["partition.json", "dataset/manifest.json", "models/stage1.model", "models/region1.model"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(tmp.path().join("reports/report-decomposed.csv")).unwrap();
    assert!(report.starts_with("metric,unit,avg,median,q95,count"));
    let lf: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("reports/loadflow-decomposed.json")).unwrap()).unwrap();
    assert_eq!(lf["converged_pct"], 100.0);
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(echo["command"], "evaluate");
    assert_eq!(echo["config"]["train"]["seed"], 3);
}

#[test]
fn missing_seed_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = splitopf(tmp.path(), &["partition", "--case", toy().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn missing_inputs_are_reported_before_work_starts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = splitopf(tmp.path(), &toy_args(&["gen-data"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("partition file"));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 1, "regions": 3, "train": {"rho": 0.5}}"#).unwrap();
    let out = splitopf(
        tmp.path(),
        &["partition", "--config", cfg.to_str().unwrap(), "--case", toy().to_str().unwrap(), "--regions", "2"],
    );
    ok(&out);
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["regions"], 2);
    assert_eq!(echo["config"]["seed"], 1);
    assert_eq!(echo["config"]["train"]["rho"], 0.5);
}

#[test]
fn unknown_config_fields_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 1, "regoins": 3}"#).unwrap();
    let out = splitopf(tmp.path(), &["partition", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_rejects_a_different_case() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path());
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(toy()).unwrap()).unwrap();
    doc["loads"][0]["p_nom"] = 0.31.into();
    let other = tmp.path().join("other.json");
    fs::write(&other, doc.to_string()).unwrap();
    let out = splitopf(
        tmp.path(),
        &["evaluate", "--model", "decomposed", "--case", other.to_str().unwrap(), "--seed", "3"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn diverging_training_exits_with_the_abort_code() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&splitopf(tmp.path(), &toy_args(&["partition"])));
    ok(&splitopf(tmp.path(), &toy_args(&["gen-data"])));
    let out = splitopf(tmp.path(), &toy_args(&["train-direct", "--lr-start", "1e300", "--lr-end", "1e300"]));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("models/direct.log.csv").exists());
}

#[test]
fn help_documents_every_config_flag() {
    let out = Command::new(env!("CARGO_BIN_EXE_splitopf")).args(["gen-data", "--help"]).output().unwrap();
    let help = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--config",
        "--run-dir",
        "--case",
        "--assignment",
        "--partition",
        "--dataset",
        "--models",
        "--reports",
        "--seed",
        "--workers",
        "--samples",
        "--regions",
        "--voltage-band",
        "--epochs-lambda",
        "--epochs-w",
        "--batch-size",
        "--rho",
        "--lr-start",
        "--lr-end",
        "--budget",
        "--norm",
        "--tol-feas",
        "--tol-opt",
        "--max-iter",
        "--barrier-mu0",
        "--barrier-shrink",
        "--alpha-range",
        "--beta-range",
        "--gamma-range",
        "--p-g-mw",
        "--p-g-range-fraction",
        "--v-pu",
    ] {
        assert!(help.contains(flag), "{flag} missing from --help");
    }
}
