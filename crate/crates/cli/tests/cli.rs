use std::fs;
use std::process::{Command, Output};

fn critgen(dir: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_critgen"))
        .current_dir(dir)
        .env("CRITGEN_OUT", "runs")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("launching critgen")
}

#[test]
fn gradcheck_writes_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = critgen(dir.path(), &["--tag", "gc", "gradcheck", "--cases", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Guidance"));
    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    assert!(run.file_name().unwrap().to_string_lossy().ends_with("-gc"));
    for f in ["config.resolved", "manifest.json", "report.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gradcheck");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[diffusion]\nbeta_max = 2.0\n").unwrap();
    let out = critgen(dir.path(), &["--config", "bad.toml", "gradcheck", "--cases", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = critgen(dir.path(), &["--out", "m.json", "train", "--data", "nowhere"]);
    assert_eq!(out.status.code(), Some(1));
    let out = critgen(dir.path(), &["evaluate", "--logs", "nowhere", "--reference", "nowhere", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
}
