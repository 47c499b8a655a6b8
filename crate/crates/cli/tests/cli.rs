use std::fs;
use std::path::Path;
use std::process::Command;

fn msdiff(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_msdiff")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn coeff_passes_and_emits_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[model]\neps = [0.4, 0.3]\n");
    let out = dir.path().join("out");
    let o = msdiff(&["coeff", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS K quadrature vs series"));
    assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 3);
    assert!(out.join("report.json").exists());
}

#[test]
fn threshold_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "m.toml",
        "[model]\neps = [0.4, 0.3]\n[simulation]\nn_replicates = 3\n[thresholds]\nmet_final_mse = 1e-12\n",
    );
    let out = dir.path().join("out");
    let o = msdiff(&["met", "--config", &cfg, "--out", out.to_str().unwrap(), "--workers", "1", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    let report = fs::read_to_string(out.join("report.json")).unwrap();
    assert!(report.contains("base_seed = 3"));
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "z.toml", "[clt]\nn_replicates = 0\n");
    let o = msdiff(&["clt", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("summary.csv").exists());

    let o = msdiff(&["coeff", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = msdiff(&["bogus", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
}
