use std::fs;
use std::process::Command;

fn glflow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_glflow"))
}

#[test]
fn rates_fits_a_power_law() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.csv");
    fs::write(&path, "eps,value\n0.08,0.16\n0.04,0.08\n0.02,0.04\n").unwrap();
    let out = glflow().args(["rates", "--input"]).arg(&path).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("exponent 1.000000"), "{text}");
}

#[test]
fn validate_accepts_and_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    fs::write(&good, "[experiment]\nid = \"E0\"\n\n[run]\neps = [0.05]\nt_end = 0.1\nstride = 0.01\n").unwrap();
    let out = glflow().args(["validate", "--config"]).arg(&good).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[experiment]\nid = \"E2\"\n\n[run]\neps = []\nt_end = 0.1\nstride = 0.01\n").unwrap();
    let out = glflow().args(["validate", "--config"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn run_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("wave.toml");
    fs::write(&cfg, "[experiment]\nid = \"E0\"\noutput_dir = \"results\"\n\n[run]\neps = [0.05]\nt_end = 0.1\nstride = 0.01\n").unwrap();
    let out = glflow().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(dir.path().join("results/E0_summary.json").is_file());
}
