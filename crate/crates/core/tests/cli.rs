use std::path::{Path, PathBuf};
use std::process::Command;

use caw::config::RunConfig;
use caw::{Axis, Window};
use serde_json::Value;
use sha2::{Digest, Sha256};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn caw(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_caw")).args(args).output().expect("binary runs");
    (out.status.code().expect("exit code"), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn manifest(out: &Path) -> Value {
    let path = out.with_file_name(format!("{}.manifest.json", out.file_name().unwrap().to_string_lossy()));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn sha(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn schedule_on_the_uniform_config_writes_schedule_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("schedule.json");
    let cfg = config("uniform.toml");
    let (code, err) = caw(&["schedule", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    let sched: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(sched["links"].as_array().unwrap().len(), 10);

    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["command"], "schedule");
    assert_eq!(m["config_hash"], sha(&std::fs::read(&cfg).unwrap()));
    assert_eq!(m["artifacts"][0]["sha256"], sha(&std::fs::read(&out).unwrap()));
    assert!(m["versions"]["caw-core"].is_string());
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["summary"]["links"], 10);
}

#[test]
fn inadmissible_k_exits_two_with_the_witness() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { k: 1.0, tau: 1.0, sigma: 1.0, ..RunConfig::uniform() };
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let out = dir.path().join("schedule.json");
    let (code, _) = caw(&["schedule", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(code, 2);
    assert!(!out.exists());
    let m = manifest(&out);
    assert_eq!(m["status"], "infeasible");
    assert_eq!(m["witness"]["inequality"], "k-admissibility");
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 0);
}

#[test]
fn bad_input_exits_one_without_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("schedule.json");
    let missing = dir.path().join("nope.toml");
    let (code, err) = caw(&["schedule", "--config", s(&missing), "--out", s(&out)]);
    assert_eq!(code, 1);
    assert!(err.contains("cannot read config"), "{err}");
    assert!(!out.exists() && !dir.path().join("schedule.json.manifest.json").exists());

    let garbled = dir.path().join("garbled.toml");
    std::fs::write(&garbled, "epsilon = 0.1\nwat = 3\n").unwrap();
    assert_eq!(caw(&["schedule", "--config", s(&garbled), "--out", s(&out)]).0, 1);
    let eps = dir.path().join("eps.toml");
    std::fs::write(&eps, RunConfig { epsilon: 0.9, ..RunConfig::uniform() }.to_toml()).unwrap();
    assert_eq!(caw(&["schedule", "--config", s(&eps), "--out", s(&out)]).0, 1);
    assert_eq!(caw(&["frobnicate"]).0, 1);
    assert_eq!(caw(&["--help"]).0, 0);
}

#[test]
fn check_align_reports_both_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.json");
    std::fs::write(&w, Window::unit(1, 0, vec![Axis::U]).unwrap().to_json()).unwrap();
    let out = dir.path().join("alignment.json");

    let (code, err) = caw(&["check-align", "--w1", s(&w), "--w2", s(&w), "--map", "affine:3;-1", "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["aligned"], true);
    assert!((r["margin"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let (code, _) = caw(&["check-align", "--w1", s(&w), "--w2", s(&w), "--map", "affine:0.5;0", "--out", s(&out)]);
    assert_eq!(code, 2);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["aligned"], false);
    assert!(manifest(&out)["witness"]["check"].is_string());
    assert_eq!(caw(&["check-align", "--w1", s(&w), "--w2", s(&w), "--map", "affine:x", "--out", s(&out)]).0, 1);
}

#[test]
fn escaping_extension_reports_the_minimal_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ext3.toml");
    std::fs::write(&path, RunConfig::extended(3.0).to_toml()).unwrap();
    let out = dir.path().join("orbit.csv");
    let (code, _) = caw(&["diffuse", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(code, 2);
    let m = manifest(&out);
    assert_eq!(m["witness"]["inequality"], "xi-escape");
    assert_eq!(m["witness"]["minimal_L"], 6);
}

#[test]
fn literal_sweep_config_is_rejected_at_every_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scaling.csv");
    let (code, _) = caw(&["scaling", "--config", s(&config("sweep.toml")), "--out", s(&out)]);
    assert_eq!(code, 2);
    let w = manifest(&out)["witness"].clone();
    let w = w.as_array().unwrap();
    assert_eq!(w.len(), 4);
    assert!(w.iter().all(|p| p["inequality"] == "k-admissibility"));
    // the CSV is still written, one row per ε
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 5);
}

#[test]
fn shear_audit_writes_one_row_per_instance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("shear.csv");
    let cfg = config("uniform.toml");
    let (code, err) =
        caw(&["shear-audit", "--config", s(&cfg), "--instances", "12", "--grid", "10", "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("axis_j,N,delta_lower,delta_measured,omega_upper,omega_measured\n"));
    assert_eq!(text.lines().count(), 13);
    assert_eq!(manifest(&out)["summary"]["violations"], 0);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("two.toml");
    std::fs::write(&cfg, RunConfig { leaves: 2, ..RunConfig::uniform() }.to_toml()).unwrap();
    for (cmd, name) in [("schedule", "s.json"), ("diffuse", "o.csv")] {
        let mut seen = Vec::new();
        for (run, jobs) in [(0, "1"), (1, "4")] {
            let out = dir.path().join(format!("{run}-{name}"));
            let (code, err) = caw(&[cmd, "--jobs", jobs, "--config", s(&cfg), "--out", s(&out)]);
            assert_eq!(code, 0, "{cmd}: {err}");
            seen.push((std::fs::read(&out).unwrap(), manifest(&out)["artifacts"][0]["sha256"].clone()));
        }
        assert_eq!(seen[0], seen[1], "{cmd}");
    }
}
