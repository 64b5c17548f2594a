use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nijlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nijlab")).args(args).env("NIJLAB_THREADS", "1").output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn energy_of_standard_structure_is_zero() {
    let out = nijlab(&["energy", "--family", "standard"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert!(v["N"].as_f64().unwrap() <= 1e-24 && v["Ntilde"].as_f64().unwrap() <= 1e-24);
}

#[test]
fn grad_check_on_shear_passes_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = nijlab(&["grad-check", "--family", "shear", "--eps", "1e-4", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    for r in stdout_json(&out)["reports"].as_array().unwrap() {
        assert!(r["rel_err"].as_f64().unwrap() <= 1e-6);
    }
    let csv = fs::read_to_string(out_dir.join("grad_check.csv")).unwrap();
    assert!(csv.starts_with("direction,eps,analytic,oracle,rel_err,order\n"));
    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["subcommand"], "grad-check");
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["config"]["family"], "shear");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn loose_step_is_a_verification_failure() {
    let out = nijlab(&["grad-check", "--family", "shear", "--eps", "0.05", "--directions", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn coords_suite_and_jet_documents() {
    assert_eq!(nijlab(&["verify", "--suite", "coords"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let random = stdout_json(&nijlab(&["coords", "--n", "3", "--seed", "11"]));
    assert_eq!(random["exact"], true);
    let jets = dir.path().join("jets.json");
    fs::write(&jets, random["jets"].to_string()).unwrap();
    let out = nijlab(&["coords", "--jets", jets.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["correction"], random["correction"]);
    fs::write(&jets, r#"{"n": 2, "a": []}"#).unwrap();
    assert_eq!(nijlab(&["coords", "--jets", jets.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(nijlab(&["nonsense"]).status.code(), Some(1));
    assert_eq!(nijlab(&["energy", "--res", "12"]).status.code(), Some(1));
    assert_eq!(nijlab(&["energy", "--family", "file"]).status.code(), Some(1));
    assert_eq!(nijlab(&["--help"]).status.code(), Some(0));
    assert_eq!(nijlab(&["--version"]).status.code(), Some(0));
    let bad = Command::new(env!("CARGO_BIN_EXE_nijlab")).args(["energy"]).env("NIJLAB_THREADS", "zero").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn runs_are_deterministic_and_hash_ignores_key_order() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    fs::write(&a, r#"{"family": "shear", "amp": 0.2, "flow": {"max_steps": 2, "step0": 0.01}}"#).unwrap();
    fs::write(&b, r#"{"flow": {"step0": 0.01, "max_steps": 2}, "amp": 0.2, "family": "shear"}"#).unwrap();
    let run = |cfg: &Path, out: &str| {
        let o = dir.path().join(out);
        let status = nijlab(&["flow", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()]).status;
        assert_eq!(status.code(), Some(0));
        (read_json(&o.join("manifest.json")), fs::read_to_string(o.join("trace.csv")).unwrap())
    };
    let (ma, ta) = run(&a, "ra");
    let (mb, tb) = run(&b, "rb");
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ta, tb);
    assert_eq!(ta.lines().count(), 4);
}

#[test]
fn snapshot_family_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("flow.json");
    fs::write(&cfg, r#"{"flow": {"max_steps": 1, "snapshot_every": 1}}"#).unwrap();
    let out = dir.path().join("run");
    assert_eq!(nijlab(&["flow", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.code(), Some(0));
    let snap = out.join("snapshots").join("snap_000000.bin");
    let file_cfg = dir.path().join("file.json");
    fs::write(&file_cfg, serde_json::json!({ "family": "file", "file": snap }).to_string()).unwrap();
    let from_file = stdout_json(&nijlab(&["energy", "--config", file_cfg.to_str().unwrap()]));
    let direct = stdout_json(&nijlab(&["energy", "--family", "shear"]));
    assert_eq!(from_file, direct);
}

#[test]
fn el_residual_reports_components_and_sweep() {
    let out = nijlab(&["el-residual", "--point", "5", "--radius-sweep", "0.3,0.15"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["components"]["T^q_p"].as_array().unwrap().len(), 2);
    assert_eq!(v["sweep"]["rows"].as_array().unwrap().len(), 2);
}
