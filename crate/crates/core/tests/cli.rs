use std::path::Path;
use std::process::{Command, Output};

fn frogsim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frogsim"))
        .args(args)
        .current_dir(cwd)
        .env("FROGSIM_THREADS", "1")
        .output()
        .unwrap()
}

const SWEEP: &str = r#"
experiment = "phase_sweep"
lambda_grid = [0.02, 0.05]
horizons = [100, 200]
replicas = 20
master_seed = 5

[tree]
kind = "dary"
d = 2
"#;

#[test]
fn run_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sweep.toml"), SWEEP).unwrap();
    let out = frogsim(&["run", "sweep.toml", "--out", "res"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("res/summary.csv")).unwrap();
    assert!(csv.starts_with("grid,label,observable,n,mean,variance,std_err,successes,ci_lo,ci_hi,censored,note"));
    let lines = std::fs::read_to_string(dir.path().join("res/records.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 40);
    let out = frogsim(&["verify", "res/records.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn tampered_records_fail_verification() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sweep.toml"), SWEEP).unwrap();
    assert_eq!(frogsim(&["run", "sweep.toml", "--out", "res"], dir.path()).status.code(), Some(0));
    let path = dir.path().join("res/records.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered: Vec<String> = text.lines().map(|l| l.replace("\"total_root_returns\":", "\"total_root_returns\":9")).collect();
    std::fs::write(&path, tampered.join("\n")).unwrap();
    let out = frogsim(&["verify", "res/records.jsonl", "--fraction", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cap_abort_rate_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let spec = "lambda_grid = [10.0]\nhorizons = [300]\nreplicas = 4\n[caps]\nmax_active = 100\n";
    std::fs::write(dir.path().join("capped.toml"), spec).unwrap();
    let out = frogsim(&["run", "capped.toml", "--out", "res"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("res/records.jsonl").exists());
}

#[test]
fn audit_lemmas_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = frogsim(&["audit-lemmas", "--replicas", "3", "--rn-replicas", "1000", "--out", "audits"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let audits: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("audits/audit.json")).unwrap()).unwrap();
    let list = audits.as_array().unwrap();
    assert_eq!(list.len(), 4);
    for a in list {
        for key in ["lemma", "instances", "worst_slack", "pass"] {
            assert!(a.get(key).is_some(), "{key}");
        }
    }
}

#[test]
fn failing_audit_exit_code() {
    // too few trees for the ratio estimate, so C.1 cannot be certified
    let dir = tempfile::tempdir().unwrap();
    let spec = r#"
experiment = "lemma_audits"
[tree]
kind = "gw"
[tree.offspring]
law = "two_point"
a = 2
b = 3
q = 0.5
[params]
audits = ["c1"]
rn_replicas = 5
"#;
    std::fs::write(dir.path().join("a.toml"), spec).unwrap();
    let out = frogsim(&["run", "a.toml", "--out", "res"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bisect_degenerate_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let out = frogsim(&["bisect", "--lo", "0.7", "--hi", "0.7", "--tree", r#"{"kind":"dary","d":3}"#], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((r["lo"].as_f64(), r["hi"].as_f64()), (Some(0.7), Some(0.7)));
}

#[test]
fn bad_spec_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "replicas = 0\n").unwrap();
    let out = frogsim(&["run", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
