use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn softarm(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softarm")).args(args).arg("--out-dir").arg(out).output().unwrap()
}

#[test]
fn simulate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenarios().join("hold_truth.toml");
    let run = softarm(dir.path(), &["track", sc.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["hold_truth.csv", "hold_truth_metrics.json", "hold_truth_tip.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = dir.path().join("hold_truth.csv");
    let rep = softarm(dir.path(), &["report", log.to_str().unwrap(), "--from", "0.5"]);
    assert!(rep.status.success());
    let table = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("hold_truth,"));
}

#[test]
fn seeded_runs_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenarios().join("hold_truth.toml");
    let read = || std::fs::read(dir.path().join("hold_truth.csv")).unwrap();
    softarm(dir.path(), &["simulate", sc.to_str().unwrap(), "--seed", "3"]);
    let a = read();
    softarm(dir.path(), &["simulate", sc.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(a, read());
}

#[test]
fn bad_inputs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(softarm(dir.path(), &["simulate", "/nonexistent.toml"]).status.code(), Some(2));
    let junk = dir.path().join("junk.csv");
    std::fs::write(&junk, "not,a,log\n1,2,3\n").unwrap();
    assert_eq!(softarm(dir.path(), &["report", junk.to_str().unwrap()]).status.code(), Some(2));
    let sc = scenarios().join("hold_truth.toml");
    assert_eq!(softarm(dir.path(), &["simulate", sc.to_str().unwrap(), "--dt", "0.5"]).status.code(), Some(2));
}
