use std::fs;
use std::process::{Command, Output};

fn lpu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpu"))
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("spawn lpu")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn compile_then_disasm() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let text = stdout(&lpu(&["compile", "--model", "tiny-2l", "--devices", "2", "--out", out]));
    assert_eq!(text.lines().count(), 2);
    for dev in 0..2 {
        for ext in ["lpubin", "tiles.csv", "regions.csv"] {
            assert!(dir.path().join(format!("tiny-2l.dev{dev}.{ext}")).is_file());
        }
    }
    let bin = dir.path().join("tiny-2l.dev0.lpubin");
    let asm = stdout(&lpu(&["disasm", bin.to_str().unwrap()]));
    assert!(asm.contains(" hlt"));
    assert!(asm.contains(" vmm "));
}

#[test]
fn run_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("run.csv");
    let text = stdout(&lpu(&[
        "run",
        "--model",
        "tiny-2l",
        "--in-tokens",
        "4",
        "--out-tokens",
        "12",
        "--positions",
        "4,9,15",
        "--oracle",
        "--report",
        csv.to_str().unwrap(),
    ]));
    assert!(text.contains("ms/token"));
    assert!(text.contains("12/12 tokens agree"));
    let body = fs::read_to_string(&csv).unwrap();
    assert_eq!(body.lines().count(), 4);
    assert!(body.starts_with("model,arch,devices,partition,position"));
}

#[test]
fn sweep_reports_speedups() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let text = stdout(&lpu(&[
        "sweep",
        "--model",
        "tiny-2l",
        "--devices",
        "1,2",
        "--in-tokens",
        "4",
        "--out-tokens",
        "20",
        "--report",
        csv.to_str().unwrap(),
    ]));
    assert!(text.contains("per doubling"));
    let body = fs::read_to_string(&csv).unwrap();
    assert_eq!(body.lines().count(), 3);
}

#[test]
fn oversized_model_is_rejected() {
    let o = lpu(&["compile", "--model", "opt-66b", "--out", "/nonexistent"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("capacity"));
}

#[test]
fn bad_partition_is_rejected() {
    let o = lpu(&["run", "--model", "tiny-2l", "--devices", "2", "--partition", "3x3"]);
    assert!(!o.status.success());
}

#[test]
fn selftest_passes() {
    assert!(stdout(&lpu(&["selftest"])).contains("selftest passed"));
}
