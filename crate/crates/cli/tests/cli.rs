use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use wmguard_core::trajkit::{read_archive, write_stream_header, write_stream_record, Dims};

const CONFIG: &str = r#"{"dataset": {"counts": {"train": 4, "val": 2, "calib": 12, "eval_nominal": 4, "eval_per_mode": 1}},
"permutations": 8, "folds": 3, "scorers": ["sparc", "random"]}"#;

fn wmguard(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmguard"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .arg("--config")
        .arg(dir.join("config.json"))
        .output()
        .unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), CONFIG).unwrap();
    let out = wmguard(dir.path(), &["gen-data", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn calibrate_evaluate_and_monitor_archive() {
    let dir = workspace();
    let d = dir.path();
    let out = wmguard(d, &["calibrate", "--scorer", "sparc", "--alpha", "0.2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let thr: serde_json::Value = serde_json::from_slice(&fs::read(d.join("thresholds/sparc.json")).unwrap()).unwrap();
    assert_eq!(thr["alpha"], 0.2);
    assert_eq!(thr["n_calib"], 12);

    let out = wmguard(d, &["evaluate", "--folds", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("eval/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(d.join("eval/plots/hist_random.svg").exists());

    let thr_path = d.join("thresholds/sparc.json");
    let out = wmguard(d, &["monitor", "--scorer", "sparc", "--threshold", thr_path.to_str().unwrap(), "--archive", d.join("data/eval_failure").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let total: usize = read_archive(&d.join("data/eval_failure")).unwrap().iter().map(|t| t.len()).sum();
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), total);
    assert!(lines.iter().all(|e| e["traj"].is_string() && e["alarm"].is_boolean()));
}

#[test]
fn monitor_reads_framed_stdin_and_reports_bad_frames() {
    let dir = workspace();
    let d = dir.path();
    assert!(wmguard(d, &["calibrate", "--scorer", "random"]).status.success());
    let traj = &read_archive(&d.join("data/eval_nominal")).unwrap()[0];
    let mut buf = Vec::new();
    write_stream_header(&mut buf, Dims::DEFAULT).unwrap();
    for (s, a) in traj.states.iter().zip(&traj.actions).take(10) {
        write_stream_record(&mut buf, s, a).unwrap();
    }
    buf.extend_from_slice(&[1, 2, 3]);

    let thr_path = d.join("thresholds/random.json");
    let mut child = Command::new(env!("CARGO_BIN_EXE_wmguard"))
        .args(["monitor", "--scorer", "random", "--stdin", "--threshold", thr_path.to_str().unwrap(), "--out"])
        .arg(d)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&buf).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let events: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.iter().filter(|e| e.get("score").is_some()).count(), 10);
    assert!(events.last().unwrap().get("error").is_some());
}

#[test]
fn missing_models_fail_cleanly() {
    let dir = workspace();
    let out = wmguard(dir.path(), &["calibrate", "--scorer", "wm-uncertainty"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not fitted"));
}

#[test]
fn unknown_scorer_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), "{}").unwrap();
    assert!(!wmguard(dir.path(), &["calibrate", "--scorer", "oracle"]).status.success());
}
