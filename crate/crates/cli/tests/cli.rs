use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn pmpsafe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmpsafe"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_grid(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("grid.bin");
    run_ok(
        pmpsafe()
            .args(["solve-grid", "--nodes", "41", "--out"])
            .arg(&path),
    );
    path
}

#[test]
fn solve_grid_writes_a_loadable_solution() {
    let dir = tempfile::tempdir().unwrap();
    let grid = small_grid(dir.path());
    let out = run_ok(
        pmpsafe()
            .args(["eval-iou", "--model"])
            .arg(&grid)
            .arg("--grid")
            .arg(&grid),
    );
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .starts_with("iou 1.0000"));
}

#[test]
fn filter_demo_keeps_a_hard_left_on_the_track() {
    let dir = tempfile::tempdir().unwrap();
    let grid = small_grid(dir.path());
    let out = run_ok(
        pmpsafe()
            .args([
                "filter-demo",
                "--trace",
                "hard-left",
                "--duration",
                "2",
                "--model",
            ])
            .arg(&grid),
    );
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    assert_eq!(
        rdr.headers().unwrap(),
        vec!["t", "e", "dphi", "u_d", "u_out", "V", "intervened"]
    );
    let rows: Vec<Vec<f64>> = rdr
        .records()
        .map(|r| r.unwrap().iter().map(|f| f.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 101);
    assert!(rows.iter().all(|r| r[1].abs() <= 3.0));
    assert!(rows.iter().any(|r| r[6] == 1.0));
}

#[test]
fn train_writes_one_model_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        pmpsafe()
            .args([
                "train",
                "--strategy",
                "uniform",
                "--seeds",
                "3,4",
                "--epochs",
                "20",
            ])
            .arg("--out-dir")
            .arg(dir.path()),
    );
    for seed in [3, 4] {
        let path = dir.path().join(format!("model-uniform-seed{seed}.json"));
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["seed"], seed);
    }
}

#[test]
fn replay_of_an_empty_log_prints_only_a_header() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("empty.jsonl");
    std::fs::write(&log, "").unwrap();
    let out = run_ok(pmpsafe().arg("replay").arg(&log));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "t,h");
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = pmpsafe()
        .args(["filter-demo", "--model", "/nonexistent/model.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = pmpsafe().args(["serve"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn serve_answers_line_clients_and_writes_a_replayable_log() {
    let dir = tempfile::tempdir().unwrap();
    let grid = small_grid(dir.path());
    let log = dir.path().join("session.jsonl");
    let mut child = pmpsafe()
        .args(["serve", "--port", "0", "--run-for", "2", "--model"])
        .arg(&grid)
        .arg("--log")
        .arg(&log)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_string();

    let mut c = TcpStream::connect(&addr).unwrap();
    writeln!(
        c,
        r#"{{"type":"command","steer":0.05,"torque":0.0,"seq":4}}"#
    )
    .unwrap();
    let mut reader = BufReader::new(c.try_clone().unwrap());
    let start = Instant::now();
    let mut echoed = false;
    while start.elapsed() < Duration::from_secs(2) && !echoed {
        line.clear();
        if reader.read_line(&mut line).unwrap() == 0 {
            break;
        }
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        echoed = v["type"] == "state" && v["seq"] == 4;
    }
    assert!(echoed);
    drop(c);

    let mut rest = String::new();
    std::io::Read::read_to_string(&mut stderr, &mut rest).unwrap();
    assert!(child.wait().unwrap().success(), "{rest}");
    assert!(rest.contains("stopped after"));

    let out = run_ok(pmpsafe().arg("replay").arg(&log));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x0,x1,u0,h"));
    assert!(lines.count() > 10);
}
