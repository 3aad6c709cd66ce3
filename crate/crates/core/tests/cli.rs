use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::Duration;

use streamtomo::pipeline::{run_grid, RunConfig};

const BIN: &str = env!("CARGO_BIN_EXE_streamtomo");

fn small_args(out: &Path) -> Vec<String> {
    [
        "--phantom", "shepp_logan", "--size", "48", "--rotations", "20", "--per-rotation", "8", "--window", "8",
        "--iterations", "3", "--noise-i0", "1e5", "--seed", "4", "--set", "rows=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain(["--out".to_string(), out.display().to_string()])
    .collect()
}

fn run(args: &[String]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("slice_id,update_index,t_seconds,projections,ssim_conv,ssim_enh,refresh_s,sustained_pps")
    );
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn free_endpoint() -> String {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string()
}

/// Starts a processor and waits until it reports that it is listening.
fn spawn_processor(args: &[String]) -> Child {
    let mut child = Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "info")
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    loop {
        line.clear();
        assert!(stderr.read_line(&mut line).unwrap() > 0, "processor exited before listening");
        if line.contains("listening on") {
            break;
        }
    }
    // Keep draining so the child never blocks on a full pipe.
    thread::spawn(move || for _ in stderr.lines() {});
    child
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(Command::new(BIN).arg("--bogus").output().unwrap().status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let mut args = small_args(dir.path());
    args.extend(["--window".into(), "0".into()]);
    assert_eq!(run(&args).status.code(), Some(2));
    assert_eq!(run(&["--phantom".into(), "teapot".into()]).status.code(), Some(2));
    assert_eq!(Command::new(BIN).arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn single_process_run_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let output = run(&small_args(out));
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    }
    let rows = csv_rows(&a.join("quality.csv"));
    for slice in ["0", "1"] {
        assert_eq!(rows.iter().filter(|r| r[0] == slice).count(), 20);
    }
    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=4") && manifest.contains("window=8"));
    assert!(a.join("quality_mean.csv").exists());
    assert!(a.join("ground_truth/slice_0000.raw").exists());
    for slice in [0, 1] {
        let name = format!("snapshots/slice_{slice:04}_u0020.raw");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    let ssim = |rows: &[Vec<String>]| rows.iter().map(|r| r[4].clone()).collect::<Vec<_>>();
    assert_eq!(ssim(&rows), ssim(&csv_rows(&b.join("quality.csv"))));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "size=40\nwindow=5\nper-rotation=5\nrotations=3\niterations=1\nrows=1\n").unwrap();
    let out = dir.path().join("out");
    let output = run(&[
        "--config".into(),
        file.display().to_string(),
        "--rotations".into(),
        "2".into(),
        "--out".into(),
        out.display().to_string(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("size=40\n") && manifest.contains("rotations=2\n"));
    assert_eq!(csv_rows(&out.join("quality.csv")).len(), 2);
}

#[test]
fn grid_run_writes_one_result_set_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig {
        size: 32,
        rows: 1,
        rotations: 2,
        snapshot_every: Some(0),
        out: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let runs = run_grid(&base, &[16, 32, 64], &[1, 5, 10]).unwrap();
    assert_eq!(runs.len(), 9);
    for run in &runs {
        let out = &run.config.out;
        assert!(out.join("manifest.txt").exists());
        assert_eq!(csv_rows(&out.join("quality.csv")).len(), 2);
        assert_eq!(run.config.per_rotation, run.config.window);
    }
}

#[test]
fn two_process_run_matches_single_process() {
    let dir = tempfile::tempdir().unwrap();
    let single = dir.path().join("single");
    assert!(run(&small_args(&single)).status.success());

    let endpoint = free_endpoint();
    let mut processor_args = small_args(&dir.path().join("proc"));
    processor_args.extend(["--listen".into(), endpoint.clone()]);
    let processor = spawn_processor(&processor_args);
    let mut detector_args = small_args(&dir.path().join("det"));
    detector_args.extend(["--connect".into(), endpoint]);
    let detector = run(&detector_args);
    assert!(detector.status.success(), "{}", String::from_utf8_lossy(&detector.stderr));
    assert!(processor.wait_with_output().unwrap().status.success());

    let a = csv_rows(&single.join("quality.csv"));
    let b = csv_rows(&dir.path().join("proc/quality.csv"));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x[..2], y[..2]);
        let (sx, sy): (f64, f64) = (x[4].parse().unwrap(), y[4].parse().unwrap());
        assert!((sx - sy).abs() <= 1e-9);
    }
}

#[test]
fn killed_detector_leaves_processor_clean() {
    let dir = tempfile::tempdir().unwrap();
    let endpoint = free_endpoint();
    let out = dir.path().join("proc");
    let mut args = small_args(&out);
    args.extend(["--listen".into(), endpoint.clone()]);
    let processor = spawn_processor(&args);

    let mut detector_args = small_args(&dir.path().join("det"));
    detector_args.extend(["--connect".into(), endpoint, "--rate".into(), "40".into()]);
    let mut detector = Command::new(BIN)
        .args(&detector_args)
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    thread::sleep(Duration::from_millis(1500));
    detector.kill().unwrap();
    detector.wait().unwrap();

    let status = processor.wait_with_output().unwrap().status;
    assert_eq!(status.code(), Some(0));
    let rows = csv_rows(&out.join("quality.csv"));
    assert!(!rows.is_empty() && rows.len() < 40, "{} rows", rows.len());
    for row in &rows {
        assert_eq!(row.len(), 8);
        row[4].parse::<f64>().unwrap();
    }
}

#[test]
fn detector_without_processor_fails_naming_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let endpoint = free_endpoint();
    let mut args = small_args(dir.path());
    args.extend(["--connect".into(), endpoint.clone()]);
    let output = run(&args);
    assert_eq!(output.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&output.stderr).contains(&endpoint));
}
