//! End-to-end tests of the command-line interface, driving the real
//! binary.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nonholo"))
}

fn tmp_path(name: &str) -> PathBuf {
    let mut p = std::env::temp_dir();
    p.push(format!("nonholo-cli-{}-{name}", std::process::id()));
    p
}

#[test]
fn run_writes_csv_with_the_declared_columns() {
    let csv = tmp_path("pendulum.csv");
    let output = bin()
        .args([
            "run",
            "--scenario",
            "rod-pendulum",
            "--method",
            "flannery",
            "--t-end",
            "1",
            "--adaptive",
            "--tol",
            "1e-8",
            "--samples",
            "50",
            "--out",
        ])
        .arg(&csv)
        .output()
        .expect("binary runs");
    assert!(output.status.success(), "{output:?}");

    // stdout is a JSON run report
    let report: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("report is JSON");
    assert_eq!(report["scenario"], "rod-pendulum");
    assert_eq!(report["method"], "flannery");

    let text = std::fs::read_to_string(&csv).expect("csv written");
    let mut lines = text.lines();
    // n = 2, m = 1: 1 + 2n + m + m + 2 = 9 columns
    let header = lines.next().expect("header");
    assert_eq!(header, "t,q:x,q:y,p:x,p:y,lam:1,g:1,energy,H");
    assert_eq!(header.split(',').count(), 9);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 50);
    for row in rows {
        assert_eq!(row.split(',').count(), 9);
    }
    assert!(!text.contains('\r'), "LF line endings only");
    std::fs::remove_file(&csv).ok();
}

#[test]
fn identical_runs_produce_byte_identical_csv() {
    let csv1 = tmp_path("det1.csv");
    let csv2 = tmp_path("det2.csv");
    for csv in [&csv1, &csv2] {
        let status = bin()
            .args([
                "run",
                "--scenario",
                "twist-toy",
                "--method",
                "flannery",
                "--t-end",
                "1",
                "--tol",
                "1e-9",
                "--samples",
                "40",
                "--out",
            ])
            .arg(csv)
            .output()
            .expect("binary runs");
        assert!(status.status.success());
    }
    let a = std::fs::read(&csv1).expect("first file");
    let b = std::fs::read(&csv2).expect("second file");
    assert_eq!(a, b, "CSV output must be byte-identical across runs");
    std::fs::remove_file(&csv1).ok();
    std::fs::remove_file(&csv2).ok();
}

#[test]
fn unknown_scenario_exits_one() {
    let output = bin()
        .args(["run", "--scenario", "nope", "--method", "dirac"])
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("unknown scenario"), "stderr: {err}");
}

#[test]
fn usage_errors_exit_one() {
    let output = bin()
        .args(["run", "--scenario", "rod-pendulum", "--method", "warp"])
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(1));

    let output = bin().args(["run", "--bogus-flag"]).output().expect("runs");
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn drift_abort_exits_three() {
    let output = bin()
        .args([
            "run",
            "--scenario",
            "rod-pendulum",
            "--method",
            "dirac",
            "--t-end",
            "2",
            "--tol",
            "1e-6",
            "--drift-abort",
            "1e-13",
        ])
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(3), "{output:?}");
}

#[test]
fn compare_reports_method_agreement() {
    let output = bin()
        .args([
            "compare",
            "--scenario",
            "rod-pendulum",
            "--methods",
            "dirac,flannery",
            "--t-end",
            "2",
            "--tol",
            "1e-10",
            "--samples",
            "100",
        ])
        .output()
        .expect("binary runs");
    assert!(output.status.success(), "{output:?}");
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).expect("JSON");
    let pair = &report["pairs"][0];
    assert_eq!(pair["a"], "dirac");
    assert_eq!(pair["b"], "flannery");
    let overall = pair["max_abs_overall"].as_f64().expect("number");
    assert!(overall < 1e-9, "holonomic methods must agree: {overall}");
}

#[test]
fn compare_needs_two_methods() {
    let output = bin()
        .args([
            "compare",
            "--scenario",
            "rod-pendulum",
            "--methods",
            "dirac",
        ])
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn check_filter_selects_bracket_invariants() {
    let output = bin()
        .args(["check", "--filter", "brackets"])
        .output()
        .expect("binary runs");
    assert!(output.status.success(), "{output:?}");
    let text = String::from_utf8_lossy(&output.stdout);
    let lines: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .collect();
    assert!(!lines.is_empty());
    for line in &lines {
        assert!(line.contains("brackets/"), "unexpected line: {line}");
    }
    assert!(text.contains("transposition-residual"));
}

#[test]
fn scenario_files_load_and_run() {
    let path = tmp_path("custom.json");
    std::fs::write(
        &path,
        r#"{
        "name": "slider",
        "coordinates": ["x", "y"],
        "parameters": {"k": 1.0},
        "lagrangian": "0.5*(x_dot^2 + y_dot^2) - 0.5*k*x^2",
        "constraints": ["y_dot - x_dot"],
        "initial": {"x": 1.0, "y": 0.0, "x_dot": 0.5, "y_dot": 0.5}
    }"#,
    )
    .expect("write scenario");
    let output = bin()
        .args(["run", "--method", "flannery", "--t-end", "1", "--scenario"])
        .arg(&path)
        .output()
        .expect("binary runs");
    assert!(output.status.success(), "{output:?}");
    std::fs::remove_file(&path).ok();
}

#[test]
fn observables_add_csv_columns() {
    let csv = tmp_path("obs.csv");
    let output = bin()
        .args([
            "run",
            "--scenario",
            "free-particle",
            "--method",
            "dirac",
            "--t-end",
            "1",
            "--samples",
            "5",
            "--observables",
            "p_x^2; x*p_x",
            "--out",
        ])
        .arg(&csv)
        .output()
        .expect("binary runs");
    assert!(output.status.success(), "{output:?}");
    let text = std::fs::read_to_string(&csv).expect("csv");
    let header = text.lines().next().expect("header");
    assert_eq!(header, "t,q:x,p:x,energy,H,obs:p_x^2,obs:x*p_x");
    std::fs::remove_file(&csv).ok();
}
