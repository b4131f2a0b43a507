use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn snsqkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snsqkd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

/// Small optimizer budget so the tests stay quick.
const QUICK: &str = "[optimizer]\nrestarts = 4\nbudget = 400\n";

#[test]
fn lossless_rate_is_positive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[geometry]\nl_a = 0.0\nl_b = 0.0\n");
    let out = snsqkd(&["rate", "--config", &cfg]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = stdout_json(&out);
    assert!(v["breakdown"]["r"].as_f64().unwrap() > 0.0);
}

#[test]
fn malformed_config_fails_with_line_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "[system]\ne_d = 0.1\nunknown_knob = 3\n",
    );
    let out = snsqkd(&["rate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("line 3") && err.contains("unknown_knob"),
        "{err}"
    );

    let cfg = write(dir.path(), "bad.json", "{\"system\": {\"e_d\": }}");
    let out = snsqkd(&["rate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let out = snsqkd(&["rate", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(
        snsqkd(&["scan-distance", "--mode", "diagonal"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        snsqkd(&["scan-distance", "--grid", "10:0:5"]).status.code(),
        Some(2)
    );
    assert_eq!(
        snsqkd(&["scan-ed", "--grid", "0.1,0.6"]).status.code(),
        Some(2)
    );
    assert_eq!(
        snsqkd(&["validate", "--trials", "1000"]).status.code(),
        Some(2)
    );
}

#[test]
fn scan_distance_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "q.toml", QUICK);
    let out = snsqkd(&[
        "scan-distance",
        "--config",
        &cfg,
        "--mode",
        "asym,sym",
        "--delta-l",
        "0",
        "--grid",
        "40,120",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut reader = csv::Reader::from_reader(out.stdout.as_slice());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        [
            "mode",
            "delta_l_km",
            "total_km",
            "l_a_km",
            "l_b_km",
            "rate",
            "u_a",
            "u_b",
            "v_b",
            "w_b",
            "eps_a",
            "eps_b",
            "p_za",
            "p_zb",
            "m",
            "status"
        ]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    // With equal arms the symmetric baseline is the same problem.
    for i in 0..2 {
        let asym: f64 = rows[i][5].parse().unwrap();
        let sym: f64 = rows[i + 2][5].parse().unwrap();
        assert!(
            asym > 0.0 && (asym - sym).abs() <= 0.05 * asym,
            "{asym} {sym}"
        );
        assert_eq!(&rows[i][15], "ok");
    }
}

#[test]
fn scan_without_points_still_prints_header() {
    let out = snsqkd(&["scan-distance", "--delta-l", "100", "--grid", "10,20"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("mode,delta_l_km,total_km"));
}

#[test]
fn scan_ed_end_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "q.toml", QUICK);
    let out = snsqkd(&[
        "scan-ed",
        "--config",
        &cfg,
        "--grid",
        "0.15,0.49",
        "--format",
        "json",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = stdout_json(&out);
    assert!(rows[0]["rate"].as_f64().unwrap() > 0.0);
    assert_eq!(rows[1]["rate"].as_f64().unwrap(), 0.0);
    assert_eq!(rows[1]["status"], "zero_rate");
}

#[test]
fn fit_sigma_needs_enough_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "q.toml", QUICK);
    let out = snsqkd(&["fit-sigma", "--config", &cfg, "--grid", "100,200"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient"));
}

#[test]
fn validate_vacuum_only_passes_and_corruption_fails() {
    let dir = tempfile::tempdir().unwrap();
    let vacuum = "[matched]\nu_b = 0.0\nv_b = 0.0\nw_b = 0.0\neps = 0.5\np_z = 0.5\n";
    let cfg = write(dir.path(), "vac.toml", vacuum);
    let out = snsqkd(&["validate", "--config", &cfg, "--trials", "1000000"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(stdout_json(&out)["passed"], true);

    let corrupted = "[geometry]\nl_a = 5.0\nl_b = 10.0\n\
                     [matched]\nu_b = 0.4\nv_b = 0.4\nw_b = 0.2\neps = 0.2\np_z = 0.3\n\
                     [validation]\nanalytic_eta_scale = 0.7\n";
    let cfg = write(dir.path(), "bad_eta.toml", corrupted);
    let out = snsqkd(&["validate", "--config", &cfg, "--trials", "1000000"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout_json(&out)["passed"], false);
}

#[test]
fn optimize_and_validate_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "q.toml", QUICK);
    for args in [
        vec!["optimize", "--config", &cfg, "--seed", "3"],
        vec![
            "validate", "--config", &cfg, "--seed", "3", "--trials", "1000000",
        ],
    ] {
        let a = snsqkd(&args);
        let b = snsqkd(&args);
        assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
        assert_eq!(a.stdout, b.stdout);
    }
}

#[test]
fn out_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rate.csv");
    let out = snsqkd(&["rate", "--format", "csv", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("l_a_km,l_b_km,rate,"));
}
