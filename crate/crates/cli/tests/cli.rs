use geoclose_cli::{run, sweep_report, verify, Command, Config, Outcome, RunContext, SweepRow};
use std::path::Path;
use std::process::Command as Process;

fn ctx(dir: &Path) -> RunContext {
    RunContext { out_dir: dir.to_path_buf(), emit_trajectories: true }
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn geoclose(args: &[&str]) -> std::process::Output {
    Process::new(env!("CARGO_BIN_EXE_geoclose")).args(args).output().unwrap()
}

#[test]
fn connect_identical_endpoints_has_zero_factor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::from_json(
        r#"{
        "metric": {"family": "flat", "dim": 2},
        "connect": {
            "start": {"x": [0.1, 0.2], "v": [1.0, 0.3]},
            "target": {"x": [0.1, 0.2], "v": [1.0, 0.3]},
            "tau": 1.0, "rho": 0.1
        }
    }"#,
    )
    .unwrap();
    let out = run(Command::Connect, &cfg, &ctx(dir.path())).unwrap();
    assert_eq!(out, Outcome::Verified);
    let r = read_json(&dir.path().join("report.json"));
    assert_eq!(r["connection"]["f_c1_norm"].as_f64(), Some(0.0));
    assert!(dir.path().join("connecting_curve.csv").exists());
}

#[test]
fn close_rational_slope_returns_root_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::from_json(
        r#"{
        "metric": {"family": "flat", "dim": 2},
        "close": {"seed": {"x": [0.1, 0.2], "v": [1.0, 1.0]}, "options": {"tau": 0.25}}
    }"#,
    )
    .unwrap();
    let out = run(Command::Close, &cfg, &ctx(dir.path())).unwrap();
    assert_eq!(out, Outcome::Verified);
    let r = read_json(&dir.path().join("report.json"));
    let period = r["period"].as_f64().unwrap();
    let k = (period / 2f64.sqrt()).round();
    assert!(k >= 1.0 && (period - k * 2f64.sqrt()).abs() < 1e-12, "period {period}");
    assert!(r["residuals"]["periodicity"].as_f64().unwrap() < 1e-12);
    assert!(dir.path().join("closed_orbit.csv").exists());
    assert!(dir.path().join("timings.json").exists());
    assert!(r.get("timings").is_none());

    assert_eq!(verify(&ctx(dir.path())).unwrap(), Outcome::Verified);
    let v = read_json(&dir.path().join("verify.json"));
    assert_eq!(v["identical"], serde_json::Value::Bool(true), "{v}");
}

#[test]
fn integrate_writes_trajectory_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::from_json(
        r#"{
        "metric": {"family": "trig_perturbation", "dim": 2, "c1_size": 0.05, "seed": 1},
        "integrate": {"start": {"x": [0.0, 0.0], "v": [1.0, 0.5]}, "duration": 3.0}
    }"#,
    )
    .unwrap();
    assert_eq!(run(Command::Integrate, &cfg, &ctx(dir.path())).unwrap(), Outcome::Verified);
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("t,"), "{header}");
    assert!(csv.lines().count() > 10);
    let r = read_json(&dir.path().join("report.json"));
    assert_eq!(r["verified"], serde_json::Value::Bool(true));
}

#[test]
fn sweep_summary_detects_non_monotone_rows() {
    let row = |s: f64, c: f64| SweepRow {
        separation: s,
        f_c1_norm: c,
        tau_shift: s,
        c1_ratio: c / s,
        tau_ratio: 1.0,
        verified: true,
    };
    let good = sweep_report(vec![row(1e-2, 2.0), row(5e-3, 1.0)]);
    assert!(good.monotone);
    assert_eq!(good.c1_ratio_spread, 1.0);
    let bad = sweep_report(vec![row(1e-2, 1.0), row(5e-3, 2.0)]);
    assert!(!bad.monotone);
    assert_eq!(bad.c1_ratio_spread, 4.0);
}

#[test]
fn identical_config_gives_identical_report() {
    let cfg = Config::from_json(
        r#"{
        "metric": {"family": "trig_perturbation", "dim": 2, "c1_size": 0.05, "seed": 3},
        "connect": {
            "start": {"x": [0.0, 0.0], "v": [1.0, 0.0]},
            "target": {"x": [0.0, 0.01], "v": [1.0, 0.0]},
            "tau": 1.0, "rho": 0.1
        }
    }"#,
    )
    .unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(Command::Connect, &cfg, &ctx(a.path())).unwrap();
    run(Command::Connect, &cfg, &ctx(b.path())).unwrap();
    let ra = std::fs::read(a.path().join("report.json")).unwrap();
    let rb = std::fs::read(b.path().join("report.json")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn unknown_key_exits_with_code_two_and_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"metric\": {\"family\": \"flat\", \"dim\": 2},\n  \"bogus\": 1\n}\n").unwrap();
    let out = geoclose(&["integrate", "--config", path.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus") && err.contains("line 3"), "{err}");
}

#[test]
fn missing_section_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"metric": {"family": "flat", "dim": 2}}"#).unwrap();
    let out = geoclose(&["close", "--config", path.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(dir.path().join("error.json").exists());
}

#[test]
fn failed_verification_exits_with_code_one_and_keeps_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    // An energy tolerance no integrator meets.
    std::fs::write(
        &path,
        r#"{
        "metric": {"family": "trig_perturbation", "dim": 2, "c1_size": 0.05},
        "flow": {"energy_tol": 1e-30},
        "integrate": {"start": {"x": [0.0, 0.0], "v": [1.0, 0.5]}, "duration": 1.0}
    }"#,
    )
    .unwrap();
    let out = geoclose(&["integrate", "--config", path.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(&dir.path().join("report.json"));
    assert_eq!(r["verified"], serde_json::Value::Bool(false));
}
