use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn run(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_radgraph")).args(args).output().expect("spawn radgraph");
    out.status.code().expect("exit code")
}

fn report(prefix: &Path) -> Value {
    let s = std::fs::read_to_string(prefix.with_extension("json")).expect("report written");
    serde_json::from_str(&s).expect("report is JSON")
}

const KEYS: [&str; 8] = ["mode", "config_echo", "homotopy_trace", "residuals", "monitors", "identity_checks", "timings", "warnings"];

#[test]
fn direct_solve_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d1");
    let code = run(&[
        "solve",
        "--mode",
        "direct",
        "--fiber-res",
        "64",
        "--curvature",
        "radial:2/(1+rho)",
        "--out-prefix",
        p.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let r = report(&p);
    assert_eq!(r["status"], "ok");
    for k in KEYS {
        assert!(r.get(k).is_some(), "missing key {k}");
    }
    let csv = std::fs::read_to_string(p.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("node_index,theta,u"));
    assert_eq!(csv.lines().count(), 65);
    let obj = std::fs::read_to_string(p.with_extension("obj")).unwrap();
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 64);
    assert!(obj.lines().any(|l| l.starts_with("l ")));
}

#[test]
fn theorem4_without_radii_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t4");
    let code = run(&["solve", "--mode", "theorem4", "--curvature", "constant:1", "--out-prefix", p.to_str().unwrap()]);
    assert_eq!(code, 2);
    let r = report(&p);
    assert_eq!(r["status"], "validation_error");
    let err = r["error"].as_str().unwrap();
    assert!(err.contains("r1") && err.contains("r2"), "{err}");
}

#[test]
fn theorem4_with_radii_converges() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t4");
    let code = run(&[
        "solve",
        "--mode",
        "theorem4",
        "--fiber-dim",
        "2",
        "--fiber-res",
        "16,32",
        "--curvature",
        "constant:1",
        "--r1",
        "0.5",
        "--r2",
        "2",
        "--out-prefix",
        p.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert_eq!(report(&p)["status"], "ok");
}

#[test]
fn infeasible_theorem3_is_a_solver_failure() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t3");
    let code = run(&[
        "solve",
        "--mode",
        "theorem3",
        "--base-dim",
        "1",
        "--base-res",
        "16",
        "--fiber-res",
        "32",
        "--curvature",
        "fiber:1+0.2*cos(x)",
        "--out-prefix",
        p.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
    let r = report(&p);
    assert_eq!(r["status"], "solver_failure");
    assert!(r["homotopy_trace"].as_array().is_some_and(|t| !t.is_empty()));
}

#[test]
fn verify_passes_on_sphere_fiber() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v");
    let code = run(&[
        "verify",
        "--fiber-dim",
        "2",
        "--fiber-res",
        "16,32",
        "--curvature",
        "constant:1",
        "--out-prefix",
        p.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let r = report(&p);
    assert_eq!(r["identity_checks"]["structure_identities"]["curvature_commutator"]["pass"], true);
    assert_eq!(r["identity_checks"]["theorem1_oracle"]["pass"], true);
    assert_eq!(r["identity_checks"]["embedded_curvature"]["pass"], true);
}

#[test]
fn preasymptotic_convergence_is_a_verification_failure() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c");
    let prefix = p.to_str().unwrap();
    let k = "expr:2*(1+0.5*cos(4*theta))/(1+rho)";
    assert_eq!(run(&["converge", "--fiber-res", "8", "--curvature", k, "--out-prefix", prefix]), 4);
    assert_eq!(report(&p)["status"], "verification_failure");
    assert_eq!(run(&["converge", "--fiber-res", "32", "--curvature", k, "--out-prefix", prefix]), 0);
}

#[test]
fn radius_of_rational_curvature() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r");
    let code = run(&["radius", "--curvature", "radial:2/(1+rho)", "--out-prefix", p.to_str().unwrap()]);
    assert_eq!(code, 0);
    let r = report(&p);
    assert_eq!(r["mode"], "radius");
    let radius = r["identity_checks"]["radius"]["radius"].as_f64().unwrap();
    assert!((radius - 1.0).abs() < 1e-9);
}

#[test]
fn flags_override_file_and_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "mode = \"direct\"\n[geometry]\nfiber_res = [32]\n[curvature]\nconstant = 4.0\n").unwrap();
    let p = dir.path().join("a");
    assert_eq!(run(&["solve", "--config", cfg.to_str().unwrap(), "--fiber-res", "64", "--out-prefix", p.to_str().unwrap()]), 0);
    let echo = report(&p)["config_echo"].clone();
    assert_eq!(echo["geometry"]["fiber_res"][0], 64);
    assert_eq!(echo["curvature"]["constant"], 4.0);

    // The echoed configuration is itself a valid config file for the same run.
    let again = dir.path().join("echo.json");
    std::fs::write(&again, serde_json::to_string(&echo).unwrap()).unwrap();
    assert_eq!(run(&["solve", "--config", again.to_str().unwrap()]), 0);
    let second = report(&dir.path().join("a"));
    assert_eq!(second["config_echo"], echo);
}

#[test]
fn unknown_config_key_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "mode = \"direct\"\n\n[geometry]\nfibre_dim = 2\n").unwrap();
    let p = dir.path().join("bad");
    assert_eq!(run(&["solve", "--config", cfg.to_str().unwrap(), "--out-prefix", p.to_str().unwrap()]), 2);
    let err = report(&p)["error"].as_str().unwrap().to_string();
    assert!(err.contains("line 4") && err.contains("fibre_dim"), "{err}");
}

#[test]
fn solve_rejects_non_solver_modes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m");
    let code = run(&["solve", "--mode", "verify", "--curvature", "constant:1", "--out-prefix", p.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert_eq!(report(&p)["status"], "validation_error");
}
