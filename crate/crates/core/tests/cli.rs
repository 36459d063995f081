use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hinf-coalition"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_variant(dir: &TempDir, name: &str, from: &str, edit: impl Fn(String) -> String) -> PathBuf {
    let text = edit(std::fs::read_to_string(scenario(from)).unwrap());
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn assert_error(out: &Output, dir: &Path, code: &str, exit: i32) {
    assert_eq!(
        out.status.code(),
        Some(exit),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = json(&dir.join("summary.json"));
    assert_eq!(summary["status"], "error");
    assert_eq!(summary["error_code"], code);
    let stderr: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(stderr["error_code"], code);
}

#[test]
fn solve_scalar_writes_closed_form_gain() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("solve");
    let res = run(&["solve"], &scenario("scalar.toml"), &out);
    assert!(res.status.success());
    let gains = json(&out.join("gains.json"));
    let p = gains["agents"][0]["p"][0][0].as_f64().unwrap();
    assert!((p - std::f64::consts::SQRT_2).abs() < 1e-10);
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "solve");
    assert_eq!(manifest["seed"], 0);
    assert!(manifest["version"]
        .as_str()
        .unwrap()
        .ends_with(env!("CARGO_PKG_VERSION")));
}

#[test]
fn tiny_gamma_has_no_stabilizing_solution() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_variant(&tmp, "g.toml", "scalar.toml", |t| {
        t.replace("gamma = 1.4142135623730951", "gamma = 0.1")
    });
    let out = tmp.path().join("o");
    let res = run(&["solve"], &cfg, &out);
    assert_error(&res, &out, "NoStabilizingSolution", 5);
}

#[test]
fn malformed_config_is_a_parse_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[graph\nagents = 2").unwrap();
    let out = tmp.path().join("o");
    assert_error(&run(&["solve"], &cfg, &out), &out, "ParseError", 3);
}

#[test]
fn unknown_key_is_a_parse_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_variant(&tmp, "k.toml", "scalar.toml", |t| t.replace("[sim]", "[sim]\nstep = 1"));
    let out = tmp.path().join("o");
    assert_error(&run(&["solve"], &cfg, &out), &out, "ParseError", 3);
}

#[test]
fn invalid_gains_are_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_variant(&tmp, "b.toml", "scalar.toml", |t| t.replace("beta = 3.0", "beta = 1.5"));
    let out = tmp.path().join("o");
    assert_error(&run(&["decouple-demo"], &cfg, &out), &out, "ValidationError", 4);
}

#[test]
fn verification_cap_is_enforced() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_variant(&tmp, "cap.toml", "formation8.toml", |t| {
        t + "\n[verify]\nmax_agents = 4\n"
    });
    let out = tmp.path().join("o");
    let res = run(&["verify"], &cfg, &out);
    assert_error(&res, &out, "CapExceeded", 6);
}

#[test]
fn verify_formation8_passes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("v");
    let res = run(&["verify", "--seed", "3"], &scenario("formation8.toml"), &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report = json(&out.join("verify.json"));
    assert_eq!(report["passed"], true);
    assert!(report["global_gare_residual"].as_f64().unwrap() < report["residual_tolerance"].as_f64().unwrap());
    assert!(report["strategy_equivalence_max_error"].as_f64().unwrap() < 1e-10);
}

#[test]
fn zero_horizon_gives_trivial_certificate() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("z");
    let res = run(&["simulate", "--t-max", "0"], &scenario("scalar.toml"), &out);
    assert!(res.status.success());
    let s = json(&out.join("summary.json"));
    assert_eq!(s["samples"], 1);
    assert_eq!(s["certificate"]["lhs"], 0.0);
    assert_eq!(s["certificate"]["holds"], true);
    let csv = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn trace_csv_has_documented_columns() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("c");
    assert!(run(&["simulate", "--t-max", "0.1"], &scenario("scalar.toml"), &out)
        .status
        .success());
    let csv = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header.first(), Some(&"t"));
    assert_eq!(header.last(), Some(&"est_err_norm"));
    for col in ["delta_norm", "V", "lhs_running", "rhs_running"] {
        assert!(header.contains(&col), "missing {col}");
    }
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').count(), header.len());
    }
}

#[test]
fn overrides_select_controller_and_attack() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("w");
    let res = run(
        &["simulate", "--attack", "worst-case", "--t-max", "2", "--h", "0.002"],
        &scenario("scalar.toml"),
        &out,
    );
    assert!(res.status.success());
    let s = json(&out.join("summary.json"));
    assert_eq!(s["attack"], "worst_case");
    assert_eq!(s["controller"], "centralized");
    assert_eq!(s["certificate"]["holds"], true);
}

#[test]
fn algorithm1_summary_reports_settling_bound() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("a");
    let res = run(
        &["simulate", "--t-max", "10.5"],
        &scenario("path3_algorithm1.toml"),
        &out,
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let s = json(&out.join("summary.json"));
    assert_eq!(s["controller"], "algorithm1");
    let t_star = s["estimator"]["t_star"].as_f64().unwrap();
    assert!(t_star > 0.0 && t_star < 10.5);
}

#[test]
fn decouple_demo_reports_reconstruction() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    let res = run(&["decouple-demo"], &scenario("scalar.toml"), &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let s = json(&out.join("summary.json"));
    assert!(s["t_star"].as_f64().unwrap() >= 0.0);
    assert!(s["final_max_abs_error"].as_f64().unwrap() <= s["chatter_band"].as_f64().unwrap());
    assert!(out.join("estimator.csv").exists());
}

#[test]
fn rerun_replaces_output_directory() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("r");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("stale.txt"), "old").unwrap();
    assert!(run(&["solve"], &scenario("scalar.toml"), &out).status.success());
    assert!(!out.join("stale.txt").exists());
    assert!(out.join("gains.json").exists());
    let leftovers: Vec<_> = std::fs::read_dir(tmp.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn usage_errors_exit_with_two() {
    let res = Command::new(env!("CARGO_BIN_EXE_hinf-coalition"))
        .arg("frobnicate")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
    let res = Command::new(env!("CARGO_BIN_EXE_hinf-coalition"))
        .arg("--help")
        .output()
        .unwrap();
    assert!(res.status.success());
}

#[test]
fn missing_config_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("m");
    let res = run(&["solve"], &tmp.path().join("nope.toml"), &out);
    assert_error(&res, &out, "IoError", 8);
}
