use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn ffl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffl")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &serde_json::Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(body).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn small() -> serde_json::Value {
    serde_json::json!({
        "layer_sizes": [8, 16, 3],
        "synthetic_per_class": 100,
        "workers": 4,
        "T_budget_s": 20.0,
        "tau0": 8,
        "tau_ub": 8,
        "s_ub": 6.0,
        "lowrank_rank": 4,
    })
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_both_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small());
    let out = dir.path().join("out");
    let o = ffl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("round,sim_time_s,tau_k,s_k,"), "{csv}");
    assert!(csv.lines().count() > 1);
    let s = summary(&out);
    assert_eq!(s["scheme"], "ffl");
    assert!(s["rounds"].as_u64().unwrap() >= 1);
}

#[test]
fn invalid_eta_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = small();
    body["eta"] = serde_json::json!(-1.0);
    let cfg = write_config(dir.path(), "c.json", &body);
    let o = ffl(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eta"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = small();
    body["learning_rate"] = serde_json::json!(0.1);
    let cfg = write_config(dir.path(), "c.json", &body);
    let o = ffl(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = small();
    body["packet_failure_prob"] = serde_json::json!(0.2);
    let cfg = write_config(dir.path(), "c.json", &body);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(ffl(&["run", "--config", &cfg, "--out", d.to_str().unwrap()]).status.success());
    }
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
    // The echoed config records where each run wrote its output.
    let strip = |d: &Path| {
        let mut s = summary(d);
        s["config"].as_object_mut().unwrap().remove("output_dir");
        s
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(ffl(&["run", "--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "5"]).status.success());
    assert!(ffl(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "6"]).status.success());
    assert_eq!(summary(&a)["config"]["seed"], 5);
    assert_ne!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn compare_needs_two_schemes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small());
    let o = ffl(&["compare", "--config", &cfg, "--scheme", "ffl"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ffl(&["compare", "--config", &cfg, "--scheme", "ffl", "ffl"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ffl(&["compare", "--config", &cfg, "--scheme", "ffl", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unreached_target_reports_inf() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = small();
    body["target_accuracy"] = serde_json::json!(1.0);
    body["T_budget_s"] = serde_json::json!(3.0);
    let cfg = write_config(dir.path(), "c.json", &body);
    let out = dir.path().join("o");
    let o = ffl(&["compare", "--config", &cfg, "--out", out.to_str().unwrap(), "--scheme", "ffl", "vanilla"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(summary(&out.join("ffl"))["time_to_target_s"], "inf");
    let table = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    assert!(table.lines().skip(1).all(|l| l.split(',').nth(1) == Some("inf")), "{table}");
}

#[test]
fn compare_ranks_ffl_ahead_of_vanilla() {
    let dir = tempfile::tempdir().unwrap();
    let body = serde_json::json!({ "T_budget_s": 150.0, "stop_at_target": true });
    let cfg = write_config(dir.path(), "c.json", &body);
    let out = dir.path().join("o");
    let o = ffl(&["compare", "--config", &cfg, "--out", out.to_str().unwrap(), "--scheme", "ffl", "vanilla"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let time = |s: &str| -> f64 {
        match &summary(&out.join(s))["time_to_target_s"] {
            serde_json::Value::Number(n) => n.as_f64().unwrap(),
            _ => f64::INFINITY,
        }
    };
    let (f, v) = (time("ffl"), time("vanilla"));
    assert!(f.is_finite() && f <= v, "ffl {f} vs vanilla {v}");
    let speedups: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("speedups.json")).unwrap()).unwrap();
    assert_eq!(speedups["time_to_target_ratio"]["ffl"], 1.0);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = small();
    body["scheme"] = serde_json::json!("adacomm_like");
    let cfg = write_config(dir.path(), "c.json", &body);
    let a = dir.path().join("a");
    assert!(ffl(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    let echoed = write_config(dir.path(), "echo.json", &summary(&a)["config"]);
    let b = dir.path().join("b");
    let o = ffl(&["run", "--config", &echoed, "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn selftest_passes_quickly() {
    let start = Instant::now();
    let o = ffl(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(start.elapsed().as_secs() < 120);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{stdout}");
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    assert_eq!(ffl(&[]).status.code(), Some(2));
}
