use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn out_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn mfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small(out: &PathBuf) -> Vec<String> {
    [
        "--atoms",
        "20",
        "--scenarios",
        "40",
        "--steps",
        "10",
        "--out",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([out.display().to_string()])
    .collect()
}

fn run_small(cmd: &[&str], out: &PathBuf) -> Output {
    let mut args: Vec<String> = cmd.iter().map(|s| s.to_string()).collect();
    args.extend(small(out));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    mfc(&refs)
}

fn summary(out: &PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn zero_cost_solves_to_zero() {
    let out = out_dir("zero");
    let o = run_small(&["solve", "--model", "zero_cost"], &out);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let s = summary(&out);
    assert_eq!(s["value"].as_f64(), Some(0.0));
    assert_eq!(s["iterations"].as_u64(), Some(0));
    let csv = fs::read_to_string(out.join("quadruple.csv")).unwrap();
    // the terminal node has no control
    for u in csv
        .lines()
        .skip(2)
        .map(|l| l.rsplit(',').next().unwrap())
        .filter(|u| !u.is_empty())
    {
        assert_eq!(u.parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn outputs_are_deterministic_and_tagged() {
    let (a, b) = (out_dir("det_a"), out_dir("det_b"));
    assert_eq!(
        run_small(&["solve", "--model", "coupled"], &a)
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        run_small(&["solve", "--model", "coupled"], &b)
            .status
            .code(),
        Some(0)
    );
    let qa = fs::read_to_string(a.join("quadruple.csv")).unwrap();
    assert_eq!(qa, fs::read_to_string(b.join("quadruple.csv")).unwrap());
    let hash = summary(&a)["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(qa.lines().next().unwrap(), format!("# config_hash={hash}"));
    assert_eq!(qa.lines().nth(1).unwrap(), "node,atom,scenario,dim,Y,Z,u");
    let cfg: Value =
        serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["config_hash"].as_str(), Some(hash.as_str()));
    assert_eq!(cfg["config"]["ensemble"]["atoms"].as_u64(), Some(20));
}

#[test]
fn negative_margin_is_gated() {
    let out = out_dir("gate");
    let cfg = out.with_extension("json");
    fs::create_dir_all(cfg.parent().unwrap()).unwrap();
    fs::write(&cfg, r#"{"model": {"name": "concave_terminal", "params": {"r": 1.0, "q_t": -2.0}}, "grid": {"t_end": 1.0}}"#)
        .unwrap();
    let base = ["solve", "--config", cfg.to_str().unwrap()];
    let o = run_small(&base, &out);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr).to_string() + &String::from_utf8_lossy(&o.stdout);
    assert!(err.contains("-1"), "{err}");
    assert_eq!(summary(&out)["c0"].as_f64(), Some(-1.0));

    let forced = out_dir("gate_forced");
    let mut args = base.to_vec();
    args.push("--force");
    let o = run_small(&args, &forced);
    assert_ne!(o.status.code(), Some(4));
    assert_eq!(summary(&forced)["forced"].as_bool(), Some(true));
}

#[test]
fn bad_configs_exit_with_2() {
    let out = out_dir("bad");
    let cfg = out.with_extension("json");
    fs::create_dir_all(cfg.parent().unwrap()).unwrap();
    fs::write(&cfg, r#"{"modle": {"name": "lq_scalar"}}"#).unwrap();
    let o = run_small(&["solve", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("summary.json").exists());
    let o = run_small(&["solve", "--model", "no_such_model"], &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn lq_validate_reports_both_errors() {
    let out = out_dir("lq");
    let o = run_small(
        &["solve", "--model", "lq_scalar", "--check", "lq-validate"],
        &out,
    );
    let s = summary(&out);
    let check = &s["checks"][0];
    assert_eq!(check["name"].as_str(), Some("lq-validate"));
    let metrics = &check["metrics"];
    for key in [
        "control_rel_err_max_node",
        "control_rel_err_aggregate",
        "value_rel_err",
    ] {
        assert!(metrics[key].as_f64().unwrap().is_finite(), "{key}");
    }
    let passed = check["passed"].as_bool().unwrap();
    assert_eq!(o.status.code(), Some(if passed { 0 } else { 1 }));
}

#[test]
fn assumptions_for_the_nonquadratic_example() {
    let out = out_dir("assume");
    let o = run_small(&["assumptions", "--model", "nonquadratic"], &out);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["assumptions"]["b5_star"].as_bool(), Some(true));
}
