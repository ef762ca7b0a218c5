use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mdpmpc_cli::{ExperimentConfig, Plan};

fn mdpmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdpmpc")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn malformed_configs_exit_two_and_write_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();
    for (i, text) in [
        "{not json",
        r#"{"experiment": "nope"}"#,
        r#"{"experiment": "investment", "extra": 1}"#,
        r#"{"experiment": "investment", "params": {"horizon": 10, "grid_pts": 3}}"#,
        r#"{"experiment": "investment", "tolerances": {"made_up": 1.0}}"#,
        r#"{"experiment": "tabular-verify", "params": {"gammas": [1.5]}}"#,
        r#"{"experiment": "pendulum-dp", "params": {"refined_nodes": 11}}"#,
        r#"{"experiment": "investment", "params": {"variants": [{"name": "../x"}]}}"#,
    ]
    .iter()
    .enumerate()
    {
        let cfg = write(tmp.path(), &format!("bad{i}.json"), text);
        let o = mdpmpc(&["run", &cfg, "--output-dir", out_s]);
        assert_eq!(o.status.code(), Some(2), "{text}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.exists(), "{text} created the output directory");
    }
    let o = mdpmpc(&["run", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_writes_report_and_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "inv.json",
        r#"{"experiment": "investment", "params": {"grid_points": 20, "variants": []}}"#,
    );
    let out = tmp.path().join("nested/out");
    let o = mdpmpc(&["run", &cfg, "--output-dir", out.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("PASS value_gap[base]"), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 5);
    assert_eq!(report["passed"], true);
    let value = fs::read_to_string(out.join("investment_base_value.csv")).unwrap();
    assert_eq!(value.lines().next(), Some("s,v_star,v_hat"));
    assert_eq!(value.lines().count(), 21);
    assert_eq!(report["outputs"][0]["columns"], serde_json::json!(["s", "v_star", "v_hat"]));

    // --check validates only.
    let dry = tmp.path().join("dry");
    let o = mdpmpc(&["run", &cfg, "--output-dir", dry.to_str().unwrap(), "--check"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!dry.exists());
}

#[test]
fn failed_checks_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "tight.json",
        r#"{"experiment": "investment", "params": {"grid_points": 5, "variants": []},
            "tolerances": {"value_gap": -1.0}}"#,
    );
    let o = mdpmpc(&["run", &cfg, "--output-dir", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stdout).unwrap().contains("FAIL value_gap[base]"));
    // The report is still written.
    assert!(tmp.path().join("o/report.json").exists());
}

#[test]
fn diff_command() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write(tmp.path(), "a.json", r#"{"gap": 1e-10, "policy_agreement": 1.0}"#);
    let b = write(tmp.path(), "b.json", r#"{"gap": 1.01e-10, "policy_agreement": 1.0}"#);
    let c = write(tmp.path(), "c.json", r#"{"gap": 1e-10, "policy_agreement": 0.98}"#);
    let d = write(tmp.path(), "d.json", r#"{"other": 1}"#);
    let o = mdpmpc(&["diff", &a, &b]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "no differences");
    let o = mdpmpc(&["diff", &a, &c]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stdout).unwrap().contains("policy_agreement"));
    assert_eq!(mdpmpc(&["diff", &a, &d]).status.code(), Some(2));
    assert_eq!(mdpmpc(&["diff", &a, &c, "--atol", "0.1"]).status.code(), Some(0));
}

#[test]
fn default_params_round_trip_through_the_report() {
    for kind in ["tabular-verify", "lqr-verify", "investment", "pendulum-dp", "pendulum-learn"] {
        let cfg: ExperimentConfig = serde_json::from_str(&format!(r#"{{"experiment": "{kind}"}}"#)).unwrap();
        Plan::new(&cfg).unwrap();
    }
    let cfg: ExperimentConfig = serde_json::from_str(
        r#"{"experiment": "lqr-verify", "seed": 2, "params": {"instances": 3}}"#,
    )
    .unwrap();
    let outcome = Plan::new(&cfg).unwrap().execute().unwrap();
    // The resolved params reproduce the run when fed back.
    let again = ExperimentConfig {
        params: outcome.report.params.clone(),
        ..cfg
    };
    assert_eq!(Plan::new(&again).unwrap().execute().unwrap().report_json(), outcome.report_json());
}
