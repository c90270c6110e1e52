use std::path::Path;
use std::process::{Command, Output};

fn jamalert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jamalert")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_prints_the_layout() {
    let o = jamalert(&["validate", "--scenario", "corridor"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.starts_with("corridor: ok ("), "{s}");
    assert!(s.contains("19 segments"), "{s}");
}

#[test]
fn run_writes_summary_and_events() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = jamalert(&[
        "run", "--scenario", "forgery", "--seed", "9", "--variant", "s2", "--horizon", "30",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 9);
    assert_eq!(summary["variant"], "s2");
    assert_eq!(summary["horizon"], 30.0);
    let csv = std::fs::read_to_string(out.join("events.csv")).unwrap();
    assert!(csv.starts_with("time,kind,agent,subject,detail\n"));
}

#[test]
fn compare_writes_one_directory_per_controller() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = jamalert(&[
        "compare", "--scenario", "botnet", "--horizon", "40", "--controller", "fixed",
        "--controller", "adaptive_baseline", "--controller", "alert_enabled", "--parallel",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for d in ["0-fixed", "1-adaptive_baseline", "2-alert_enabled"] {
        assert!(Path::new(&out.join(d).join("summary.json")).exists(), "{d}");
    }
    let cmp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(cmp["shared_seed"], true);
    assert_eq!(cmp["results"].as_array().unwrap().len(), 3);
    assert_eq!(stdout(&o).lines().count(), 4);
}

#[test]
fn bad_arguments_fail_with_a_message() {
    let o = jamalert(&["run", "--scenario", "botnet", "--controller", "scats"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown controller"));

    let o = jamalert(&["validate", "--scenario", "no-such-scenario.toml"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: cannot read"));

    let o = jamalert(&["compare", "--scenario", "botnet", "--controller", "fixed"]);
    assert!(!o.status.success());
}
