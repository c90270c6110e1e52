use jamalert_core::control::ControllerKind;
use jamalert_core::experiment::{self, Overrides};
use jamalert_core::protocol::Variant;
use jamalert_core::scenario::{Scenario, ScenarioError, BUNDLED};

fn short(name: &str, horizon: f64) -> Scenario {
    let mut sc = Scenario::load(name).unwrap();
    Overrides {
        horizon: Some(horizon),
        ..Default::default()
    }
    .apply(&mut sc);
    sc
}

#[test]
fn every_bundled_scenario_builds_a_layout() {
    for (name, _) in BUNDLED {
        let sc = Scenario::load(name).unwrap();
        assert_eq!(&sc.name, name);
        let layout = sc.layout().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!layout.net.segments.is_empty(), "{name}");
    }
}

#[test]
fn reports_verify_only_against_their_own_scenario() {
    let sc = short("forgery", 30.0);
    let out = experiment::run(&sc).unwrap();
    assert!(experiment::verify_report(&out.summary, &sc));
    let mut other = sc.clone();
    other.seed += 1;
    assert!(!experiment::verify_report(&out.summary, &other));
    let mut other = sc.clone();
    other.detection.n_min += 1;
    assert!(!experiment::verify_report(&out.summary, &other));
}

#[test]
fn outputs_land_on_disk() {
    let sc = short("botnet", 40.0);
    let out = experiment::run(&sc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    experiment::write_outputs(dir.path(), &out).unwrap();
    let json = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert_eq!(json, experiment::summary_json(&out.summary));
    let back: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(back["config_hash"], experiment::config_hash(&sc));
    let csv = std::fs::read_to_string(dir.path().join("events.csv")).unwrap();
    assert_eq!(csv.lines().count(), out.events.len() + 1);
}

#[test]
fn comparison_shares_the_seed_and_matches_serial_runs() {
    let sc = short("jam-window", 60.0);
    let controllers = [ControllerKind::Fixed, ControllerKind::AlertEnabled];
    let (serial, outs) = experiment::compare(&sc, &controllers, false).unwrap();
    let (parallel, _) = experiment::compare(&sc, &controllers, true).unwrap();
    assert_eq!(serial, parallel);
    assert!(serial.shared_seed);
    assert_eq!(serial.mean_delay_delta[0], 0.0);
    for (r, o) in serial.results.iter().zip(&outs) {
        assert_eq!(o.summary.seed, sc.seed);
        assert_eq!(o.summary.controller, r.controller);
    }
}

#[test]
fn variant_override_reaches_the_summary() {
    let mut sc = short("forgery", 20.0);
    Overrides {
        variant: Some(Variant::S2),
        ..Default::default()
    }
    .apply(&mut sc);
    assert_eq!(experiment::run(&sc).unwrap().summary.variant, Variant::S2);
}

#[test]
fn bad_files_report_where_they_fail() {
    let err = Scenario::from_toml_str("name = \"x\"\nhorizon = \n").unwrap_err();
    assert!(matches!(err, ScenarioError::Parse { line: 2, .. }), "{err}");
    let err = Scenario::load("/nonexistent/scenario.toml").unwrap_err();
    assert!(matches!(err, ScenarioError::Io { .. }));
}
