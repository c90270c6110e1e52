//! Experiment plumbing: overrides, config hashes, output files and paired
//! controller comparisons.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::ControllerKind;
use crate::protocol::Variant;
use crate::scenario::{Scenario, ScenarioError};
use crate::sim::metrics::Summary;
use crate::sim::{self, EventRecord, SimOutput};

/// Command-line overrides applied on top of a scenario file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub controller: Option<ControllerKind>,
    pub horizon: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, sc: &mut Scenario) {
        if let Some(s) = self.seed {
            sc.seed = s;
        }
        if let Some(v) = self.variant {
            sc.variant = v;
        }
        if let Some(c) = self.controller {
            sc.controller = c;
            for n in &mut sc.nodes {
                n.controller = None;
            }
        }
        if let Some(h) = self.horizon {
            sc.horizon = h;
        }
    }
}

/// SHA-256 of the canonical JSON form of the effective scenario.
pub fn config_hash(sc: &Scenario) -> String {
    let json = serde_json::to_vec(sc).expect("scenario serializes");
    hex::encode(Sha256::digest(json))
}

pub fn run(sc: &Scenario) -> Result<SimOutput, ScenarioError> {
    sim::run(sc, config_hash(sc))
}

/// Whether `summary` was produced from exactly this scenario.
pub fn verify_report(summary: &Summary, sc: &Scenario) -> bool {
    summary.config_hash == config_hash(sc) && summary.seed == sc.seed
}

pub fn summary_json(summary: &Summary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}

pub fn events_csv(events: &[EventRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time", "kind", "agent", "subject", "detail"]).expect("in-memory write");
    for e in events {
        w.write_record([&format!("{:.3}", e.time), e.kind, &e.agent, &e.subject, &e.detail])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Writes `summary.json` and `events.csv` into `dir`.
pub fn write_outputs(dir: &Path, out: &SimOutput) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.json"), summary_json(&out.summary))?;
    fs::write(dir.join("events.csv"), events_csv(&out.events))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerResult {
    pub controller: ControllerKind,
    pub config_hash: String,
    pub mean_delay: f64,
    pub p95_delay: f64,
    pub max_queue: u64,
    pub true_alerts: u64,
    pub false_alerts: u64,
    pub commands: u64,
    pub first_alert_latency: Option<f64>,
}

impl ControllerResult {
    fn from_summary(controller: ControllerKind, s: &Summary) -> Self {
        Self {
            controller,
            config_hash: s.config_hash.clone(),
            mean_delay: s.delay.mean,
            p95_delay: s.delay.p95,
            max_queue: s.queue.max,
            true_alerts: s.true_alerts,
            false_alerts: s.false_alerts,
            commands: s.commands.len() as u64,
            first_alert_latency: s.incidents.iter().filter_map(|i| i.latency).reduce(f64::min),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    /// Every column ran with this seed.
    pub seed: u64,
    pub shared_seed: bool,
    pub results: Vec<ControllerResult>,
    /// Mean-delay difference of each column against the first one.
    pub mean_delay_delta: Vec<f64>,
}

/// Runs `sc` once per controller with the same seed.
pub fn compare(
    sc: &Scenario,
    controllers: &[ControllerKind],
    parallel: bool,
) -> Result<(Comparison, Vec<SimOutput>), ScenarioError> {
    let scenarios: Vec<Scenario> = controllers
        .iter()
        .map(|&c| {
            let mut s = sc.clone();
            Overrides {
                controller: Some(c),
                ..Default::default()
            }
            .apply(&mut s);
            s
        })
        .collect();
    let outputs: Vec<Result<SimOutput, ScenarioError>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = scenarios.iter().map(|s| scope.spawn(move || run(s))).collect();
            handles.into_iter().map(|h| h.join().expect("run thread")).collect()
        })
    } else {
        scenarios.iter().map(run).collect()
    };
    let outputs = outputs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let results: Vec<ControllerResult> = controllers
        .iter()
        .zip(&outputs)
        .map(|(&c, o)| ControllerResult::from_summary(c, &o.summary))
        .collect();
    let base = results.first().map_or(0.0, |r| r.mean_delay);
    let cmp = Comparison {
        scenario: sc.name.clone(),
        seed: sc.seed,
        shared_seed: outputs.iter().all(|o| o.summary.seed == sc.seed),
        mean_delay_delta: results.iter().map(|r| r.mean_delay - base).collect(),
        results,
    };
    Ok((cmp, outputs))
}
