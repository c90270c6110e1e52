//! Scenario files: TOML schema, validation with line-precise errors, and the
//! road layout (trimmed segments, RSU placement, neighbor tables) built from them.
//!
//! Every field is documented in `docs/scenario-schema.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AdversaryConfig;
use crate::control::{ControlParams, ControllerKind, Phase, PhasePlan};
use crate::detection::DetectionParams;
use crate::geometry::{
    angle_diff_deg, normalize_deg, AngleInterval, Direction, Intersection, Lane, LaneId, LaneRef, LightId,
    NeighborEntry, NeighborTable, NodeId, Point, RoadNetwork, Segment, SegmentEnd, SegmentId, Terminal,
};
use crate::protocol::{ProtocolTiming, Variant, VehicleType};
use crate::AgentId;

pub const SCHEMA_VERSION: u32 = 1;

/// Distance of each end RSU from its segment end, along the axis.
pub const RSU_INSET: f64 = 5.0;
/// Extra main-RSU range beyond half the segment length.
pub const MRSU_MARGIN: f64 = 15.0;
/// Largest margin added around derived arrival intervals, degrees.
pub const NB_MARGIN_DEG: f64 = 5.0;
/// Tolerance of the external-origin interval around the lane heading, degrees.
pub const EXTERNAL_TOLERANCE_DEG: f64 = 5.0;

pub const BUNDLED: &[(&str, &str)] = &[
    ("accident1", include_str!("../scenarios/accident1.toml")),
    ("divert1", include_str!("../scenarios/divert1.toml")),
    ("botnet", include_str!("../scenarios/botnet.toml")),
    ("replay-storm", include_str!("../scenarios/replay-storm.toml")),
    ("forgery", include_str!("../scenarios/forgery.toml")),
    ("jam-window", include_str!("../scenarios/jam-window.toml")),
    ("dos-flood", include_str!("../scenarios/dos-flood.toml")),
    ("corridor", include_str!("../scenarios/corridor.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{}", fmt_invalid(.path, *.line, .message))]
    Invalid {
        path: String,
        line: Option<usize>,
        message: String,
    },
}

fn fmt_invalid(path: &str, line: Option<usize>, message: &str) -> String {
    match line {
        Some(l) => format!("invalid scenario at line {l} ({path}): {message}"),
        None => format!("invalid scenario ({path}): {message}"),
    }
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        path: path.into(),
        line: None,
        message: message.into(),
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Line of the item at a dotted path such as `segments[2].lanes[0].lid`,
/// falling back to the deepest ancestor that has a span.
fn line_of_path(src: &str, path: &str) -> Option<usize> {
    let doc = toml_edit::ImDocument::parse(src).ok()?;
    let mut item = doc.as_item();
    let mut best = None;
    for part in path.split('.') {
        let (key, indices) = match part.find('[') {
            Some(i) => (&part[..i], &part[i..]),
            None => (part, ""),
        };
        item = match item.get(key) {
            Some(it) => it,
            None => break,
        };
        if let Some(span) = item.span() {
            best = Some(span.start);
        }
        for idx in indices.split(['[', ']']).filter(|s| !s.is_empty()) {
            let Ok(i) = idx.parse::<usize>() else { break };
            item = match item.get(i) {
                Some(it) => it,
                None => break,
            };
            if let Some(span) = item.span() {
                best = Some(span.start);
            }
        }
    }
    best.map(|o| line_col(src, o).0)
}

fn d_schema() -> u32 {
    SCHEMA_VERSION
}
fn d_variant() -> Variant {
    Variant::S1
}
fn d_controller() -> ControllerKind {
    ControllerKind::AlertEnabled
}
fn d_lane_width() -> f64 {
    crate::geometry::DEFAULT_LANE_WIDTH
}
fn d_speed_limit() -> f64 {
    11.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    /// Simulation tick in seconds.
    pub tick: f64,
    pub status_period: f64,
    pub broadcast_period: f64,
    pub broadcast_window: f64,
    /// RSUs broadcast only after detecting an arrival.
    pub gated_broadcast: bool,
    pub freshness_window: f64,
    pub parking_reports: u32,
    /// Main-RSU congestion check period.
    pub check_period: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        let p = ProtocolTiming::default();
        Self {
            tick: 0.5,
            status_period: p.status_period,
            broadcast_period: p.broadcast_period,
            broadcast_window: p.broadcast_window,
            gated_broadcast: false,
            freshness_window: p.freshness_window,
            parking_reports: p.parking_reports,
            check_period: 1.0,
        }
    }
}

impl TimingConfig {
    pub fn protocol(&self) -> ProtocolTiming {
        ProtocolTiming {
            status_period: self.status_period,
            broadcast_period: self.broadcast_period,
            broadcast_window: self.broadcast_window,
            freshness_window: self.freshness_window,
            parking_reports: self.parking_reports,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub enabled: bool,
    pub n_min: usize,
    pub window: f64,
    pub radius: f64,
    pub speed_threshold: f64,
    pub hold_down: f64,
    pub max_samples: usize,
    /// Signature verifications per second a main RSU can afford; unlimited when absent.
    pub verify_budget: Option<f64>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        let d = DetectionParams::default();
        Self {
            enabled: true,
            n_min: d.n_min,
            window: d.window,
            radius: d.radius,
            speed_threshold: d.speed_threshold,
            hold_down: d.hold_down,
            max_samples: d.max_samples,
            verify_budget: None,
        }
    }
}

impl DetectionConfig {
    pub fn params(&self) -> DetectionParams {
        DetectionParams {
            n_min: self.n_min,
            window: self.window,
            radius: self.radius,
            speed_threshold: self.speed_threshold,
            hold_down: self.hold_down,
            max_samples: self.max_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub yellow: f64,
    pub min_green: f64,
    pub min_cycle: f64,
    pub max_cycle: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub step: f64,
    pub hop_limit: u32,
    pub saturation_flow: f64,
    pub ds_deadband: f64,
    /// Quiet period before decay starts; twice the detection window when absent.
    pub recovery_after: Option<f64>,
    pub recovery_step: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        let c = ControlParams::default();
        Self {
            yellow: c.yellow,
            min_green: c.min_green,
            min_cycle: c.min_cycle,
            max_cycle: c.max_cycle,
            min_step: c.min_step,
            max_step: c.max_step,
            step: c.step,
            hop_limit: c.hop_limit,
            saturation_flow: c.saturation_flow,
            ds_deadband: c.ds_deadband,
            recovery_after: None,
            recovery_step: c.recovery_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleConfig {
    pub length: f64,
    pub standstill_gap: f64,
    pub accel: f64,
    pub decel: f64,
    /// Reaction time added to the tick when keeping a safe distance, seconds.
    pub reaction: f64,
    /// Heading change rate per degree of wheel angle, 1/s.
    pub steering_gain: f64,
    pub pseudonym_batch: usize,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        Self {
            length: 4.5,
            standstill_gap: 2.0,
            accel: 2.0,
            decel: 4.5,
            reaction: 1.0,
            steering_gain: 1.0,
            pseudonym_batch: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Terminal,
    Intersection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub lights: Vec<String>,
    pub green: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: String,
    pub kind: NodeKind,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub phases: Vec<PhaseConfig>,
    /// Conflicting light pairs; every pair of lights in different phases when absent.
    #[serde(default)]
    pub conflicts: Option<Vec<[String; 2]>>,
    /// Overrides the scenario-wide controller for this intersection.
    #[serde(default)]
    pub controller: Option<ControllerKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneConfig {
    pub lid: u32,
    pub direction: Direction,
    /// Light at the lane's exit intersection.
    #[serde(default)]
    pub light: Option<String>,
    #[serde(default)]
    pub speed_limit: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborEntryConfig {
    /// 0 stands for vehicles entering the network.
    pub from_rid: u32,
    pub from_lid: u32,
    pub lo: f64,
    pub hi: f64,
    pub to_lid: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub rid: u32,
    pub from: String,
    pub to: String,
    #[serde(default = "d_speed_limit")]
    pub speed_limit: f64,
    pub lanes: Vec<LaneConfig>,
    /// Replaces the derived neighbor table.
    #[serde(default)]
    pub neighbor_table: Option<Vec<NeighborEntryConfig>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arrivals {
    #[default]
    Uniform,
    Poisson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub name: String,
    /// `[rid, lid]` legs in travel order.
    pub route: Vec<[u32; 2]>,
    pub start: f64,
    pub end: f64,
    /// Mean seconds between departures.
    pub headway: f64,
    #[serde(default)]
    pub arrival: Arrivals,
    #[serde(default)]
    pub vtype: VehicleType,
    /// Caps the number of departures.
    #[serde(default)]
    pub count: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParkConfig {
    /// Route leg to park on.
    #[serde(default)]
    pub leg: usize,
    /// Lane coordinate of the parking spot.
    pub at: f64,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub route: Vec<[u32; 2]>,
    pub depart: f64,
    #[serde(default)]
    pub vtype: VehicleType,
    #[serde(default)]
    pub park: Option<ParkConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncidentConfig {
    pub rid: u32,
    pub lid: u32,
    /// Lane coordinate of the blockage; vehicles stop behind it.
    pub location: f64,
    pub start: f64,
    /// Blocks until the horizon when absent.
    #[serde(default)]
    pub duration: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "d_schema")]
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub horizon: f64,
    #[serde(default = "d_variant")]
    pub variant: Variant,
    #[serde(default = "d_controller")]
    pub controller: ControllerKind,
    #[serde(default = "d_lane_width")]
    pub lane_width: f64,
    #[serde(default)]
    pub timing: TimingConfig,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub vehicle: VehicleConfig,
    pub nodes: Vec<NodeConfig>,
    pub segments: Vec<SegmentConfig>,
    #[serde(default)]
    pub flows: Vec<FlowConfig>,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub incidents: Vec<IncidentConfig>,
    #[serde(default)]
    pub adversaries: Vec<AdversaryConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RsuSite {
    pub id: AgentId,
    pub rid: SegmentId,
    pub end: SegmentEnd,
    pub pos: Point,
    pub range: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MrsuSite {
    pub id: AgentId,
    pub rid: SegmentId,
    pub pos: Point,
    pub range: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbsSite {
    pub id: AgentId,
    pub node: NodeId,
    pub controller: ControllerKind,
    pub plan: PhasePlan,
    pub conflicts: Vec<(LightId, LightId)>,
}

/// Everything static the simulator needs.
#[derive(Clone, Debug)]
pub struct Layout {
    pub net: RoadNetwork,
    pub rsus: Vec<RsuSite>,
    pub mrsus: Vec<MrsuSite>,
    pub lbs: Vec<LbsSite>,
    /// First id free for adversaries and vehicles.
    pub next_agent: u32,
    /// Lanes that begin some route, with their external-origin headings.
    pub route_starts: BTreeSet<LaneRef>,
}

impl Layout {
    pub fn rsus_of(&self, rid: SegmentId) -> impl Iterator<Item = &RsuSite> {
        self.rsus.iter().filter(move |r| r.rid == rid)
    }

    pub fn mrsu_of(&self, rid: SegmentId) -> Option<&MrsuSite> {
        self.mrsus.iter().find(|m| m.rid == rid)
    }

    pub fn lbs_of(&self, node: &NodeId) -> Option<&LbsSite> {
        self.lbs.iter().find(|l| &l.node == node)
    }
}

impl Scenario {
    /// Parses and validates a scenario; errors carry source line numbers.
    pub fn from_toml_str(src: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = toml::from_str(src).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(src, s.start));
            ScenarioError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        let attach = |err: ScenarioError| match err {
            ScenarioError::Invalid { path, message, .. } => ScenarioError::Invalid {
                line: line_of_path(src, &path),
                path,
                message,
            },
            other => other,
        };
        sc.validate().map_err(attach)?;
        sc.layout().map_err(attach)?;
        Ok(sc)
    }

    /// Loads a bundled scenario by name or a scenario file by path.
    pub fn load(name_or_path: &str) -> Result<Self, ScenarioError> {
        if let Some(src) = bundled(name_or_path) {
            return Self::from_toml_str(src);
        }
        let path = Path::new(name_or_path);
        let src = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: name_or_path.to_string(),
            source,
        })?;
        Self::from_toml_str(&src)
    }

    pub fn protocol_timing(&self) -> ProtocolTiming {
        self.timing.protocol()
    }

    pub fn control_params(&self) -> ControlParams {
        let c = &self.control;
        ControlParams {
            yellow: c.yellow,
            min_green: c.min_green,
            min_cycle: c.min_cycle,
            max_cycle: c.max_cycle,
            min_step: c.min_step,
            max_step: c.max_step,
            step: c.step,
            hop_limit: c.hop_limit,
            saturation_flow: c.saturation_flow,
            ds_deadband: c.ds_deadband,
            recovery_after: c.recovery_after.unwrap_or(2.0 * self.detection.window),
            recovery_step: c.recovery_step,
        }
    }

    /// Schema-level checks that need no geometry.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        positive("horizon", self.horizon)?;
        positive("lane_width", self.lane_width)?;
        let t = &self.timing;
        positive("timing.tick", t.tick)?;
        for (name, v) in [
            ("timing.status_period", t.status_period),
            ("timing.broadcast_period", t.broadcast_period),
            ("timing.check_period", t.check_period),
        ] {
            positive(name, v)?;
            let k = v / t.tick;
            if (k - k.round()).abs() > 1e-9 {
                return Err(invalid(name, "must be a whole multiple of timing.tick"));
            }
        }
        positive("timing.freshness_window", t.freshness_window)?;
        positive("timing.broadcast_window", t.broadcast_window)?;
        let d = &self.detection;
        if d.n_min == 0 {
            return Err(invalid("detection.n_min", "must be at least 1"));
        }
        positive("detection.window", d.window)?;
        positive("detection.radius", d.radius)?;
        positive("detection.speed_threshold", d.speed_threshold)?;
        if d.max_samples == 0 {
            return Err(invalid("detection.max_samples", "must be at least 1"));
        }
        if let Some(b) = d.verify_budget {
            positive("detection.verify_budget", b)?;
        }
        let c = &self.control;
        if !(c.min_step > 0.0 && c.min_step <= c.step && c.step <= c.max_step) {
            return Err(invalid("control.step", "need 0 < min_step <= step <= max_step"));
        }
        if !(c.min_cycle > 0.0 && c.min_cycle < c.max_cycle) {
            return Err(invalid("control.min_cycle", "need 0 < min_cycle < max_cycle"));
        }
        positive("control.yellow", c.yellow)?;
        positive("control.min_green", c.min_green)?;
        positive("control.saturation_flow", c.saturation_flow)?;
        let v = &self.vehicle;
        positive("vehicle.length", v.length)?;
        positive("vehicle.accel", v.accel)?;
        positive("vehicle.decel", v.decel)?;
        positive("vehicle.steering_gain", v.steering_gain)?;
        if v.pseudonym_batch == 0 {
            return Err(invalid("vehicle.pseudonym_batch", "must be at least 1"));
        }

        let mut ids = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !ids.insert(n.id.as_str()) {
                return Err(invalid(format!("nodes[{i}].id"), format!("duplicate node id {:?}", n.id)));
            }
            if n.kind == NodeKind::Terminal && (!n.phases.is_empty() || n.conflicts.is_some()) {
                return Err(invalid(format!("nodes[{i}].phases"), "terminals have no signals"));
            }
            if n.kind == NodeKind::Intersection && n.phases.len() < 2 {
                return Err(invalid(format!("nodes[{i}].phases"), "intersections need at least two phases"));
            }
            let mut lights = BTreeSet::new();
            for (k, p) in n.phases.iter().enumerate() {
                positive(&format!("nodes[{i}].phases[{k}].green"), p.green)?;
                for l in &p.lights {
                    if !lights.insert(l.as_str()) {
                        return Err(invalid(
                            format!("nodes[{i}].phases[{k}].lights"),
                            format!("light {l:?} appears in more than one phase"),
                        ));
                    }
                }
            }
            if let Some(cs) = &n.conflicts {
                for (k, [a, b]) in cs.iter().enumerate() {
                    if !lights.contains(a.as_str()) || !lights.contains(b.as_str()) {
                        return Err(invalid(
                            format!("nodes[{i}].conflicts[{k}]"),
                            "conflict names a light not in any phase",
                        ));
                    }
                }
            }
        }
        let mut rids = BTreeSet::new();
        for (i, s) in self.segments.iter().enumerate() {
            if s.rid == 0 || !rids.insert(s.rid) {
                return Err(invalid(format!("segments[{i}].rid"), "segment ids must be unique and nonzero"));
            }
            for (field, node) in [("from", &s.from), ("to", &s.to)] {
                if !ids.contains(node.as_str()) {
                    return Err(invalid(format!("segments[{i}].{field}"), format!("unknown node {node:?}")));
                }
            }
            if s.from == s.to {
                return Err(invalid(format!("segments[{i}].to"), "segment must join two distinct nodes"));
            }
            positive(&format!("segments[{i}].speed_limit"), s.speed_limit)?;
            if s.lanes.is_empty() {
                return Err(invalid(format!("segments[{i}].lanes"), "segment needs at least one lane"));
            }
            let mut lids = BTreeSet::new();
            for (k, l) in s.lanes.iter().enumerate() {
                if l.lid == 0 || !lids.insert(l.lid) {
                    return Err(invalid(format!("segments[{i}].lanes[{k}].lid"), "lane ids must be unique and nonzero"));
                }
                if let Some(v) = l.speed_limit {
                    positive(&format!("segments[{i}].lanes[{k}].speed_limit"), v)?;
                }
            }
        }
        for (i, f) in self.flows.iter().enumerate() {
            self.check_route(&format!("flows[{i}].route"), &f.route)?;
            positive(&format!("flows[{i}].headway"), f.headway)?;
            if !(f.end >= f.start && f.start >= 0.0) {
                return Err(invalid(format!("flows[{i}].end"), "need 0 <= start <= end"));
            }
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            self.check_route(&format!("vehicles[{i}].route"), &v.route)?;
            if v.depart < 0.0 {
                return Err(invalid(format!("vehicles[{i}].depart"), "must be non-negative"));
            }
            if let Some(p) = &v.park {
                if p.leg >= v.route.len() {
                    return Err(invalid(format!("vehicles[{i}].park.leg"), "leg outside the route"));
                }
                positive(&format!("vehicles[{i}].park.duration"), p.duration)?;
            }
        }
        for (i, inc) in self.incidents.iter().enumerate() {
            if self.lane_cfg(inc.rid, inc.lid).is_none() {
                return Err(invalid(format!("incidents[{i}].lid"), format!("no lane {}:{}", inc.rid, inc.lid)));
            }
            if let Some(d) = inc.duration {
                positive(&format!("incidents[{i}].duration"), d)?;
            }
        }
        for (i, a) in self.adversaries.iter().enumerate() {
            if let Some(rid) = a.target_rid() {
                if !rids.contains(&rid.0) {
                    return Err(invalid(format!("adversaries[{i}].rid"), format!("unknown segment {rid}")));
                }
            }
            match a {
                AdversaryConfig::Jam { center, target_rid, radius, duration, .. } => {
                    if center.is_none() == target_rid.is_none() {
                        return Err(invalid(format!("adversaries[{i}]"), "jam needs exactly one of center and target_rid"));
                    }
                    positive(&format!("adversaries[{i}].radius"), *radius)?;
                    positive(&format!("adversaries[{i}].duration"), *duration)?;
                }
                AdversaryConfig::DosFlood { rate, duration, .. } => {
                    positive(&format!("adversaries[{i}].rate"), *rate)?;
                    positive(&format!("adversaries[{i}].duration"), *duration)?;
                }
                AdversaryConfig::Forge { rate, targets, .. } => {
                    positive(&format!("adversaries[{i}].rate"), *rate)?;
                    if targets.is_empty() {
                        return Err(invalid(format!("adversaries[{i}].targets"), "need at least one target"));
                    }
                }
                AdversaryConfig::Botnet { rid, lid, members, duration, .. } => {
                    if *members == 0 {
                        return Err(invalid(format!("adversaries[{i}].members"), "must be at least 1"));
                    }
                    if let Some(l) = lid {
                        if self.lane_cfg(*rid, *l).is_none() {
                            return Err(invalid(format!("adversaries[{i}].lid"), format!("no lane {rid}:{l}")));
                        }
                    }
                    positive(&format!("adversaries[{i}].duration"), *duration)?;
                }
                AdversaryConfig::Replay { fast_delay, .. } => {
                    positive(&format!("adversaries[{i}].fast_delay"), *fast_delay)?;
                }
            }
        }
        Ok(())
    }

    fn node_cfg(&self, id: &str) -> Option<&NodeConfig> {
        self.nodes.iter().find(|n| n.id == id)
    }

    fn lane_cfg(&self, rid: u32, lid: u32) -> Option<(&SegmentConfig, &LaneConfig)> {
        let s = self.segments.iter().find(|s| s.rid == rid)?;
        Some((s, s.lanes.iter().find(|l| l.lid == lid)?))
    }

    fn lane_nodes(&self, rid: u32, lid: u32) -> Option<(&str, &str)> {
        let (s, l) = self.lane_cfg(rid, lid)?;
        Some(match l.direction {
            Direction::Right => (s.from.as_str(), s.to.as_str()),
            Direction::Left => (s.to.as_str(), s.from.as_str()),
        })
    }

    fn check_route(&self, path: &str, route: &[[u32; 2]]) -> Result<(), ScenarioError> {
        if route.is_empty() {
            return Err(invalid(path, "route needs at least one leg"));
        }
        let mut prev: Option<(u32, &str)> = None;
        for (k, &[rid, lid]) in route.iter().enumerate() {
            let Some((entry, exit)) = self.lane_nodes(rid, lid) else {
                return Err(invalid(format!("{path}[{k}]"), format!("no lane {rid}:{lid}")));
            };
            if let Some((prid, pexit)) = prev {
                if pexit != entry || prid == rid {
                    return Err(invalid(format!("{path}[{k}]"), format!("lane {rid}:{lid} does not continue the route")));
                }
                if self.node_cfg(pexit).map(|n| n.kind) != Some(NodeKind::Intersection) {
                    return Err(invalid(format!("{path}[{k}]"), "routes may only turn at intersections"));
                }
            }
            prev = Some((rid, exit));
        }
        Ok(())
    }

    /// Builds the road network and infrastructure placement.
    pub fn layout(&self) -> Result<Layout, ScenarioError> {
        let w = self.lane_width;
        let rsu_range = 2.0 * w;
        let pos_of = |id: &str| {
            let n = self.node_cfg(id).expect("validated node");
            Point::new(n.x, n.y)
        };

        // Junction boxes: half the widest attached road plus one lane.
        let mut setback: BTreeMap<&str, f64> = BTreeMap::new();
        for n in &self.nodes {
            let sb = match n.kind {
                NodeKind::Terminal => 0.0,
                NodeKind::Intersection => {
                    self.segments
                        .iter()
                        .filter(|s| s.from == n.id || s.to == n.id)
                        .map(|s| half_width(s, w))
                        .fold(0.0, f64::max)
                        + w
                }
            };
            setback.insert(n.id.as_str(), sb);
        }

        let mut next = 1u32;
        let mut alloc = || {
            let id = AgentId(next);
            next += 1;
            id
        };
        let mut net = RoadNetwork::default();
        let mut lbs_sites = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match n.kind {
                NodeKind::Terminal => net.terminals.push(Terminal {
                    id: NodeId(n.id.clone()),
                    pos: Point::new(n.x, n.y),
                }),
                NodeKind::Intersection => {
                    let id = alloc();
                    let plan = PhasePlan {
                        phases: n
                            .phases
                            .iter()
                            .map(|p| Phase {
                                lights: p.lights.iter().map(|l| LightId(l.clone())).collect(),
                                green: p.green,
                            })
                            .collect(),
                        yellow: self.control.yellow,
                    };
                    let conflicts = match &n.conflicts {
                        Some(cs) => cs.iter().map(|[a, b]| (LightId(a.clone()), LightId(b.clone()))).collect(),
                        None => default_conflicts(&plan),
                    };
                    plan.validate(&conflicts, &self.control_params())
                        .map_err(|e| invalid(format!("nodes[{i}].phases"), e.to_string()))?;
                    net.intersections.push(Intersection {
                        id: NodeId(n.id.clone()),
                        pos: Point::new(n.x, n.y),
                        segment_ends: Vec::new(),
                        lights: plan.all_lights().into_iter().collect(),
                        approach_lights: Vec::new(),
                        lbs: id,
                    });
                    lbs_sites.push(LbsSite {
                        id,
                        node: NodeId(n.id.clone()),
                        controller: n.controller.unwrap_or(self.controller),
                        plan,
                        conflicts,
                    });
                }
            }
        }

        let mut rsus = Vec::new();
        let mut mrsus = Vec::new();
        for (i, s) in self.segments.iter().enumerate() {
            let a = pos_of(&s.from);
            let b = pos_of(&s.to);
            let span = a.dist(b);
            let dir = Point::new((b.x - a.x) / span, (b.y - a.y) / span);
            let start = a.add_scaled(dir, setback[s.from.as_str()]);
            let end = b.add_scaled(dir, -setback[s.to.as_str()]);
            let length = start.dist(end);
            if length < 4.0 * RSU_INSET + 10.0 {
                return Err(invalid(
                    format!("segments[{i}]"),
                    format!("segment {} is only {length:.1} m long between junctions", s.rid),
                ));
            }
            let per_side = |d: Direction| s.lanes.iter().filter(|l| l.direction == d).count() as f64;
            if per_side(Direction::Right).max(per_side(Direction::Left)) * w > rsu_range - 0.5 {
                return Err(invalid(format!("segments[{i}].lanes"), "outer lanes lie beyond the end RSUs' range"));
            }
            let mrsu = alloc();
            let rsu_start = alloc();
            let rsu_end = alloc();
            mrsus.push(MrsuSite {
                id: mrsu,
                rid: SegmentId(s.rid),
                pos: Point::new((start.x + end.x) / 2.0, (start.y + end.y) / 2.0),
                range: length / 2.0 + MRSU_MARGIN,
            });
            rsus.push(RsuSite {
                id: rsu_start,
                rid: SegmentId(s.rid),
                end: SegmentEnd::Start,
                pos: start.add_scaled(dir, RSU_INSET),
                range: rsu_range,
            });
            rsus.push(RsuSite {
                id: rsu_end,
                rid: SegmentId(s.rid),
                end: SegmentEnd::End,
                pos: end.add_scaled(dir, -RSU_INSET),
                range: rsu_range,
            });
            let mut seg = Segment {
                rid: SegmentId(s.rid),
                from_node: NodeId(s.from.clone()),
                to_node: NodeId(s.to.clone()),
                start,
                end,
                lanes: s
                    .lanes
                    .iter()
                    .map(|l| Lane {
                        lid: LaneId(l.lid),
                        length_m: length,
                        avg_speed_limit: l.speed_limit.unwrap_or(s.speed_limit),
                        direction: l.direction,
                    })
                    .collect(),
                rsu_ids: vec![rsu_start, rsu_end],
                mrsu_id: mrsu,
                neighbor_table: NeighborTable::default(),
                rpos: None,
                lpos: Vec::new(),
            };
            seg.derive_positioning(w);
            for (k, l) in s.lanes.iter().enumerate() {
                let exit = match l.direction {
                    Direction::Right => &s.to,
                    Direction::Left => &s.from,
                };
                let at_intersection = self.node_cfg(exit).map(|n| n.kind) == Some(NodeKind::Intersection);
                match (&l.light, at_intersection) {
                    (Some(light), true) => {
                        let ix = net
                            .intersections
                            .iter_mut()
                            .find(|x| x.id.0 == *exit)
                            .expect("intersection exists");
                        if !ix.lights.iter().any(|x| x.0 == *light) {
                            return Err(invalid(
                                format!("segments[{i}].lanes[{k}].light"),
                                format!("light {light:?} is not in any phase of {exit}"),
                            ));
                        }
                        ix.approach_lights.push(((seg.rid, LaneId(l.lid)), LightId(light.clone())));
                    }
                    (None, true) => {
                        return Err(invalid(
                            format!("segments[{i}].lanes[{k}]"),
                            format!("lane ends at intersection {exit} and needs a light"),
                        ))
                    }
                    (Some(_), false) => {
                        return Err(invalid(format!("segments[{i}].lanes[{k}].light"), "lane ends at a terminal"))
                    }
                    (None, false) => {}
                }
            }
            for (node, end) in [(&s.from, SegmentEnd::Start), (&s.to, SegmentEnd::End)] {
                if let Some(ix) = net.intersections.iter_mut().find(|x| x.id.0 == *node) {
                    ix.segment_ends.push((seg.rid, end));
                }
            }
            net.segments.push(seg);
        }

        for s in &self.segments {
            let (a, b) = (&s.from, &s.to);
            let lbs_a = lbs_sites.iter().find(|l| l.node.0 == *a).map(|l| l.id);
            let lbs_b = lbs_sites.iter().find(|l| l.node.0 == *b).map(|l| l.id);
            if let (Some(x), Some(y)) = (lbs_a, lbs_b) {
                net.link_lbs(x, y);
            }
        }

        let route_starts: BTreeSet<LaneRef> = self
            .flows
            .iter()
            .map(|f| f.route[0])
            .chain(self.vehicles.iter().map(|v| v.route[0]))
            .map(|[r, l]| (SegmentId(r), LaneId(l)))
            .collect();

        let tables = derive_neighbor_tables(&net, &route_starts, w, rsu_range)?;
        for (i, s) in self.segments.iter().enumerate() {
            let table = match &s.neighbor_table {
                Some(entries) => NeighborTable::new(
                    entries
                        .iter()
                        .map(|e| NeighborEntry {
                            from_rid: SegmentId(e.from_rid),
                            from_lid: LaneId(e.from_lid),
                            interval: AngleInterval::new(e.lo, e.hi),
                            to_lid: LaneId(e.to_lid),
                        })
                        .collect(),
                ),
                None => tables.get(&SegmentId(s.rid)).cloned().unwrap_or_default(),
            };
            table
                .validate()
                .map_err(|e| invalid(format!("segments[{i}].neighbor_table"), e.to_string()))?;
            net.segments[i].neighbor_table = table;
        }
        net.validate().map_err(|e| invalid("segments", e.to_string()))?;

        Ok(Layout {
            net,
            rsus,
            mrsus,
            lbs: lbs_sites,
            next_agent: next,
            route_starts,
        })
    }
}

fn positive(path: &str, v: f64) -> Result<(), ScenarioError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(path, format!("must be positive and finite, got {v}")))
    }
}

fn half_width(s: &SegmentConfig, w: f64) -> f64 {
    let side = |d: Direction| s.lanes.iter().filter(|l| l.direction == d).count() as f64;
    side(Direction::Right).max(side(Direction::Left)) * w
}

/// Every pair of lights served by different phases conflicts.
pub fn default_conflicts(plan: &PhasePlan) -> Vec<(LightId, LightId)> {
    let mut out = Vec::new();
    for (i, p) in plan.phases.iter().enumerate() {
        for q in &plan.phases[i + 1..] {
            for a in &p.lights {
                for b in &q.lights {
                    out.push((a.clone(), b.clone()));
                }
            }
        }
    }
    out
}

/// Lane coordinates on `lane` where a receiver on its centerline hears the
/// RSU at its entry end: `[max(0, inset - h), inset + h]`.
fn receipt_window(seg: &Segment, lid: LaneId, lane_width: f64, range: f64) -> (f64, f64) {
    let off = seg.lane_offset(lid, lane_width).unwrap_or(0.0).abs();
    let h = (range * range - off * off).max(0.0).sqrt();
    ((RSU_INSET - h).max(0.0), RSU_INSET + h)
}

struct RawInterval {
    origin: LaneRef,
    to: LaneId,
    mid: f64,
    half: f64,
}

/// Arrival intervals from the chord geometry of each permitted movement.
///
/// A vehicle's path restarts where it crosses the stop line of its previous
/// lane, so the chord at broadcast receipt runs from that stop line to a point
/// of the receipt window. The interval spans the chord angles of the window's
/// ends, widened by a margin of at most [`NB_MARGIN_DEG`] and at most 45% of
/// the gap to the nearest interval of the same origin in the same table.
pub fn derive_neighbor_tables(
    net: &RoadNetwork,
    route_starts: &BTreeSet<LaneRef>,
    w: f64,
    rsu_range: f64,
) -> Result<BTreeMap<SegmentId, NeighborTable>, ScenarioError> {
    let mut raw: BTreeMap<SegmentId, Vec<RawInterval>> = BTreeMap::new();
    for (from, to) in net.connections() {
        let a = net.segment(from.0).expect("connected segment");
        let b = net.segment(to.0).expect("connected segment");
        let la = a.lane(from.1).expect("connected lane").length_m;
        let stop = a.lane_point(from.1, la, w).expect("lane");
        let (s0, s1) = receipt_window(b, to.1, w, rsu_range);
        let p0 = b.lane_point(to.1, s0, w).expect("lane");
        let p1 = b.lane_point(to.1, s1, w).expect("lane");
        let ang = |p: Point| normalize_deg(p.y.atan2(p.x).to_degrees());
        let a0 = ang(p0.sub(stop));
        let a1 = ang(p1.sub(stop));
        let d = angle_diff_deg(a0, a1);
        raw.entry(to.0).or_default().push(RawInterval {
            origin: from,
            to: to.1,
            mid: normalize_deg(a0 + d / 2.0),
            half: d.abs() / 2.0,
        });
    }
    for &(rid, lid) in route_starts {
        let Some(seg) = net.segment(rid) else { continue };
        let Some(heading) = seg.lane_heading_deg(lid) else { continue };
        raw.entry(rid).or_default().push(RawInterval {
            origin: (SegmentId::EXTERNAL, LaneId(0)),
            to: lid,
            mid: heading,
            half: 0.0,
        });
    }

    let mut out = BTreeMap::new();
    for (rid, entries) in raw {
        let mut table = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            let gap = entries
                .iter()
                .enumerate()
                .filter(|(j, o)| *j != i && o.origin == e.origin && o.to != e.to)
                .map(|(_, o)| angle_diff_deg(e.mid, o.mid).abs() - e.half - o.half)
                .fold(f64::INFINITY, f64::min);
            if gap <= 0.0 {
                return Err(invalid(
                    "segments",
                    format!(
                        "arrivals from {}:{} into {rid} cannot be told apart by heading",
                        e.origin.0, e.origin.1
                    ),
                ));
            }
            let margin = if e.origin.0 == SegmentId::EXTERNAL {
                EXTERNAL_TOLERANCE_DEG.min(0.45 * gap)
            } else {
                NB_MARGIN_DEG.min(0.45 * gap)
            };
            table.push(NeighborEntry {
                from_rid: e.origin.0,
                from_lid: e.origin.1,
                interval: AngleInterval::new(e.mid - e.half - margin, e.mid + e.half + margin),
                to_lid: e.to,
            });
        }
        out.insert(rid, NeighborTable::new(table));
    }
    Ok(out)
}
