//! Signal plans, the malfunction-management safety check, the local base
//! station's alert policy, and the fixed-time and saturation-driven baselines.
//!
//! A plan is an ordered list of phases. During a phase its lights are green
//! for `green` seconds, then yellow for `yellow` seconds; every other light is
//! red. Plans change only at phase boundaries.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::CongestionAlert;
use crate::geometry::{
    angle_diff_deg, lane_from_position, Direction, LaneHit, LaneId, LaneRef, LightId, NodeId, RoadNetwork, SegmentId,
};
use crate::identity::{verify_envelope, CertSubject, SignedEnvelope, TrustAnchors};
use crate::protocol::{decode_message, Message};
use crate::AgentId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightState {
    Green,
    Yellow,
    Red,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Fixed,
    AdaptiveBaseline,
    AlertEnabled,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Fixed => "fixed",
            ControllerKind::AdaptiveBaseline => "adaptive_baseline",
            ControllerKind::AlertEnabled => "alert_enabled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed" | "fixed_time" => Some(ControllerKind::Fixed),
            "adaptive" | "adaptive_baseline" => Some(ControllerKind::AdaptiveBaseline),
            "alert" | "alert_enabled" => Some(ControllerKind::AlertEnabled),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlParams {
    pub yellow: f64,
    pub min_green: f64,
    pub min_cycle: f64,
    pub max_cycle: f64,
    pub min_step: f64,
    pub max_step: f64,
    /// Green shift per alert-driven rebalance.
    pub step: f64,
    /// Neighbor forwarding depth.
    pub hop_limit: u32,
    /// Discharge rate assumed by the saturation baseline, vehicles per second of green.
    pub saturation_flow: f64,
    /// Minimum saturation gap before the baseline shifts green.
    pub ds_deadband: f64,
    /// Quiet period after the last alert before a plan decays to baseline.
    pub recovery_after: f64,
    /// Decay step back toward the baseline split.
    pub recovery_step: f64,
}

impl Default for ControlParams {
    fn default() -> Self {
        Self {
            yellow: 3.0,
            min_green: 10.0,
            min_cycle: 20.0,
            max_cycle: 240.0,
            min_step: 4.0,
            max_step: 7.0,
            step: 5.0,
            hop_limit: 1,
            saturation_flow: 0.5,
            ds_deadband: 0.1,
            recovery_after: 120.0,
            recovery_step: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub lights: BTreeSet<LightId>,
    pub green: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
    pub yellow: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("no feasible green shift under the minimum-green constraint")]
    NoFeasibleShift,
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

impl PhasePlan {
    pub fn cycle_length(&self) -> f64 {
        self.phases.iter().map(|p| p.green + self.yellow).sum()
    }

    pub fn phase_length(&self, idx: usize) -> f64 {
        self.phases[idx].green + self.yellow
    }

    pub fn phase_of(&self, light: &LightId) -> Option<usize> {
        self.phases.iter().position(|p| p.lights.contains(light))
    }

    pub fn all_lights(&self) -> BTreeSet<LightId> {
        self.phases.iter().flat_map(|p| p.lights.iter().cloned()).collect()
    }

    /// Light states while `phase` runs, `elapsed` seconds after it started.
    pub fn states_in_phase(&self, phase: usize, elapsed: f64) -> BTreeMap<LightId, LightState> {
        let active = if elapsed < self.phases[phase].green {
            LightState::Green
        } else {
            LightState::Yellow
        };
        let mut out: BTreeMap<LightId, LightState> =
            self.all_lights().into_iter().map(|l| (l, LightState::Red)).collect();
        for l in &self.phases[phase].lights {
            out.insert(l.clone(), active);
        }
        out
    }

    /// Cycle bounds, minimum green and the conflict whitelist.
    pub fn validate(&self, conflicts: &[(LightId, LightId)], params: &ControlParams) -> Result<(), ControlError> {
        if self.phases.is_empty() {
            return Err(ControlError::InvalidPlan("no phases".into()));
        }
        let cycle = self.cycle_length();
        if cycle < params.min_cycle - 1e-9 || cycle > params.max_cycle + 1e-9 {
            return Err(ControlError::InvalidPlan(format!(
                "cycle {cycle} s outside [{}, {}]",
                params.min_cycle, params.max_cycle
            )));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.green < params.min_green - 1e-9 {
                return Err(ControlError::InvalidPlan(format!(
                    "phase {i} green {} s below minimum {}",
                    p.green, params.min_green
                )));
            }
            for (a, b) in conflicts {
                if p.lights.contains(a) && p.lights.contains(b) {
                    return Err(ControlError::InvalidPlan(format!(
                        "phase {i} serves conflicting lights {a} and {b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Light states of a fixed-time plan: a pure function of `now mod cycle`.
pub fn fixed_time_tick(plan: &PhasePlan, now: f64) -> BTreeMap<LightId, LightState> {
    let mut offset = now.rem_euclid(plan.cycle_length());
    for (i, _) in plan.phases.iter().enumerate() {
        let len = plan.phase_length(i);
        if offset < len {
            return plan.states_in_phase(i, offset);
        }
        offset -= len;
    }
    plan.states_in_phase(plan.phases.len() - 1, plan.phase_length(plan.phases.len() - 1))
}

/// MMU whitelist check: no conflicting pair is ever simultaneously non-red.
pub fn mmu_safe(states: &BTreeMap<LightId, LightState>, conflicts: &[(LightId, LightId)]) -> bool {
    conflicts.iter().all(|(a, b)| {
        let on = |l: &LightId| states.get(l).is_some_and(|s| *s != LightState::Red);
        !(on(a) && on(b))
    })
}

/// Clamps a requested cycle length into the permitted range.
pub fn clamp_cycle(requested: f64, params: &ControlParams) -> f64 {
    requested.clamp(params.min_cycle, params.max_cycle)
}

/// Moves up to `step` seconds of green from phase `from` to phase `to`,
/// keeping the cycle length. Returns the new plan and the shift applied.
pub fn rebalance_green(
    plan: &PhasePlan,
    from: usize,
    to: usize,
    step: f64,
    params: &ControlParams,
) -> Result<(PhasePlan, f64), ControlError> {
    if from == to || from >= plan.phases.len() || to >= plan.phases.len() {
        return Err(ControlError::NoFeasibleShift);
    }
    let step = step.clamp(params.min_step, params.max_step);
    let feasible = plan.phases[from].green - params.min_green;
    if feasible < params.min_step - 1e-9 {
        return Err(ControlError::NoFeasibleShift);
    }
    let applied = step.min(feasible);
    let mut out = plan.clone();
    out.phases[from].green -= applied;
    out.phases[to].green += applied;
    Ok((out, applied))
}

/// Lengthens (`delta > 0`) or shortens one phase, changing the cycle length
/// within its clamp. Returns the new plan and the change applied.
pub fn adjust_cycle(
    plan: &PhasePlan,
    phase: usize,
    delta: f64,
    params: &ControlParams,
) -> Result<(PhasePlan, f64), ControlError> {
    let cycle = plan.cycle_length();
    let mut applied = clamp_cycle(cycle + delta, params) - cycle;
    if delta < 0.0 {
        applied = applied.max(params.min_green - plan.phases[phase].green);
    }
    if applied.abs() < params.min_step - 1e-9 {
        return Err(ControlError::NoFeasibleShift);
    }
    let mut out = plan.clone();
    out.phases[phase].green += applied;
    Ok((out, applied))
}

/// What the saturation baseline wants after a cycle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Adjustment {
    Shift { from: usize, to: usize },
    Lengthen { phase: usize },
    Shorten { phase: usize },
}

/// Degree-of-saturation rule: shift toward the most saturated phase when the
/// spread exceeds the deadband; otherwise grow the cycle when the busiest
/// phase is near saturation, or shrink it when every phase is lightly used.
pub fn adaptive_baseline_tick(saturations: &[f64], params: &ControlParams) -> Option<Adjustment> {
    if saturations.len() < 2 {
        return None;
    }
    let mut hi = 0;
    let mut lo = 0;
    for (i, &d) in saturations.iter().enumerate() {
        if d > saturations[hi] {
            hi = i;
        }
        if d < saturations[lo] {
            lo = i;
        }
    }
    let (max, min) = (saturations[hi], saturations[lo]);
    if max - min > params.ds_deadband {
        Some(Adjustment::Shift { from: lo, to: hi })
    } else if max > 0.9 {
        Some(Adjustment::Lengthen { phase: hi })
    } else if max < 0.3 && max < min + params.ds_deadband && max > 0.0 {
        Some(Adjustment::Shorten { phase: lo })
    } else {
        None
    }
}

/// Degree of saturation of each phase from stop-line counts over one cycle.
pub fn saturations(plan: &PhasePlan, demand: &BTreeMap<LightId, f64>, params: &ControlParams) -> Vec<f64> {
    plan.phases
        .iter()
        .map(|p| {
            let d: f64 = p.lights.iter().filter_map(|l| demand.get(l)).sum();
            d / (p.green * params.saturation_flow)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Rebalance,
    Divert,
    Recovery,
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCommand {
    pub intersection: NodeId,
    pub lbs: AgentId,
    pub kind: CommandKind,
    /// Green change per light; gaining lights positive.
    pub deltas: Vec<(LightId, f64)>,
    pub from_phase: Option<usize>,
    pub to_phase: Option<usize>,
    pub delta: f64,
    pub issued_at: f64,
    pub effective_from: f64,
    /// Alert that caused the command, if any.
    pub cause: Option<u64>,
    pub cause_rid: Option<SegmentId>,
}

/// Phase sequencing for one intersection.
#[derive(Clone, Debug)]
pub struct SignalController {
    plan: PhasePlan,
    pending: Option<PhasePlan>,
    phase: usize,
    phase_start: f64,
    cycle: u64,
}

/// A phase boundary crossed during [`SignalController::advance`].
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseChange {
    pub at: f64,
    pub phase: usize,
    pub new_cycle: bool,
    pub plan_changed: bool,
}

impl SignalController {
    pub fn new(plan: PhasePlan) -> Self {
        Self {
            plan,
            pending: None,
            phase: 0,
            phase_start: 0.0,
            cycle: 0,
        }
    }

    pub fn plan(&self) -> &PhasePlan {
        &self.plan
    }

    /// The plan that will run after the next boundary.
    pub fn upcoming_plan(&self) -> &PhasePlan {
        self.pending.as_ref().unwrap_or(&self.plan)
    }

    pub fn phase(&self) -> usize {
        self.phase
    }

    pub fn cycle_index(&self) -> u64 {
        self.cycle
    }

    pub fn next_boundary(&self) -> f64 {
        self.phase_start + self.plan.phase_length(self.phase)
    }

    pub fn schedule(&mut self, plan: PhasePlan) {
        self.pending = Some(plan);
    }

    pub fn advance(&mut self, now: f64) -> Vec<PhaseChange> {
        let mut out = Vec::new();
        while now + 1e-9 >= self.next_boundary() {
            let at = self.next_boundary();
            let plan_changed = self.pending.is_some();
            if let Some(p) = self.pending.take() {
                self.plan = p;
            }
            self.phase = (self.phase + 1) % self.plan.phases.len();
            self.phase_start = at;
            let new_cycle = self.phase == 0;
            if new_cycle {
                self.cycle += 1;
            }
            out.push(PhaseChange {
                at,
                phase: self.phase,
                new_cycle,
                plan_changed,
            });
        }
        out
    }

    pub fn states(&self, now: f64) -> BTreeMap<LightId, LightState> {
        self.plan.states_in_phase(self.phase, now - self.phase_start)
    }
}

/// Largest heading change, degrees, still counted as going straight through.
pub const STRAIGHT_TOLERANCE_DEG: f64 = 45.0;

/// Static facts a base station needs about the road around it.
#[derive(Clone, Debug, Default)]
pub struct LbsTopology {
    /// Light controlling each lane that ends at this intersection.
    pub approach_light: BTreeMap<LaneRef, LightId>,
    /// Lights of the straight-through approaches feeding each lane starting
    /// at this intersection. Turning movements are not counted.
    pub feeding_lights: BTreeMap<LaneRef, BTreeSet<LightId>>,
    /// For each lane starting here, the intersection it leads to.
    pub outgoing_exit: BTreeMap<LaneRef, NodeId>,
}

impl LbsTopology {
    pub fn build(net: &RoadNetwork, node: &NodeId) -> Self {
        let mut t = LbsTopology::default();
        let Some(ix) = net.intersection(node) else {
            return t;
        };
        for (lane, light) in &ix.approach_lights {
            t.approach_light.insert(*lane, light.clone());
        }
        for (from, to) in net.connections() {
            if net.lane_entry_node(to) != Some(node) {
                continue;
            }
            let heading = |lr: LaneRef| net.segment(lr.0).and_then(|seg| seg.lane_heading_deg(lr.1));
            let straight = match (heading(from), heading(to)) {
                (Some(a), Some(b)) => angle_diff_deg(a, b).abs() <= STRAIGHT_TOLERANCE_DEG,
                _ => false,
            };
            if let (true, Some(light)) = (straight, ix.light_for(from)) {
                t.feeding_lights.entry(to).or_default().insert(light.clone());
            }
        }
        for seg in &net.segments {
            for lane in &seg.lanes {
                let lr = (seg.rid, lane.lid);
                if net.lane_entry_node(lr) == Some(node) {
                    if let Some(exit) = net.lane_exit_node(lr) {
                        t.outgoing_exit.insert(lr, exit.clone());
                    }
                }
            }
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlertDrop {
    Malformed,
    Duplicate,
    CertError,
    SignatureError,
    StaleTimestamp,
    UnknownSegment,
    Unresolvable,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LbsAction {
    Command(ScheduleCommand),
    Forward { to: AgentId, envelope: SignedEnvelope, hops: u32 },
    /// The alert was valid but produced no command.
    NoCommand { reason: &'static str },
    Dropped(AlertDrop),
}

/// Stable id of an alert: first eight signature bytes.
pub fn alert_id(env: &SignedEnvelope) -> u64 {
    u64::from_be_bytes(env.signature[..8].try_into().expect("64-byte signature"))
}

/// Local base station of one intersection.
pub struct Lbs {
    pub id: AgentId,
    pub node: NodeId,
    pub kind: ControllerKind,
    pub signal: SignalController,
    baseline: PhasePlan,
    conflicts: Vec<(LightId, LightId)>,
    params: ControlParams,
    anchors: TrustAnchors,
    topology: LbsTopology,
    neighbors: Vec<AgentId>,
    seen: BTreeSet<u64>,
    last_rebalance_cycle: Option<u64>,
    last_alert_at: Option<f64>,
    forwarded: BTreeMap<SegmentId, BTreeMap<Direction, f64>>,
    diverted: BTreeMap<SegmentId, f64>,
    last_adjust_cycle: Option<u64>,
}

impl std::fmt::Debug for Lbs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lbs")
            .field("id", &self.id)
            .field("node", &self.node)
            .field("kind", &self.kind)
            .finish()
    }
}

impl Lbs {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: AgentId,
        node: NodeId,
        kind: ControllerKind,
        plan: PhasePlan,
        conflicts: Vec<(LightId, LightId)>,
        params: ControlParams,
        anchors: TrustAnchors,
        topology: LbsTopology,
        neighbors: Vec<AgentId>,
    ) -> Self {
        Self {
            id,
            node,
            kind,
            signal: SignalController::new(plan.clone()),
            baseline: plan,
            conflicts,
            params,
            anchors,
            topology,
            neighbors,
            seen: BTreeSet::new(),
            last_rebalance_cycle: None,
            last_alert_at: None,
            forwarded: BTreeMap::new(),
            diverted: BTreeMap::new(),
            last_adjust_cycle: None,
        }
    }

    pub fn conflicts(&self) -> &[(LightId, LightId)] {
        &self.conflicts
    }

    pub fn baseline(&self) -> &PhasePlan {
        &self.baseline
    }

    fn command(
        &self,
        kind: CommandKind,
        plan: &PhasePlan,
        from: usize,
        to: usize,
        delta: f64,
        now: f64,
        cause: Option<(u64, SegmentId)>,
    ) -> ScheduleCommand {
        let mut deltas = Vec::new();
        for l in &plan.phases[to].lights {
            deltas.push((l.clone(), delta));
        }
        for l in &plan.phases[from].lights {
            deltas.push((l.clone(), -delta));
        }
        ScheduleCommand {
            intersection: self.node.clone(),
            lbs: self.id,
            kind,
            deltas,
            from_phase: Some(from),
            to_phase: Some(to),
            delta,
            issued_at: now,
            effective_from: self.signal.next_boundary(),
            cause: cause.map(|c| c.0),
            cause_rid: cause.map(|c| c.1),
        }
    }

    fn shift(
        &mut self,
        kind: CommandKind,
        from: usize,
        to: usize,
        step: f64,
        now: f64,
        cause: Option<(u64, SegmentId)>,
    ) -> Result<ScheduleCommand, ControlError> {
        let (plan, applied) = rebalance_green(self.signal.upcoming_plan(), from, to, step, &self.params)?;
        plan.validate(&self.conflicts, &self.params)?;
        let cmd = self.command(kind, &plan, from, to, applied, now, cause);
        self.signal.schedule(plan);
        Ok(cmd)
    }

    fn resolve_lane(&self, alert: &CongestionAlert, net: &RoadNetwork) -> Option<LaneId> {
        if let Some(l) = alert.lane {
            return Some(l);
        }
        let seg = net.segment(alert.rid)?;
        let mut votes: BTreeMap<LaneId, usize> = BTreeMap::new();
        for p in &alert.positions {
            if let Ok(LaneHit::Lane(l)) = lane_from_position(*p, seg) {
                *votes.entry(l).or_default() += 1;
            }
        }
        let best = votes.values().copied().max()?;
        votes.into_iter().find(|&(_, v)| v == best).map(|(l, _)| l)
    }

    /// Verifies an alert envelope, applies the local policy, and forwards it.
    /// `hops` counts base stations the alert already passed through.
    pub fn handle_alert(
        &mut self,
        env: &SignedEnvelope,
        hops: u32,
        from: Option<AgentId>,
        net: &RoadNetwork,
        now: f64,
    ) -> Vec<LbsAction> {
        let alert = match decode_message(&env.payload) {
            Ok(Message::Alert(a)) => a,
            _ => return vec![LbsAction::Dropped(AlertDrop::Malformed)],
        };
        let id = alert_id(env);
        if self.seen.contains(&id) {
            return vec![LbsAction::Dropped(AlertDrop::Duplicate)];
        }
        if let Err(e) = verify_envelope(env, &self.anchors, now) {
            return vec![LbsAction::Dropped(match e {
                crate::identity::VerifyError::CertError => AlertDrop::CertError,
                crate::identity::VerifyError::SignatureError => AlertDrop::SignatureError,
                crate::identity::VerifyError::StaleTimestamp => AlertDrop::StaleTimestamp,
            })];
        }
        let Some(seg) = net.segment(alert.rid) else {
            return vec![LbsAction::Dropped(AlertDrop::UnknownSegment)];
        };
        if env.certificate.subject != CertSubject::Infrastructure(seg.mrsu_id) {
            return vec![LbsAction::Dropped(AlertDrop::CertError)];
        }
        self.seen.insert(id);
        let Some(lane) = self.resolve_lane(&alert, net) else {
            return vec![LbsAction::Dropped(AlertDrop::Unresolvable)];
        };
        let lane_ref = (alert.rid, lane);

        let mut actions = Vec::new();
        if hops == 0 {
            self.last_alert_at = Some(now);
            if self.kind == ControllerKind::AlertEnabled {
                actions.push(match self.local_policy(&alert, lane_ref, id, now) {
                    Ok(cmd) => LbsAction::Command(cmd),
                    Err(reason) => LbsAction::NoCommand { reason },
                });
            }
        } else if let Some(direction) = seg.lane(lane).map(|l| l.direction) {
            self.forwarded
                .entry(alert.rid)
                .or_default()
                .insert(direction, now);
            if self.kind == ControllerKind::AlertEnabled {
                if let Some(cmd) = self.divert_decision(alert.rid, net, now, id) {
                    actions.push(LbsAction::Command(cmd));
                }
            }
        }
        if hops < self.params.hop_limit {
            for &n in &self.neighbors {
                if Some(n) != from {
                    actions.push(LbsAction::Forward {
                        to: n,
                        envelope: env.clone(),
                        hops: hops + 1,
                    });
                }
            }
        }
        actions
    }

    fn local_policy(
        &mut self,
        alert: &CongestionAlert,
        lane: LaneRef,
        id: u64,
        now: f64,
    ) -> Result<ScheduleCommand, &'static str> {
        if self.last_rebalance_cycle == Some(self.signal.cycle_index()) {
            return Err("already rebalanced this cycle");
        }
        let plan = self.signal.upcoming_plan().clone();
        let step = if alert.includes_emergency {
            self.params.max_step
        } else {
            self.params.step
        };
        let (from, to) = if let Some(light) = self.topology.approach_light.get(&lane) {
            // Jam discharges through this intersection: favor its approach.
            let to = plan.phase_of(light).ok_or("approach light not in plan")?;
            let from = (0..plan.phases.len())
                .filter(|&i| i != to)
                .max_by(|&a, &b| plan.phases[a].green.total_cmp(&plan.phases[b].green).then(b.cmp(&a)))
                .ok_or("single-phase plan")?;
            (from, to)
        } else if let Some(feeders) = self.topology.feeding_lights.get(&lane) {
            // Jam is fed from here: starve the feeding phase.
            let from = (0..plan.phases.len())
                .max_by_key(|&i| (plan.phases[i].lights.intersection(feeders).count(), std::cmp::Reverse(i)))
                .filter(|&i| plan.phases[i].lights.intersection(feeders).next().is_some())
                .ok_or("no phase feeds the jammed lane")?;
            let to = (0..plan.phases.len())
                .find(|&i| plan.phases[i].lights.is_disjoint(feeders))
                .ok_or("no crossing phase")?;
            (from, to)
        } else {
            return Err("lane does not touch this intersection");
        };
        let cmd = self
            .shift(CommandKind::Rebalance, from, to, step, now, Some((id, alert.rid)))
            .map_err(|_| "no feasible shift")?;
        self.last_rebalance_cycle = Some(self.signal.cycle_index());
        Ok(cmd)
    }

    /// Favors the crossing route when forwarded alerts report both
    /// directions of `rid` congested.
    pub fn divert_decision(&mut self, rid: SegmentId, net: &RoadNetwork, now: f64, cause: u64) -> Option<ScheduleCommand> {
        let window = self.params.recovery_after;
        let fresh = self.forwarded.get(&rid)?;
        let both = [Direction::Right, Direction::Left]
            .iter()
            .all(|d| fresh.get(d).is_some_and(|&t| now - t <= window));
        if !both {
            return None;
        }
        if self.diverted.get(&rid).is_some_and(|&t| now - t <= window) {
            return None;
        }
        let seg = net.segment(rid)?;
        let toward: BTreeSet<LightId> = self
            .topology
            .outgoing_exit
            .iter()
            .filter(|(_, exit)| **exit != self.node && (**exit == seg.from_node || **exit == seg.to_node))
            .filter_map(|(lane, _)| self.topology.feeding_lights.get(lane))
            .flatten()
            .cloned()
            .collect();
        if toward.is_empty() {
            return None;
        }
        let plan = self.signal.upcoming_plan().clone();
        let from = (0..plan.phases.len()).find(|&i| !plan.phases[i].lights.is_disjoint(&toward))?;
        let to = (0..plan.phases.len()).find(|&i| plan.phases[i].lights.is_disjoint(&toward))?;
        let cmd = self
            .shift(CommandKind::Divert, from, to, self.params.max_step, now, Some((cause, rid)))
            .ok()?;
        self.diverted.insert(rid, now);
        self.last_alert_at = Some(now);
        Some(cmd)
    }

    /// Advances the signal; on new cycles runs the baseline adjustment or
    /// the post-alert decay. `demand` holds stop-line counts of the cycle
    /// that just ended, per light.
    pub fn tick(
        &mut self,
        now: f64,
        demand: impl FnOnce() -> BTreeMap<LightId, f64>,
    ) -> (Vec<PhaseChange>, Vec<ScheduleCommand>) {
        let changes = self.signal.advance(now);
        let mut cmds = Vec::new();
        if !changes.iter().any(|c| c.new_cycle) {
            return (changes, cmds);
        }
        let cycle = self.signal.cycle_index();
        if self.last_adjust_cycle == Some(cycle) {
            return (changes, cmds);
        }
        self.last_adjust_cycle = Some(cycle);
        match self.kind {
            ControllerKind::Fixed => {}
            ControllerKind::AdaptiveBaseline => {
                let demand = demand();
                let plan = self.signal.upcoming_plan().clone();
                let ds = saturations(&plan, &demand, &self.params);
                if let Some(adj) = adaptive_baseline_tick(&ds, &self.params) {
                    if let Some(cmd) = self.apply_adjustment(adj, now) {
                        cmds.push(cmd);
                    }
                }
            }
            ControllerKind::AlertEnabled => {
                let quiet = self
                    .last_alert_at
                    .map_or(true, |t| now - t > self.params.recovery_after);
                if quiet {
                    if let Some(cmd) = self.decay(now) {
                        cmds.push(cmd);
                    }
                }
            }
        }
        (changes, cmds)
    }

    fn apply_adjustment(&mut self, adj: Adjustment, now: f64) -> Option<ScheduleCommand> {
        let step = self.params.step;
        match adj {
            Adjustment::Shift { from, to } => self.shift(CommandKind::Adaptive, from, to, step, now, None).ok(),
            Adjustment::Lengthen { phase } | Adjustment::Shorten { phase } => {
                let delta = if matches!(adj, Adjustment::Lengthen { .. }) { step } else { -step };
                let (plan, applied) = adjust_cycle(self.signal.upcoming_plan(), phase, delta, &self.params).ok()?;
                plan.validate(&self.conflicts, &self.params).ok()?;
                let mut cmd = self.command(CommandKind::Adaptive, &plan, phase, phase, applied, now, None);
                cmd.deltas = plan.phases[phase].lights.iter().map(|l| (l.clone(), applied)).collect();
                cmd.from_phase = None;
                cmd.to_phase = Some(phase);
                self.signal.schedule(plan);
                Some(cmd)
            }
        }
    }

    /// One decay step toward the baseline split. Residual deviations smaller
    /// than the minimum step stay in place.
    fn decay(&mut self, now: f64) -> Option<ScheduleCommand> {
        let plan = self.signal.upcoming_plan().clone();
        let dev: Vec<f64> = plan
            .phases
            .iter()
            .zip(&self.baseline.phases)
            .map(|(p, b)| p.green - b.green)
            .collect();
        let (over, &d_over) = dev.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
        let (under, &d_under) = dev.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))?;
        let d = d_over.min(-d_under);
        if d < self.params.min_step - 1e-9 {
            return None;
        }
        let step = if d <= self.params.max_step + 1e-9 {
            d
        } else {
            self.params.recovery_step
        };
        let (new_plan, applied) = rebalance_green(&plan, over, under, step, &self.params).ok()?;
        new_plan.validate(&self.conflicts, &self.params).ok()?;
        let cmd = self.command(CommandKind::Recovery, &new_plan, over, under, applied, now, None);
        self.signal.schedule(new_plan);
        Some(cmd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn light(s: &str) -> LightId {
        LightId(s.into())
    }

    fn plan(greens: &[f64]) -> PhasePlan {
        PhasePlan {
            phases: greens
                .iter()
                .enumerate()
                .map(|(i, &g)| Phase {
                    lights: [light(&format!("L{i}"))].into_iter().collect(),
                    green: g,
                })
                .collect(),
            yellow: 3.0,
        }
    }

    fn conflicts() -> Vec<(LightId, LightId)> {
        vec![(light("L0"), light("L1"))]
    }

    #[test]
    fn fixed_time_examples() {
        let p = plan(&[27.0, 27.0]);
        assert_eq!(p.cycle_length(), 60.0);
        assert_eq!(fixed_time_tick(&p, 10.0)[&light("L0")], LightState::Green);
        assert_eq!(fixed_time_tick(&p, 45.0)[&light("L1")], LightState::Green);
        assert_eq!(fixed_time_tick(&p, 45.0)[&light("L0")], LightState::Red);
        assert_eq!(fixed_time_tick(&p, 28.0)[&light("L0")], LightState::Yellow);
        for k in 0..5 {
            for t in [0.0, 13.5, 29.0, 59.5] {
                assert_eq!(fixed_time_tick(&p, t), fixed_time_tick(&p, t + 60.0 * k as f64));
            }
        }
    }

    #[test]
    fn controller_matches_fixed_time_without_commands() {
        let p = plan(&[30.0, 20.0, 15.0]);
        let mut c = SignalController::new(p.clone());
        for k in 0..800 {
            let t = k as f64 * 0.5;
            c.advance(t);
            assert_eq!(c.states(t), fixed_time_tick(&p, t), "t={t}");
        }
    }

    #[test]
    fn rebalance_conserves_cycle() {
        let p = plan(&[42.0, 42.0]);
        let (q, g) = rebalance_green(&p, 1, 0, 5.0, &ControlParams::default()).unwrap();
        assert_eq!(g, 5.0);
        assert_eq!(q.phases[0].green, 47.0);
        assert_eq!(q.phases[1].green, 37.0);
        assert_eq!(q.cycle_length(), p.cycle_length());
    }

    #[test]
    fn rebalance_clamps_then_refuses_at_minimum_green() {
        let params = ControlParams::default();
        let p = plan(&[60.0, 15.0]);
        let (q, g) = rebalance_green(&p, 1, 0, 7.0, &params).unwrap();
        assert_eq!(g, 5.0);
        assert_eq!(q.phases[1].green, 10.0);
        assert_eq!(rebalance_green(&q, 1, 0, 5.0, &params), Err(ControlError::NoFeasibleShift));
        let tight = plan(&[60.0, 12.0]);
        assert_eq!(rebalance_green(&tight, 1, 0, 5.0, &params), Err(ControlError::NoFeasibleShift));
    }

    #[test]
    fn adaptive_rule_examples() {
        let params = ControlParams::default();
        assert_eq!(
            adaptive_baseline_tick(&[0.9, 0.3], &params),
            Some(Adjustment::Shift { from: 1, to: 0 })
        );
        assert_eq!(adaptive_baseline_tick(&[0.5, 0.5], &params), None);
        assert_eq!(clamp_cycle(260.0, &params), 240.0);
        assert_eq!(clamp_cycle(5.0, &params), 20.0);
        let p = plan(&[114.0, 114.0]);
        let (q, applied) = adjust_cycle(&p, 0, 7.0, &params).unwrap();
        assert_eq!(q.cycle_length(), 240.0);
        assert_eq!(applied, 6.0);
        assert!(adjust_cycle(&q, 0, 7.0, &params).is_err());
    }

    #[test]
    fn mmu_check_flags_conflicting_greens() {
        let mut s = BTreeMap::new();
        s.insert(light("L0"), LightState::Green);
        s.insert(light("L1"), LightState::Red);
        assert!(mmu_safe(&s, &conflicts()));
        s.insert(light("L1"), LightState::Yellow);
        assert!(!mmu_safe(&s, &conflicts()));
    }

    #[test]
    fn validation_rejects_bad_plans() {
        let params = ControlParams::default();
        assert!(plan(&[30.0, 30.0]).validate(&conflicts(), &params).is_ok());
        assert!(plan(&[8.0, 30.0]).validate(&conflicts(), &params).is_err());
        assert!(plan(&[120.0, 120.0]).validate(&conflicts(), &params).is_err());
        let mut bad = plan(&[30.0, 30.0]);
        bad.phases[0].lights.insert(light("L1"));
        assert!(bad.validate(&conflicts(), &params).is_err());
    }

    #[test]
    fn pending_plan_applies_at_boundary_only() {
        let p = plan(&[27.0, 27.0]);
        let mut c = SignalController::new(p.clone());
        c.advance(5.0);
        let (q, _) = rebalance_green(&p, 1, 0, 5.0, &ControlParams::default()).unwrap();
        c.schedule(q.clone());
        assert_eq!(c.plan(), &p);
        assert_eq!(c.next_boundary(), 30.0);
        let changes = c.advance(30.0);
        assert!(changes[0].plan_changed);
        assert_eq!(c.plan(), &q);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rebalance_preserves_cycle_and_bounds(
                greens in proptest::collection::vec(10.0f64..100.0, 2..5),
                from in 0usize..5, to in 0usize..5, step in 4.0f64..7.0,
            ) {
                let p = plan(&greens);
                let params = ControlParams::default();
                if let Ok((q, g)) = rebalance_green(&p, from, to, step, &params) {
                    prop_assert!((q.cycle_length() - p.cycle_length()).abs() < 1e-9);
                    prop_assert!((4.0 - 1e-9..=7.0 + 1e-9).contains(&g));
                    prop_assert!(q.phases.iter().all(|ph| ph.green >= params.min_green - 1e-9));
                }
            }

            #[test]
            fn fixed_time_is_periodic(greens in proptest::collection::vec(10.0f64..60.0, 2..4), t in 0.0f64..1000.0, k in 1u32..20) {
                let p = plan(&greens);
                let c = p.cycle_length();
                prop_assert_eq!(fixed_time_tick(&p, t), fixed_time_tick(&p, t + c * k as f64));
            }
        }
    }
}
