//! Run summary: everything `summary.json` reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::control::{CommandKind, ControllerKind};
use crate::protocol::Variant;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleCounts {
    pub spawned: u64,
    /// Vehicles that made it from their source queue onto the road.
    pub entered: u64,
    pub finished: u64,
    pub on_road: u64,
    pub queued: u64,
    pub parked: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub count: u64,
    /// Seconds lost against free-flow travel, including time in source queues.
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
}

impl DelayStats {
    pub fn from_samples(mut xs: Vec<f64>) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        let idx = ((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1;
        Self {
            count: n as u64,
            mean: xs.iter().sum::<f64>() / n as f64,
            p95: xs[idx],
            max: xs[n - 1],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueStats {
    pub max: u64,
    /// (time, vehicles slower than the detection speed threshold or waiting to enter).
    pub series: Vec<(f64, u64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageCounts {
    /// Segment announcements sent while at least one idle vehicle was in range.
    pub rid_broadcasts: u64,
    pub rid_receptions: u64,
    pub segment_acceptances: u64,
    pub status_sent: u64,
    pub status_delivered: u64,
    pub exit_signals: u64,
    pub alerts_issued: u64,
    pub alert_deliveries: u64,
    pub alerts_forwarded: u64,
    pub commands: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DropCounts {
    pub vehicle: BTreeMap<String, u64>,
    pub mrsu: BTreeMap<String, u64>,
    pub lbs: BTreeMap<String, u64>,
}

impl DropCounts {
    pub fn bump(map: &mut BTreeMap<String, u64>, reason: impl std::fmt::Debug) {
        *map.entry(format!("{reason:?}")).or_default() += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub time: f64,
    pub rid: u32,
    pub lane: Option<u32>,
    pub center: f64,
    pub vehicles: u32,
    pub emergency: bool,
    /// An incident on the same segment and lane was active or ended within one window.
    pub matches_incident: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub rid: u32,
    pub lid: u32,
    pub location: f64,
    pub start: f64,
    pub end: Option<f64>,
    pub first_alert: Option<f64>,
    pub latency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub time: f64,
    pub lbs: u32,
    pub intersection: String,
    pub kind: CommandKind,
    pub delta: f64,
    pub from_phase: Option<usize>,
    pub to_phase: Option<usize>,
    pub effective_from: f64,
    pub cause_rid: Option<u32>,
    /// Issue time of the alert that caused the command.
    pub alert_time: Option<f64>,
    /// First phase boundary at this intersection after the alert arrived.
    pub boundary_after_alert: Option<f64>,
}

impl CommandRecord {
    pub fn within_one_boundary(&self) -> Option<bool> {
        self.boundary_after_alert.map(|b| self.effective_from <= b + 1e-9)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Safety {
    pub mmu_checks: u64,
    pub mmu_violations: u64,
    pub plans_checked: u64,
    pub cycle_out_of_range: u64,
    pub delta_out_of_range: u64,
    pub min_cycle: f64,
    pub max_cycle: f64,
    pub min_delta: Option<f64>,
    pub max_delta: Option<f64>,
    pub phase_changes: u64,
}

impl Default for Safety {
    fn default() -> Self {
        Self {
            mmu_checks: 0,
            mmu_violations: 0,
            plans_checked: 0,
            cycle_out_of_range: 0,
            delta_out_of_range: 0,
            min_cycle: f64::INFINITY,
            max_cycle: 0.0,
            min_delta: None,
            max_delta: None,
            phase_changes: 0,
        }
    }
}

impl Safety {
    pub fn check_cycle(&mut self, cycle: f64, lo: f64, hi: f64) {
        self.plans_checked += 1;
        self.min_cycle = self.min_cycle.min(cycle);
        self.max_cycle = self.max_cycle.max(cycle);
        if cycle < lo - 1e-9 || cycle > hi + 1e-9 {
            self.cycle_out_of_range += 1;
        }
    }

    pub fn check_delta(&mut self, delta: f64, lo: f64, hi: f64) {
        let d = delta.abs();
        self.min_delta = Some(self.min_delta.map_or(d, |m| m.min(d)));
        self.max_delta = Some(self.max_delta.map_or(d, |m| m.max(d)));
        if d < lo - 1e-9 || d > hi + 1e-9 {
            self.delta_out_of_range += 1;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayCounts {
    pub captured: u64,
    pub stale_sent: u64,
    pub fast_sent: u64,
    pub accepted: u64,
    pub stale_timestamp: u64,
    pub duplicate: u64,
    pub other: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForgeCounts {
    pub sent: u64,
    pub uncertified: u64,
    pub mismatched: u64,
    pub accepted: u64,
    pub cert_error: u64,
    pub signature_error: u64,
    /// Rejections whose reason does not match how the envelope was forged.
    pub misattributed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FloodCounts {
    pub sent: u64,
    pub accepted: u64,
    pub rejected: u64,
    /// Honest reports that went stale while queued behind the flood.
    pub honest_stale: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BotnetCounts {
    pub members: u64,
    pub reports: u64,
    pub accepted: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdversaryCounts {
    pub replay: ReplayCounts,
    pub forge: ForgeCounts,
    pub flood: FloodCounts,
    pub jam_suppressed: u64,
    pub botnet: BotnetCounts,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Privacy {
    pub pseudonyms_used: u64,
    /// Pseudonyms seen in more than one (vehicle, segment visit).
    pub violations: u64,
    pub segment_visits: u64,
    pub max_visits_per_vehicle: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub unclassified_fallbacks: u64,
    pub lane_misclassified: u64,
    pub unknown_exits: u64,
    pub pseudonym_reissues: u64,
    /// Lanes traversed without accepting the segment's broadcast.
    pub missed_segments: u64,
    pub lbs_no_command: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub variant: Variant,
    pub controller: ControllerKind,
    pub horizon: f64,
    pub vehicles: VehicleCounts,
    pub delay: DelayStats,
    pub queue: QueueStats,
    pub messages: MessageCounts,
    pub drops: DropCounts,
    pub true_alerts: u64,
    pub false_alerts: u64,
    pub alerts: Vec<AlertRecord>,
    pub incidents: Vec<IncidentRecord>,
    pub commands: Vec<CommandRecord>,
    pub safety: Safety,
    pub adversary: AdversaryCounts,
    pub privacy: Privacy,
    pub diagnostics: Diagnostics,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delay_stats_use_nearest_rank() {
        let d = DelayStats::from_samples((1..=20).map(f64::from).collect());
        assert_eq!(d.count, 20);
        assert_eq!(d.mean, 10.5);
        assert_eq!(d.p95, 19.0);
        assert_eq!(d.max, 20.0);
        assert_eq!(DelayStats::from_samples(vec![]), DelayStats::default());
    }

    #[test]
    fn safety_flags_out_of_range_values() {
        let mut s = Safety::default();
        s.check_cycle(80.0, 20.0, 240.0);
        s.check_cycle(250.0, 20.0, 240.0);
        s.check_delta(-5.0, 4.0, 7.0);
        s.check_delta(3.0, 4.0, 7.0);
        assert_eq!((s.cycle_out_of_range, s.delta_out_of_range), (1, 1));
        assert_eq!((s.min_delta, s.max_delta), (Some(3.0), Some(5.0)));
    }
}
