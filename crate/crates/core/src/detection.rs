//! The main RSU: caches per-pseudonym status records for one segment and
//! evaluates the congestion predicate over them.
//!
//! A record qualifies at time `now` when it has at least one sample in
//! `[now - window, now]` and every such sample is slower than the speed
//! threshold. A cluster around candidate center `c` holds the qualifying
//! records whose window samples all lie within `radius` of `c` along the road
//! (S1: on the same estimated lane). Candidate centers are the latest road
//! coordinates of all cached records. The reported center is the mean latest
//! coordinate of the chosen cluster.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::geometry::{LaneId, Point, SegmentId};
use crate::identity::{
    verify_envelope_cached, CertCache, CertSubject, Hsm, KeyRef, PublicKey, ReplayGuard, SignedEnvelope,
    TrustAnchors, VerifyError,
};
use crate::protocol::{
    decode_message, encode_message, read_point, write_point, Locator, Message, Routestate,
    Variant, VehicleType,
};
use crate::wire::{DecodeError, Reader, Writer};
use crate::AgentId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    /// N: minimum number of distinct stuck vehicles.
    pub n_min: usize,
    /// ΔT in seconds.
    pub window: f64,
    /// ε in meters along the road.
    pub radius: f64,
    /// η in meters per second.
    pub speed_threshold: f64,
    /// Repeated alerts for the same spot are suppressed this long.
    pub hold_down: f64,
    /// Ring-buffer capacity per record.
    pub max_samples: usize,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            n_min: 5,
            window: 60.0,
            radius: 50.0,
            speed_threshold: 2.8,
            hold_down: 30.0,
            max_samples: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    /// Road coordinate: dist (S1) or position projected on the segment axis (S2).
    pub coord: f64,
    pub lid: Option<LaneId>,
    pub pos: Option<Point>,
    pub speed: f64,
    pub state: Routestate,
    pub vtype: VehicleType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VehicleRecord {
    pub pseudonym: PublicKey,
    pub history: VecDeque<Sample>,
}

impl VehicleRecord {
    pub fn latest(&self) -> Option<&Sample> {
        self.history.back()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentCache {
    pub rid: SegmentId,
    pub records: BTreeMap<PublicKey, VehicleRecord>,
    pub max_samples: usize,
}

impl SegmentCache {
    pub fn new(rid: SegmentId, max_samples: usize) -> Self {
        Self {
            rid,
            records: BTreeMap::new(),
            max_samples: max_samples.max(1),
        }
    }

    /// Appends a sample; samples not newer than the record's latest are refused.
    pub fn push(&mut self, key: PublicKey, sample: Sample) -> bool {
        let cap = self.max_samples;
        let rec = self.records.entry(key).or_insert_with(|| VehicleRecord {
            pseudonym: key,
            history: VecDeque::new(),
        });
        if rec.latest().is_some_and(|l| sample.t <= l.t) {
            return false;
        }
        if rec.history.len() == cap {
            rec.history.pop_front();
        }
        rec.history.push_back(sample);
        true
    }

    pub fn remove(&mut self, key: &PublicKey) -> bool {
        self.records.remove(key).is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CongestionAlert {
    pub rid: SegmentId,
    pub mrsu: AgentId,
    /// Lane of the cluster (S1); S2 alerts leave it to the base station.
    pub lane: Option<LaneId>,
    pub center: f64,
    pub vehicle_count: u32,
    pub includes_emergency: bool,
    pub timestamp: f64,
    /// Latest raw positions of the cluster members (S2).
    pub positions: Vec<Point>,
    /// Pseudonyms of the cluster members, ascending.
    pub members: Vec<PublicKey>,
}

impl CongestionAlert {
    pub fn encode_into(&self, w: &mut Writer) {
        w.u32(self.rid.0).u32(self.mrsu.0);
        match self.lane {
            Some(l) => w.u8(1).u32(l.0),
            None => w.u8(0),
        };
        w.f64(self.center)
            .u32(self.vehicle_count)
            .u8(self.includes_emergency as u8)
            .f64(self.timestamp)
            .u32(self.positions.len() as u32);
        for p in &self.positions {
            write_point(w, *p);
        }
        w.u32(self.members.len() as u32);
        for m in &self.members {
            w.raw(&m.0);
        }
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let rid = SegmentId(r.u32()?);
        let mrsu = AgentId(r.u32()?);
        let lane = match r.u8()? {
            0 => None,
            1 => Some(LaneId(r.u32()?)),
            t => return Err(DecodeError::BadTag(t)),
        };
        let center = r.f64()?;
        let vehicle_count = r.u32()?;
        let includes_emergency = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(DecodeError::Invalid("flag")),
        };
        let timestamp = r.f64()?;
        let n = r.u32()? as usize;
        let mut positions = Vec::with_capacity(n.min(256));
        for _ in 0..n {
            positions.push(read_point(r)?);
        }
        let n = r.u32()? as usize;
        let mut members = Vec::with_capacity(n.min(256));
        for _ in 0..n {
            members.push(PublicKey(r.array()?));
        }
        Ok(Self {
            rid,
            mrsu,
            lane,
            center,
            vehicle_count,
            includes_emergency,
            timestamp,
            positions,
            members,
        })
    }
}

struct Summary {
    key: PublicKey,
    latest: Sample,
    lo: f64,
    hi: f64,
}

/// Window summaries of the qualifying records plus every record's latest sample.
fn summarize(cache: &SegmentCache, params: &DetectionParams, now: f64) -> (Vec<Summary>, Vec<Sample>) {
    let from = now - params.window;
    let mut qualified = Vec::new();
    let mut latest_all = Vec::new();
    for (key, rec) in &cache.records {
        let Some(latest) = rec.latest() else { continue };
        latest_all.push(*latest);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut fastest = f64::NEG_INFINITY;
        let mut any = false;
        for s in rec.history.iter().filter(|s| s.t >= from && s.t <= now) {
            any = true;
            lo = lo.min(s.coord);
            hi = hi.max(s.coord);
            fastest = fastest.max(s.speed);
        }
        if any && fastest < params.speed_threshold {
            qualified.push(Summary {
                key: *key,
                latest: *latest,
                lo,
                hi,
            });
        }
    }
    (qualified, latest_all)
}

fn best_cluster<'a>(
    qualified: &'a [Summary],
    candidates: &[Sample],
    params: &DetectionParams,
    lane: Option<Option<LaneId>>,
    excluded: &BTreeSet<PublicKey>,
) -> Option<(f64, Vec<&'a Summary>)> {
    let mut cs: Vec<f64> = candidates.iter().map(|s| s.coord).collect();
    cs.sort_by(f64::total_cmp);
    cs.dedup();
    let mut best: Option<(f64, Vec<&Summary>)> = None;
    for c in cs {
        let members: Vec<&Summary> = qualified
            .iter()
            .filter(|q| !excluded.contains(&q.key))
            .filter(|q| lane.map_or(true, |l| q.latest.lid == l))
            .filter(|q| q.lo >= c - params.radius && q.hi <= c + params.radius)
            .collect();
        if best.as_ref().map_or(true, |(_, b)| members.len() > b.len()) {
            best = Some((c, members));
        }
    }
    best.filter(|(_, m)| !m.is_empty())
}

fn make_alert(rid: SegmentId, lane: Option<LaneId>, members: &[&Summary], now: f64) -> CongestionAlert {
    let n = members.len() as f64;
    CongestionAlert {
        rid,
        mrsu: AgentId(0),
        lane,
        center: members.iter().map(|m| m.latest.coord).sum::<f64>() / n,
        vehicle_count: members.len() as u32,
        includes_emergency: members
            .iter()
            .any(|m| m.latest.vtype == VehicleType::EmergencyActive),
        timestamp: now,
        positions: members.iter().filter_map(|m| m.latest.pos).collect(),
        members: members.iter().map(|m| m.key).collect(),
    }
}

fn lanes_of(qualified: &[Summary]) -> Vec<Option<LaneId>> {
    let set: BTreeSet<Option<LaneId>> = qualified.iter().map(|q| q.latest.lid).collect();
    set.into_iter().collect()
}

/// Best S1 cluster: most members, then lowest lane, then smallest candidate center.
pub fn check_anomaly_s1(cache: &SegmentCache, params: &DetectionParams, now: f64) -> Option<CongestionAlert> {
    let (qualified, latest) = summarize(cache, params, now);
    let mut best: Option<(Option<LaneId>, Vec<&Summary>)> = None;
    for lane in lanes_of(&qualified) {
        if let Some((_, m)) = best_cluster(&qualified, &latest, params, Some(lane), &BTreeSet::new()) {
            if best.as_ref().map_or(true, |(_, b)| m.len() > b.len()) {
                best = Some((lane, m));
            }
        }
    }
    let (lane, members) = best?;
    (members.len() >= params.n_min).then(|| make_alert(cache.rid, lane, &members, now))
}

/// Best S2 cluster along the road axis, regardless of lane.
pub fn check_anomaly_s2(cache: &SegmentCache, params: &DetectionParams, now: f64) -> Option<CongestionAlert> {
    let (qualified, latest) = summarize(cache, params, now);
    let (_, members) = best_cluster(&qualified, &latest, params, None, &BTreeSet::new())?;
    (members.len() >= params.n_min).then(|| make_alert(cache.rid, None, &members, now))
}

/// All disjoint clusters meeting the threshold: one per lane for S1, greedy
/// extraction along the axis for S2.
pub fn detect_all(cache: &SegmentCache, params: &DetectionParams, variant: Variant, now: f64) -> Vec<CongestionAlert> {
    let (qualified, latest) = summarize(cache, params, now);
    let mut out = Vec::new();
    match variant {
        Variant::S1 => {
            for lane in lanes_of(&qualified) {
                if let Some((_, m)) = best_cluster(&qualified, &latest, params, Some(lane), &BTreeSet::new()) {
                    if m.len() >= params.n_min {
                        out.push(make_alert(cache.rid, lane, &m, now));
                    }
                }
            }
        }
        Variant::S2 => {
            let mut excluded = BTreeSet::new();
            while let Some((_, m)) = best_cluster(&qualified, &latest, params, None, &excluded) {
                if m.len() < params.n_min {
                    break;
                }
                excluded.extend(m.iter().map(|s| s.key));
                out.push(make_alert(cache.rid, None, &m, now));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DropReason {
    Malformed,
    WrongAddressee,
    WrongSegment,
    CertError,
    SignatureError,
    StaleTimestamp,
    Duplicate,
    OutOfOrder,
}

impl From<VerifyError> for DropReason {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::CertError => DropReason::CertError,
            VerifyError::SignatureError => DropReason::SignatureError,
            VerifyError::StaleTimestamp => DropReason::StaleTimestamp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IngestOutcome {
    CacheUpdated,
    Purged,
    Dropped(DropReason),
}

/// Segment geometry the main RSU needs to project S2 positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoadAxis {
    pub origin: Point,
    pub direction: Point,
}

impl RoadAxis {
    pub fn project(&self, p: Point) -> f64 {
        p.sub(self.origin).dot(self.direction)
    }
}

pub struct MainRsu {
    pub id: AgentId,
    pub rid: SegmentId,
    pub variant: Variant,
    pub pos: Point,
    pub range: f64,
    pub params: DetectionParams,
    axis: RoadAxis,
    hsm: Hsm,
    anchors: TrustAnchors,
    exit_rsus: BTreeSet<AgentId>,
    pub cache: SegmentCache,
    guard: ReplayGuard,
    certs: CertCache,
    issued: Vec<(Option<LaneId>, f64, f64)>,
    /// Exit signals naming pseudonyms with no cached record.
    pub unknown_exits: u64,
}

impl std::fmt::Debug for MainRsu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MainRsu")
            .field("id", &self.id)
            .field("rid", &self.rid)
            .field("records", &self.cache.records.len())
            .finish()
    }
}

impl MainRsu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: AgentId,
        rid: SegmentId,
        variant: Variant,
        pos: Point,
        range: f64,
        params: DetectionParams,
        axis: RoadAxis,
        hsm: Hsm,
        anchors: TrustAnchors,
        exit_rsus: BTreeSet<AgentId>,
    ) -> Self {
        Self {
            id,
            rid,
            variant,
            pos,
            range,
            params,
            axis,
            hsm,
            guard: ReplayGuard::new(anchors.freshness_window),
            certs: CertCache::default(),
            anchors,
            exit_rsus,
            cache: SegmentCache::new(rid, params.max_samples),
            issued: Vec::new(),
            unknown_exits: 0,
        }
    }

    pub fn hsm(&self) -> &Hsm {
        &self.hsm
    }

    /// Addressee and segment checks, then verification, then duplicate
    /// suppression, then caching.
    pub fn ingest(&mut self, env: &SignedEnvelope, now: f64) -> IngestOutcome {
        let msg = match decode_message(&env.payload) {
            Ok(Message::VeState(m)) => m,
            _ => return IngestOutcome::Dropped(DropReason::Malformed),
        };
        if msg.mrsu != self.id {
            return IngestOutcome::Dropped(DropReason::WrongAddressee);
        }
        if msg.rid != self.rid {
            return IngestOutcome::Dropped(DropReason::WrongSegment);
        }
        if let Err(e) = verify_envelope_cached(env, &self.anchors, now, &mut self.certs) {
            return IngestOutcome::Dropped(e.into());
        }
        if env.certificate.subject != CertSubject::Pseudonym {
            return IngestOutcome::Dropped(DropReason::CertError);
        }
        if self.guard.is_duplicate(env, now) {
            return IngestOutcome::Dropped(DropReason::Duplicate);
        }
        let (coord, lid, pos) = match (self.variant, msg.locator) {
            (Variant::S1, Locator::Lane { lid, dist }) => (dist, Some(lid), None),
            (Variant::S2, Locator::Position(p)) => (self.axis.project(p), None, Some(p)),
            _ => return IngestOutcome::Dropped(DropReason::Malformed),
        };
        let key = env.signer();
        if msg.state == Routestate::Parking {
            self.guard.remember(env, now);
            self.cache.remove(&key);
            return IngestOutcome::Purged;
        }
        let sample = Sample {
            t: env.timestamp,
            coord,
            lid,
            pos,
            speed: msg.speed,
            state: msg.state,
            vtype: msg.vtype,
        };
        if !self.cache.push(key, sample) {
            return IngestOutcome::Dropped(DropReason::OutOfOrder);
        }
        self.guard.remember(env, now);
        IngestOutcome::CacheUpdated
    }

    /// Removes the record named by a verified exit signal from one of this
    /// segment's RSUs. Returns whether a record was removed.
    pub fn purge_on_exit(&mut self, env: &SignedEnvelope, now: f64) -> Result<bool, DropReason> {
        let sig = match decode_message(&env.payload) {
            Ok(Message::Exit(s)) => s,
            _ => return Err(DropReason::Malformed),
        };
        if sig.rid != self.rid {
            return Err(DropReason::WrongSegment);
        }
        verify_envelope_cached(env, &self.anchors, now, &mut self.certs)?;
        match env.certificate.subject {
            CertSubject::Infrastructure(rsu) if self.exit_rsus.contains(&rsu) => {}
            _ => return Err(DropReason::CertError),
        }
        if self.cache.remove(&sig.pseudonym) {
            Ok(true)
        } else {
            self.unknown_exits += 1;
            Ok(false)
        }
    }

    fn held_down(&self, alert: &CongestionAlert, now: f64) -> bool {
        self.issued.iter().any(|&(lane, center, t)| {
            now - t < self.params.hold_down
                && match self.variant {
                    Variant::S1 => lane == alert.lane,
                    Variant::S2 => (center - alert.center).abs() <= self.params.radius,
                }
        })
    }

    /// Periodic check: new alerts, each with the envelope to send to base stations.
    pub fn check(&mut self, now: f64) -> Vec<(CongestionAlert, SignedEnvelope)> {
        let hold = self.params.hold_down;
        self.issued.retain(|&(_, _, t)| now - t < hold);
        let mut out = Vec::new();
        for mut alert in detect_all(&self.cache, &self.params, self.variant, now) {
            if self.held_down(&alert, now) {
                continue;
            }
            alert.mrsu = self.id;
            self.issued.push((alert.lane, alert.center, now));
            self.hsm.advance_clock(now);
            let env = self
                .hsm
                .sign(KeyRef::LongTerm, &encode_message(&Message::Alert(alert.clone())))
                .expect("main RSU holds a certified long-term key");
            out.push((alert, env));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{CaId, CertificateAuthority, PseudonymPool};
    use crate::protocol::VeStateMsg;

    fn key(i: u8) -> PublicKey {
        PublicKey([i; 32])
    }

    fn s1(t: f64, dist: f64, speed: f64, lane: u32) -> Sample {
        Sample {
            t,
            coord: dist,
            lid: Some(LaneId(lane)),
            pos: None,
            speed,
            state: Routestate::Onroad,
            vtype: VehicleType::Normal,
        }
    }

    fn jam_cache(max_speeds: [f64; 5]) -> SegmentCache {
        let mut c = SegmentCache::new(SegmentId(1), 256);
        for (i, (&d, &vmax)) in [500.0, 504.0, 508.0, 511.0, 513.0]
            .iter()
            .zip(max_speeds.iter())
            .enumerate()
        {
            for k in 0..=30 {
                let t = 40.0 + 2.0 * k as f64;
                let v = if k == 10 { vmax } else { 0.5 };
                c.push(key(i as u8), s1(t, d, v, 1));
            }
        }
        c
    }

    fn params() -> DetectionParams {
        DetectionParams {
            n_min: 5,
            window: 60.0,
            radius: 50.0,
            speed_threshold: 2.8,
            ..DetectionParams::default()
        }
    }

    #[test]
    fn five_stopped_vehicles_raise_alert() {
        let c = jam_cache([1.0; 5]);
        let a = check_anomaly_s1(&c, &params(), 100.0).unwrap();
        assert_eq!(a.vehicle_count, 5);
        assert_eq!(a.lane, Some(LaneId(1)));
        assert!((a.center - 507.2).abs() < 1e-9);
        assert!(!a.includes_emergency);
    }

    #[test]
    fn one_fast_vehicle_breaks_the_cluster() {
        let c = jam_cache([1.0, 1.0, 5.0, 1.0, 1.0]);
        assert!(check_anomaly_s1(&c, &params(), 100.0).is_none());
    }

    #[test]
    fn emergency_member_flags_alert() {
        let mut c = jam_cache([1.0; 5]);
        let rec = c.records.get_mut(&key(3)).unwrap();
        rec.history.back_mut().unwrap().vtype = VehicleType::EmergencyActive;
        assert!(check_anomaly_s1(&c, &params(), 100.0).unwrap().includes_emergency);
    }

    fn s2_cache(xs: &[f64]) -> SegmentCache {
        let mut c = SegmentCache::new(SegmentId(1), 256);
        for (i, &x) in xs.iter().enumerate() {
            for k in 0..=30 {
                let p = Point::new(x, -1.75);
                c.push(
                    key(i as u8),
                    Sample {
                        t: 40.0 + 2.0 * k as f64,
                        coord: x,
                        lid: None,
                        pos: Some(p),
                        speed: 0.0,
                        state: Routestate::Onroad,
                        vtype: VehicleType::Normal,
                    },
                );
            }
        }
        c
    }

    #[test]
    fn s2_examples() {
        let p = params();
        let a = check_anomaly_s2(&s2_cache(&[300.0, 306.0, 312.0, 318.0, 324.0]), &p, 100.0).unwrap();
        assert_eq!(a.positions.len(), 5);
        assert_eq!(a.lane, None);
        let spread: Vec<f64> = (0..5).map(|i| 100.0 + 37.5 * i as f64).collect();
        assert!(check_anomaly_s2(&s2_cache(&spread), &p, 100.0).is_none());
        assert!(check_anomaly_s2(&SegmentCache::new(SegmentId(1), 8), &p, 100.0).is_none());
    }

    #[test]
    fn greedy_extraction_finds_two_clusters() {
        let mut xs: Vec<f64> = (0..5).map(|i| 100.0 + 6.0 * i as f64).collect();
        xs.extend((0..5).map(|i| 400.0 + 6.0 * i as f64));
        let alerts = detect_all(&s2_cache(&xs), &params(), Variant::S2, 100.0);
        assert_eq!(alerts.len(), 2);
        assert!((alerts[0].center - 112.0).abs() < 1e-9);
        assert!((alerts[1].center - 412.0).abs() < 1e-9);
    }

    #[test]
    fn ring_buffer_caps_and_rejects_out_of_order() {
        let mut c = SegmentCache::new(SegmentId(1), 4);
        for k in 0..10 {
            assert!(c.push(key(1), s1(k as f64, 0.0, 0.0, 1)));
        }
        assert!(!c.push(key(1), s1(5.0, 0.0, 0.0, 1)));
        assert_eq!(c.records[&key(1)].history.len(), 4);
        assert_eq!(c.records[&key(1)].history[0].t, 6.0);
    }

    #[test]
    fn alert_codec_round_trips() {
        let mut a = check_anomaly_s2(&s2_cache(&[1.0, 2.0, 3.0, 4.0, 5.0]), &params(), 100.0).unwrap();
        a.mrsu = AgentId(7);
        let bytes = encode_message(&Message::Alert(a.clone()));
        assert_eq!(decode_message(&bytes).unwrap(), Message::Alert(a));
    }

    struct Net {
        ca: CertificateAuthority,
        mrsu: MainRsu,
        rsu: crate::protocol::RsuAgent,
        vehicles: Vec<(Hsm, PseudonymPool)>,
    }

    fn net() -> Net {
        let ca = CertificateAuthority::from_seed(CaId(1), 1);
        let mh = Hsm::from_seed(10);
        ca.register_infrastructure(AgentId(50), &mh, 0.0).unwrap();
        let rh = Hsm::from_seed(11);
        ca.register_infrastructure(AgentId(51), &rh, 0.0).unwrap();
        let rsu = crate::protocol::RsuAgent::new(
            AgentId(51),
            Point::ORIGIN,
            7.0,
            rh,
            crate::protocol::RidStateMsg {
                rid: SegmentId(1),
                info: crate::protocol::SegmentInfo::Neighbors(Default::default()),
                mrsu: AgentId(50),
            },
            None,
        );
        let mrsu = MainRsu::new(
            AgentId(50),
            SegmentId(1),
            Variant::S1,
            Point::ORIGIN,
            1000.0,
            params(),
            RoadAxis {
                origin: Point::ORIGIN,
                direction: Point::new(1.0, 0.0),
            },
            mh,
            ca.anchors(5.0),
            [AgentId(51)].into_iter().collect(),
        );
        let mut vehicles = Vec::new();
        for i in 0..6u64 {
            let h = Hsm::from_seed(100 + i);
            let cred = ca.register_vehicle(&format!("VE-{i}"), &h, 0.0).unwrap();
            let mut pool = PseudonymPool::new(ca.issue_pseudonyms(&cred, &h, 2, 0.0).unwrap());
            pool.rotate(SegmentId(1)).unwrap();
            vehicles.push((h, pool));
        }
        Net {
            ca,
            mrsu,
            rsu,
            vehicles,
        }
    }

    fn report(net: &Net, v: usize, t: f64, dist: f64, speed: f64, state: Routestate, mrsu: u32) -> SignedEnvelope {
        let (h, pool) = &net.vehicles[v];
        h.advance_clock(t);
        let msg = Message::VeState(VeStateMsg {
            rid: SegmentId(1),
            mrsu: AgentId(mrsu),
            locator: Locator::Lane {
                lid: LaneId(1),
                dist,
            },
            speed,
            state,
            vtype: VehicleType::Normal,
        });
        h.sign(pool.active().unwrap().key_ref, &encode_message(&msg)).unwrap()
    }

    #[test]
    fn ingest_creates_and_parking_purges() {
        let mut n = net();
        let e = report(&n, 0, 1.0, 10.0, 5.0, Routestate::Onroad, 50);
        assert_eq!(n.mrsu.ingest(&e, 1.0), IngestOutcome::CacheUpdated);
        assert_eq!(n.mrsu.cache.records.len(), 1);
        let p = report(&n, 0, 3.0, 12.0, 0.0, Routestate::Parking, 50);
        assert_eq!(n.mrsu.ingest(&p, 3.0), IngestOutcome::Purged);
        assert!(n.mrsu.cache.records.is_empty());
    }

    #[test]
    fn ingest_drop_reasons() {
        let mut n = net();
        let e = report(&n, 0, 1.0, 10.0, 5.0, Routestate::Onroad, 99);
        assert_eq!(n.mrsu.ingest(&e, 1.0), IngestOutcome::Dropped(DropReason::WrongAddressee));
        let e = report(&n, 0, 1.0, 10.0, 5.0, Routestate::Onroad, 50);
        assert_eq!(n.mrsu.ingest(&e, 7.0), IngestOutcome::Dropped(DropReason::StaleTimestamp));
        assert_eq!(n.mrsu.ingest(&e, 1.0), IngestOutcome::CacheUpdated);
        assert_eq!(n.mrsu.ingest(&e, 1.1), IngestOutcome::Dropped(DropReason::Duplicate));
        let mut bad = e.clone();
        bad.signature[0] ^= 1;
        assert_eq!(n.mrsu.ingest(&bad, 1.1), IngestOutcome::Dropped(DropReason::SignatureError));
        let _ = &n.ca;
    }

    #[test]
    fn exit_purges_and_forged_exit_is_rejected() {
        let mut n = net();
        let e = report(&n, 2, 1.0, 10.0, 5.0, Routestate::Onroad, 50);
        n.mrsu.ingest(&e, 1.0);
        let k = n.vehicles[2].1.active().unwrap().public_key;
        let mut forged = n.rsu.exit_signal(k, 2.0);
        forged.signature[5] ^= 0x40;
        assert_eq!(n.mrsu.purge_on_exit(&forged, 2.0), Err(DropReason::SignatureError));
        assert_eq!(n.mrsu.cache.records.len(), 1);
        assert_eq!(n.mrsu.purge_on_exit(&n.rsu.exit_signal(k, 2.0), 2.0), Ok(true));
        assert!(n.mrsu.cache.records.is_empty());
        assert_eq!(n.mrsu.purge_on_exit(&n.rsu.exit_signal(key(9), 2.5), 2.5), Ok(false));
        assert_eq!(n.mrsu.unknown_exits, 1);
    }

    #[test]
    fn check_raises_once_per_hold_down() {
        let mut n = net();
        for k in 0..=35 {
            let t = 2.0 * k as f64;
            for v in 0..5 {
                let e = report(&n, v, t, 300.0 + 7.0 * v as f64, 0.0, Routestate::Onroad, 50);
                assert_eq!(n.mrsu.ingest(&e, t), IngestOutcome::CacheUpdated);
            }
        }
        let first = n.mrsu.check(70.0);
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].0.mrsu, AgentId(50));
        assert!(n.mrsu.check(80.0).is_empty());
        assert_eq!(n.mrsu.check(100.0).len(), 1);
    }
}
