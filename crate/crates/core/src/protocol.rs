//! Message schemas, their canonical byte encoding, and the vehicle and
//! roadside-unit state machines for both protocol variants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::CongestionAlert;
use crate::geometry::{
    classify_arrival, AngleInterval, Arrival, LaneId, LaneRef, NeighborEntry, NeighborTable,
    PathRecord, Point, Rect, SegmentId,
};
use crate::identity::{
    verify_envelope, CertSubject, CertificateAuthority, Hsm, IdentityError, KeyRef,
    LongTermCredential, PseudonymPool, PublicKey, SignedEnvelope, TrustAnchors, VerifyError,
};
use crate::wire::{DecodeError, Reader, Writer};
use crate::AgentId;

/// Protocol variant: dead-reckoned paths (S1) or precise positions (S2).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    S1,
    S2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routestate {
    Idle,
    Onroad,
    Parking,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleType {
    #[default]
    Normal,
    EmergencyActive,
    PublicTransport,
}

/// Periods and windows shared by vehicles and roadside units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTiming {
    /// ΔT_VE: vehicle status period.
    pub status_period: f64,
    /// P_br: RSU broadcast period.
    pub broadcast_period: f64,
    /// ΔT_br: how long a gated RSU keeps broadcasting after a detection.
    pub broadcast_window: f64,
    pub freshness_window: f64,
    /// Parking reports sent before a parked vehicle falls silent.
    pub parking_reports: u32,
}

impl Default for ProtocolTiming {
    fn default() -> Self {
        Self {
            status_period: 2.0,
            broadcast_period: 1.0,
            broadcast_window: 5.0,
            freshness_window: crate::identity::DEFAULT_FRESHNESS_WINDOW,
            parking_reports: 3,
        }
    }
}

/// What an RSU tells arriving vehicles about its segment.
#[derive(Clone, Debug, PartialEq)]
pub enum SegmentInfo {
    /// Neighbor table for arrival classification (S1).
    Neighbors(NeighborTable),
    /// Geographic extent of the segment (S2).
    Extent(Rect),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidStateMsg {
    pub rid: SegmentId,
    pub info: SegmentInfo,
    pub mrsu: AgentId,
}

/// Where a reporting vehicle is.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Locator {
    /// Estimated lane and distance since segment entry (S1).
    Lane { lid: LaneId, dist: f64 },
    /// Planar position (S2).
    Position(Point),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VeStateMsg {
    pub rid: SegmentId,
    /// Main RSU the report is addressed to.
    pub mrsu: AgentId,
    pub locator: Locator,
    pub speed: f64,
    pub state: Routestate,
    pub vtype: VehicleType,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitSignal {
    pub pseudonym: PublicKey,
    pub rid: SegmentId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    RidState(RidStateMsg),
    VeState(VeStateMsg),
    Exit(ExitSignal),
    Alert(CongestionAlert),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed message bytes: {0}")]
    MalformedBytes(#[from] DecodeError),
}

const TAG_RID_STATE: u8 = 0x01;
const TAG_VE_STATE: u8 = 0x02;
const TAG_EXIT: u8 = 0x03;
const TAG_ALERT: u8 = 0x04;

fn routestate_code(s: Routestate) -> u8 {
    match s {
        Routestate::Idle => 0,
        Routestate::Onroad => 1,
        Routestate::Parking => 2,
    }
}

fn routestate_from(code: u8) -> Result<Routestate, DecodeError> {
    Ok(match code {
        0 => Routestate::Idle,
        1 => Routestate::Onroad,
        2 => Routestate::Parking,
        _ => return Err(DecodeError::Invalid("routestate")),
    })
}

fn vtype_code(v: VehicleType) -> u8 {
    match v {
        VehicleType::Normal => 0,
        VehicleType::EmergencyActive => 1,
        VehicleType::PublicTransport => 2,
    }
}

fn vtype_from(code: u8) -> Result<VehicleType, DecodeError> {
    Ok(match code {
        0 => VehicleType::Normal,
        1 => VehicleType::EmergencyActive,
        2 => VehicleType::PublicTransport,
        _ => return Err(DecodeError::Invalid("vehicle type")),
    })
}

pub(crate) fn write_point(w: &mut Writer, p: Point) {
    w.f64(p.x).f64(p.y);
}

pub(crate) fn read_point(r: &mut Reader<'_>) -> Result<Point, DecodeError> {
    Ok(Point::new(r.f64()?, r.f64()?))
}

fn finite(v: f64, what: &'static str) -> Result<f64, DecodeError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DecodeError::Invalid(what))
    }
}

/// Canonical bytes of a message. See `docs/wire-format.md`.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut w = Writer::new();
    match msg {
        Message::RidState(m) => {
            w.u8(TAG_RID_STATE).u32(m.rid.0).u32(m.mrsu.0);
            match &m.info {
                SegmentInfo::Neighbors(nb) => {
                    w.u8(1).u32(nb.entries.len() as u32);
                    for e in &nb.entries {
                        w.u32(e.from_rid.0)
                            .u32(e.from_lid.0)
                            .f64(e.interval.lo)
                            .f64(e.interval.hi)
                            .u32(e.to_lid.0);
                    }
                }
                SegmentInfo::Extent(r) => {
                    w.u8(2);
                    write_point(&mut w, r.min);
                    write_point(&mut w, r.max);
                }
            }
        }
        Message::VeState(m) => {
            w.u8(TAG_VE_STATE).u32(m.rid.0).u32(m.mrsu.0);
            match m.locator {
                Locator::Lane { lid, dist } => {
                    w.u8(1).u32(lid.0).f64(dist);
                }
                Locator::Position(p) => {
                    w.u8(2);
                    write_point(&mut w, p);
                }
            }
            w.f64(m.speed).u8(routestate_code(m.state)).u8(vtype_code(m.vtype));
        }
        Message::Exit(m) => {
            w.u8(TAG_EXIT).raw(&m.pseudonym.0).u32(m.rid.0);
        }
        Message::Alert(a) => {
            w.u8(TAG_ALERT);
            a.encode_into(&mut w);
        }
    }
    w.finish()
}

pub fn decode_message(bytes: &[u8]) -> Result<Message, ProtocolError> {
    let mut r = Reader::new(bytes);
    let msg = match r.u8()? {
        TAG_RID_STATE => {
            let rid = SegmentId(r.u32()?);
            let mrsu = AgentId(r.u32()?);
            let info = match r.u8()? {
                1 => {
                    let n = r.u32()? as usize;
                    let mut entries = Vec::with_capacity(n.min(1024));
                    for _ in 0..n {
                        let from_rid = SegmentId(r.u32()?);
                        let from_lid = LaneId(r.u32()?);
                        let lo = finite(r.f64()?, "interval")?;
                        let hi = finite(r.f64()?, "interval")?;
                        if !(0.0..360.0).contains(&lo) {
                            return Err(DecodeError::Invalid("interval lower bound").into());
                        }
                        entries.push(NeighborEntry {
                            from_rid,
                            from_lid,
                            interval: AngleInterval { lo, hi },
                            to_lid: LaneId(r.u32()?),
                        });
                    }
                    SegmentInfo::Neighbors(NeighborTable::new(entries))
                }
                2 => {
                    let min = read_point(&mut r)?;
                    let max = read_point(&mut r)?;
                    if min.x > max.x || min.y > max.y {
                        return Err(DecodeError::Invalid("extent").into());
                    }
                    SegmentInfo::Extent(Rect { min, max })
                }
                t => return Err(DecodeError::BadTag(t).into()),
            };
            Message::RidState(RidStateMsg { rid, info, mrsu })
        }
        TAG_VE_STATE => {
            let rid = SegmentId(r.u32()?);
            let mrsu = AgentId(r.u32()?);
            let locator = match r.u8()? {
                1 => Locator::Lane {
                    lid: LaneId(r.u32()?),
                    dist: finite(r.f64()?, "dist")?,
                },
                2 => Locator::Position(read_point(&mut r)?),
                t => return Err(DecodeError::BadTag(t).into()),
            };
            let speed = finite(r.f64()?, "speed")?;
            let state = routestate_from(r.u8()?)?;
            let vtype = vtype_from(r.u8()?)?;
            Message::VeState(VeStateMsg {
                rid,
                mrsu,
                locator,
                speed,
                state,
                vtype,
            })
        }
        TAG_EXIT => Message::Exit(ExitSignal {
            pseudonym: PublicKey(r.array()?),
            rid: SegmentId(r.u32()?),
        }),
        TAG_ALERT => Message::Alert(CongestionAlert::decode_from(&mut r)?),
        t => return Err(DecodeError::BadTag(t).into()),
    };
    r.finish()?;
    Ok(msg)
}

/// Why a vehicle ignored a segment broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IgnoreReason {
    Inconsistent,
    Malformed,
    CertError,
    SignatureError,
    StaleTimestamp,
}

impl From<VerifyError> for IgnoreReason {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::CertError => IgnoreReason::CertError,
            VerifyError::SignatureError => IgnoreReason::SignatureError,
            VerifyError::StaleTimestamp => IgnoreReason::StaleTimestamp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RidOutcome {
    Accepted {
        rid: SegmentId,
        lid: Option<LaneId>,
        pseudonym: PublicKey,
    },
    Ignored(IgnoreReason),
}

/// Protocol-side state of one vehicle. Kinematics live in the simulator.
pub struct VehicleAgent {
    pub id: AgentId,
    pub vehicle_id: String,
    pub variant: Variant,
    pub vtype: VehicleType,
    routestate: Routestate,
    hsm: Hsm,
    credential: LongTermCredential,
    pool: PseudonymPool,
    pseudonym_batch: usize,
    rid: Option<SegmentId>,
    lid_estimate: Option<LaneId>,
    mrsu: Option<AgentId>,
    dist: f64,
    pub path: PathRecord,
    pub pos: Point,
    pub speed: f64,
    next_status: f64,
    parking_sent: u32,
    /// Pseudonym re-issues performed at the CA.
    pub reissues: u32,
    /// Broadcasts accepted although no interval matched the path.
    pub unclassified_fallbacks: u32,
}

impl std::fmt::Debug for VehicleAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VehicleAgent")
            .field("id", &self.id)
            .field("routestate", &self.routestate)
            .field("rid", &self.rid)
            .field("dist", &self.dist)
            .finish()
    }
}

impl VehicleAgent {
    /// Registers the vehicle with `ca` and fetches an initial pseudonym batch.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: AgentId,
        vehicle_id: String,
        variant: Variant,
        vtype: VehicleType,
        ca: &CertificateAuthority,
        hsm: Hsm,
        pseudonym_batch: usize,
        origin: LaneRef,
        heading_deg: f64,
        now: f64,
    ) -> Result<Self, IdentityError> {
        hsm.advance_clock(now);
        let credential = ca.register_vehicle(&vehicle_id, &hsm, now)?;
        let pool = PseudonymPool::new(ca.issue_pseudonyms(&credential, &hsm, pseudonym_batch, now)?);
        Ok(Self {
            id,
            vehicle_id,
            variant,
            vtype,
            routestate: Routestate::Idle,
            hsm,
            credential,
            pool,
            pseudonym_batch,
            rid: None,
            lid_estimate: None,
            mrsu: None,
            dist: 0.0,
            path: PathRecord::new(origin, heading_deg),
            pos: Point::ORIGIN,
            speed: 0.0,
            next_status: f64::INFINITY,
            parking_sent: 0,
            reissues: 0,
            unclassified_fallbacks: 0,
        })
    }

    pub fn routestate(&self) -> Routestate {
        self.routestate
    }

    pub fn rid(&self) -> Option<SegmentId> {
        self.rid
    }

    pub fn lid_estimate(&self) -> Option<LaneId> {
        self.lid_estimate
    }

    pub fn mrsu(&self) -> Option<AgentId> {
        self.mrsu
    }

    pub fn dist(&self) -> f64 {
        self.dist
    }

    pub fn pool(&self) -> &PseudonymPool {
        &self.pool
    }

    pub fn active_pseudonym(&self) -> Option<PublicKey> {
        self.pool.active().map(|p| p.public_key)
    }

    fn transition(&mut self, to: Routestate) {
        use Routestate::*;
        let ok = matches!(
            (self.routestate, to),
            (Idle, Onroad) | (Onroad, Parking) | (Parking, Onroad) | (Onroad, Idle)
        );
        assert!(ok, "illegal routestate transition {:?} -> {:?}", self.routestate, to);
        self.routestate = to;
    }

    fn check_consistency(&mut self, msg: &RidStateMsg) -> Result<Option<LaneId>, IgnoreReason> {
        match (self.variant, &msg.info) {
            (Variant::S1, SegmentInfo::Neighbors(nb)) => {
                let origin = self.path.origin_ref;
                if !nb.has_origin(origin) {
                    return Err(IgnoreReason::Inconsistent);
                }
                match classify_arrival(&self.path, nb) {
                    Ok(Arrival::Lane(l)) => Ok(Some(l)),
                    Ok(Arrival::Unclassified) => {
                        let fallback = nb
                            .entries
                            .iter()
                            .filter(|e| (e.from_rid, e.from_lid) == origin)
                            .map(|e| e.to_lid)
                            .min()
                            .expect("origin present");
                        self.unclassified_fallbacks += 1;
                        Ok(Some(fallback))
                    }
                    Err(_) => Err(IgnoreReason::Inconsistent),
                }
            }
            (Variant::S2, SegmentInfo::Extent(rpos)) => {
                if rpos.contains(self.pos) {
                    Ok(None)
                } else {
                    Err(IgnoreReason::Inconsistent)
                }
            }
            _ => Err(IgnoreReason::Inconsistent),
        }
    }

    /// Handles a segment broadcast: routestate consistency first, then
    /// signature, certificate and freshness.
    pub fn handle_rid_state(
        &mut self,
        env: &SignedEnvelope,
        anchors: &TrustAnchors,
        ca: &CertificateAuthority,
        timing: &ProtocolTiming,
        now: f64,
    ) -> RidOutcome {
        let msg = match decode_message(&env.payload) {
            Ok(Message::RidState(m)) => m,
            _ => return RidOutcome::Ignored(IgnoreReason::Malformed),
        };
        if self.routestate != Routestate::Idle {
            return RidOutcome::Ignored(IgnoreReason::Inconsistent);
        }
        let lid = match self.check_consistency(&msg) {
            Ok(l) => l,
            Err(r) => return RidOutcome::Ignored(r),
        };
        if let Err(e) = verify_envelope(env, anchors, now) {
            return RidOutcome::Ignored(e.into());
        }
        if !matches!(env.certificate.subject, CertSubject::Infrastructure(_)) {
            return RidOutcome::Ignored(IgnoreReason::CertError);
        }

        self.hsm.advance_clock(now);
        if self.pool.unused() == 0 {
            let more = ca
                .issue_pseudonyms(&self.credential, &self.hsm, self.pseudonym_batch, now)
                .expect("registered vehicle re-authenticates");
            self.pool.extend(more);
            self.reissues += 1;
        }
        let pseudonym = self
            .pool
            .rotate(msg.rid)
            .expect("pool refilled above")
            .public_key;
        self.transition(Routestate::Onroad);
        self.rid = Some(msg.rid);
        self.lid_estimate = lid;
        self.mrsu = Some(msg.mrsu);
        self.dist = 0.0;
        self.path
            .reset((msg.rid, lid.unwrap_or(LaneId(0))));
        self.next_status = now + timing.status_period;
        self.parking_sent = 0;
        RidOutcome::Accepted {
            rid: msg.rid,
            lid,
            pseudonym,
        }
    }

    /// Emits the periodic status report when one is due.
    pub fn status_tick(&mut self, now: f64, timing: &ProtocolTiming) -> Option<SignedEnvelope> {
        if self.routestate == Routestate::Idle || now + 1e-9 < self.next_status {
            return None;
        }
        if self.routestate == Routestate::Parking && self.parking_sent >= timing.parking_reports {
            return None;
        }
        let rid = self.rid.expect("onroad vehicle knows its segment");
        let active = self.pool.active().expect("onroad vehicle has a pseudonym");
        debug_assert_eq!(active.used_on_segment, Some(rid));
        let locator = match self.variant {
            Variant::S1 => Locator::Lane {
                lid: self.lid_estimate.unwrap_or(LaneId(0)),
                dist: self.dist,
            },
            Variant::S2 => Locator::Position(self.pos),
        };
        let msg = Message::VeState(VeStateMsg {
            rid,
            mrsu: self.mrsu.expect("onroad vehicle knows its main RSU"),
            locator,
            speed: self.speed,
            state: self.routestate,
            vtype: self.vtype,
        });
        self.hsm.advance_clock(now);
        let env = self
            .hsm
            .sign(active.key_ref, &encode_message(&msg))
            .expect("active pseudonym is held by the HSM");
        self.next_status = now + timing.status_period;
        if self.routestate == Routestate::Parking {
            self.parking_sent += 1;
        }
        Some(env)
    }

    /// Onroad bookkeeping after the simulator moved the vehicle.
    pub fn update_motion(&mut self, speed: f64, dt: f64, dist_cap: f64) {
        assert!(dt > 0.0, "dt must be positive");
        self.speed = speed;
        if self.routestate == Routestate::Onroad {
            self.dist = (self.dist + speed * dt).min(dist_cap.max(self.dist));
        }
    }

    /// The vehicle left its segment past the end RSU.
    pub fn exit_segment(&mut self) {
        self.transition(Routestate::Idle);
        self.rid = None;
        self.mrsu = None;
        self.next_status = f64::INFINITY;
    }

    pub fn park(&mut self, now: f64) {
        self.transition(Routestate::Parking);
        self.parking_sent = 0;
        self.next_status = now;
    }

    pub fn unpark(&mut self, now: f64, timing: &ProtocolTiming) {
        self.transition(Routestate::Onroad);
        self.next_status = now + timing.status_period;
    }
}

/// A secondary roadside unit at one end of a segment.
pub struct RsuAgent {
    pub id: AgentId,
    pub rid: SegmentId,
    pub pos: Point,
    pub range: f64,
    hsm: Hsm,
    announcement: Vec<u8>,
    gate_window: Option<f64>,
    last_detection: Option<f64>,
}

impl std::fmt::Debug for RsuAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RsuAgent")
            .field("id", &self.id)
            .field("rid", &self.rid)
            .field("pos", &self.pos)
            .finish()
    }
}

impl RsuAgent {
    /// `gate_window` enables arrival-gated broadcasting for that many seconds
    /// after each detection; `None` broadcasts on every tick.
    pub fn new(
        id: AgentId,
        pos: Point,
        range: f64,
        hsm: Hsm,
        msg: RidStateMsg,
        gate_window: Option<f64>,
    ) -> Self {
        Self {
            id,
            rid: msg.rid,
            pos,
            range,
            hsm,
            announcement: encode_message(&Message::RidState(msg)),
            gate_window,
            last_detection: None,
        }
    }

    pub fn hsm(&self) -> &Hsm {
        &self.hsm
    }

    pub fn notify_arrival(&mut self, now: f64) {
        self.last_detection = Some(now);
    }

    /// Called every broadcast period.
    pub fn broadcast_tick(&mut self, now: f64) -> Option<SignedEnvelope> {
        if let Some(window) = self.gate_window {
            match self.last_detection {
                Some(t) if now >= t && now - t <= window => {}
                _ => return None,
            }
        }
        self.hsm.advance_clock(now);
        Some(
            self.hsm
                .sign(KeyRef::LongTerm, &self.announcement)
                .expect("RSU holds a certified long-term key"),
        )
    }

    /// Signals that the vehicle using `pseudonym` left the segment.
    pub fn exit_signal(&self, pseudonym: PublicKey, now: f64) -> SignedEnvelope {
        self.hsm.advance_clock(now);
        let msg = Message::Exit(ExitSignal {
            pseudonym,
            rid: self.rid,
        });
        self.hsm
            .sign(KeyRef::LongTerm, &encode_message(&msg))
            .expect("RSU holds a certified long-term key")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AngleInterval, NeighborEntry};
    use crate::identity::CaId;

    fn nb() -> NeighborTable {
        NeighborTable::new(vec![NeighborEntry {
            from_rid: SegmentId(1),
            from_lid: LaneId(1),
            interval: AngleInterval::new(-5.0, 5.0),
            to_lid: LaneId(1),
        }])
    }

    struct Fixture {
        ca: CertificateAuthority,
        rsu: RsuAgent,
        timing: ProtocolTiming,
    }

    fn fixture(gate: Option<f64>, info: SegmentInfo) -> Fixture {
        let ca = CertificateAuthority::from_seed(CaId(1), 1);
        let hsm = Hsm::from_seed(2);
        ca.register_infrastructure(AgentId(100), &hsm, 0.0).unwrap();
        let rsu = RsuAgent::new(
            AgentId(100),
            Point::new(5.0, 0.0),
            7.0,
            hsm,
            RidStateMsg {
                rid: SegmentId(2),
                info,
                mrsu: AgentId(200),
            },
            gate,
        );
        Fixture {
            ca,
            rsu,
            timing: ProtocolTiming::default(),
        }
    }

    fn vehicle(f: &Fixture, variant: Variant, batch: usize) -> VehicleAgent {
        let mut v = VehicleAgent::new(
            AgentId(1),
            "VE-1".into(),
            variant,
            VehicleType::Normal,
            &f.ca,
            Hsm::from_seed(3),
            batch,
            (SegmentId(1), LaneId(1)),
            0.0,
            0.0,
        )
        .unwrap();
        v.path.points.push(Point::new(12.0, 0.0));
        v
    }

    #[test]
    fn ungated_rsu_broadcasts_every_tick() {
        let mut f = fixture(None, SegmentInfo::Neighbors(nb()));
        let n = (0..3).filter_map(|t| f.rsu.broadcast_tick(t as f64)).count();
        assert_eq!(n, 3);
    }

    #[test]
    fn gated_rsu_broadcasts_only_inside_window() {
        let mut f = fixture(Some(3.0), SegmentInfo::Neighbors(nb()));
        assert!(f.rsu.broadcast_tick(5.0).is_none());
        f.rsu.notify_arrival(10.0);
        let env = f.rsu.broadcast_tick(11.0).unwrap();
        assert_eq!(env.timestamp, 11.0);
        assert!(f.rsu.broadcast_tick(14.0).is_none());
    }

    #[test]
    fn consistent_valid_broadcast_is_accepted() {
        let mut f = fixture(None, SegmentInfo::Neighbors(nb()));
        let mut v = vehicle(&f, Variant::S1, 5);
        v.dist = 42.0;
        let env = f.rsu.broadcast_tick(10.0).unwrap();
        let anchors = f.ca.anchors(5.0);
        let out = v.handle_rid_state(&env, &anchors, &f.ca, &f.timing, 10.0);
        let RidOutcome::Accepted { rid, lid, pseudonym } = out else {
            panic!("expected acceptance, got {out:?}");
        };
        assert_eq!((rid, lid), (SegmentId(2), Some(LaneId(1))));
        assert_eq!(v.dist(), 0.0);
        assert_eq!(v.routestate(), Routestate::Onroad);
        assert_eq!(v.active_pseudonym(), Some(pseudonym));
        assert_eq!(v.pool().active().unwrap().used_on_segment, Some(SegmentId(2)));
        assert_eq!(v.mrsu(), Some(AgentId(200)));
    }

    #[test]
    fn s2_vehicle_outside_extent_is_inconsistent() {
        let rect = Rect::new(Point::new(0.0, -7.0), Point::new(100.0, 7.0));
        let mut f = fixture(None, SegmentInfo::Extent(rect));
        let mut v = vehicle(&f, Variant::S2, 5);
        v.pos = Point::new(150.0, 0.0);
        let env = f.rsu.broadcast_tick(1.0).unwrap();
        let anchors = f.ca.anchors(5.0);
        assert_eq!(
            v.handle_rid_state(&env, &anchors, &f.ca, &f.timing, 1.0),
            RidOutcome::Ignored(IgnoreReason::Inconsistent)
        );
        v.pos = Point::new(50.0, 1.0);
        assert!(matches!(
            v.handle_rid_state(&env, &anchors, &f.ca, &f.timing, 1.0),
            RidOutcome::Accepted { lid: None, .. }
        ));
    }

    #[test]
    fn stale_replayed_broadcast_is_ignored() {
        let mut f = fixture(None, SegmentInfo::Neighbors(nb()));
        let mut v = vehicle(&f, Variant::S1, 5);
        let env = f.rsu.broadcast_tick(0.0).unwrap();
        let anchors = f.ca.anchors(5.0);
        assert_eq!(
            v.handle_rid_state(&env, &anchors, &f.ca, &f.timing, 6.0),
            RidOutcome::Ignored(IgnoreReason::StaleTimestamp)
        );
        assert_eq!(v.routestate(), Routestate::Idle);
    }

    #[test]
    fn unknown_origin_is_inconsistent_and_unmatched_angle_falls_back() {
        let mut f = fixture(None, SegmentInfo::Neighbors(nb()));
        let anchors = f.ca.anchors(5.0);
        let env = f.rsu.broadcast_tick(0.0).unwrap();
        let mut v = vehicle(&f, Variant::S1, 5);
        v.path.origin_ref = (SegmentId(9), LaneId(1));
        assert_eq!(
            v.handle_rid_state(&env, &anchors, &f.ca, &f.timing, 0.0),
            RidOutcome::Ignored(IgnoreReason::Inconsistent)
        );
        v.path.origin_ref = (SegmentId(1), LaneId(1));
        v.path.points = vec![Point::ORIGIN, Point::new(0.0, 10.0)];
        assert!(matches!(
            v.handle_rid_state(&env, &anchors, &f.ca, &f.timing, 0.0),
            RidOutcome::Accepted { lid: Some(LaneId(1)), .. }
        ));
        assert_eq!(v.unclassified_fallbacks, 1);
    }

    #[test]
    fn status_reports_follow_period_and_state() {
        let mut f = fixture(None, SegmentInfo::Neighbors(nb()));
        let anchors = f.ca.anchors(5.0);
        let mut v = vehicle(&f, Variant::S1, 5);
        assert!(v.status_tick(0.0, &f.timing).is_none(), "idle vehicles stay silent");
        let env = f.rsu.broadcast_tick(0.0).unwrap();
        v.handle_rid_state(&env, &anchors, &f.ca, &f.timing, 0.0);
        let mut stamps = Vec::new();
        for k in 1..=20 {
            let t = k as f64 * 0.5;
            if let Some(e) = v.status_tick(t, &f.timing) {
                stamps.push(e.timestamp);
            }
        }
        assert_eq!(stamps, vec![2.0, 4.0, 6.0, 8.0, 10.0]);

        v.park(10.5);
        let mut parked = 0;
        for k in 21..60 {
            if let Some(e) = v.status_tick(k as f64 * 0.5, &f.timing) {
                let Message::VeState(m) = decode_message(&e.payload).unwrap() else {
                    panic!()
                };
                assert_eq!(m.state, Routestate::Parking);
                parked += 1;
            }
        }
        assert_eq!(parked, 3);
    }

    #[test]
    fn motion_accumulates_and_clamps_dist() {
        let mut f = fixture(None, SegmentInfo::Neighbors(nb()));
        let anchors = f.ca.anchors(5.0);
        let mut v = vehicle(&f, Variant::S1, 5);
        let env = f.rsu.broadcast_tick(0.0).unwrap();
        v.handle_rid_state(&env, &anchors, &f.ca, &f.timing, 0.0);
        v.update_motion(10.0, 1.0, 900.0);
        assert_eq!(v.dist(), 10.0);
        v.update_motion(0.0, 1.0, 900.0);
        assert_eq!(v.dist(), 10.0);
        for _ in 0..60 {
            v.update_motion(15.0, 1.0, 900.0);
        }
        assert_eq!(v.dist(), 900.0);
    }

    #[test]
    fn pool_is_refilled_when_exhausted() {
        let mut f = fixture(None, SegmentInfo::Neighbors(nb()));
        let anchors = f.ca.anchors(5.0);
        let mut v = vehicle(&f, Variant::S1, 1);
        let mut keys = Vec::new();
        for t in 0..3 {
            let env = f.rsu.broadcast_tick(t as f64).unwrap();
            v.path.origin_ref = (SegmentId(1), LaneId(1));
            v.path.points = vec![Point::ORIGIN, Point::new(10.0, 0.0)];
            let RidOutcome::Accepted { pseudonym, .. } =
                v.handle_rid_state(&env, &anchors, &f.ca, &f.timing, t as f64)
            else {
                panic!("accept");
            };
            keys.push(pseudonym);
            v.exit_segment();
        }
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 3);
        assert_eq!(v.reissues, 2);
    }

    #[test]
    #[should_panic(expected = "illegal routestate transition")]
    fn idle_vehicle_cannot_park() {
        let f = fixture(None, SegmentInfo::Neighbors(nb()));
        let mut v = vehicle(&f, Variant::S1, 1);
        v.park(0.0);
    }

    #[test]
    fn exit_signal_carries_pseudonym() {
        let f = fixture(None, SegmentInfo::Neighbors(nb()));
        let key = PublicKey([7; 32]);
        let env = f.rsu.exit_signal(key, 3.0);
        assert_eq!(
            decode_message(&env.payload).unwrap(),
            Message::Exit(ExitSignal {
                pseudonym: key,
                rid: SegmentId(2)
            })
        );
    }

    fn sample_messages() -> Vec<Message> {
        vec![
            Message::RidState(RidStateMsg {
                rid: SegmentId(3),
                info: SegmentInfo::Neighbors(nb()),
                mrsu: AgentId(9),
            }),
            Message::RidState(RidStateMsg {
                rid: SegmentId(3),
                info: SegmentInfo::Extent(Rect::new(Point::new(0.0, 0.0), Point::new(5.0, 2.0))),
                mrsu: AgentId(9),
            }),
            Message::VeState(VeStateMsg {
                rid: SegmentId(3),
                mrsu: AgentId(9),
                locator: Locator::Lane {
                    lid: LaneId(2),
                    dist: 17.25,
                },
                speed: 3.5,
                state: Routestate::Onroad,
                vtype: VehicleType::EmergencyActive,
            }),
            Message::Exit(ExitSignal {
                pseudonym: PublicKey([1; 32]),
                rid: SegmentId(4),
            }),
        ]
    }

    #[test]
    fn messages_round_trip_and_reject_truncation() {
        for m in sample_messages() {
            let bytes = encode_message(&m);
            assert_eq!(decode_message(&bytes).unwrap(), m);
            assert!(matches!(
                decode_message(&bytes[..bytes.len() - 1]),
                Err(ProtocolError::MalformedBytes(_))
            ));
            let mut extra = bytes.clone();
            extra.push(0);
            assert!(decode_message(&extra).is_err());
        }
    }

    #[test]
    fn equal_messages_encode_identically() {
        let a = Message::VeState(VeStateMsg {
            rid: SegmentId(1),
            mrsu: AgentId(2),
            locator: Locator::Position(Point::new(-0.0, 1.0)),
            speed: 0.0,
            state: Routestate::Onroad,
            vtype: VehicleType::Normal,
        });
        let mut b = a.clone();
        if let Message::VeState(m) = &mut b {
            m.locator = Locator::Position(Point::new(0.0, 1.0));
            m.speed = -0.0;
        }
        assert_eq!(encode_message(&a), encode_message(&b));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn ve_state() -> impl Strategy<Value = Message> {
            (
                1u32..100,
                1u32..100,
                prop_oneof![
                    (1u32..5, 0.0f64..2000.0).prop_map(|(l, d)| Locator::Lane { lid: LaneId(l), dist: d }),
                    (-1e4f64..1e4, -1e4f64..1e4).prop_map(|(x, y)| Locator::Position(Point::new(x, y))),
                ],
                0.0f64..40.0,
                0u8..3,
                0u8..3,
            )
                .prop_map(|(rid, mrsu, locator, speed, s, t)| {
                    Message::VeState(VeStateMsg {
                        rid: SegmentId(rid),
                        mrsu: AgentId(mrsu),
                        locator,
                        speed,
                        state: routestate_from(s).unwrap(),
                        vtype: vtype_from(t).unwrap(),
                    })
                })
        }

        proptest! {
            #[test]
            fn decode_inverts_encode(m in ve_state()) {
                prop_assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
            }

            #[test]
            fn encoding_is_injective(a in ve_state(), b in ve_state()) {
                prop_assert_eq!(a == b, encode_message(&a) == encode_message(&b));
            }

            #[test]
            fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..80)) {
                let _ = decode_message(&bytes);
            }
        }
    }
}
