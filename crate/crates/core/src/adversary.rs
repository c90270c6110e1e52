//! Attack injections: replay, forgery, flooding, jamming and a certified
//! botnet. Attackers control the radio medium (capture, inject, jam) but
//! cannot open honest HSMs.

use ed25519_dalek::{Signer, SigningKey};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::detection::CongestionAlert;
use crate::geometry::{LaneId, Point, SegmentId};
use crate::identity::{
    CaId, CertSubject, Certificate, CertificateAuthority, Hsm, IdentityError, LongTermCredential, PseudonymPool,
    PublicKey, SignedEnvelope,
};
use crate::protocol::{encode_message, ExitSignal, Locator, Message, Routestate, VeStateMsg, VehicleType};
use crate::AgentId;

fn default_fast_delay() -> f64 {
    0.1
}

fn default_half() -> u32 {
    500
}

fn default_forge_count() -> u32 {
    1000
}

fn default_rate() -> f64 {
    20.0
}

fn default_targets() -> Vec<ForgeTarget> {
    vec![ForgeTarget::Status, ForgeTarget::Alert, ForgeTarget::Exit]
}

/// What a forged envelope pretends to be.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeTarget {
    /// A vehicle status report to the main RSU.
    Status,
    /// A congestion alert to a base station.
    Alert,
    /// An exit signal to the main RSU.
    Exit,
}

/// How a forged envelope is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeMode {
    /// Certificate issued by the attacker's own CA key.
    Uncertified,
    /// A genuine certificate captured from the medium, signed with the attacker's key.
    Mismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversaryConfig {
    /// Captures status reports sent to the segment's main RSU and replays them:
    /// `stale` of them after the freshness window, `fast` of them almost at once.
    Replay {
        rid: u32,
        start: f64,
        #[serde(default = "default_half")]
        stale: u32,
        #[serde(default = "default_half")]
        fast: u32,
        /// Delay of stale replays; defaults to the freshness window plus one second.
        #[serde(default)]
        stale_delay: Option<f64>,
        #[serde(default = "default_fast_delay")]
        fast_delay: f64,
    },
    /// Injects envelopes signed without a certified key, alternating modes.
    Forge {
        rid: u32,
        start: f64,
        #[serde(default = "default_forge_count")]
        count: u32,
        #[serde(default = "default_rate")]
        rate: f64,
        #[serde(default = "default_targets")]
        targets: Vec<ForgeTarget>,
    },
    /// Floods the segment's main RSU with invalid envelopes.
    DosFlood { rid: u32, start: f64, duration: f64, rate: f64 },
    /// Suppresses radio reception inside a disc. Either `center` or the main RSU
    /// of `target_rid` fixes the disc's center.
    Jam {
        #[serde(default)]
        center: Option<[f64; 2]>,
        #[serde(default)]
        target_rid: Option<u32>,
        radius: f64,
        start: f64,
        duration: f64,
    },
    /// Certified but compromised vehicles reporting a stationary cluster.
    Botnet {
        rid: u32,
        #[serde(default)]
        lid: Option<u32>,
        /// Lane coordinate of the fake cluster.
        location: f64,
        members: u32,
        start: f64,
        duration: f64,
    },
}

impl AdversaryConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AdversaryConfig::Replay { .. } => "replay",
            AdversaryConfig::Forge { .. } => "forge",
            AdversaryConfig::DosFlood { .. } => "dos_flood",
            AdversaryConfig::Jam { .. } => "jam",
            AdversaryConfig::Botnet { .. } => "botnet",
        }
    }

    pub fn start(&self) -> f64 {
        match self {
            AdversaryConfig::Replay { start, .. }
            | AdversaryConfig::Forge { start, .. }
            | AdversaryConfig::DosFlood { start, .. }
            | AdversaryConfig::Jam { start, .. }
            | AdversaryConfig::Botnet { start, .. } => *start,
        }
    }

    pub fn target_rid(&self) -> Option<SegmentId> {
        match self {
            AdversaryConfig::Replay { rid, .. }
            | AdversaryConfig::Forge { rid, .. }
            | AdversaryConfig::DosFlood { rid, .. }
            | AdversaryConfig::Botnet { rid, .. } => Some(SegmentId(*rid)),
            AdversaryConfig::Jam { target_rid, .. } => target_rid.map(SegmentId),
        }
    }
}

/// A verbatim envelope recorded from the medium.
#[derive(Clone, Debug, PartialEq)]
pub struct CapturedEnvelope {
    pub envelope: SignedEnvelope,
    pub captured_at: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayKind {
    Stale,
    Fast,
}

/// Capture state of a replay attacker.
#[derive(Clone, Debug)]
pub struct ReplayAttacker {
    pub rid: SegmentId,
    pub start: f64,
    stale_left: u32,
    fast_left: u32,
    stale_delay: f64,
    fast_delay: f64,
    captured: u64,
}

impl ReplayAttacker {
    pub fn new(rid: SegmentId, start: f64, stale: u32, fast: u32, stale_delay: f64, fast_delay: f64) -> Self {
        Self {
            rid,
            start,
            stale_left: stale,
            fast_left: fast,
            stale_delay,
            fast_delay,
            captured: 0,
        }
    }

    pub fn done(&self) -> bool {
        self.stale_left == 0 && self.fast_left == 0
    }

    /// Records a captured envelope and plans its replay, alternating stale
    /// and fast replays while both budgets last.
    pub fn on_capture(&mut self, envelope: &SignedEnvelope, now: f64) -> Option<(f64, ReplayKind, CapturedEnvelope)> {
        if now < self.start || self.done() {
            return None;
        }
        let prefer_stale = self.captured % 2 == 0;
        let kind = match (prefer_stale, self.stale_left > 0, self.fast_left > 0) {
            (true, true, _) | (false, true, false) => ReplayKind::Stale,
            _ => ReplayKind::Fast,
        };
        self.captured += 1;
        let delay = match kind {
            ReplayKind::Stale => {
                self.stale_left -= 1;
                self.stale_delay
            }
            ReplayKind::Fast => {
                self.fast_left -= 1;
                self.fast_delay
            }
        };
        Some((
            now + delay,
            kind,
            CapturedEnvelope {
                envelope: envelope.clone(),
                captured_at: now,
            },
        ))
    }
}

/// Builds envelopes no honest key signed.
pub struct Forger {
    key: SigningKey,
    fake_ca: SigningKey,
}

impl std::fmt::Debug for Forger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Forger")
            .field("key", &PublicKey(self.key.verifying_key().to_bytes()))
            .finish()
    }
}

impl Forger {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut a = [0u8; 32];
        let mut b = [0u8; 32];
        rng.fill_bytes(&mut a);
        rng.fill_bytes(&mut b);
        Self {
            key: SigningKey::from_bytes(&a),
            fake_ca: SigningKey::from_bytes(&b),
        }
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.key.verifying_key().to_bytes())
    }

    fn sign(&self, payload: Vec<u8>, timestamp: f64, certificate: Certificate) -> SignedEnvelope {
        let signature = self
            .key
            .sign(&SignedEnvelope::signing_input(&payload, timestamp))
            .to_bytes();
        SignedEnvelope {
            payload,
            timestamp,
            signature,
            certificate,
        }
    }

    /// Self-consistent envelope under a certificate the attacker issued itself,
    /// claiming the honest CA's id.
    pub fn uncertified(&self, payload: Vec<u8>, subject: CertSubject, claimed_issuer: CaId, now: f64) -> SignedEnvelope {
        let mut cert = Certificate {
            subject_key: self.public_key(),
            subject,
            issuer: claimed_issuer,
            not_before: now - 1.0,
            not_after: now + 3600.0,
            signature: [0; 64],
        };
        cert.signature = self.fake_ca.sign(&cert.tbs_bytes()).to_bytes();
        self.sign(payload, now, cert)
    }

    /// Envelope carrying a genuine certificate but signed with the attacker's key.
    pub fn mismatched(&self, payload: Vec<u8>, captured: &Certificate, now: f64) -> SignedEnvelope {
        self.sign(payload, now, captured.clone())
    }

    pub fn forge(&self, mode: ForgeMode, payload: Vec<u8>, subject: CertSubject, captured: &Certificate, now: f64) -> SignedEnvelope {
        match mode {
            ForgeMode::Uncertified => self.uncertified(payload, subject, captured.issuer, now),
            ForgeMode::Mismatch => self.mismatched(payload, captured, now),
        }
    }
}

/// Plausible payloads for forged envelopes.
pub fn forged_payload(target: ForgeTarget, rid: SegmentId, mrsu: AgentId, lid: LaneId, at: Point, now: f64) -> Vec<u8> {
    let msg = match target {
        ForgeTarget::Status => Message::VeState(VeStateMsg {
            rid,
            mrsu,
            locator: Locator::Lane { lid, dist: 100.0 },
            speed: 0.0,
            state: Routestate::Onroad,
            vtype: VehicleType::Normal,
        }),
        ForgeTarget::Alert => Message::Alert(CongestionAlert {
            rid,
            mrsu,
            lane: Some(lid),
            center: 100.0,
            vehicle_count: 9,
            includes_emergency: true,
            timestamp: now,
            positions: vec![at],
            members: Vec::new(),
        }),
        ForgeTarget::Exit => Message::Exit(ExitSignal {
            pseudonym: PublicKey([0xAB; 32]),
            rid,
        }),
    };
    encode_message(&msg)
}

/// Disc in which radio reception fails during an interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JamRegion {
    pub center: Point,
    pub radius: f64,
    pub start: f64,
    pub end: f64,
}

impl JamRegion {
    pub fn covers(&self, p: Point, t: f64) -> bool {
        t >= self.start && t < self.end && p.dist(self.center) <= self.radius
    }
}

/// A compromised vehicle: genuine HSM and certificates, falsified reports.
pub struct BotnetMember {
    pub vehicle_id: String,
    hsm: Hsm,
    pool: PseudonymPool,
    _credential: LongTermCredential,
}

impl std::fmt::Debug for BotnetMember {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BotnetMember").field("vehicle_id", &self.vehicle_id).finish()
    }
}

impl BotnetMember {
    /// Registers like an honest vehicle and activates a pseudonym for `rid`.
    pub fn enlist(vehicle_id: String, ca: &CertificateAuthority, hsm: Hsm, rid: SegmentId, now: f64) -> Result<Self, IdentityError> {
        hsm.advance_clock(now);
        let credential = ca.register_vehicle(&vehicle_id, &hsm, now)?;
        let mut pool = PseudonymPool::new(ca.issue_pseudonyms(&credential, &hsm, 1, now)?);
        pool.rotate(rid)?;
        Ok(Self {
            vehicle_id,
            hsm,
            pool,
            _credential: credential,
        })
    }

    pub fn pseudonym(&self) -> PublicKey {
        self.pool.active().expect("enlisted member has a pseudonym").public_key
    }

    /// A correctly signed report of a stationary vehicle at `locator`.
    pub fn report(&self, rid: SegmentId, mrsu: AgentId, locator: Locator, now: f64) -> SignedEnvelope {
        self.hsm.advance_clock(now);
        let active = self.pool.active().expect("enlisted member has a pseudonym");
        let msg = Message::VeState(VeStateMsg {
            rid,
            mrsu,
            locator,
            speed: 0.0,
            state: Routestate::Onroad,
            vtype: VehicleType::Normal,
        });
        self.hsm
            .sign(active.key_ref, &encode_message(&msg))
            .expect("member HSM holds its pseudonym")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{verify_envelope, VerifyError};

    fn ca() -> CertificateAuthority {
        CertificateAuthority::from_seed(CaId(1), 42)
    }

    #[test]
    fn forged_envelopes_fail_with_the_right_reason() {
        let ca = ca();
        let anchors = ca.anchors(5.0);
        let rsu = Hsm::from_seed(3);
        let cert = ca.register_infrastructure(AgentId(7), &rsu, 0.0).unwrap();
        let forger = Forger::from_seed(9);
        let payload = forged_payload(ForgeTarget::Status, SegmentId(1), AgentId(2), LaneId(1), Point::ORIGIN, 10.0);
        let a = forger.forge(ForgeMode::Uncertified, payload.clone(), CertSubject::Pseudonym, &cert, 10.0);
        assert_eq!(verify_envelope(&a, &anchors, 10.0).unwrap_err(), VerifyError::CertError);
        let b = forger.forge(ForgeMode::Mismatch, payload, CertSubject::Pseudonym, &cert, 10.0);
        assert_eq!(verify_envelope(&b, &anchors, 10.0).unwrap_err(), VerifyError::SignatureError);
    }

    #[test]
    fn replay_plan_alternates_and_respects_budgets() {
        let ca = ca();
        let hsm = Hsm::from_seed(1);
        ca.register_infrastructure(AgentId(1), &hsm, 0.0).unwrap();
        let env = hsm.sign(crate::identity::KeyRef::LongTerm, b"x").unwrap();
        let mut r = ReplayAttacker::new(SegmentId(1), 5.0, 2, 1, 6.0, 0.1);
        assert!(r.on_capture(&env, 1.0).is_none());
        let kinds: Vec<_> = (0..5)
            .filter_map(|i| r.on_capture(&env, 10.0 + i as f64))
            .map(|(t, k, c)| {
                assert!(t > c.captured_at);
                k
            })
            .collect();
        assert_eq!(kinds, vec![ReplayKind::Stale, ReplayKind::Fast, ReplayKind::Stale]);
        assert!(r.done());
    }

    #[test]
    fn botnet_reports_verify() {
        let ca = ca();
        let m = BotnetMember::enlist("bot-0".into(), &ca, Hsm::from_seed(5), SegmentId(3), 1.0).unwrap();
        let env = m.report(SegmentId(3), AgentId(4), Locator::Lane { lid: LaneId(1), dist: 40.0 }, 2.0);
        verify_envelope(&env, &ca.anchors(5.0), 2.0).unwrap();
        assert_eq!(env.certificate.subject, CertSubject::Pseudonym);
        assert_eq!(env.signer(), m.pseudonym());
    }

    #[test]
    fn jam_region_is_time_and_space_bounded() {
        let j = JamRegion {
            center: Point::new(0.0, 0.0),
            radius: 10.0,
            start: 5.0,
            end: 15.0,
        };
        assert!(j.covers(Point::new(3.0, 4.0), 5.0));
        assert!(!j.covers(Point::new(3.0, 4.0), 15.0));
        assert!(!j.covers(Point::new(30.0, 0.0), 10.0));
    }
}
