//! Certificate authority, hardware security modules, pseudonym pools and
//! envelope verification with timestamp freshness.
//!
//! Signatures are Ed25519. Every key is generated inside an [`Hsm`] from a
//! seeded ChaCha stream, so a run replays bit-for-bit from its seed. Nothing
//! in this module hands out private key material: callers refer to keys via
//! [`KeyRef`] and only ever receive public keys, certificates and signatures.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Mutex;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SegmentId;
use crate::wire::{DecodeError, Reader, Writer};
use crate::AgentId;

/// Default envelope freshness window in seconds.
pub const DEFAULT_FRESHNESS_WINDOW: f64 = 5.0;
/// Default lifetime of a pseudonym certificate in seconds.
pub const DEFAULT_PSEUDONYM_LIFETIME: f64 = 86_400.0;
const LONG_TERM_LIFETIME: f64 = 1.0e9;
const AUTH_DOMAIN: &[u8] = b"jamalert/ca-auth/v1";

/// An Ed25519 verification key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub fn short(&self) -> String {
        self.0[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.short())
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CaId(pub u32);

/// Who a certificate speaks for. Pseudonym certificates name nobody.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CertSubject {
    Vehicle(String),
    Pseudonym,
    Infrastructure(AgentId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub subject_key: PublicKey,
    pub subject: CertSubject,
    pub issuer: CaId,
    pub not_before: f64,
    pub not_after: f64,
    pub signature: [u8; 64],
}

impl Certificate {
    /// The bytes the issuer signs.
    pub fn tbs_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_tbs(&mut w);
        w.finish()
    }

    fn write_tbs(&self, w: &mut Writer) {
        w.raw(&self.subject_key.0);
        match &self.subject {
            CertSubject::Vehicle(id) => {
                w.u8(1).str(id);
            }
            CertSubject::Pseudonym => {
                w.u8(2);
            }
            CertSubject::Infrastructure(agent) => {
                w.u8(3).u32(agent.0);
            }
        }
        w.u32(self.issuer.0).f64(self.not_before).f64(self.not_after);
    }

    pub fn encode_into(&self, w: &mut Writer) {
        self.write_tbs(w);
        w.raw(&self.signature);
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let subject_key = PublicKey(r.array()?);
        let subject = match r.u8()? {
            1 => CertSubject::Vehicle(r.string()?),
            2 => CertSubject::Pseudonym,
            3 => CertSubject::Infrastructure(AgentId(r.u32()?)),
            t => return Err(DecodeError::BadTag(t)),
        };
        let issuer = CaId(r.u32()?);
        let not_before = r.f64()?;
        let not_after = r.f64()?;
        let signature = r.array()?;
        Ok(Self {
            subject_key,
            subject,
            issuer,
            not_before,
            not_after,
            signature,
        })
    }
}

/// A payload signed by an HSM together with its timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedEnvelope {
    pub payload: Vec<u8>,
    pub timestamp: f64,
    pub signature: [u8; 64],
    pub certificate: Certificate,
}

impl SignedEnvelope {
    /// payload || timestamp, the exact bytes under the signature.
    pub fn signing_input(payload: &[u8], timestamp: f64) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(payload).f64(timestamp);
        w.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.payload).f64(self.timestamp).raw(&self.signature);
        self.certificate.encode_into(&mut w);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let payload = r.bytes()?.to_vec();
        let timestamp = r.f64()?;
        let signature = r.array()?;
        let certificate = Certificate::decode_from(&mut r)?;
        r.finish()?;
        Ok(Self {
            payload,
            timestamp,
            signature,
            certificate,
        })
    }

    pub fn signer(&self) -> PublicKey {
        self.certificate.subject_key
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("vehicle identity {0} already registered")]
    DuplicateIdentity(String),
    #[error("long-term authentication failed")]
    AuthFailure,
    #[error("key reference not held by this HSM")]
    UnknownKeyRef,
    #[error("no unused pseudonym left")]
    PseudonymPoolExhausted,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VerifyError {
    #[error("certificate invalid, untrusted or expired")]
    CertError,
    #[error("signature does not verify")]
    SignatureError,
    #[error("timestamp outside the freshness window")]
    StaleTimestamp,
}

/// Verification keys the verifier trusts plus the freshness window.
#[derive(Clone, Debug)]
pub struct TrustAnchors {
    pub ca_keys: BTreeMap<CaId, PublicKey>,
    pub freshness_window: f64,
}

impl TrustAnchors {
    pub fn new(freshness_window: f64) -> Self {
        assert!(freshness_window > 0.0, "freshness window must be positive");
        Self {
            ca_keys: BTreeMap::new(),
            freshness_window,
        }
    }

    pub fn with_ca(mut self, id: CaId, key: PublicKey) -> Self {
        self.ca_keys.insert(id, key);
        self
    }
}

fn verify_raw(key: &PublicKey, msg: &[u8], sig: &[u8; 64]) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&key.0) else {
        return false;
    };
    vk.verify(msg, &Signature::from_bytes(sig)).is_ok()
}

/// Checks a certificate against the anchors at time `now`.
pub fn verify_certificate(cert: &Certificate, anchors: &TrustAnchors, now: f64) -> Result<(), VerifyError> {
    let ca_key = anchors.ca_keys.get(&cert.issuer).ok_or(VerifyError::CertError)?;
    if !(cert.not_before < cert.not_after) || now < cert.not_before || now > cert.not_after {
        return Err(VerifyError::CertError);
    }
    if !verify_raw(ca_key, &cert.tbs_bytes(), &cert.signature) {
        return Err(VerifyError::CertError);
    }
    Ok(())
}

/// Certificates whose issuer signature already checked out, keyed by their
/// signed bytes and signature, with their decoded subject keys. Validity
/// periods are still checked every time.
#[derive(Clone, Debug, Default)]
pub struct CertCache {
    seen: BTreeMap<(Vec<u8>, [u8; 64]), VerifyingKey>,
}

impl CertCache {
    /// The cache is emptied when it reaches this many entries.
    pub const CAPACITY: usize = 4096;

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// [`verify_certificate`] that skips the issuer signature for certificates
/// already in `cache`. Returns the decoded subject key.
pub fn verify_certificate_cached(
    cert: &Certificate,
    anchors: &TrustAnchors,
    now: f64,
    cache: &mut CertCache,
) -> Result<VerifyingKey, VerifyError> {
    let ca_key = anchors.ca_keys.get(&cert.issuer).ok_or(VerifyError::CertError)?;
    if !(cert.not_before < cert.not_after) || now < cert.not_before || now > cert.not_after {
        return Err(VerifyError::CertError);
    }
    let key = (cert.tbs_bytes(), cert.signature);
    if let Some(vk) = cache.seen.get(&key) {
        return Ok(*vk);
    }
    if !verify_raw(ca_key, &key.0, &cert.signature) {
        return Err(VerifyError::CertError);
    }
    // An undecodable subject key can never verify a body signature.
    let vk = VerifyingKey::from_bytes(&cert.subject_key.0).map_err(|_| VerifyError::SignatureError)?;
    if cache.seen.len() >= CertCache::CAPACITY {
        cache.seen.clear();
    }
    cache.seen.insert(key, vk);
    Ok(vk)
}

/// Returns the payload iff the certificate chains to an anchor and is valid
/// at `now`, the signature covers payload and timestamp, and the timestamp is
/// within the freshness window.
pub fn verify_envelope<'a>(
    env: &'a SignedEnvelope,
    anchors: &TrustAnchors,
    now: f64,
) -> Result<&'a [u8], VerifyError> {
    verify_certificate(&env.certificate, anchors, now)?;
    verify_body(env, anchors, now)
}

/// [`verify_envelope`] with a certificate cache.
pub fn verify_envelope_cached<'a>(
    env: &'a SignedEnvelope,
    anchors: &TrustAnchors,
    now: f64,
    cache: &mut CertCache,
) -> Result<&'a [u8], VerifyError> {
    let vk = verify_certificate_cached(&env.certificate, anchors, now, cache)?;
    let input = SignedEnvelope::signing_input(&env.payload, env.timestamp);
    if vk.verify(&input, &Signature::from_bytes(&env.signature)).is_err() {
        return Err(VerifyError::SignatureError);
    }
    check_fresh(env, anchors, now)
}

fn verify_body<'a>(env: &'a SignedEnvelope, anchors: &TrustAnchors, now: f64) -> Result<&'a [u8], VerifyError> {
    let input = SignedEnvelope::signing_input(&env.payload, env.timestamp);
    if !verify_raw(&env.certificate.subject_key, &input, &env.signature) {
        return Err(VerifyError::SignatureError);
    }
    check_fresh(env, anchors, now)
}

fn check_fresh<'a>(env: &'a SignedEnvelope, anchors: &TrustAnchors, now: f64) -> Result<&'a [u8], VerifyError> {
    if (now - env.timestamp).abs() > anchors.freshness_window {
        return Err(VerifyError::StaleTimestamp);
    }
    Ok(&env.payload)
}

/// Handle to a key stored inside an HSM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyRef {
    LongTerm,
    Pseudonym(u32),
}

struct HeldKey {
    signing: SigningKey,
    certificate: Option<Certificate>,
}

struct HsmInner {
    clock: f64,
    keys: BTreeMap<KeyRef, HeldKey>,
    next_pseudonym: u32,
    rng: ChaCha20Rng,
}

/// Tamper-resistant key store and secure time source.
pub struct Hsm {
    inner: Mutex<HsmInner>,
}

impl fmt::Debug for Hsm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.lock().expect("hsm lock");
        f.debug_struct("Hsm")
            .field("clock", &inner.clock)
            .field("keys", &inner.keys.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Hsm {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: Mutex::new(HsmInner {
                clock: 0.0,
                keys: BTreeMap::new(),
                next_pseudonym: 0,
                rng: ChaCha20Rng::seed_from_u64(seed),
            }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HsmInner> {
        self.inner.lock().expect("hsm lock poisoned")
    }

    pub fn clock(&self) -> f64 {
        self.lock().clock
    }

    /// Moves the secure clock forward; it never runs backwards.
    pub fn advance_clock(&self, t: f64) {
        let mut inner = self.lock();
        if t > inner.clock {
            inner.clock = t;
        }
    }

    fn fresh_key(inner: &mut HsmInner) -> SigningKey {
        let mut seed = [0u8; 32];
        inner.rng.fill_bytes(&mut seed);
        SigningKey::from_bytes(&seed)
    }

    /// Generates (or replaces) the long-term key pair and returns its public half.
    pub fn generate_long_term(&self) -> PublicKey {
        let mut inner = self.lock();
        let key = Self::fresh_key(&mut inner);
        let pk = PublicKey(key.verifying_key().to_bytes());
        inner.keys.insert(
            KeyRef::LongTerm,
            HeldKey {
                signing: key,
                certificate: None,
            },
        );
        pk
    }

    /// Generates `count` fresh short-term key pairs.
    pub fn generate_pseudonym_keys(&self, count: usize) -> Vec<(KeyRef, PublicKey)> {
        let mut inner = self.lock();
        (0..count)
            .map(|_| {
                let key = Self::fresh_key(&mut inner);
                let pk = PublicKey(key.verifying_key().to_bytes());
                let r = KeyRef::Pseudonym(inner.next_pseudonym);
                inner.next_pseudonym += 1;
                inner.keys.insert(
                    r,
                    HeldKey {
                        signing: key,
                        certificate: None,
                    },
                );
                (r, pk)
            })
            .collect()
    }

    pub fn public_key(&self, key_ref: KeyRef) -> Option<PublicKey> {
        self.lock()
            .keys
            .get(&key_ref)
            .map(|k| PublicKey(k.signing.verifying_key().to_bytes()))
    }

    pub fn install_certificate(&self, key_ref: KeyRef, cert: Certificate) -> Result<(), IdentityError> {
        let mut inner = self.lock();
        let held = inner.keys.get_mut(&key_ref).ok_or(IdentityError::UnknownKeyRef)?;
        if cert.subject_key.0 != held.signing.verifying_key().to_bytes() {
            return Err(IdentityError::AuthFailure);
        }
        held.certificate = Some(cert);
        Ok(())
    }

    /// Signs `payload` under `key_ref`, stamped with the current secure time.
    pub fn sign(&self, key_ref: KeyRef, payload: &[u8]) -> Result<SignedEnvelope, IdentityError> {
        let inner = self.lock();
        let held = inner.keys.get(&key_ref).ok_or(IdentityError::UnknownKeyRef)?;
        let certificate = held.certificate.clone().ok_or(IdentityError::UnknownKeyRef)?;
        let timestamp = inner.clock;
        let signature = held
            .signing
            .sign(&SignedEnvelope::signing_input(payload, timestamp))
            .to_bytes();
        Ok(SignedEnvelope {
            payload: payload.to_vec(),
            timestamp,
            signature,
            certificate,
        })
    }

    /// Answers a CA authentication challenge under `key_ref`.
    pub fn sign_challenge(&self, key_ref: KeyRef, challenge: &[u8]) -> Result<[u8; 64], IdentityError> {
        let inner = self.lock();
        let held = inner.keys.get(&key_ref).ok_or(IdentityError::UnknownKeyRef)?;
        let mut msg = AUTH_DOMAIN.to_vec();
        msg.extend_from_slice(challenge);
        Ok(held.signing.sign(&msg).to_bytes())
    }

    #[cfg(test)]
    fn secret_material(&self) -> Vec<[u8; 32]> {
        self.lock().keys.values().map(|k| k.signing.to_bytes()).collect()
    }
}

/// Signs `payload` with the HSM key `key_ref`.
pub fn hsm_sign(hsm: &Hsm, key_ref: KeyRef, payload: &[u8]) -> Result<SignedEnvelope, IdentityError> {
    hsm.sign(key_ref, payload)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongTermCredential {
    pub vehicle_id: String,
    pub keypair_ref: KeyRef,
    pub certificate: Certificate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pseudonym {
    pub pseu_index: u32,
    pub key_ref: KeyRef,
    pub public_key: PublicKey,
    pub certificate: Certificate,
    pub used_on_segment: Option<SegmentId>,
}

struct CaState {
    vehicles: BTreeMap<String, PublicKey>,
    infrastructure: BTreeMap<AgentId, PublicKey>,
    linkage: BTreeMap<PublicKey, String>,
    challenge_counter: u64,
}

/// Issues long-term, infrastructure and pseudonym certificates and keeps the
/// private pseudonym-to-vehicle linkage for accountability.
pub struct CertificateAuthority {
    id: CaId,
    signing: SigningKey,
    pseudonym_lifetime: f64,
    state: Mutex<CaState>,
}

impl fmt::Debug for CertificateAuthority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CertificateAuthority")
            .field("id", &self.id)
            .field("public_key", &self.public_key())
            .finish()
    }
}

impl CertificateAuthority {
    pub fn from_seed(id: CaId, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut sk = [0u8; 32];
        rng.fill_bytes(&mut sk);
        Self {
            id,
            signing: SigningKey::from_bytes(&sk),
            pseudonym_lifetime: DEFAULT_PSEUDONYM_LIFETIME,
            state: Mutex::new(CaState {
                vehicles: BTreeMap::new(),
                infrastructure: BTreeMap::new(),
                linkage: BTreeMap::new(),
                challenge_counter: 0,
            }),
        }
    }

    pub fn id(&self) -> CaId {
        self.id
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn anchors(&self, freshness_window: f64) -> TrustAnchors {
        TrustAnchors::new(freshness_window).with_ca(self.id, self.public_key())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, CaState> {
        self.state.lock().expect("ca lock poisoned")
    }

    fn certify(&self, subject_key: PublicKey, subject: CertSubject, not_before: f64, not_after: f64) -> Certificate {
        let mut cert = Certificate {
            subject_key,
            subject,
            issuer: self.id,
            not_before,
            not_after,
            signature: [0; 64],
        };
        cert.signature = self.signing.sign(&cert.tbs_bytes()).to_bytes();
        cert
    }

    /// Registers a vehicle: its HSM generates the long-term pair and the CA
    /// certifies the public half.
    pub fn register_vehicle(&self, vehicle_id: &str, hsm: &Hsm, now: f64) -> Result<LongTermCredential, IdentityError> {
        let mut st = self.lock();
        if st.vehicles.contains_key(vehicle_id) {
            return Err(IdentityError::DuplicateIdentity(vehicle_id.to_string()));
        }
        let pk = hsm.generate_long_term();
        let cert = self.certify(
            pk,
            CertSubject::Vehicle(vehicle_id.to_string()),
            now,
            now + LONG_TERM_LIFETIME,
        );
        hsm.install_certificate(KeyRef::LongTerm, cert.clone())?;
        st.vehicles.insert(vehicle_id.to_string(), pk);
        Ok(LongTermCredential {
            vehicle_id: vehicle_id.to_string(),
            keypair_ref: KeyRef::LongTerm,
            certificate: cert,
        })
    }

    /// Certifies the long-term key of a roadside unit, main RSU or base station.
    pub fn register_infrastructure(&self, agent: AgentId, hsm: &Hsm, now: f64) -> Result<Certificate, IdentityError> {
        let mut st = self.lock();
        if st.infrastructure.contains_key(&agent) {
            return Err(IdentityError::DuplicateIdentity(agent.to_string()));
        }
        let pk = hsm.generate_long_term();
        let cert = self.certify(pk, CertSubject::Infrastructure(agent), now, now + LONG_TERM_LIFETIME);
        hsm.install_certificate(KeyRef::LongTerm, cert.clone())?;
        st.infrastructure.insert(agent, pk);
        Ok(cert)
    }

    /// Runs the pseudonym exchange: the vehicle authenticates with its
    /// long-term key over a fresh challenge, its HSM generates `count` key
    /// pairs, and the CA certifies the public halves.
    pub fn issue_pseudonyms(
        &self,
        credential: &LongTermCredential,
        hsm: &Hsm,
        count: usize,
        now: f64,
    ) -> Result<Vec<Pseudonym>, IdentityError> {
        let challenge = {
            let mut st = self.lock();
            st.challenge_counter += 1;
            let mut w = Writer::new();
            w.u32(self.id.0).u64(st.challenge_counter).str(&credential.vehicle_id);
            w.finish()
        };
        let response = hsm.sign_challenge(credential.keypair_ref, &challenge)?;
        let registered = self
            .lock()
            .vehicles
            .get(&credential.vehicle_id)
            .copied()
            .ok_or(IdentityError::AuthFailure)?;
        let mut msg = AUTH_DOMAIN.to_vec();
        msg.extend_from_slice(&challenge);
        if registered != credential.certificate.subject_key || !verify_raw(&registered, &msg, &response) {
            return Err(IdentityError::AuthFailure);
        }

        let keys = hsm.generate_pseudonym_keys(count);
        let mut out = Vec::with_capacity(count);
        let mut st = self.lock();
        for (key_ref, pk) in keys {
            let cert = self.certify(pk, CertSubject::Pseudonym, now, now + self.pseudonym_lifetime);
            hsm.install_certificate(key_ref, cert.clone())?;
            st.linkage.insert(pk, credential.vehicle_id.clone());
            let KeyRef::Pseudonym(idx) = key_ref else {
                unreachable!("pseudonym keys carry pseudonym refs")
            };
            out.push(Pseudonym {
                pseu_index: idx,
                key_ref,
                public_key: pk,
                certificate: cert,
                used_on_segment: None,
            });
        }
        Ok(out)
    }

    /// Accountability lookup from a pseudonym key to the registered vehicle.
    pub fn resolve(&self, pseudonym: &PublicKey) -> Option<String> {
        self.lock().linkage.get(pseudonym).cloned()
    }
}

/// A vehicle's issued pseudonyms, consumed lowest index first.
#[derive(Clone, Debug, Default)]
pub struct PseudonymPool {
    pseudonyms: Vec<Pseudonym>,
    active: Option<usize>,
}

impl PseudonymPool {
    pub fn new(mut pseudonyms: Vec<Pseudonym>) -> Self {
        pseudonyms.sort_by_key(|p| p.pseu_index);
        Self {
            pseudonyms,
            active: None,
        }
    }

    pub fn extend(&mut self, more: Vec<Pseudonym>) {
        self.pseudonyms.extend(more);
        let active_idx = self.active.map(|i| self.pseudonyms[i].pseu_index);
        self.pseudonyms.sort_by_key(|p| p.pseu_index);
        self.active = active_idx.and_then(|a| self.pseudonyms.iter().position(|p| p.pseu_index == a));
    }

    pub fn unused(&self) -> usize {
        self.pseudonyms.iter().filter(|p| p.used_on_segment.is_none()).count()
    }

    pub fn active(&self) -> Option<&Pseudonym> {
        self.active.map(|i| &self.pseudonyms[i])
    }

    pub fn all(&self) -> &[Pseudonym] {
        &self.pseudonyms
    }

    /// Activates the lowest-index unused pseudonym for `entering`.
    pub fn rotate(&mut self, entering: SegmentId) -> Result<&Pseudonym, IdentityError> {
        let idx = self
            .pseudonyms
            .iter()
            .position(|p| p.used_on_segment.is_none())
            .ok_or(IdentityError::PseudonymPoolExhausted)?;
        self.pseudonyms[idx].used_on_segment = Some(entering);
        self.active = Some(idx);
        Ok(&self.pseudonyms[idx])
    }
}

/// Drops envelopes identical to one already accepted within the freshness window.
#[derive(Debug)]
pub struct ReplayGuard {
    window: f64,
    seen: BTreeMap<[u8; 64], f64>,
    order: VecDeque<([u8; 64], f64)>,
}

impl ReplayGuard {
    pub fn new(window: f64) -> Self {
        Self {
            window,
            seen: BTreeMap::new(),
            order: VecDeque::new(),
        }
    }

    fn evict(&mut self, now: f64) {
        while let Some(&(sig, t)) = self.order.front() {
            if now - t <= self.window {
                break;
            }
            self.order.pop_front();
            if self.seen.get(&sig) == Some(&t) {
                self.seen.remove(&sig);
            }
        }
    }

    pub fn is_duplicate(&mut self, env: &SignedEnvelope, now: f64) -> bool {
        self.evict(now);
        self.seen.contains_key(&env.signature)
    }

    /// Records an accepted envelope.
    pub fn remember(&mut self, env: &SignedEnvelope, now: f64) {
        self.seen.insert(env.signature, now);
        self.order.push_back((env.signature, now));
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}
