//! Quorum arithmetic, digests, authenticators and decision proofs.
//!
//! Everything here is a pure function of its inputs and is shared by the
//! replica, the client and the checkers.
//!
//! # Canonical batch encoding
//!
//! Batch digests are SHA-256 over the following byte string (all integers
//! big-endian, requests sorted by `(client, seq)`):
//!
//! ```text
//! "SMRB"                 4 bytes magic
//! instance               u64
//! request count          u32
//! per request:
//!   client               u32
//!   seq                  u64
//!   kind                 u8   (0 = read, 1 = update)
//!   key                  u64
//!   payload length       u32
//!   payload              bytes
//! ```
//!
//! # Attestation payload
//!
//! An attestation tag authenticates
//! `"SMRA" | phase u8 (0 = prepare, 1 = accept) | signer u32 | instance u64 | view u64 | digest [32]`.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::types::{Instance, OpKind, Proposal, Regency, ReplicaId, Request};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParamsError {
    #[error("n = {n} replicas cannot tolerate f = {f} faults (need n >= 3f + 1)")]
    TooFewReplicas { n: u32, f: u32 },
}

/// Replica count and fault threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct SystemParams {
    n: u32,
    f: u32,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    n: u32,
    f: u32,
}

impl TryFrom<RawParams> for SystemParams {
    type Error = ParamsError;

    fn try_from(raw: RawParams) -> Result<Self, Self::Error> {
        SystemParams::new(raw.n, raw.f)
    }
}

impl From<SystemParams> for RawParams {
    fn from(p: SystemParams) -> Self {
        RawParams { n: p.n, f: p.f }
    }
}

impl SystemParams {
    pub fn new(n: u32, f: u32) -> Result<Self, ParamsError> {
        if n < 3 * f + 1 {
            return Err(ParamsError::TooFewReplicas { n, f });
        }
        Ok(SystemParams { n, f })
    }

    /// `n = 3f + 1`.
    pub fn minimal(f: u32) -> Self {
        SystemParams { n: 3 * f + 1, f }
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn f(&self) -> u32 {
        self.f
    }

    pub fn replicas(&self) -> impl Iterator<Item = ReplicaId> {
        (0..self.n).map(ReplicaId)
    }

    pub fn leader_of(&self, regency: Regency) -> ReplicaId {
        ReplicaId((regency % self.n as u64) as u32)
    }
}

/// `⌈(n + f + 1) / 2⌉`; equals `2f + 1` when `n = 3f + 1`.
pub fn quorum_size(params: SystemParams) -> usize {
    (params.n as usize + params.f as usize + 1).div_ceil(2)
}

/// `f + 1` matching replies: enough to contain one correct replica.
pub fn weak_certificate_size(params: SystemParams) -> usize {
    params.f as usize + 1
}

/// `|a ∩ b|`, counting only members of the replica universe.
pub fn quorum_intersection(params: SystemParams, a: &BTreeSet<ReplicaId>, b: &BTreeSet<ReplicaId>) -> usize {
    a.intersection(b).filter(|r| r.0 < params.n).count()
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    /// First 8 bytes in hex; what trace records carry.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..8])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

/// Canonical encoding of `(instance, batch)`; see the module docs.
/// `batch` must already be sorted by request id.
pub fn encode_batch(instance: Instance, batch: &[Request]) -> Vec<u8> {
    let payload: usize = batch.iter().map(|r| r.op.payload().len()).sum();
    let mut buf = Vec::with_capacity(16 + batch.len() * 29 + payload);
    buf.extend_from_slice(b"SMRB");
    buf.extend_from_slice(&instance.to_be_bytes());
    buf.extend_from_slice(&(batch.len() as u32).to_be_bytes());
    for req in batch {
        buf.extend_from_slice(&req.client.0.to_be_bytes());
        buf.extend_from_slice(&req.seq.to_be_bytes());
        buf.push(match req.op.kind() {
            OpKind::Read => 0,
            OpKind::Update => 1,
        });
        buf.extend_from_slice(&req.op.key().to_be_bytes());
        let p = req.op.payload();
        buf.extend_from_slice(&(p.len() as u32).to_be_bytes());
        buf.extend_from_slice(p);
    }
    buf
}

pub fn batch_digest(instance: Instance, batch: &[Request]) -> Digest {
    Digest::of(&encode_batch(instance, batch))
}

/// Pluggable authenticator. Implementations must be deterministic so that
/// simulation traces replay byte for byte.
pub trait Authenticator: Send + Sync + fmt::Debug {
    fn sign(&self, signer: ReplicaId, payload: &[u8]) -> Vec<u8>;
    fn verify(&self, signer: ReplicaId, payload: &[u8], tag: &[u8]) -> bool;
}

/// Simulated keyed-hash authenticator: `tag = SHA-256(key_i || payload)`,
/// with every key derived from a registry seed. Any holder of the registry
/// can verify, which stands in for public-key verification.
#[derive(Debug, Clone)]
pub struct MacAuthenticator {
    keys: Vec<[u8; 32]>,
}

impl MacAuthenticator {
    pub fn new(n: u32, seed: u64) -> Self {
        let keys = (0..n)
            .map(|i| {
                let mut h = Sha256::new();
                h.update(b"smrsim-mac-key");
                h.update(seed.to_be_bytes());
                h.update(i.to_be_bytes());
                h.finalize().into()
            })
            .collect();
        MacAuthenticator { keys }
    }
}

impl Authenticator for MacAuthenticator {
    fn sign(&self, signer: ReplicaId, payload: &[u8]) -> Vec<u8> {
        let Some(key) = self.keys.get(signer.0 as usize) else {
            return Vec::new();
        };
        let mut h = Sha256::new();
        h.update(key);
        h.update(payload);
        h.finalize().to_vec()
    }

    fn verify(&self, signer: ReplicaId, payload: &[u8], tag: &[u8]) -> bool {
        (signer.0 as usize) < self.keys.len() && self.sign(signer, payload) == tag
    }
}

/// Ed25519 signatures with keys derived deterministically from a seed.
pub struct Ed25519Authenticator {
    signing: Vec<SigningKey>,
    verifying: Vec<VerifyingKey>,
}

impl fmt::Debug for Ed25519Authenticator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ed25519Authenticator")
            .field("replicas", &self.signing.len())
            .finish()
    }
}

impl Ed25519Authenticator {
    pub fn new(n: u32, seed: u64) -> Self {
        let signing: Vec<SigningKey> = (0..n)
            .map(|i| {
                let mut h = Sha256::new();
                h.update(b"smrsim-ed25519-key");
                h.update(seed.to_be_bytes());
                h.update(i.to_be_bytes());
                SigningKey::from_bytes(&h.finalize().into())
            })
            .collect();
        let verifying = signing.iter().map(SigningKey::verifying_key).collect();
        Ed25519Authenticator { signing, verifying }
    }
}

impl Authenticator for Ed25519Authenticator {
    fn sign(&self, signer: ReplicaId, payload: &[u8]) -> Vec<u8> {
        match self.signing.get(signer.0 as usize) {
            Some(k) => k.sign(payload).to_bytes().to_vec(),
            None => Vec::new(),
        }
    }

    fn verify(&self, signer: ReplicaId, payload: &[u8], tag: &[u8]) -> bool {
        let Some(vk) = self.verifying.get(signer.0 as usize) else {
            return false;
        };
        let Ok(bytes) = <[u8; 64]>::try_from(tag) else {
            return false;
        };
        vk.verify(payload, &ed25519_dalek::Signature::from_bytes(&bytes))
            .is_ok()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuthScheme {
    #[default]
    Mac,
    Ed25519,
}

impl AuthScheme {
    pub fn build(self, n: u32, seed: u64) -> Arc<dyn Authenticator> {
        match self {
            AuthScheme::Mac => Arc::new(MacAuthenticator::new(n, seed)),
            AuthScheme::Ed25519 => Arc::new(Ed25519Authenticator::new(n, seed)),
        }
    }
}

/// Ordering phase an attestation vouches for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Prepare,
    Accept,
}

/// A signed vote `(phase, signer, instance, view, digest)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attestation {
    pub signer: ReplicaId,
    pub instance: Instance,
    pub view: Regency,
    pub phase: Phase,
    pub digest: Digest,
    pub tag: Vec<u8>,
}

impl Attestation {
    fn payload(phase: Phase, signer: ReplicaId, instance: Instance, view: Regency, digest: &Digest) -> [u8; 57] {
        let mut buf = [0u8; 57];
        buf[..4].copy_from_slice(b"SMRA");
        buf[4] = match phase {
            Phase::Prepare => 0,
            Phase::Accept => 1,
        };
        buf[5..9].copy_from_slice(&signer.0.to_be_bytes());
        buf[9..17].copy_from_slice(&instance.to_be_bytes());
        buf[17..25].copy_from_slice(&view.to_be_bytes());
        buf[25..57].copy_from_slice(&digest.0);
        buf
    }

    pub fn sign(
        auth: &dyn Authenticator,
        phase: Phase,
        signer: ReplicaId,
        instance: Instance,
        view: Regency,
        digest: Digest,
    ) -> Self {
        let tag = auth.sign(signer, &Self::payload(phase, signer, instance, view, &digest));
        Attestation {
            signer,
            instance,
            view,
            phase,
            digest,
            tag,
        }
    }

    pub fn verify(&self, auth: &dyn Authenticator) -> bool {
        let payload = Self::payload(self.phase, self.signer, self.instance, self.view, &self.digest);
        auth.verify(self.signer, &payload, &self.tag)
    }

    pub fn encoded_len(&self) -> usize {
        57 + self.tag.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProofError {
    #[error("only {distinct} distinct signers, quorum is {required}")]
    InsufficientAttestations { distinct: usize, required: usize },
    #[error("attestations disagree on instance, phase or digest")]
    MixedDigests,
    #[error("attestations come from different views")]
    MixedViews,
}

/// Externally verifiable proof that `value_digest` was decided in `instance`:
/// a quorum of ACCEPT attestations from one view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionProof {
    pub instance: Instance,
    pub value_digest: Digest,
    pub attestations: Vec<Attestation>,
}

/// A quorum of PREPARE attestations for one `(instance, view, digest)`;
/// carried through leader changes to constrain re-proposals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedCertificate {
    pub instance: Instance,
    pub view: Regency,
    pub value_digest: Digest,
    pub attestations: Vec<Attestation>,
}

impl DecisionProof {
    pub fn view(&self) -> Option<Regency> {
        self.attestations.first().map(|a| a.view)
    }

    pub fn signers(&self) -> BTreeSet<ReplicaId> {
        self.attestations.iter().map(|a| a.signer).collect()
    }

    pub fn encoded_len(&self) -> usize {
        40 + self.attestations.iter().map(Attestation::encoded_len).sum::<usize>()
    }
}

impl PreparedCertificate {
    pub fn encoded_len(&self) -> usize {
        48 + self.attestations.iter().map(Attestation::encoded_len).sum::<usize>()
    }
}

/// Checks shape (phase, instance, digest, single view) and distinctness;
/// returns the canonical (signer-sorted, deduplicated) set and its view.
fn assemble(
    params: SystemParams,
    phase: Phase,
    instance: Instance,
    digest: Digest,
    attestations: Vec<Attestation>,
) -> Result<(Regency, Vec<Attestation>), ProofError> {
    if attestations
        .iter()
        .any(|a| a.phase != phase || a.instance != instance || a.digest != digest)
    {
        return Err(ProofError::MixedDigests);
    }
    let view = attestations.first().map(|a| a.view).unwrap_or(0);
    if attestations.iter().any(|a| a.view != view) {
        return Err(ProofError::MixedViews);
    }
    let mut seen = BTreeSet::new();
    let mut unique: Vec<Attestation> = attestations
        .into_iter()
        .filter(|a| a.signer.0 < params.n && seen.insert(a.signer))
        .collect();
    unique.sort_by_key(|a| a.signer);
    let required = quorum_size(params);
    if unique.len() < required {
        return Err(ProofError::InsufficientAttestations {
            distinct: unique.len(),
            required,
        });
    }
    Ok((view, unique))
}

/// Assembles a decision proof from individually verified ACCEPT attestations.
/// More than a quorum is allowed; duplicate signers are collapsed and do not
/// count twice.
pub fn make_proof(
    params: SystemParams,
    instance: Instance,
    value_digest: Digest,
    attestations: Vec<Attestation>,
) -> Result<DecisionProof, ProofError> {
    let (_, attestations) = assemble(params, Phase::Accept, instance, value_digest, attestations)?;
    Ok(DecisionProof {
        instance,
        value_digest,
        attestations,
    })
}

pub fn make_prepared_certificate(
    params: SystemParams,
    instance: Instance,
    value_digest: Digest,
    attestations: Vec<Attestation>,
) -> Result<PreparedCertificate, ProofError> {
    let (view, attestations) = assemble(params, Phase::Prepare, instance, value_digest, attestations)?;
    Ok(PreparedCertificate {
        instance,
        view,
        value_digest,
        attestations,
    })
}

fn quorum_is_authentic(
    params: SystemParams,
    auth: &dyn Authenticator,
    phase: Phase,
    instance: Instance,
    digest: Digest,
    attestations: &[Attestation],
) -> bool {
    let Some(view) = attestations.first().map(|a| a.view) else {
        return false;
    };
    let mut signers = BTreeSet::new();
    for a in attestations {
        if a.phase != phase
            || a.instance != instance
            || a.digest != digest
            || a.view != view
            || a.signer.0 >= params.n
            || !signers.insert(a.signer)
            || !a.verify(auth)
        {
            return false;
        }
    }
    signers.len() >= quorum_size(params)
}

/// `verify(c, v, Γ)`: the value hashes to the proof's digest, the proof is for
/// `instance`, and it holds a quorum of distinct authentic ACCEPTs from one
/// view. Any defect (forged tag, duplicate signer, foreign digest) yields
/// `false`.
pub fn verify_proof(
    params: SystemParams,
    auth: &dyn Authenticator,
    instance: Instance,
    value: &Proposal,
    proof: &DecisionProof,
) -> bool {
    proof.instance == instance
        && value.instance() == instance
        && value.digest() == proof.value_digest
        && quorum_is_authentic(
            params,
            auth,
            Phase::Accept,
            instance,
            proof.value_digest,
            &proof.attestations,
        )
}

pub fn verify_prepared(
    params: SystemParams,
    auth: &dyn Authenticator,
    value: &Proposal,
    cert: &PreparedCertificate,
) -> bool {
    value.instance() == cert.instance
        && value.digest() == cert.value_digest
        && cert.attestations.iter().all(|a| a.view == cert.view)
        && quorum_is_authentic(
            params,
            auth,
            Phase::Prepare,
            cert.instance,
            cert.value_digest,
            &cert.attestations,
        )
}
