//! Wire messages exchanged by replicas and clients.
//!
//! Naming follows BFT-SMaRt: `PROPOSE` is PBFT's PRE-PREPARE, `PREPARE` is
//! PBFT's PREPARE (BFT-SMaRt's WRITE) and `ACCEPT` is PBFT's COMMIT. PREPARE
//! and ACCEPT carry only the digest of the proposed batch, never the batch.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::protocol::{Attestation, Authenticator, DecisionProof, Digest, PreparedCertificate};
use crate::replica::Checkpoint;
use crate::types::{Instance, Proposal, Regency, ReplicaId, Reply, Request};

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    /// Ordered client request (also used when a replica forwards a pending
    /// request to the leader).
    Request(Request),
    /// Fast-path read, answered without ordering.
    ReadOnly(Request),
    Reply(Reply),
    Propose {
        view: Regency,
        proposal: Proposal,
    },
    Prepare(Attestation),
    Accept(Attestation),
    ReqDecision {
        instance: Instance,
    },
    FwdDecision {
        value: Proposal,
        proof: DecisionProof,
    },
    /// Answer to a decision request for a garbage-collected instance; carries
    /// the most recent checkpointed decision so the requester can tell it is
    /// behind.
    OutdatedReq {
        requested: Instance,
        value: Proposal,
        proof: DecisionProof,
    },
    Stop {
        regency: Regency,
    },
    StopData(StopData),
    Sync {
        regency: Regency,
        stop_data: Vec<StopData>,
    },
    Checkpoint {
        up_to: Instance,
        digest: Digest,
    },
    StateRequest,
    StateReply(Box<Checkpoint>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MsgKind {
    Request,
    ReadOnly,
    Reply,
    Propose,
    Prepare,
    Accept,
    ReqDecision,
    FwdDecision,
    OutdatedReq,
    Stop,
    StopData,
    Sync,
    Checkpoint,
    StateRequest,
    StateReply,
}

impl MsgKind {
    pub const ALL: [MsgKind; 15] = [
        MsgKind::Request,
        MsgKind::ReadOnly,
        MsgKind::Reply,
        MsgKind::Propose,
        MsgKind::Prepare,
        MsgKind::Accept,
        MsgKind::ReqDecision,
        MsgKind::FwdDecision,
        MsgKind::OutdatedReq,
        MsgKind::Stop,
        MsgKind::StopData,
        MsgKind::Sync,
        MsgKind::Checkpoint,
        MsgKind::StateRequest,
        MsgKind::StateReply,
    ];

    /// Name used in trace files and metric tables.
    pub fn as_str(self) -> &'static str {
        match self {
            MsgKind::Request => "REQUEST",
            MsgKind::ReadOnly => "READ-ONLY",
            MsgKind::Reply => "REPLY",
            MsgKind::Propose => "PROPOSE",
            MsgKind::Prepare => "PREPARE",
            MsgKind::Accept => "ACCEPT",
            MsgKind::ReqDecision => "REQ-DECISION",
            MsgKind::FwdDecision => "FWD-DECISION",
            MsgKind::OutdatedReq => "OUTDATED-REQ",
            MsgKind::Stop => "STOP",
            MsgKind::StopData => "STOP-DATA",
            MsgKind::Sync => "SYNC",
            MsgKind::Checkpoint => "CHECKPOINT",
            MsgKind::StateRequest => "STATE-REQ",
            MsgKind::StateReply => "STATE-REPLY",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for MsgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a trace record needs to know about a message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MsgSummary {
    pub kind: MsgKind,
    pub instance: Option<Instance>,
    pub digest: Option<Digest>,
    pub size: usize,
}

const HEADER: usize = 16;

impl Message {
    pub fn kind(&self) -> MsgKind {
        match self {
            Message::Request(_) => MsgKind::Request,
            Message::ReadOnly(_) => MsgKind::ReadOnly,
            Message::Reply(_) => MsgKind::Reply,
            Message::Propose { .. } => MsgKind::Propose,
            Message::Prepare(_) => MsgKind::Prepare,
            Message::Accept(_) => MsgKind::Accept,
            Message::ReqDecision { .. } => MsgKind::ReqDecision,
            Message::FwdDecision { .. } => MsgKind::FwdDecision,
            Message::OutdatedReq { .. } => MsgKind::OutdatedReq,
            Message::Stop { .. } => MsgKind::Stop,
            Message::StopData(_) => MsgKind::StopData,
            Message::Sync { .. } => MsgKind::Sync,
            Message::Checkpoint { .. } => MsgKind::Checkpoint,
            Message::StateRequest => MsgKind::StateRequest,
            Message::StateReply(_) => MsgKind::StateReply,
        }
    }

    pub fn summary(&self) -> MsgSummary {
        let (instance, digest) = match self {
            Message::Propose { proposal, .. } => (Some(proposal.instance()), Some(proposal.digest())),
            Message::Prepare(a) | Message::Accept(a) => (Some(a.instance), Some(a.digest)),
            Message::ReqDecision { instance } => (Some(*instance), None),
            Message::FwdDecision { value, .. } => (Some(value.instance()), Some(value.digest())),
            Message::OutdatedReq { requested, .. } => (Some(*requested), None),
            Message::Checkpoint { up_to, digest } => (Some(*up_to), Some(*digest)),
            Message::StateReply(cp) => (Some(cp.up_to), Some(cp.digest())),
            Message::Request(r) | Message::ReadOnly(r) => (Some(r.seq), None),
            Message::Reply(r) => (Some(r.client_seq), Some(r.result.digest())),
            Message::Stop { regency } | Message::Sync { regency, .. } => (Some(*regency), None),
            Message::StopData(sd) => (Some(sd.regency), None),
            Message::StateRequest => (None, None),
        };
        MsgSummary {
            kind: self.kind(),
            instance,
            digest,
            size: self.wire_size(),
        }
    }

    /// Approximate encoded size in bytes.
    pub fn wire_size(&self) -> usize {
        HEADER
            + match self {
                Message::Request(r) | Message::ReadOnly(r) => 25 + r.op.payload().len(),
                Message::Reply(r) => 21 + r.result.len(),
                Message::Propose { proposal, .. } => 8 + proposal.encoded_len(),
                Message::Prepare(a) | Message::Accept(a) => a.encoded_len(),
                Message::ReqDecision { .. } => 8,
                Message::FwdDecision { value, proof } => value.encoded_len() + proof.encoded_len(),
                Message::OutdatedReq { value, proof, .. } => 8 + value.encoded_len() + proof.encoded_len(),
                Message::Stop { .. } => 8,
                Message::StopData(sd) => sd.encoded_len(),
                Message::Sync { stop_data, .. } => 8 + stop_data.iter().map(StopData::encoded_len).sum::<usize>(),
                Message::Checkpoint { .. } => 40,
                Message::StateRequest => 0,
                Message::StateReply(cp) => cp.encoded_len(),
            }
    }
}

/// A replica's report to the leader of a new regency: its decided log tail
/// (including the decision its latest checkpoint covers) and its highest
/// prepared certificate for every undecided instance. Signed so that the
/// leader can relay it inside `SYNC`.
#[derive(Clone, Debug, PartialEq)]
pub struct StopData {
    pub regency: Regency,
    pub sender: ReplicaId,
    pub decided: Vec<(Proposal, DecisionProof)>,
    pub prepared: Vec<(Proposal, PreparedCertificate)>,
    pub tag: Vec<u8>,
}

impl StopData {
    pub fn new(
        auth: &dyn Authenticator,
        regency: Regency,
        sender: ReplicaId,
        decided: Vec<(Proposal, DecisionProof)>,
        prepared: Vec<(Proposal, PreparedCertificate)>,
    ) -> Self {
        let mut sd = StopData {
            regency,
            sender,
            decided,
            prepared,
            tag: Vec::new(),
        };
        sd.tag = auth.sign(sender, &sd.signing_bytes());
        sd
    }

    fn signing_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"SMRS");
        buf.extend_from_slice(&self.regency.to_be_bytes());
        buf.extend_from_slice(&self.sender.0.to_be_bytes());
        buf.extend_from_slice(&(self.decided.len() as u32).to_be_bytes());
        for (value, proof) in &self.decided {
            buf.extend_from_slice(&value.digest().0);
            push_attestations(&mut buf, proof.instance, &proof.attestations);
        }
        buf.extend_from_slice(&(self.prepared.len() as u32).to_be_bytes());
        for (value, cert) in &self.prepared {
            buf.extend_from_slice(&value.digest().0);
            buf.extend_from_slice(&cert.view.to_be_bytes());
            push_attestations(&mut buf, cert.instance, &cert.attestations);
        }
        Digest::of(&buf).0.to_vec()
    }

    pub fn verify(&self, auth: &dyn Authenticator) -> bool {
        auth.verify(self.sender, &self.signing_bytes(), &self.tag)
    }

    pub fn encoded_len(&self) -> usize {
        20 + self.tag.len()
            + self
                .decided
                .iter()
                .map(|(v, p)| v.encoded_len() + p.encoded_len())
                .sum::<usize>()
            + self
                .prepared
                .iter()
                .map(|(v, c)| v.encoded_len() + c.encoded_len())
                .sum::<usize>()
    }
}

fn push_attestations(buf: &mut Vec<u8>, instance: Instance, atts: &[Attestation]) {
    buf.extend_from_slice(&instance.to_be_bytes());
    buf.extend_from_slice(&(atts.len() as u32).to_be_bytes());
    for a in atts {
        buf.extend_from_slice(&a.signer.0.to_be_bytes());
        buf.extend_from_slice(&a.view.to_be_bytes());
        buf.extend_from_slice(&a.digest.0);
        buf.extend_from_slice(&(a.tag.len() as u32).to_be_bytes());
        buf.extend_from_slice(&a.tag);
    }
}
