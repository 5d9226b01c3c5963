//! Structured event trace: one JSON object per line.
//!
//! Field order is fixed (`t`, `node`, `kind`, `msg`, `inst`, `digest`,
//! `peer`, `size`, `detail`); absent optional fields are omitted. See
//! `docs/trace-format.md` for the meaning of every kind.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::message::MsgSummary;
use crate::protocol::Digest;
use crate::types::{Instance, NodeId};

pub type SimTime = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    /// A node emitted a unicast (before adversary or network effects).
    Send,
    Recv,
    /// Lost: `detail` is `adversary`, `pre-gst` or `partition`.
    Drop,
    /// Adversary substituted the message; `digest` is the substitute's.
    Replace,
    /// Link-layer retransmission of a message lost before GST.
    Retransmit,
    Decide,
    Execute,
    Checkpoint,
    StateTransfer,
    Regency,
    Stop,
    Probe,
    Echo,
    Conflict,
    Outdated,
    Unanswerable,
    Invoke,
    Complete,
    Fallback,
    ClientRetransmit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: SimTime,
    pub node: String,
    pub kind: TraceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inst: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl TraceRecord {
    pub fn node_id(&self) -> Option<NodeId> {
        self.node.parse().ok()
    }

    pub fn peer_id(&self) -> Option<NodeId> {
        self.peer.as_deref().and_then(|p| p.parse().ok())
    }

    pub(crate) fn message(
        t: SimTime,
        kind: TraceKind,
        node: NodeId,
        peer: NodeId,
        summary: &MsgSummary,
        detail: Option<String>,
    ) -> Self {
        TraceRecord {
            t,
            node: node.to_string(),
            kind,
            msg: Some(summary.kind.as_str().to_string()),
            inst: summary.instance,
            digest: summary.digest.map(|d| d.short()),
            peer: Some(peer.to_string()),
            size: Some(summary.size),
            detail,
        }
    }
}

/// A protocol-level event reported by a node; the engine stamps time and
/// node identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Note {
    pub kind: TraceKind,
    pub inst: Option<Instance>,
    pub digest: Option<Digest>,
    pub peer: Option<NodeId>,
    pub detail: Option<String>,
}

impl Note {
    pub fn new(kind: TraceKind) -> Self {
        Note {
            kind,
            inst: None,
            digest: None,
            peer: None,
            detail: None,
        }
    }

    pub fn inst(mut self, inst: Instance) -> Self {
        self.inst = Some(inst);
        self
    }

    pub fn digest(mut self, d: Digest) -> Self {
        self.digest = Some(d);
        self
    }

    pub fn peer(mut self, p: NodeId) -> Self {
        self.peer = Some(p);
        self
    }

    pub fn detail(mut self, d: impl Into<String>) -> Self {
        self.detail = Some(d.into());
        self
    }

    pub(crate) fn stamp(self, t: SimTime, node: NodeId) -> TraceRecord {
        TraceRecord {
            t,
            node: node.to_string(),
            kind: self.kind,
            msg: None,
            inst: self.inst,
            digest: self.digest.map(|d| d.short()),
            peer: self.peer.map(|p| p.to_string()),
            size: None,
            detail: self.detail,
        }
    }
}

pub fn write_jsonl<W: Write>(records: &[TraceRecord], mut w: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
