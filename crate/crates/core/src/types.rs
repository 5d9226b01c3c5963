//! Identifiers and the client-facing data model of the replicated key-value
//! service: requests, batches (proposals), results and replies.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::protocol::{self, Digest};

/// Consensus instance (sequence number).
pub type Instance = u64;

/// Regency (view) number. The leader of regency `r` is replica `r mod n`.
pub type Regency = u64;

/// Key of the replicated key-value store.
pub type Key = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplicaId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// Address of a simulated process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Replica(ReplicaId),
    Client(ClientId),
}

impl NodeId {
    pub fn replica(i: u32) -> Self {
        NodeId::Replica(ReplicaId(i))
    }

    pub fn client(i: u32) -> Self {
        NodeId::Client(ClientId(i))
    }

    pub fn as_replica(self) -> Option<ReplicaId> {
        match self {
            NodeId::Replica(r) => Some(r),
            NodeId::Client(_) => None,
        }
    }

    pub fn as_client(self) -> Option<ClientId> {
        match self {
            NodeId::Client(c) => Some(c),
            NodeId::Replica(_) => None,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Replica(r) => r.fmt(f),
            NodeId::Client(c) => c.fmt(f),
        }
    }
}

impl std::str::FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, num) = s.split_at(1.min(s.len()));
        let idx: u32 = num.parse().map_err(|_| format!("bad node id `{s}`"))?;
        match kind {
            "r" => Ok(NodeId::replica(idx)),
            "c" => Ok(NodeId::client(idx)),
            _ => Err(format!("bad node id `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Read,
    Update,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operation {
    Read { key: Key },
    Update { key: Key, value: Vec<u8> },
}

impl Operation {
    pub fn key(&self) -> Key {
        match self {
            Operation::Read { key } | Operation::Update { key, .. } => *key,
        }
    }

    pub fn kind(&self) -> OpKind {
        match self {
            Operation::Read { .. } => OpKind::Read,
            Operation::Update { .. } => OpKind::Update,
        }
    }

    pub fn payload(&self) -> &[u8] {
        match self {
            Operation::Read { .. } => &[],
            Operation::Update { value, .. } => value,
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operation::Read { key } => write!(f, "read {key}"),
            Operation::Update { key, value } => {
                write!(f, "update {key} {}", String::from_utf8_lossy(value))
            }
        }
    }
}

impl std::str::FromStr for Operation {
    type Err = String;

    /// Parses `read <key>` or `update <key> <value>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let key = |k: &str| k.parse::<Key>().map_err(|_| format!("bad key in `{s}`"));
        match parts.as_slice() {
            ["read", k] => Ok(Operation::Read { key: key(k)? }),
            ["update", k, v] => Ok(Operation::Update {
                key: key(k)?,
                value: v.as_bytes().to_vec(),
            }),
            _ => Err(format!("bad operation `{s}` (expected `read K` or `update K V`)")),
        }
    }
}

/// A client operation. `(client, seq)` identifies it uniquely.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Request {
    pub client: ClientId,
    pub seq: u64,
    pub op: Operation,
}

impl Request {
    pub fn id(&self) -> (ClientId, u64) {
        (self.client, self.seq)
    }
}

/// An ordered batch for one consensus instance.
///
/// The batch is kept sorted by request id, so the canonical encoding (and the
/// digest) does not depend on arrival order at the leader.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Proposal {
    instance: Instance,
    batch: Vec<Request>,
    digest: Digest,
}

impl Proposal {
    /// Builds a proposal. Requests are sorted by `(client, seq)` and
    /// duplicates of the same id are dropped (first one wins).
    pub fn new(instance: Instance, mut batch: Vec<Request>) -> Self {
        batch.sort_by_key(Request::id);
        batch.dedup_by_key(|r| r.id());
        let digest = protocol::batch_digest(instance, &batch);
        Proposal {
            instance,
            batch,
            digest,
        }
    }

    pub fn noop(instance: Instance) -> Self {
        Self::new(instance, Vec::new())
    }

    pub fn instance(&self) -> Instance {
        self.instance
    }

    pub fn batch(&self) -> &[Request] {
        &self.batch
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn encoded_len(&self) -> usize {
        protocol::encode_batch(self.instance, &self.batch).len()
    }
}

/// Result of executing an operation against the key-value state.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpResult {
    /// Update acknowledged; echoes the written value.
    Written(Vec<u8>),
    /// Read result; `None` is the initial (never written) value.
    Value(Option<Vec<u8>>),
}

impl OpResult {
    /// Digest clients compare when matching replies.
    pub fn digest(&self) -> Digest {
        let mut buf = Vec::new();
        match self {
            OpResult::Written(v) => {
                buf.push(0);
                buf.extend_from_slice(&(v.len() as u32).to_be_bytes());
                buf.extend_from_slice(v);
            }
            OpResult::Value(None) => buf.push(1),
            OpResult::Value(Some(v)) => {
                buf.push(2);
                buf.extend_from_slice(&(v.len() as u32).to_be_bytes());
                buf.extend_from_slice(v);
            }
        }
        Digest::of(&buf)
    }

    pub fn len(&self) -> usize {
        match self {
            OpResult::Written(v) | OpResult::Value(Some(v)) => v.len(),
            OpResult::Value(None) => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for OpResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpResult::Written(v) => write!(f, "ok/{}", String::from_utf8_lossy(v)),
            OpResult::Value(None) => write!(f, "nil"),
            OpResult::Value(Some(v)) => write!(f, "{}", String::from_utf8_lossy(v)),
        }
    }
}

/// Reply from a replica to a client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reply {
    pub client_seq: u64,
    pub replica: ReplicaId,
    pub result: OpResult,
    /// `true` for results of ordered execution, `false` for the fast read path.
    pub ordered: bool,
    /// Highest executed instance at the replica when the reply was produced.
    pub executed_up_to: Instance,
}
