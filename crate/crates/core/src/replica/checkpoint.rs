//! Application state, the per-client reply store and checkpoints.

use std::collections::BTreeMap;

use crate::protocol::{DecisionProof, Digest};
use crate::types::{ClientId, Instance, Key, OpResult, Operation, Proposal, ReplicaId, Reply};

/// The replicated key-value map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvState {
    map: BTreeMap<Key, Vec<u8>>,
}

impl KvState {
    pub fn get(&self, key: Key) -> Option<&Vec<u8>> {
        self.map.get(&key)
    }

    pub fn apply(&mut self, op: &Operation) -> OpResult {
        match op {
            Operation::Read { key } => OpResult::Value(self.map.get(key).cloned()),
            Operation::Update { key, value } => {
                self.map.insert(*key, value.clone());
                OpResult::Written(value.clone())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn encode(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&(self.map.len() as u32).to_be_bytes());
        for (k, v) in &self.map {
            buf.extend_from_slice(&k.to_be_bytes());
            buf.extend_from_slice(&(v.len() as u32).to_be_bytes());
            buf.extend_from_slice(v);
        }
    }
}

/// A reply as kept in the store: replica-independent, so checkpoints of
/// different replicas digest identically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredReply {
    pub seq: u64,
    pub result: OpResult,
    /// Instance in which the request was executed.
    pub instance: Instance,
}

impl StoredReply {
    pub fn to_reply(&self, replica: ReplicaId) -> Reply {
        Reply {
            client_seq: self.seq,
            replica,
            result: self.result.clone(),
            ordered: true,
            executed_up_to: self.instance,
        }
    }
}

/// Last executed sequence number per client, plus (optionally) the reply that
/// was sent for it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplyStore {
    last_seq: BTreeMap<ClientId, u64>,
    replies: BTreeMap<ClientId, StoredReply>,
}

impl ReplyStore {
    pub fn last_seq(&self, client: ClientId) -> Option<u64> {
        self.last_seq.get(&client).copied()
    }

    pub fn executed(&self, client: ClientId, seq: u64) -> bool {
        self.last_seq(client).is_some_and(|s| s >= seq)
    }

    /// Stored reply for exactly `(client, seq)`, if any.
    pub fn reply_for(&self, client: ClientId, seq: u64) -> Option<&StoredReply> {
        self.replies.get(&client).filter(|r| r.seq == seq)
    }

    pub fn record(&mut self, client: ClientId, reply: StoredReply) {
        self.last_seq.insert(client, reply.seq);
        self.replies.insert(client, reply);
    }

    /// Legacy checkpoint content: the duplicate-suppression table without
    /// reply payloads.
    pub fn without_replies(&self) -> Self {
        ReplyStore {
            last_seq: self.last_seq.clone(),
            replies: BTreeMap::new(),
        }
    }

    pub fn has_replies(&self) -> bool {
        !self.replies.is_empty()
    }

    fn encode(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&(self.last_seq.len() as u32).to_be_bytes());
        for (c, s) in &self.last_seq {
            buf.extend_from_slice(&c.0.to_be_bytes());
            buf.extend_from_slice(&s.to_be_bytes());
        }
        buf.extend_from_slice(&(self.replies.len() as u32).to_be_bytes());
        for (c, r) in &self.replies {
            buf.extend_from_slice(&c.0.to_be_bytes());
            buf.extend_from_slice(&r.seq.to_be_bytes());
            buf.extend_from_slice(&r.instance.to_be_bytes());
            buf.extend_from_slice(&r.result.digest().0);
        }
    }
}

/// Snapshot taken after executing `up_to`. The digest covers the state and
/// reply store but not `last`, whose attestation set differs per replica.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub up_to: Instance,
    pub state: KvState,
    pub replies: ReplyStore,
    /// Decision for `up_to` with its proof.
    pub last: Option<(Proposal, DecisionProof)>,
}

impl Checkpoint {
    pub fn digest(&self) -> Digest {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"SMRC");
        buf.extend_from_slice(&self.up_to.to_be_bytes());
        self.state.encode(&mut buf);
        self.replies.encode(&mut buf);
        Digest::of(&buf)
    }

    pub fn encoded_len(&self) -> usize {
        let mut buf = Vec::new();
        self.state.encode(&mut buf);
        self.replies.encode(&mut buf);
        8 + buf.len() + self.last.as_ref().map_or(0, |(v, p)| v.encoded_len() + p.encoded_len())
    }
}
