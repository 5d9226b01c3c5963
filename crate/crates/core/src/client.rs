//! Closed-loop client: one outstanding operation at a time.
//!
//! Updates are broadcast as ordered requests. Reads go out on the fast path
//! first and fall back to an ordered request with the same sequence number
//! when the fallback timer fires or the received replies can no longer reach
//! the threshold.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::lincheck::HistoryEntry;
use crate::message::Message;
use crate::protocol::{Digest, SystemParams};
use crate::simnet::{Node, Outbox, TimerId};
use crate::trace::{Note, SimTime, TraceKind};
use crate::types::{ClientId, NodeId, OpKind, OpResult, Operation, ReplicaId, Reply, Request};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub retransmit_timeout: SimTime,
    pub read_fallback_timeout: SimTime,
    pub fast_reads: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            retransmit_timeout: 1000,
            read_fallback_timeout: 200,
            fast_reads: true,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.retransmit_timeout == 0 || self.read_fallback_timeout == 0 {
            return Err("client timeouts must be positive".into());
        }
        Ok(())
    }
}

/// Replies for one request, at most one per replica.
#[derive(Clone, Debug)]
pub struct ReplyCollector {
    seq: u64,
    required: usize,
    replies: BTreeMap<ReplicaId, OpResult>,
}

impl ReplyCollector {
    pub fn new(seq: u64, required: usize) -> Self {
        ReplyCollector {
            seq,
            required,
            replies: BTreeMap::new(),
        }
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    /// Records a reply; returns the result once `required` distinct replicas
    /// agree on it. A later reply from the same replica replaces its earlier one.
    pub fn add(&mut self, replica: ReplicaId, result: OpResult) -> Option<OpResult> {
        self.replies.insert(replica, result.clone());
        let d = result.digest();
        let agreeing = self.replies.values().filter(|r| r.digest() == d).count();
        (agreeing >= self.required).then_some(result)
    }

    fn groups(&self) -> BTreeMap<Digest, usize> {
        let mut groups = BTreeMap::new();
        for r in self.replies.values() {
            *groups.entry(r.digest()).or_default() += 1;
        }
        groups
    }

    /// Size of the largest group of identical results.
    pub fn matching(&self) -> usize {
        self.groups().into_values().max().unwrap_or(0)
    }

    pub fn received(&self) -> usize {
        self.replies.len()
    }

    /// No value can reach the threshold even if all `n` replicas answer.
    pub fn hopeless(&self, n: usize) -> bool {
        self.matching() + (n - self.received()) < self.required
    }
}

pub const START_TIMER: TimerId = 1;
pub const RETRANSMIT_TIMER: TimerId = 2;
pub const FALLBACK_TIMER: TimerId = 3;

#[derive(Debug)]
struct Pending {
    seq: u64,
    op: Operation,
    ordered: bool,
    collector: ReplyCollector,
    history_idx: usize,
}

#[derive(Debug)]
pub struct Client {
    id: ClientId,
    params: SystemParams,
    cfg: ClientConfig,
    required: usize,
    workload: VecDeque<Operation>,
    start: SimTime,
    think: SimTime,
    now: SimTime,
    next_seq: u64,
    pending: Option<Pending>,
    history: Vec<HistoryEntry>,
}

impl Client {
    /// `required` is the number of matching replies accepted for any
    /// operation; `workload` is issued in order, `think` apart.
    pub fn new(
        id: ClientId,
        params: SystemParams,
        cfg: ClientConfig,
        required: usize,
        workload: Vec<Operation>,
        start: SimTime,
        think: SimTime,
    ) -> Self {
        Client {
            id,
            params,
            cfg,
            required,
            workload: workload.into(),
            start,
            think,
            now: 0,
            next_seq: 1,
            pending: None,
            history: Vec::new(),
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.pending.is_none() && self.workload.is_empty()
    }

    pub fn completed(&self) -> usize {
        self.history.iter().filter(|h| h.response.is_some()).count()
    }

    /// Largest group of matching replies for the outstanding operation.
    pub fn pending_matching(&self) -> Option<usize> {
        self.pending.as_ref().map(|p| p.collector.matching())
    }

    fn broadcast(&self, msg: Message, out: &mut Outbox<Message>) {
        for r in self.params.replicas() {
            out.send(NodeId::Replica(r), msg.clone());
        }
    }

    fn request(&self, p: &Pending) -> Request {
        Request {
            client: self.id,
            seq: p.seq,
            op: p.op.clone(),
        }
    }

    fn submit_next(&mut self, out: &mut Outbox<Message>) {
        let Some(op) = self.workload.pop_front() else {
            return;
        };
        let seq = self.next_seq;
        self.next_seq += 1;
        self.history.push(HistoryEntry {
            client: self.id,
            seq,
            op: op.clone(),
            invoke: self.now,
            response: None,
            result: None,
        });
        out.note(Note::new(TraceKind::Invoke).inst(seq).detail(op.to_string()));
        let fast = op.kind() == OpKind::Read && self.cfg.fast_reads;
        let p = Pending {
            seq,
            op,
            ordered: !fast,
            collector: ReplyCollector::new(seq, self.required),
            history_idx: self.history.len() - 1,
        };
        let req = self.request(&p);
        if fast {
            self.broadcast(Message::ReadOnly(req), out);
            out.set_timer(FALLBACK_TIMER, self.cfg.read_fallback_timeout);
        } else {
            self.broadcast(Message::Request(req), out);
            out.set_timer(RETRANSMIT_TIMER, self.cfg.retransmit_timeout);
        }
        self.pending = Some(p);
    }

    fn fallback(&mut self, out: &mut Outbox<Message>) {
        let Some(p) = self.pending.as_mut() else {
            return;
        };
        if p.ordered {
            return;
        }
        p.ordered = true;
        p.collector = ReplyCollector::new(p.seq, self.required);
        out.note(Note::new(TraceKind::Fallback).inst(p.seq));
        out.cancel_timer(FALLBACK_TIMER);
        let req = self.request(self.pending.as_ref().expect("pending"));
        self.broadcast(Message::Request(req), out);
        out.set_timer(RETRANSMIT_TIMER, self.cfg.retransmit_timeout);
    }

    fn on_reply(&mut self, from: ReplicaId, reply: Reply, out: &mut Outbox<Message>) {
        let Some(p) = self.pending.as_mut() else {
            return;
        };
        if reply.client_seq != p.seq || reply.replica != from || reply.ordered != p.ordered {
            return;
        }
        match p.collector.add(from, reply.result) {
            Some(result) => {
                let latency = self.now - self.history[p.history_idx].invoke;
                let matching = p.collector.matching();
                let entry = &mut self.history[p.history_idx];
                entry.response = Some(self.now);
                entry.result = Some(result.clone());
                out.note(
                    Note::new(TraceKind::Complete)
                        .inst(p.seq)
                        .digest(result.digest())
                        .detail(format!("result={result} replies={matching} latency={latency}")),
                );
                out.cancel_timer(RETRANSMIT_TIMER);
                out.cancel_timer(FALLBACK_TIMER);
                self.pending = None;
                if self.think == 0 {
                    self.submit_next(out);
                } else if !self.workload.is_empty() {
                    out.set_timer(START_TIMER, self.think);
                }
            }
            None => {
                if !p.ordered && p.collector.hopeless(self.params.n() as usize) {
                    self.fallback(out);
                }
            }
        }
    }
}

impl Node<Message> for Client {
    fn on_start(&mut self, now: SimTime, out: &mut Outbox<Message>) {
        self.now = now;
        if self.start <= now {
            self.submit_next(out);
        } else if !self.workload.is_empty() {
            out.set_timer(START_TIMER, self.start - now);
        }
    }

    fn on_message(&mut self, now: SimTime, from: NodeId, msg: Message, out: &mut Outbox<Message>) {
        self.now = now;
        if let (Message::Reply(reply), NodeId::Replica(r)) = (msg, from) {
            self.on_reply(r, reply, out);
        }
    }

    fn on_timer(&mut self, now: SimTime, timer: TimerId, out: &mut Outbox<Message>) {
        self.now = now;
        match timer {
            START_TIMER => {
                if self.pending.is_none() {
                    self.submit_next(out);
                }
            }
            RETRANSMIT_TIMER => {
                if let Some(p) = &self.pending {
                    out.note(Note::new(TraceKind::ClientRetransmit).inst(p.seq));
                    let req = self.request(p);
                    self.broadcast(Message::Request(req), out);
                    out.set_timer(RETRANSMIT_TIMER, self.cfg.retransmit_timeout);
                }
            }
            FALLBACK_TIMER => self.fallback(out),
            _ => {}
        }
    }
}
