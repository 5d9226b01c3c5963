//! The replica state machine.
//!
//! Normal case: the leader of the current regency sends `PROPOSE`; every
//! replica (the leader included) answers with a digest-only `PREPARE`; a
//! quorum of matching PREPAREs yields a prepared certificate and an `ACCEPT`;
//! a quorum of matching ACCEPTs plus the value decides the instance.
//! Decided instances execute strictly in order.
//!
//! `PatchMode::Broadcast` sends every decision with its proof to all peers.
//! `PatchMode::Forward` asks `2f` peers for a decision when `f+1` ACCEPTs
//! name a value the replica does not know, and echoes every forwarded
//! decision it adopts.

mod checkpoint;
mod sync;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, KvState, ReplyStore, StoredReply};
pub use sync::{compute_plan, SyncError, SyncPlan};

use crate::message::{Message, StopData};
use crate::protocol::{
    make_prepared_certificate, make_proof, quorum_size, verify_proof, weak_certificate_size, Attestation,
    Authenticator, DecisionProof, Digest, Phase, PreparedCertificate, SystemParams,
};
use crate::simnet::{Node, Outbox, TimerId};
use crate::trace::{Note, SimTime, TraceKind};
use crate::types::{ClientId, Instance, NodeId, Proposal, Regency, ReplicaId, Reply, Request};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchMode {
    #[default]
    Baseline,
    Broadcast,
    Forward,
}

impl PatchMode {
    pub const ALL: [PatchMode; 3] = [PatchMode::Baseline, PatchMode::Broadcast, PatchMode::Forward];

    pub fn as_str(self) -> &'static str {
        match self {
            PatchMode::Baseline => "baseline",
            PatchMode::Broadcast => "broadcast",
            PatchMode::Forward => "forward",
        }
    }
}

impl std::fmt::Display for PatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (baseline, broadcast, forward)"))
    }
}

/// Matching replies a client needs: a quorum, or the weak certificate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadQuorumMode {
    #[default]
    Optimized,
    Naive,
}

impl ReadQuorumMode {
    pub fn required(self, params: SystemParams) -> usize {
        match self {
            ReadQuorumMode::Optimized => quorum_size(params),
            ReadQuorumMode::Naive => weak_certificate_size(params),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicaConfig {
    pub mode: PatchMode,
    pub read_quorum: ReadQuorumMode,
    pub checkpoint_period: u64,
    /// Base request timeout; doubles with every regency.
    pub request_timeout: SimTime,
    pub batch_limit: usize,
    /// Include reply payloads in checkpoints. `false` is the legacy layout.
    pub reply_store: bool,
    /// Grace period after learning of a newer stable checkpoint before asking
    /// for state.
    pub lag_timeout: SimTime,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        ReplicaConfig {
            mode: PatchMode::Baseline,
            read_quorum: ReadQuorumMode::Optimized,
            checkpoint_period: 16,
            request_timeout: 400,
            batch_limit: 16,
            reply_store: true,
            lag_timeout: 100,
        }
    }
}

impl ReplicaConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.checkpoint_period == 0 {
            return Err("replica.checkpoint_period must be at least 1".into());
        }
        if self.request_timeout == 0 {
            return Err("replica.request_timeout must be positive".into());
        }
        if self.batch_limit == 0 {
            return Err("replica.batch_limit must be at least 1".into());
        }
        if self.lag_timeout == 0 {
            return Err("replica.lag_timeout must be positive".into());
        }
        Ok(())
    }
}

pub const REQUEST_TIMER: TimerId = 1;
pub const STATE_TIMER: TimerId = 2;

type ReqId = (ClientId, u64);
type Votes = BTreeMap<(Regency, Digest), BTreeMap<ReplicaId, Attestation>>;

#[derive(Default, Debug)]
struct Slot {
    /// First proposal accepted in each view.
    proposals: BTreeMap<Regency, Proposal>,
    /// Every value seen for this instance, by digest.
    values: BTreeMap<Digest, Proposal>,
    prepares: Votes,
    accepts: Votes,
    sent_accept: BTreeSet<Regency>,
    prepared: Option<(Proposal, PreparedCertificate)>,
    decided: Option<(Proposal, DecisionProof)>,
    probed: bool,
    waiting: BTreeSet<ReplicaId>,
    served: BTreeSet<ReplicaId>,
    echoed: bool,
}

#[derive(Debug)]
pub struct Replica {
    id: ReplicaId,
    params: SystemParams,
    auth: Arc<dyn Authenticator>,
    cfg: ReplicaConfig,
    now: SimTime,

    regency: Regency,
    synced: bool,
    slots: BTreeMap<Instance, Slot>,
    last_executed: Instance,
    state: KvState,
    store: ReplyStore,
    checkpoint: Option<Checkpoint>,

    ckpt_votes: BTreeMap<Instance, BTreeMap<ReplicaId, Digest>>,
    state_timer: bool,

    pending: BTreeMap<ReqId, (Request, SimTime)>,
    request_timer: bool,
    timer_stage: u32,

    next_instance: Instance,
    outstanding: BTreeSet<Instance>,
    expected: BTreeMap<Instance, Digest>,
    buffered: Vec<(Regency, Proposal)>,

    stops: BTreeMap<Regency, BTreeSet<ReplicaId>>,
    stop_sent: Regency,
    stop_data: BTreeMap<Regency, BTreeMap<ReplicaId, StopData>>,
}

impl Replica {
    pub fn new(id: ReplicaId, params: SystemParams, auth: Arc<dyn Authenticator>, cfg: ReplicaConfig) -> Self {
        Replica {
            id,
            params,
            auth,
            cfg,
            now: 0,
            regency: 0,
            synced: true,
            slots: BTreeMap::new(),
            last_executed: 0,
            state: KvState::default(),
            store: ReplyStore::default(),
            checkpoint: None,
            ckpt_votes: BTreeMap::new(),
            state_timer: false,
            pending: BTreeMap::new(),
            request_timer: false,
            timer_stage: 0,
            next_instance: 1,
            outstanding: BTreeSet::new(),
            expected: BTreeMap::new(),
            buffered: Vec::new(),
            stops: BTreeMap::new(),
            stop_sent: 0,
            stop_data: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    pub fn regency(&self) -> Regency {
        self.regency
    }

    pub fn is_synced(&self) -> bool {
        self.synced
    }

    pub fn is_leader(&self) -> bool {
        self.params.leader_of(self.regency) == self.id
    }

    pub fn last_executed(&self) -> Instance {
        self.last_executed
    }

    pub fn state(&self) -> &KvState {
        &self.state
    }

    pub fn reply_store(&self) -> &ReplyStore {
        &self.store
    }

    pub fn checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoint.as_ref()
    }

    pub fn pending_requests(&self) -> usize {
        self.pending.len()
    }

    pub fn stop_sent(&self) -> Regency {
        self.stop_sent
    }

    /// Digest decided for `c`, if still in the log.
    pub fn decided(&self, c: Instance) -> Option<Digest> {
        self.slots
            .get(&c)
            .and_then(|s| s.decided.as_ref())
            .map(|(v, _)| v.digest())
    }

    fn low_water(&self) -> Instance {
        self.checkpoint.as_ref().map_or(0, |c| c.up_to)
    }

    fn window_end(&self) -> Instance {
        self.last_executed.max(self.low_water()) + (4 * self.cfg.checkpoint_period).max(1024)
    }

    fn timeout(&self) -> SimTime {
        self.cfg.request_timeout.saturating_mul(1u64 << self.regency.min(20))
    }

    fn broadcast(&self, msg: Message, out: &mut Outbox<Message>) {
        for r in self.params.replicas().filter(|r| *r != self.id) {
            out.send(NodeId::Replica(r), msg.clone());
        }
    }

    fn note(&self, out: &mut Outbox<Message>, note: Note) {
        out.note(note);
    }

    // ---- client requests -------------------------------------------------

    fn on_request(&mut self, from: NodeId, req: Request, out: &mut Outbox<Message>) {
        if let NodeId::Client(c) = from {
            if c != req.client {
                return;
            }
        }
        if self.store.executed(req.client, req.seq) {
            if let Some(stored) = self.store.reply_for(req.client, req.seq) {
                out.send(NodeId::Client(req.client), Message::Reply(stored.to_reply(self.id)));
            } else if self.store.last_seq(req.client) == Some(req.seq) {
                self.note(
                    out,
                    Note::new(TraceKind::Unanswerable)
                        .inst(req.seq)
                        .peer(NodeId::Client(req.client)),
                );
            }
            return;
        }
        self.pending.entry(req.id()).or_insert((req, self.now));
        self.arm_request_timer(out);
        self.maybe_propose(out);
    }

    fn on_read_only(&mut self, from: NodeId, req: Request, out: &mut Outbox<Message>) {
        let crate::types::Operation::Read { key } = req.op else {
            return;
        };
        if from != NodeId::Client(req.client) {
            return;
        }
        let reply = Reply {
            client_seq: req.seq,
            replica: self.id,
            result: crate::types::OpResult::Value(self.state.get(key).cloned()),
            ordered: false,
            executed_up_to: self.last_executed,
        };
        out.send(from, Message::Reply(reply));
    }

    fn arm_request_timer(&mut self, out: &mut Outbox<Message>) {
        if !self.request_timer && (!self.pending.is_empty() || !self.synced) {
            self.request_timer = true;
            out.set_timer(REQUEST_TIMER, self.timeout());
        }
    }

    fn on_request_timer(&mut self, out: &mut Outbox<Message>) {
        self.request_timer = false;
        if !self.synced {
            // the new leader did not deliver SYNC in time
            self.start_stop(self.regency + 1, out);
            return;
        }
        let timeout = self.timeout();
        let Some(oldest) = self.pending.values().map(|(_, t)| *t).min() else {
            return;
        };
        if oldest + timeout > self.now {
            self.request_timer = true;
            out.set_timer(REQUEST_TIMER, oldest + timeout - self.now);
            return;
        }
        self.timer_stage += 1;
        if self.timer_stage == 1 {
            let leader = self.params.leader_of(self.regency);
            let now = self.now;
            for (req, t) in self.pending.values_mut() {
                if *t + timeout <= now {
                    *t = now;
                    if leader != self.id {
                        out.send(NodeId::Replica(leader), Message::Request(req.clone()));
                    }
                }
            }
            self.arm_request_timer(out);
        } else {
            self.start_stop(self.regency + 1, out);
        }
    }

    // ---- leader ----------------------------------------------------------

    fn in_flight(&self) -> BTreeSet<ReqId> {
        let mut ids = BTreeSet::new();
        for (_, slot) in self.slots.range(self.last_executed + 1..) {
            let value = slot
                .decided
                .as_ref()
                .map(|(v, _)| v)
                .or_else(|| slot.proposals.get(&self.regency));
            if let Some(v) = value {
                ids.extend(v.batch().iter().map(Request::id));
            }
        }
        ids
    }

    fn maybe_propose(&mut self, out: &mut Outbox<Message>) {
        if !self.is_leader() || !self.synced || !self.outstanding.is_empty() {
            return;
        }
        let busy = self.in_flight();
        let batch: Vec<Request> = self
            .pending
            .iter()
            .filter(|(id, _)| !busy.contains(id))
            .take(self.cfg.batch_limit)
            .map(|(_, (r, _))| r.clone())
            .collect();
        if batch.is_empty() {
            return;
        }
        let c = self.next_instance.max(self.last_executed + 1).max(self.low_water() + 1);
        self.next_instance = c + 1;
        self.propose_value(Proposal::new(c, batch), out);
    }

    fn propose_value(&mut self, value: Proposal, out: &mut Outbox<Message>) {
        self.outstanding.insert(value.instance());
        self.broadcast(
            Message::Propose {
                view: self.regency,
                proposal: value.clone(),
            },
            out,
        );
        self.accept_proposal(self.regency, value, out);
    }

    // ---- ordering --------------------------------------------------------

    fn on_propose(&mut self, from: ReplicaId, view: Regency, value: Proposal, out: &mut Outbox<Message>) {
        if from != self.params.leader_of(view) || view < self.regency {
            return;
        }
        if view > self.regency || !self.synced {
            self.buffered.push((view, value));
            return;
        }
        self.accept_proposal(view, value, out);
    }

    fn accept_proposal(&mut self, view: Regency, value: Proposal, out: &mut Outbox<Message>) {
        let c = value.instance();
        if c <= self.low_water() || c > self.window_end() {
            return;
        }
        let h = value.digest();
        let conflict = self.expected.get(&c).is_some_and(|d| *d != h) || {
            let slot = self.slots.entry(c).or_default();
            slot.proposals.get(&view).is_some_and(|p| p.digest() != h)
                || slot.decided.as_ref().is_some_and(|(v, _)| v.digest() != h)
        };
        if conflict {
            self.note(out, Note::new(TraceKind::Conflict).inst(c).digest(h));
            // a mismatching proposal may satisfy the decision-request trigger
            self.try_progress(c, out);
            return;
        }
        let slot = self.slots.entry(c).or_default();
        if slot.proposals.contains_key(&view) {
            return;
        }
        slot.proposals.insert(view, value.clone());
        slot.values.insert(h, value);
        let att = Attestation::sign(self.auth.as_ref(), Phase::Prepare, self.id, c, view, h);
        self.broadcast(Message::Prepare(att.clone()), out);
        self.record(att, out);
    }

    fn on_attestation(&mut self, from: ReplicaId, att: Attestation, out: &mut Outbox<Message>) {
        if att.signer != from
            || att.instance <= self.low_water()
            || att.instance > self.window_end()
            || !att.verify(self.auth.as_ref())
        {
            return;
        }
        self.record(att, out);
    }

    fn record(&mut self, att: Attestation, out: &mut Outbox<Message>) {
        let c = att.instance;
        let slot = self.slots.entry(c).or_default();
        let votes = match att.phase {
            Phase::Prepare => &mut slot.prepares,
            Phase::Accept => &mut slot.accepts,
        };
        votes
            .entry((att.view, att.digest))
            .or_default()
            .entry(att.signer)
            .or_insert(att);
        self.try_progress(c, out);
    }

    fn try_progress(&mut self, c: Instance, out: &mut Outbox<Message>) {
        let q = quorum_size(self.params);
        let view = self.regency;
        let Some(slot) = self.slots.get_mut(&c) else {
            return;
        };

        if self.synced && !slot.sent_accept.contains(&view) {
            if let Some(p) = slot.proposals.get(&view).cloned() {
                let h = p.digest();
                if let Some(votes) = slot.prepares.get(&(view, h)).filter(|v| v.len() >= q) {
                    let atts = votes.values().cloned().collect();
                    if let Ok(cert) = make_prepared_certificate(self.params, c, h, atts) {
                        if slot.decided.is_none() {
                            slot.prepared = Some((p, cert));
                        }
                        slot.sent_accept.insert(view);
                        let att = Attestation::sign(self.auth.as_ref(), Phase::Accept, self.id, c, view, h);
                        self.broadcast(Message::Accept(att.clone()), out);
                        self.record(att, out);
                        return;
                    }
                }
            }
        }

        let Some(slot) = self.slots.get(&c) else {
            return;
        };
        if slot.decided.is_some() {
            return;
        }
        let decision = slot.accepts.iter().find_map(|((_, h), votes)| {
            let value = slot.values.get(h).filter(|_| votes.len() >= q)?;
            let proof = make_proof(self.params, c, *h, votes.values().cloned().collect()).ok()?;
            Some((value.clone(), proof))
        });
        if let Some((value, proof)) = decision {
            self.decide(value, proof, "quorum", out);
            return;
        }
        if self.cfg.mode == PatchMode::Forward && !slot.probed {
            let w = weak_certificate_size(self.params);
            let unknown = slot
                .accepts
                .iter()
                .any(|((_, h), votes)| votes.len() >= w && !slot.values.contains_key(h));
            if unknown {
                self.probe(c, out);
            }
        }
    }

    fn probe(&mut self, c: Instance, out: &mut Outbox<Message>) {
        if let Some(slot) = self.slots.get_mut(&c) {
            slot.probed = true;
        }
        let n = self.params.n();
        let targets: Vec<ReplicaId> = (1..n)
            .map(|k| ReplicaId((self.id.0 + k) % n))
            .take(2 * self.params.f() as usize)
            .collect();
        for t in &targets {
            out.send(NodeId::Replica(*t), Message::ReqDecision { instance: c });
        }
        let names: Vec<String> = targets.iter().map(|t| t.to_string()).collect();
        self.note(out, Note::new(TraceKind::Probe).inst(c).detail(names.join(",")));
    }

    fn decide(&mut self, value: Proposal, proof: DecisionProof, how: &str, out: &mut Outbox<Message>) {
        let c = value.instance();
        if c <= self.last_executed || c <= self.low_water() {
            return;
        }
        let slot = self.slots.entry(c).or_default();
        if slot.decided.is_some() {
            return;
        }
        slot.values.insert(value.digest(), value.clone());
        slot.decided = Some((value.clone(), proof.clone()));
        let waiting = std::mem::take(&mut slot.waiting);
        let fresh: Vec<ReplicaId> = waiting.into_iter().filter(|r| slot.served.insert(*r)).collect();
        self.note(
            out,
            Note::new(TraceKind::Decide).inst(c).digest(value.digest()).detail(how),
        );
        let fwd = Message::FwdDecision { value, proof };
        if self.cfg.mode == PatchMode::Broadcast {
            self.broadcast(fwd.clone(), out);
        }
        for r in fresh {
            out.send(NodeId::Replica(r), fwd.clone());
        }
        self.outstanding.remove(&c);
        self.next_instance = self.next_instance.max(c + 1);
        self.try_execute(out);
        self.maybe_propose(out);
    }

    fn try_execute(&mut self, out: &mut Outbox<Message>) {
        while let Some((value, _)) = self
            .slots
            .get(&(self.last_executed + 1))
            .and_then(|s| s.decided.clone())
        {
            self.execute(value, out);
        }
    }

    fn execute(&mut self, value: Proposal, out: &mut Outbox<Message>) {
        let c = value.instance();
        for req in value.batch() {
            if self.store.executed(req.client, req.seq) {
                continue;
            }
            let result = self.state.apply(&req.op);
            let stored = StoredReply {
                seq: req.seq,
                result,
                instance: c,
            };
            out.send(NodeId::Client(req.client), Message::Reply(stored.to_reply(self.id)));
            self.store.record(req.client, stored);
            let (client, seq) = req.id();
            self.pending.retain(|(cl, s), _| *cl != client || *s > seq);
        }
        self.last_executed = c;
        self.timer_stage = 0;
        self.note(out, Note::new(TraceKind::Execute).inst(c).digest(value.digest()));
        if c.is_multiple_of(self.cfg.checkpoint_period) {
            self.take_checkpoint(c, out);
        }
    }

    // ---- decision forwarding ---------------------------------------------

    fn on_req_decision(&mut self, from: ReplicaId, c: Instance, out: &mut Outbox<Message>) {
        if c <= self.low_water() {
            if let Some((value, proof)) = self.checkpoint.as_ref().and_then(|cp| cp.last.clone()) {
                out.send(
                    NodeId::Replica(from),
                    Message::OutdatedReq {
                        requested: c,
                        value,
                        proof,
                    },
                );
            }
            return;
        }
        if c > self.window_end() {
            return;
        }
        let slot = self.slots.entry(c).or_default();
        match &slot.decided {
            Some((value, proof)) => {
                if slot.served.insert(from) {
                    out.send(
                        NodeId::Replica(from),
                        Message::FwdDecision {
                            value: value.clone(),
                            proof: proof.clone(),
                        },
                    );
                }
            }
            None => {
                slot.waiting.insert(from);
            }
        }
    }

    fn on_fwd_decision(&mut self, value: Proposal, proof: DecisionProof, out: &mut Outbox<Message>) {
        let c = value.instance();
        if c <= self.last_executed || c <= self.low_water() {
            return;
        }
        if self.slots.get(&c).is_some_and(|s| s.decided.is_some()) {
            return;
        }
        if !verify_proof(self.params, self.auth.as_ref(), c, &value, &proof) {
            return;
        }
        if self.cfg.mode == PatchMode::Forward {
            let slot = self.slots.entry(c).or_default();
            if !slot.echoed {
                slot.echoed = true;
                self.broadcast(
                    Message::FwdDecision {
                        value: value.clone(),
                        proof: proof.clone(),
                    },
                    out,
                );
                self.note(out, Note::new(TraceKind::Echo).inst(c).digest(value.digest()));
            }
        }
        self.decide(value, proof, "forwarded", out);
    }

    fn on_outdated(&mut self, requested: Instance, value: Proposal, proof: DecisionProof, out: &mut Outbox<Message>) {
        let c = value.instance();
        if c <= self.last_executed || !verify_proof(self.params, self.auth.as_ref(), c, &value, &proof) {
            return;
        }
        self.note(
            out,
            Note::new(TraceKind::Outdated)
                .inst(requested)
                .detail(format!("checkpoint {c}")),
        );
        self.request_state(out);
    }

    // ---- checkpoints and state transfer ----------------------------------

    fn take_checkpoint(&mut self, c: Instance, out: &mut Outbox<Message>) {
        let replies = if self.cfg.reply_store {
            self.store.clone()
        } else {
            self.store.without_replies()
        };
        let cp = Checkpoint {
            up_to: c,
            state: self.state.clone(),
            replies,
            last: self.slots.get(&c).and_then(|s| s.decided.clone()),
        };
        let digest = cp.digest();
        self.note(out, Note::new(TraceKind::Checkpoint).inst(c).digest(digest));
        self.broadcast(Message::Checkpoint { up_to: c, digest }, out);
        self.install_local_checkpoint(cp);
    }

    fn install_local_checkpoint(&mut self, cp: Checkpoint) {
        let up_to = cp.up_to;
        self.slots.retain(|k, _| *k > up_to);
        self.ckpt_votes.retain(|k, _| *k > up_to);
        self.outstanding.retain(|k| *k > up_to);
        self.expected.retain(|k, _| *k > up_to);
        self.checkpoint = Some(cp);
    }

    fn stable_target(&self) -> Option<Instance> {
        let w = weak_certificate_size(self.params);
        self.ckpt_votes
            .iter()
            .rev()
            .find(|(up_to, votes)| {
                **up_to > self.last_executed && {
                    let mut counts: BTreeMap<Digest, usize> = BTreeMap::new();
                    for d in votes.values() {
                        *counts.entry(*d).or_default() += 1;
                    }
                    counts.values().any(|n| *n >= w)
                }
            })
            .map(|(up_to, _)| *up_to)
    }

    fn on_checkpoint_vote(&mut self, from: ReplicaId, up_to: Instance, digest: Digest, out: &mut Outbox<Message>) {
        if up_to <= self.last_executed || up_to > self.window_end() {
            return;
        }
        self.ckpt_votes.entry(up_to).or_default().insert(from, digest);
        if !self.state_timer && self.stable_target().is_some() {
            self.state_timer = true;
            out.set_timer(STATE_TIMER, self.cfg.lag_timeout);
        }
    }

    fn on_state_timer(&mut self, out: &mut Outbox<Message>) {
        self.state_timer = false;
        if self.stable_target().is_some() {
            self.request_state(out);
        }
    }

    fn request_state(&mut self, out: &mut Outbox<Message>) {
        self.note(out, Note::new(TraceKind::StateTransfer).detail("request"));
        self.broadcast(Message::StateRequest, out);
        if !self.state_timer {
            self.state_timer = true;
            out.set_timer(STATE_TIMER, self.cfg.request_timeout);
        }
    }

    fn on_state_request(&mut self, from: ReplicaId, out: &mut Outbox<Message>) {
        if let Some(cp) = &self.checkpoint {
            out.send(NodeId::Replica(from), Message::StateReply(Box::new(cp.clone())));
        }
    }

    fn on_state_reply(&mut self, from: ReplicaId, cp: Checkpoint, out: &mut Outbox<Message>) {
        if cp.up_to <= self.last_executed {
            return;
        }
        let digest = cp.digest();
        let votes = self.ckpt_votes.entry(cp.up_to).or_default();
        votes.insert(from, digest);
        let matching = votes.values().filter(|d| **d == digest).count();
        if matching < weak_certificate_size(self.params) {
            return;
        }
        if let Some((value, proof)) = &cp.last {
            if !verify_proof(self.params, self.auth.as_ref(), cp.up_to, value, proof) {
                return;
            }
        }
        let up_to = cp.up_to;
        self.state = cp.state.clone();
        self.store = cp.replies.clone();
        self.last_executed = up_to;
        let store = &self.store;
        self.pending.retain(|(c, s), _| !store.executed(*c, *s));
        self.next_instance = self.next_instance.max(up_to + 1);
        self.timer_stage = 0;
        self.install_local_checkpoint(cp);
        self.note(
            out,
            Note::new(TraceKind::StateTransfer)
                .inst(up_to)
                .digest(digest)
                .peer(NodeId::Replica(from))
                .detail("installed"),
        );
        self.try_execute(out);
        self.maybe_propose(out);
    }

    // ---- leader change ---------------------------------------------------

    fn start_stop(&mut self, regency: Regency, out: &mut Outbox<Message>) {
        if self.stop_sent >= regency || regency <= self.regency {
            return;
        }
        self.stop_sent = regency;
        self.note(out, Note::new(TraceKind::Stop).inst(regency));
        self.broadcast(Message::Stop { regency }, out);
        self.on_stop(self.id, regency, out);
    }

    fn on_stop(&mut self, from: ReplicaId, regency: Regency, out: &mut Outbox<Message>) {
        if regency <= self.regency {
            return;
        }
        let stops = self.stops.entry(regency).or_default();
        stops.insert(from);
        let count = stops.len();
        if count >= weak_certificate_size(self.params) {
            if self.stop_sent < regency {
                // joining adds our own STOP and re-enters here
                self.start_stop(regency, out);
                return;
            }
            self.install_regency(regency, out);
        }
    }

    fn stop_data_for(&self, regency: Regency) -> StopData {
        let mut decided: Vec<(Proposal, DecisionProof)> = self
            .checkpoint
            .as_ref()
            .and_then(|cp| cp.last.clone())
            .into_iter()
            .collect();
        let mut prepared = Vec::new();
        for slot in self.slots.values() {
            if let Some(d) = &slot.decided {
                decided.push(d.clone());
            } else if let Some(p) = &slot.prepared {
                prepared.push(p.clone());
            }
        }
        StopData::new(self.auth.as_ref(), regency, self.id, decided, prepared)
    }

    fn install_regency(&mut self, regency: Regency, out: &mut Outbox<Message>) {
        if regency <= self.regency {
            return;
        }
        self.regency = regency;
        self.synced = false;
        self.timer_stage = 0;
        self.expected.clear();
        self.outstanding.clear();
        self.stops.retain(|r, _| *r > regency);
        self.buffered.retain(|(v, _)| *v >= regency);
        let leader = self.params.leader_of(regency);
        self.note(
            out,
            Note::new(TraceKind::Regency)
                .inst(regency)
                .peer(NodeId::Replica(leader)),
        );
        let sd = self.stop_data_for(regency);
        if leader == self.id {
            self.stop_data.entry(regency).or_default().insert(self.id, sd);
            self.try_sync(regency, out);
        } else {
            out.send(NodeId::Replica(leader), Message::StopData(sd));
        }
        self.request_timer = false;
        out.cancel_timer(REQUEST_TIMER);
        self.arm_request_timer(out);
    }

    fn on_stop_data(&mut self, from: ReplicaId, sd: StopData, out: &mut Outbox<Message>) {
        if sd.sender != from
            || sd.regency < self.regency
            || self.params.leader_of(sd.regency) != self.id
            || !sd.verify(self.auth.as_ref())
        {
            return;
        }
        let r = sd.regency;
        self.stop_data.entry(r).or_default().insert(from, sd);
        self.try_sync(r, out);
    }

    fn try_sync(&mut self, regency: Regency, out: &mut Outbox<Message>) {
        if regency != self.regency || self.synced || !self.is_leader() {
            return;
        }
        let Some(collected) = self.stop_data.get(&regency) else {
            return;
        };
        if collected.len() < quorum_size(self.params) || !collected.contains_key(&self.id) {
            return;
        }
        let set: Vec<StopData> = collected.values().cloned().collect();
        let Ok(plan) = compute_plan(self.params, self.auth.as_ref(), regency, &set) else {
            return;
        };
        self.broadcast(
            Message::Sync {
                regency,
                stop_data: set,
            },
            out,
        );
        self.stop_data.retain(|r, _| *r > regency);
        self.apply_sync(plan, out);
    }

    fn on_sync(&mut self, from: ReplicaId, regency: Regency, stop_data: Vec<StopData>, out: &mut Outbox<Message>) {
        if from != self.params.leader_of(regency) || regency < self.regency || (regency == self.regency && self.synced)
        {
            return;
        }
        let Ok(plan) = compute_plan(self.params, self.auth.as_ref(), regency, &stop_data) else {
            return;
        };
        if regency > self.regency {
            self.stop_sent = self.stop_sent.max(regency);
            self.install_regency(regency, out);
        }
        self.apply_sync(plan, out);
    }

    fn apply_sync(&mut self, plan: SyncPlan, out: &mut Outbox<Message>) {
        self.synced = true;
        self.note(
            out,
            Note::new(TraceKind::Regency).inst(plan.regency).detail(format!(
                "sync decided={} next={}",
                plan.decided_up_to, plan.next_instance
            )),
        );
        for (_, (value, proof)) in plan.decided {
            self.decide(value, proof, "sync", out);
        }
        self.expected = plan.reproposals.iter().map(|(c, v)| (*c, v.digest())).collect();
        if self.is_leader() {
            let highest_decided = self
                .slots
                .iter()
                .rev()
                .find(|(_, s)| s.decided.is_some())
                .map_or(0, |(c, _)| *c);
            self.next_instance = plan.next_instance.max(highest_decided + 1).max(self.last_executed + 1);
            for value in plan.reproposals.into_values() {
                if value.instance() > self.low_water() {
                    self.propose_value(value, out);
                }
            }
        }
        let regency = self.regency;
        let buffered = std::mem::take(&mut self.buffered);
        for (view, value) in buffered {
            if view == regency {
                self.accept_proposal(view, value, out);
            } else if view > regency {
                self.buffered.push((view, value));
            }
        }
        let open: Vec<Instance> = self.slots.keys().copied().collect();
        for c in open {
            self.try_progress(c, out);
        }
        self.request_timer = false;
        out.cancel_timer(REQUEST_TIMER);
        self.arm_request_timer(out);
        self.maybe_propose(out);
    }
}

impl Node<Message> for Replica {
    fn on_message(&mut self, now: SimTime, from: NodeId, msg: Message, out: &mut Outbox<Message>) {
        self.now = now;
        match (msg, from) {
            (Message::Request(req), _) => self.on_request(from, req, out),
            (Message::ReadOnly(req), _) => self.on_read_only(from, req, out),
            (Message::Reply(_), _) => {}
            (msg, NodeId::Client(_)) => {
                let _ = msg;
            }
            (msg, NodeId::Replica(r)) => match msg {
                Message::Propose { view, proposal } => self.on_propose(r, view, proposal, out),
                Message::Prepare(a) if a.phase == Phase::Prepare => self.on_attestation(r, a, out),
                Message::Accept(a) if a.phase == Phase::Accept => self.on_attestation(r, a, out),
                Message::ReqDecision { instance } => self.on_req_decision(r, instance, out),
                Message::FwdDecision { value, proof } => self.on_fwd_decision(value, proof, out),
                Message::OutdatedReq {
                    requested,
                    value,
                    proof,
                } => self.on_outdated(requested, value, proof, out),
                Message::Stop { regency } => self.on_stop(r, regency, out),
                Message::StopData(sd) => self.on_stop_data(r, sd, out),
                Message::Sync { regency, stop_data } => self.on_sync(r, regency, stop_data, out),
                Message::Checkpoint { up_to, digest } => self.on_checkpoint_vote(r, up_to, digest, out),
                Message::StateRequest => self.on_state_request(r, out),
                Message::StateReply(cp) => self.on_state_reply(r, *cp, out),
                _ => {}
            },
        }
    }

    fn on_timer(&mut self, now: SimTime, timer: TimerId, out: &mut Outbox<Message>) {
        self.now = now;
        match timer {
            REQUEST_TIMER => self.on_request_timer(out),
            STATE_TIMER => self.on_state_timer(out),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests;
