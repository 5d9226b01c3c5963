use std::collections::VecDeque;

use super::*;
use crate::protocol::MacAuthenticator;
use crate::trace::TraceRecord;
use crate::types::{OpResult, Operation};

struct Cluster {
    replicas: Vec<Replica>,
    queue: VecDeque<(NodeId, NodeId, Message)>,
    to_clients: Vec<(ReplicaId, ClientId, Message)>,
    notes: Vec<TraceRecord>,
    /// Links that silently lose everything.
    cut: Vec<(NodeId, NodeId)>,
    sent: Vec<(NodeId, NodeId, Message)>,
    clock: SimTime,
}

fn update(client: u32, seq: u64, v: &str) -> Request {
    Request {
        client: ClientId(client),
        seq,
        op: Operation::Update {
            key: 0,
            value: v.as_bytes().to_vec(),
        },
    }
}

impl Cluster {
    fn new(mode: PatchMode) -> Self {
        Self::with(ReplicaConfig {
            mode,
            ..ReplicaConfig::default()
        })
    }

    fn with(cfg: ReplicaConfig) -> Self {
        let params = SystemParams::minimal(1);
        let auth: Arc<dyn Authenticator> = Arc::new(MacAuthenticator::new(4, 1));
        let replicas = (0..4)
            .map(|i| Replica::new(ReplicaId(i), params, auth.clone(), cfg.clone()))
            .collect();
        Cluster {
            replicas,
            queue: VecDeque::new(),
            to_clients: Vec::new(),
            notes: Vec::new(),
            cut: Vec::new(),
            sent: Vec::new(),
            clock: 0,
        }
    }

    fn absorb(&mut self, from: NodeId, mut out: Outbox<Message>) {
        for n in out.notes() {
            self.notes.push(n.clone().stamp(0, from));
        }
        for (to, msg) in out.take_sends() {
            self.sent.push((from, to, msg.clone()));
            if self.cut.contains(&(from, to)) {
                continue;
            }
            match to {
                NodeId::Client(c) => self.to_clients.push((from.as_replica().unwrap(), c, msg)),
                NodeId::Replica(_) => self.queue.push_back((from, to, msg)),
            }
        }
    }

    fn deliver(&mut self, from: NodeId, to: ReplicaId, msg: Message) {
        let mut out = Outbox::new();
        self.replicas[to.0 as usize].on_message(0, from, msg, &mut out);
        self.absorb(NodeId::Replica(to), out);
    }

    fn client_send(&mut self, req: Request, to: &[u32]) {
        for r in to {
            self.deliver(NodeId::Client(req.client), ReplicaId(*r), Message::Request(req.clone()));
        }
    }

    fn fire(&mut self, r: u32, timer: TimerId) {
        // every firing happens well past any timeout armed so far
        self.clock += 10_000;
        let mut out = Outbox::new();
        self.replicas[r as usize].on_timer(self.clock, timer, &mut out);
        self.absorb(NodeId::replica(r), out);
    }

    fn stop(&mut self, r: u32, regency: Regency) {
        let mut out = Outbox::new();
        self.replicas[r as usize].start_stop(regency, &mut out);
        self.absorb(NodeId::replica(r), out);
    }

    fn run(&mut self) {
        while let Some((from, to, msg)) = self.queue.pop_front() {
            self.deliver(from, to.as_replica().unwrap(), msg);
        }
    }

    fn count_sent(&self, kind: crate::message::MsgKind) -> usize {
        self.sent.iter().filter(|(_, _, m)| m.kind() == kind).count()
    }

    fn replies_to(&self, client: u32) -> Vec<(ReplicaId, Reply)> {
        self.to_clients
            .iter()
            .filter(|(_, c, _)| c.0 == client)
            .filter_map(|(r, _, m)| match m {
                Message::Reply(rep) => Some((*r, rep.clone())),
                _ => None,
            })
            .collect()
    }

    fn notes_of(&self, kind: TraceKind) -> Vec<&TraceRecord> {
        self.notes.iter().filter(|n| n.kind == kind).collect()
    }
}

use crate::message::MsgKind;

#[test]
fn normal_case_decides_and_replies() {
    let mut cl = Cluster::new(PatchMode::Baseline);
    cl.client_send(update(0, 1, "x"), &[0, 1, 2, 3]);
    assert_eq!(cl.count_sent(MsgKind::Propose), 3);
    cl.run();
    for r in &cl.replicas {
        assert_eq!(r.last_executed(), 1);
        assert_eq!(r.state().get(0), Some(&b"x".to_vec()));
    }
    let replies = cl.replies_to(0);
    assert_eq!(replies.len(), 4);
    assert!(replies
        .iter()
        .all(|(_, r)| r.result == OpResult::Written(b"x".to_vec()) && r.ordered));
    // four replicas each send PREPARE and ACCEPT to three peers
    assert_eq!(cl.count_sent(MsgKind::Prepare), 12);
    assert_eq!(cl.count_sent(MsgKind::Accept), 12);
    assert_eq!(cl.count_sent(MsgKind::FwdDecision), 0);
}

#[test]
fn duplicate_of_executed_request_is_answered_from_store() {
    let mut cl = Cluster::new(PatchMode::Baseline);
    cl.client_send(update(0, 1, "x"), &[0, 1, 2, 3]);
    cl.run();
    let before = cl.count_sent(MsgKind::Propose);
    cl.to_clients.clear();
    cl.client_send(update(0, 1, "x"), &[1]);
    cl.run();
    assert_eq!(cl.count_sent(MsgKind::Propose), before);
    let replies = cl.replies_to(0);
    assert_eq!(replies.len(), 1);
    assert_eq!(replies[0].1.executed_up_to, 1);
}

#[test]
fn non_leader_forwards_then_stops() {
    let mut cl = Cluster::new(PatchMode::Baseline);
    let req = update(0, 1, "x");
    let mut out = Outbox::new();
    cl.replicas[2].on_message(0, NodeId::client(0), Message::Request(req.clone()), &mut out);
    assert_eq!(out.timers_set(), vec![(REQUEST_TIMER, 400)]);
    assert!(out.sends().is_empty());
    cl.absorb(NodeId::replica(2), out);
    cl.fire(2, REQUEST_TIMER);
    let fwd: Vec<_> = cl
        .queue
        .iter()
        .filter(|(_, to, m)| *to == NodeId::replica(0) && *m == Message::Request(req.clone()))
        .collect();
    assert_eq!(fwd.len(), 1);
    cl.queue.clear();
    cl.fire(2, REQUEST_TIMER);
    assert_eq!(cl.count_sent(MsgKind::Stop), 3);
    assert_eq!(cl.replicas[2].stop_sent(), 1);
    assert_eq!(cl.replicas[2].regency(), 0);
}

#[test]
fn proposal_from_non_leader_is_dropped() {
    let mut cl = Cluster::new(PatchMode::Baseline);
    cl.deliver(
        NodeId::replica(1),
        ReplicaId(2),
        Message::Propose {
            view: 0,
            proposal: Proposal::new(1, vec![update(0, 1, "x")]),
        },
    );
    assert_eq!(cl.count_sent(MsgKind::Prepare), 0);
}

#[test]
fn second_differing_proposal_is_flagged() {
    let mut cl = Cluster::new(PatchMode::Baseline);
    let a = Proposal::new(1, vec![update(0, 1, "a")]);
    let b = Proposal::new(1, vec![update(0, 1, "b")]);
    cl.deliver(
        NodeId::replica(0),
        ReplicaId(2),
        Message::Propose { view: 0, proposal: a },
    );
    cl.deliver(
        NodeId::replica(0),
        ReplicaId(2),
        Message::Propose {
            view: 0,
            proposal: b.clone(),
        },
    );
    assert_eq!(cl.count_sent(MsgKind::Prepare), 3);
    let conflicts = cl.notes_of(TraceKind::Conflict);
    assert_eq!(conflicts.len(), 1);
    assert_eq!(conflicts[0].digest, Some(b.digest().short()));
}

#[test]
fn duplicate_accept_does_not_count_twice() {
    let mut cl = Cluster::new(PatchMode::Baseline);
    let v = Proposal::new(1, vec![update(0, 1, "x")]);
    let auth = cl.replicas[0].auth.clone();
    cl.deliver(
        NodeId::replica(0),
        ReplicaId(3),
        Message::Propose {
            view: 0,
            proposal: v.clone(),
        },
    );
    let a1 = Attestation::sign(auth.as_ref(), Phase::Accept, ReplicaId(1), 1, 0, v.digest());
    let a2 = Attestation::sign(auth.as_ref(), Phase::Accept, ReplicaId(2), 1, 0, v.digest());
    for _ in 0..3 {
        cl.deliver(NodeId::replica(1), ReplicaId(3), Message::Accept(a1.clone()));
    }
    assert_eq!(cl.replicas[3].decided(1), None);
    cl.deliver(NodeId::replica(2), ReplicaId(3), Message::Accept(a2));
    assert_eq!(cl.replicas[3].decided(1), None, "two distinct signers are below quorum");
    let a0 = Attestation::sign(auth.as_ref(), Phase::Accept, ReplicaId(0), 1, 0, v.digest());
    cl.deliver(NodeId::replica(0), ReplicaId(3), Message::Accept(a0));
    assert_eq!(cl.replicas[3].decided(1), Some(v.digest()));
}

#[test]
fn forged_or_misattributed_attestations_are_ignored() {
    let mut cl = Cluster::new(PatchMode::Baseline);
    let v = Proposal::new(1, vec![update(0, 1, "x")]);
    let auth = cl.replicas[0].auth.clone();
    cl.deliver(
        NodeId::replica(0),
        ReplicaId(3),
        Message::Propose {
            view: 0,
            proposal: v.clone(),
        },
    );
    let mut forged = Attestation::sign(auth.as_ref(), Phase::Accept, ReplicaId(1), 1, 0, v.digest());
    forged.tag[0] ^= 0xff;
    cl.deliver(NodeId::replica(1), ReplicaId(3), Message::Accept(forged));
    let relayed = Attestation::sign(auth.as_ref(), Phase::Accept, ReplicaId(2), 1, 0, v.digest());
    cl.deliver(NodeId::replica(1), ReplicaId(3), Message::Accept(relayed));
    assert!(cl.replicas[3].slots[&1].accepts.values().all(|v| v.is_empty()));
}

fn decided_pair(cl: &Cluster, c: Instance, tag: &str) -> (Proposal, DecisionProof) {
    let v = Proposal::new(c, vec![update(0, c, tag)]);
    let auth = cl.replicas[0].auth.clone();
    let atts = (0..3)
        .map(|i| Attestation::sign(auth.as_ref(), Phase::Accept, ReplicaId(i), c, 0, v.digest()))
        .collect();
    let proof = make_proof(SystemParams::minimal(1), c, v.digest(), atts).unwrap();
    (v, proof)
}

#[test]
fn decision_out_of_order_defers_execution() {
    let mut cl = Cluster::new(PatchMode::Broadcast);
    let (v2, p2) = decided_pair(&cl, 2, "b");
    let (v1, p1) = decided_pair(&cl, 1, "a");
    cl.deliver(
        NodeId::replica(1),
        ReplicaId(3),
        Message::FwdDecision { value: v2, proof: p2 },
    );
    assert!(cl.replicas[3].decided(2).is_some());
    assert_eq!(cl.replicas[3].last_executed(), 0);
    cl.deliver(
        NodeId::replica(1),
        ReplicaId(3),
        Message::FwdDecision { value: v1, proof: p1 },
    );
    assert_eq!(cl.replicas[3].last_executed(), 2);
    assert_eq!(cl.replicas[3].state().get(0), Some(&b"b".to_vec()));
}

#[test]
fn broadcast_mode_sends_each_decision_to_all_peers_once() {
    let mut cl = Cluster::new(PatchMode::Broadcast);
    cl.client_send(update(0, 1, "x"), &[0, 1, 2, 3]);
    cl.run();
    assert_eq!(cl.count_sent(MsgKind::FwdDecision), 12);
    let (v, p) = decided_pair(&cl, 1, "x");
    let before = cl.sent.len();
    cl.deliver(
        NodeId::replica(1),
        ReplicaId(3),
        Message::FwdDecision { value: v, proof: p },
    );
    assert_eq!(cl.sent.len(), before);
}

#[test]
fn forward_mode_isolated_replica_probes_ring_and_echoes() {
    let mut cl = Cluster::new(PatchMode::Forward);
    // the leader omits PROPOSE but nothing else to r3
    cl.client_send(update(0, 1, "x"), &[0, 1, 2, 3]);
    let proposals: Vec<_> = cl.queue.drain(..).collect();
    for (from, to, m) in proposals {
        if !(matches!(m, Message::Propose { .. }) && to == NodeId::replica(3)) {
            cl.queue.push_back((from, to, m));
        }
    }
    cl.run();
    let probes = cl.notes_of(TraceKind::Probe);
    assert_eq!(probes.len(), 1);
    assert_eq!(probes[0].node, "r3");
    assert_eq!(probes[0].detail.as_deref(), Some("r0,r1"));
    let reqs: Vec<_> = cl
        .sent
        .iter()
        .filter(|(_, _, m)| m.kind() == MsgKind::ReqDecision)
        .map(|(f, t, _)| (f.to_string(), t.to_string()))
        .collect();
    assert_eq!(reqs, vec![("r3".into(), "r0".into()), ("r3".into(), "r1".into())]);
    assert_eq!(cl.replicas[3].last_executed(), 1);
    assert_eq!(cl.notes_of(TraceKind::Echo).len(), 1);
    // two answers (r0, r1) and one echo broadcast
    assert_eq!(cl.count_sent(MsgKind::FwdDecision), 2 + 3);
    assert_eq!(cl.replies_to(0).len(), 4);
}

#[test]
fn forward_mode_fault_free_sends_no_probes() {
    let mut cl = Cluster::new(PatchMode::Forward);
    for seq in 1..=5 {
        cl.client_send(update(0, seq, "x"), &[0, 1, 2, 3]);
        cl.run();
    }
    assert_eq!(cl.count_sent(MsgKind::ReqDecision), 0);
    assert_eq!(cl.count_sent(MsgKind::FwdDecision), 0);
}

#[test]
fn decision_requests_are_served_once_even_when_deferred() {
    let mut cl = Cluster::new(PatchMode::Forward);
    cl.deliver(NodeId::replica(3), ReplicaId(1), Message::ReqDecision { instance: 1 });
    cl.deliver(NodeId::replica(3), ReplicaId(1), Message::ReqDecision { instance: 1 });
    assert_eq!(cl.count_sent(MsgKind::FwdDecision), 0);
    cl.client_send(update(0, 1, "x"), &[0, 1, 2, 3]);
    cl.run();
    let to_r3 = cl
        .sent
        .iter()
        .filter(|(f, t, m)| *f == NodeId::replica(1) && *t == NodeId::replica(3) && m.kind() == MsgKind::FwdDecision)
        .count();
    assert_eq!(to_r3, 1);
    cl.deliver(NodeId::replica(3), ReplicaId(1), Message::ReqDecision { instance: 1 });
    let to_r3_after = cl
        .sent
        .iter()
        .filter(|(f, t, m)| *f == NodeId::replica(1) && *t == NodeId::replica(3) && m.kind() == MsgKind::FwdDecision)
        .count();
    assert_eq!(to_r3_after, 1);
}

#[test]
fn invalid_forwarded_proof_is_dropped() {
    let mut cl = Cluster::new(PatchMode::Forward);
    let (v, mut p) = decided_pair(&cl, 1, "x");
    p.attestations.pop();
    cl.deliver(
        NodeId::replica(1),
        ReplicaId(3),
        Message::FwdDecision {
            value: v.clone(),
            proof: p,
        },
    );
    assert_eq!(cl.replicas[3].decided(1), None);
    let (_, p) = decided_pair(&cl, 1, "x");
    let other = Proposal::new(1, vec![update(0, 1, "y")]);
    cl.deliver(
        NodeId::replica(1),
        ReplicaId(3),
        Message::FwdDecision { value: other, proof: p },
    );
    assert_eq!(cl.replicas[3].decided(1), None);
    assert!(cl.sent.is_empty());
}

fn small_period(mode: PatchMode, reply_store: bool) -> Cluster {
    Cluster::with(ReplicaConfig {
        mode,
        checkpoint_period: 4,
        reply_store,
        ..ReplicaConfig::default()
    })
}

#[test]
fn checkpoint_collects_garbage_and_answers_outdated_requests() {
    let mut cl = small_period(PatchMode::Forward, true);
    for seq in 1..=4 {
        cl.client_send(update(0, seq, "x"), &[0, 1, 2, 3]);
        cl.run();
    }
    for r in &cl.replicas {
        assert_eq!(r.checkpoint().unwrap().up_to, 4);
        assert!(r.slots.is_empty());
    }
    assert_eq!(cl.notes_of(TraceKind::Checkpoint).len(), 4);
    cl.deliver(NodeId::replica(3), ReplicaId(1), Message::ReqDecision { instance: 2 });
    let outdated = cl.sent.iter().rev().find(|(_, _, m)| m.kind() == MsgKind::OutdatedReq);
    match outdated {
        Some((_, _, Message::OutdatedReq { requested, value, .. })) => {
            assert_eq!(*requested, 2);
            assert_eq!(value.instance(), 4);
        }
        other => panic!("expected OUTDATED-REQ, got {other:?}"),
    }
}

fn lagging_cluster(reply_store: bool) -> Cluster {
    let mut cl = small_period(PatchMode::Baseline, reply_store);
    for r in 0..3 {
        cl.cut.push((NodeId::replica(r), NodeId::replica(3)));
    }
    for seq in 1..=4 {
        cl.client_send(update(0, seq, &format!("v{seq}")), &[0, 1, 2]);
        cl.run();
    }
    cl.cut.clear();
    assert_eq!(cl.replicas[3].last_executed(), 0);
    // CHECKPOINT votes reach the laggard
    for r in 0..3 {
        let d = cl.replicas[r].checkpoint().unwrap().digest();
        cl.deliver(
            NodeId::replica(r as u32),
            ReplicaId(3),
            Message::Checkpoint { up_to: 4, digest: d },
        );
    }
    cl.fire(3, STATE_TIMER);
    cl.run();
    cl
}

#[test]
fn state_transfer_with_reply_store_answers_retransmission() {
    let mut cl = lagging_cluster(true);
    let r3 = &cl.replicas[3];
    assert_eq!(r3.last_executed(), 4);
    assert_eq!(r3.state().get(0), Some(&b"v4".to_vec()));
    assert_eq!(
        r3.checkpoint().unwrap().digest(),
        cl.replicas[0].checkpoint().unwrap().digest()
    );
    cl.to_clients.clear();
    cl.client_send(update(0, 4, "v4"), &[3]);
    let replies = cl.replies_to(0);
    assert_eq!(replies.len(), 1);
    assert_eq!(replies[0].1.result, OpResult::Written(b"v4".to_vec()));
    assert_eq!(replies[0].1.executed_up_to, 4);
}

#[test]
fn state_transfer_without_reply_store_cannot_answer() {
    let mut cl = lagging_cluster(false);
    assert_eq!(cl.replicas[3].last_executed(), 4);
    cl.to_clients.clear();
    cl.client_send(update(0, 4, "v4"), &[3]);
    assert!(cl.replies_to(0).is_empty());
    assert_eq!(cl.notes_of(TraceKind::Unanswerable).len(), 1);
    // live replicas still answer
    cl.client_send(update(0, 4, "v4"), &[1]);
    assert_eq!(cl.replies_to(0).len(), 1);
}

#[test]
fn f_stops_keep_regency_f_plus_one_change_it() {
    let mut cl = Cluster::new(PatchMode::Baseline);
    cl.stop(3, 1);
    cl.run();
    assert!(cl.replicas.iter().all(|r| r.regency() == 0));
    cl.stop(2, 1);
    cl.run();
    // r0 and r1 join at f+1 STOPs
    assert!(cl.replicas.iter().all(|r| r.regency() == 1));
    assert!(cl.replicas.iter().all(|r| r.is_synced()));
    assert_eq!(cl.count_sent(MsgKind::Sync), 3);
}

#[test]
fn new_leader_reproposes_prepared_value() {
    let mut cl = Cluster::new(PatchMode::Baseline);
    // ACCEPTs are held back: everyone prepares, nobody decides
    cl.client_send(update(0, 1, "x"), &[0, 1, 2, 3]);
    let mut held = Vec::new();
    while let Some((from, to, m)) = cl.queue.pop_front() {
        if m.kind() == MsgKind::Accept {
            held.push(m);
            continue;
        }
        cl.deliver(from, to.as_replica().unwrap(), m);
    }
    assert!(cl.replicas.iter().all(|r| r.last_executed() == 0));
    assert!(cl.replicas.iter().all(|r| r.slots[&1].prepared.is_some()));
    cl.stop(2, 1);
    cl.stop(3, 1);
    cl.run();
    assert!(cl.replicas.iter().all(|r| r.regency() == 1 && r.last_executed() == 1));
    assert!(cl.replicas.iter().all(|r| r.state().get(0) == Some(&b"x".to_vec())));
    let decides: Vec<_> = cl.notes_of(TraceKind::Decide);
    assert_eq!(decides.len(), 4);
}
