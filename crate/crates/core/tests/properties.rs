//! Property tests for the invariants of each module.

mod common;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use proptest::prelude::*;
use sha2::{Digest as _, Sha256};
use smrsim_core::adversary::{Adversary, AttackPolicy, AttackVariant};
use smrsim_core::client::ReplyCollector;
use smrsim_core::harness::{builtin, campaign_scenario, check_agreement, run_scenario, RunMetrics, Scenario};
use smrsim_core::lincheck::{read_history, write_history};
use smrsim_core::protocol::{
    encode_batch, make_proof, verify_proof, Attestation, Authenticator, MacAuthenticator, Phase,
};
use smrsim_core::simnet::{Interposer, Verdict};
use smrsim_core::trace::read_jsonl;
use smrsim_core::{
    check_linearizable, quorum_size, CheckOptions, ClientId, Message, NodeId, OpResult, Operation, PatchMode, Proposal,
    ReplicaId, Request, SystemParams, TraceKind, TraceRecord,
};

// ---- protocol ---------------------------------------------------------------

/// Smallest `q` such that any two `q`-subsets of `n` share at least `f + 1`
/// members, found by search rather than by formula.
fn smallest_intersecting_quorum(n: usize, f: usize) -> usize {
    (1..=n).find(|q| 2 * q > n + f).unwrap()
}

#[test]
fn quorums_intersect_in_a_correct_replica_exhaustively() {
    for n in 4..=10u32 {
        for f in 1..=(n - 1) / 3 {
            let p = SystemParams::new(n, f).unwrap();
            let q = quorum_size(p);
            assert_eq!(q, smallest_intersecting_quorum(n as usize, f as usize));
            assert!(q <= (n - f) as usize, "quorum must be reachable without the faulty");
            let subsets: Vec<u32> = (0u32..1 << n).filter(|m| m.count_ones() as usize == q).collect();
            let worst = subsets
                .iter()
                .flat_map(|a| subsets.iter().map(move |b| (a & b).count_ones()))
                .min()
                .unwrap();
            assert!(worst > f, "n={n} f={f} q={q}: two quorums share only {worst}");
        }
    }
    assert_eq!(quorum_size(SystemParams::minimal(1)), 3);
    assert_eq!(quorum_size(SystemParams::minimal(2)), 5);
}

fn proposal(instance: u64, tag: u8) -> Proposal {
    Proposal::new(
        instance,
        vec![Request {
            client: ClientId(tag as u32),
            seq: 1,
            op: Operation::Update {
                key: 0,
                value: vec![tag],
            },
        }],
    )
}

fn accepts(auth: &dyn Authenticator, signers: &[u32], p: &Proposal, view: u64) -> Vec<Attestation> {
    signers
        .iter()
        .map(|s| Attestation::sign(auth, Phase::Accept, ReplicaId(*s), p.instance(), view, p.digest()))
        .collect()
}

proptest! {
    #[test]
    fn proofs_verify_iff_a_quorum_of_authentic_distinct_signers(
        f in 1u32..=3,
        extra in 0u32..=2,
        instance in 1u64..1000,
        view in 0u64..5,
        tag in any::<u8>(),
        seed in any::<u64>(),
        picks in proptest::collection::vec(any::<prop::sample::Index>(), 1..12),
        corrupt in any::<prop::sample::Index>(),
    ) {
        let n = 3 * f + 1 + extra;
        let params = SystemParams::new(n, f).unwrap();
        let auth = MacAuthenticator::new(n, seed);
        let q = quorum_size(params);
        let p = proposal(instance, tag);
        let signers: Vec<u32> = picks.iter().map(|i| i.index(n as usize) as u32).collect();
        let distinct: BTreeSet<u32> = signers.iter().copied().collect();
        let atts = accepts(&auth, &signers, &p, view);

        match make_proof(params, instance, p.digest(), atts.clone()) {
            Ok(proof) => {
                prop_assert!(distinct.len() >= q);
                prop_assert!(verify_proof(params, &auth, instance, &p, &proof));
                // wrong value or instance
                prop_assert!(!verify_proof(params, &auth, instance, &proposal(instance, tag.wrapping_add(1)), &proof));
                // one corrupted tag among exactly q attestations
                let mut tight = proof.clone();
                tight.attestations.truncate(q);
                prop_assert!(verify_proof(params, &auth, instance, &p, &tight));
                let i = corrupt.index(q);
                tight.attestations[i].tag[0] ^= 1;
                prop_assert!(!verify_proof(params, &auth, instance, &p, &tight));
                // a duplicated signer does not count twice
                let mut dup = proof.clone();
                dup.attestations.truncate(q);
                dup.attestations[q - 1] = dup.attestations[0].clone();
                prop_assert!(!verify_proof(params, &auth, instance, &p, &dup));
                // fewer than q
                let mut short = proof;
                short.attestations.truncate(q - 1);
                prop_assert!(!verify_proof(params, &auth, instance, &p, &short));
            }
            Err(_) => prop_assert!(distinct.len() < q),
        }
    }

    #[test]
    fn digests_are_sha256_of_the_canonical_encoding(instance in any::<u64>(), tag in any::<u8>(), client in any::<u32>()) {
        let p = Proposal::new(instance, vec![Request { client: ClientId(client), seq: 3, op: Operation::Read { key: 9 } }, proposal(instance, tag).batch()[0].clone()]);
        let expected = Sha256::digest(encode_batch(instance, p.batch()));
        prop_assert_eq!(&p.digest().0[..], &expected[..]);
        prop_assert_eq!(p.digest(), p.clone().digest());
    }
}

#[test]
fn digest_is_stable_across_builds() {
    // fixed algorithm and serialization: this value must never change
    let p = proposal(7, b'x');
    assert_eq!(
        p.digest().to_string(),
        hex_of(&Sha256::digest(encode_batch(7, p.batch())))
    );
    assert_eq!(p.digest().short().len(), 16);
    assert_eq!(
        hex_of(&Sha256::digest(encode_batch(1, &[]))),
        smrsim_core::Proposal::noop(1).digest().to_string()
    );
}

fn hex_of(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---- client -----------------------------------------------------------------

proptest! {
    #[test]
    fn collector_accepts_iff_enough_distinct_replicas_agree(
        required in 1usize..=4,
        replies in proptest::collection::vec((0u32..4, 0u8..3), 0..16),
    ) {
        let mut c = ReplyCollector::new(1, required);
        let mut latest: BTreeMap<u32, u8> = BTreeMap::new();
        for (r, v) in replies {
            let result = OpResult::Value(Some(vec![v]));
            let got = c.add(ReplicaId(r), result.clone());
            latest.insert(r, v);
            let agreeing = latest.values().filter(|x| **x == v).count();
            prop_assert_eq!(got.is_some(), agreeing >= required);
            if let Some(res) = got {
                prop_assert_eq!(res, result);
            }
            let best = (0u8..3).map(|x| latest.values().filter(|y| **y == x).count()).max().unwrap();
            prop_assert_eq!(c.matching(), best);
        }
    }
}

// ---- lincheck ---------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn lincheck_agrees_with_brute_force(seed in any::<u64>()) {
        let h = common::random_history(seed, 8);
        let fast = check_linearizable(&h, &CheckOptions::default()).unwrap().is_ok();
        prop_assert_eq!(fast, common::brute_force_linearizable(&h), "{:#?}", h);
    }

    #[test]
    fn violations_are_minimal_prefixes(seed in any::<u64>()) {
        let h = common::random_history(seed, 8);
        if let smrsim_core::Outcome::Violation(v) = check_linearizable(&h, &CheckOptions::default()).unwrap() {
            prop_assert!(!common::brute_force_linearizable(&v.witness));
            // one event earlier the prefix is still linearizable
            let earlier: Vec<_> = h
                .iter()
                .filter(|e| e.invoke < v.cut && e.op.key() == v.key)
                .cloned()
                .map(|mut e| {
                    if e.response.is_some_and(|r| r >= v.cut) {
                        e.response = None;
                        e.result = None;
                    }
                    e
                })
                .collect();
            prop_assert!(common::brute_force_linearizable(&earlier));
        }
    }

    #[test]
    fn histories_round_trip_through_jsonl(seed in any::<u64>()) {
        let h = common::random_history(seed, 8);
        let mut buf = Vec::new();
        write_history(&h, &mut buf).unwrap();
        prop_assert_eq!(read_history(&buf[..]).unwrap(), h);
    }
}

// ---- adversary --------------------------------------------------------------

proptest! {
    #[test]
    fn adversary_never_touches_correct_senders(
        seed in any::<u64>(),
        sender in 0u32..4,
        to in 0u32..6,
        instance in 1u64..50,
    ) {
        let params = SystemParams::minimal(1);
        let policy = smrsim_core::randomized_adversary(seed, params, 2);
        policy.validate(params, 2).unwrap();
        let mut adv = Adversary::new(policy.clone(), seed);
        let from = NodeId::replica(sender);
        let dest = if to < 4 { NodeId::replica(to) } else { NodeId::client(to - 4) };
        let msg = Message::Propose { view: 0, proposal: proposal(instance, 1) };
        let v = adv.filter(from, dest, &msg);
        if policy.is_correct(ReplicaId(sender)) {
            prop_assert_eq!(v, Verdict::Pass);
        }
        // clients are never interposed
        prop_assert_eq!(adv.filter(NodeId::client(0), dest, &msg), Verdict::Pass);
    }
}

// ---- simnet and harness -----------------------------------------------------

type Link = (String, String, String, Option<u64>, Option<String>);

/// Effective sends and deliveries per link and message. A replacement stands
/// in for the send it follows; adversary and partition drops cancel a send.
fn sends_and_recvs(trace: &[TraceRecord]) -> BTreeMap<Link, (Vec<u64>, Vec<u64>)> {
    let link = |r: &TraceRecord, from: &str, to: &str| -> Link {
        (
            from.to_string(),
            to.to_string(),
            r.msg.clone().unwrap_or_default(),
            r.inst,
            r.digest.clone(),
        )
    };
    let mut m: BTreeMap<Link, (Vec<u64>, Vec<u64>)> = BTreeMap::new();
    let mut last_send: Option<Link> = None;
    for r in trace {
        let peer = r.peer.as_deref().unwrap_or_default();
        match r.kind {
            TraceKind::Send => {
                let k = link(r, &r.node, peer);
                m.entry(k.clone()).or_default().0.push(r.t);
                last_send = Some(k);
            }
            TraceKind::Replace => {
                let original = last_send.take().expect("replace follows its send");
                m.get_mut(&original).unwrap().0.pop();
                m.entry(link(r, &r.node, peer)).or_default().0.push(r.t);
            }
            TraceKind::Drop if r.detail.as_deref() != Some("pre-gst") => {
                if let Some(sends) = m.get_mut(&link(r, &r.node, peer)).map(|e| &mut e.0) {
                    // adversary drops follow their send, partition drops may hit a retransmission
                    if r.detail.as_deref() == Some("adversary") {
                        sends.pop();
                    } else {
                        sends.remove(0);
                    }
                }
            }
            TraceKind::Recv => m.entry(link(r, peer, &r.node)).or_default().1.push(r.t),
            _ => {}
        }
    }
    m
}

/// Checks causality for every message and, for messages between correct
/// nodes sent after GST, delivery within `delta`. Deliveries are matched to
/// sends earliest-deadline-first, which finds a valid matching whenever one
/// exists.
fn check_delivery(s: &Scenario, trace: &[TraceRecord], end: u64) -> Result<(), String> {
    let controlled = s.controlled();
    let correct = |n: &str| match n.parse::<NodeId>() {
        Ok(NodeId::Replica(r)) => !controlled.contains(&r),
        _ => true,
    };
    let gst = s.network.gst;
    let delta = s.network.delta();
    for ((from, to, kind, inst, _), (sends, recvs)) in sends_and_recvs(trace) {
        let bounded = correct(&from) && correct(&to);
        let mut sends = sends.into_iter().peekable();
        let mut waiting: BinaryHeap<Reverse<(u64, u64)>> = BinaryHeap::new();
        for t in recvs {
            while let Some(&s) = sends.peek() {
                if s > t {
                    break;
                }
                let deadline = if bounded && s >= gst { s + delta } else { u64::MAX };
                waiting.push(Reverse((deadline, s)));
                sends.next();
            }
            let Some(Reverse((deadline, s))) = waiting.pop() else {
                return Err(format!(
                    "{kind} {inst:?} {from}->{to} received at {t} before it was sent"
                ));
            };
            if deadline < t {
                return Err(format!(
                    "{kind} {inst:?} {from}->{to} sent at {s} delivered at {t}, bound {delta}"
                ));
            }
        }
        let undelivered = waiting.into_iter().map(|Reverse(x)| x).chain(sends.map(|s| {
            let deadline = if bounded && s >= gst { s + delta } else { u64::MAX };
            (deadline, s)
        }));
        for (deadline, s) in undelivered {
            if deadline < end {
                return Err(format!("{kind} {inst:?} {from}->{to} sent at {s} never delivered"));
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn campaign_runs_are_deterministic_safe_and_causal(seed in 0u64..1_000_000, forward in any::<bool>()) {
        let mode = if forward { PatchMode::Forward } else { PatchMode::Broadcast };
        let s = campaign_scenario(seed, mode);
        let a = run_scenario(&s);
        let b = run_scenario(&s);
        prop_assert_eq!(a.trace_jsonl(), b.trace_jsonl());

        let agreement = check_agreement(&a.trace, &s.controlled());
        prop_assert!(agreement.ok(), "{}", agreement);
        check_delivery(&s, &a.trace, a.end_time).map_err(TestCaseError::fail)?;

        // metrics are a pure function of the persisted trace
        let reread = read_jsonl(&a.trace_jsonl()[..]).unwrap();
        prop_assert_eq!(RunMetrics::from_trace(&reread, &s.controlled()), a.metrics.clone());

        // every reply a client accepted came from enough distinct replicas
        let q = quorum_size(s.params());
        for op in &a.metrics.ops {
            if op.complete.is_some() {
                prop_assert!(op.matching >= q, "{:?}", op);
            }
        }
        prop_assert!(check_linearizable(&a.history, &CheckOptions::default()).unwrap().is_ok());
    }

    #[test]
    fn broadcast_runs_leave_no_correct_replica_behind(seed in 0u64..1_000_000) {
        let s = campaign_scenario(seed, PatchMode::Broadcast);
        let out = run_scenario(&s);
        prop_assume!(out.quiescent);
        let controlled = s.controlled();
        let mut known: BTreeMap<String, BTreeSet<u64>> = BTreeMap::new();
        let mut installed: BTreeMap<String, u64> = BTreeMap::new();
        for r in &out.trace {
            match r.kind {
                TraceKind::Decide => { known.entry(r.node.clone()).or_default().insert(r.inst.unwrap()); }
                TraceKind::StateTransfer if r.detail.as_deref() == Some("installed") => {
                    let e = installed.entry(r.node.clone()).or_default();
                    *e = (*e).max(r.inst.unwrap());
                }
                _ => {}
            }
        }
        let correct: Vec<String> = s.params().replicas().filter(|r| !controlled.contains(r)).map(|r| NodeId::Replica(r).to_string()).collect();
        let all: BTreeSet<u64> = correct.iter().filter_map(|r| known.get(r)).flatten().copied().collect();
        for r in &correct {
            let floor = installed.get(r).copied().unwrap_or(0);
            let mine = known.get(r).cloned().unwrap_or_default();
            for c in &all {
                prop_assert!(*c <= floor || mine.contains(c), "{r} missing instance {c}");
            }
        }
    }

    #[test]
    fn unpatched_attack_caps_the_victim_below_a_quorum(f in 1u32..=2, seed in any::<u64>(), jitter in 0u64..8) {
        let mut s = builtin("attack-unpatched").unwrap();
        let n = 3 * f + 1;
        s.system.n = n;
        s.system.f = f;
        s.seed = seed;
        s.horizon = 50_000;
        s.network.jitter = jitter;
        s.attack = Some(AttackPolicy {
            controlled: (0..f).map(ReplicaId).collect(),
            isolated: (n - f..n).map(ReplicaId).collect(),
            target_clients: [ClientId(0)].into(),
            variant: AttackVariant::OmitPropose,
            ..AttackPolicy::default()
        });
        s.validate().unwrap();
        let out = run_scenario(&s);
        let m = out.client(0).pending_matching.unwrap_or(0);
        prop_assert!(out.client(0).completed == 0);
        prop_assert!((f as usize + 1..=2 * f as usize).contains(&m), "matching {m}");
        prop_assert!(out.metrics.stop_senders <= f as u64);
        prop_assert_eq!(out.metrics.regency_changes, 0);
    }
}

#[test]
fn isolated_replica_echoes_each_forwarded_decision_once() {
    for name in ["attack-forward", "wan-attack"] {
        let out = run_scenario(&builtin(name).unwrap());
        let forwarded: Vec<u64> = out
            .trace
            .iter()
            .filter(|r| r.node == "r3" && r.kind == TraceKind::Decide && r.detail.as_deref() == Some("forwarded"))
            .map(|r| r.inst.unwrap())
            .collect();
        let echoes: Vec<u64> = out
            .trace
            .iter()
            .filter(|r| r.node == "r3" && r.kind == TraceKind::Echo)
            .map(|r| r.inst.unwrap())
            .collect();
        assert!(!forwarded.is_empty(), "{name}");
        assert_eq!(forwarded, echoes, "{name}");
        // r3 ends up with every instance decided elsewhere, by decision or state transfer
        let elsewhere: BTreeSet<u64> = out
            .trace
            .iter()
            .filter(|r| r.node == "r1" && r.kind == TraceKind::Decide)
            .map(|r| r.inst.unwrap())
            .collect();
        assert_eq!(out.replica(3).last_executed, *elsewhere.iter().max().unwrap(), "{name}");
    }
}

#[test]
fn client_histories_alternate() {
    for seed in 0..50 {
        let out = run_scenario(&campaign_scenario(seed, PatchMode::Forward));
        let mut last: BTreeMap<ClientId, (u64, Option<u64>)> = BTreeMap::new();
        for h in &out.history {
            if let Some((seq, resp)) = last.get(&h.client) {
                assert_eq!(h.seq, seq + 1);
                assert!(resp.is_some_and(|r| r <= h.invoke));
            }
            assert!(h.response.is_none_or(|r| r >= h.invoke));
            last.insert(h.client, (h.seq, h.response));
        }
    }
}
