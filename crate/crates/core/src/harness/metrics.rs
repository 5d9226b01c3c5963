//! Run metrics. Everything here is recomputed from the trace alone, so a
//! trace file and its metrics file can always be cross-checked.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::message::MsgKind;
use crate::trace::{SimTime, TraceKind, TraceRecord};
use crate::types::{NodeId, ReplicaId};

/// One client operation as seen in the trace.
#[derive(Clone, Debug, PartialEq)]
pub struct OpMetrics {
    pub client: String,
    pub seq: u64,
    pub op: String,
    pub invoke: SimTime,
    pub complete: Option<SimTime>,
    /// Largest number of distinct replicas whose replies to this operation
    /// reached the client carrying the same result.
    pub matching: usize,
}

impl OpMetrics {
    pub fn latency(&self) -> Option<SimTime> {
        self.complete.map(|c| c - self.invoke)
    }

    pub fn is_read(&self) -> bool {
        self.op.starts_with("read")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    /// Unicasts emitted per message kind, before adversary or network effects.
    pub sends: BTreeMap<String, u64>,
    /// Unicasts emitted per message kind by correct replicas only.
    pub correct_sends: BTreeMap<String, u64>,
    pub drops: u64,
    pub replaced: u64,
    pub delivered: u64,
    /// Decisions per replica.
    pub decisions: BTreeMap<String, u64>,
    /// Highest executed (or installed) instance per replica.
    pub executed_up_to: BTreeMap<String, u64>,
    /// Distinct regencies installed by correct replicas.
    pub regency_changes: u64,
    /// Correct replicas that sent at least one STOP.
    pub stop_senders: u64,
    pub state_transfers: u64,
    /// Mean delay between the first decision of an instance by any correct
    /// replica and this replica's decision, over the instances it decided.
    pub decide_lag: BTreeMap<String, f64>,
    pub ops: Vec<OpMetrics>,
}

impl RunMetrics {
    pub fn from_trace(trace: &[TraceRecord], controlled: &BTreeSet<ReplicaId>) -> Self {
        let is_correct = |node: &str| match node.parse::<NodeId>() {
            Ok(NodeId::Replica(r)) => !controlled.contains(&r),
            _ => false,
        };
        let mut m = RunMetrics::default();
        let mut installed = BTreeSet::new();
        let mut stoppers = BTreeSet::new();
        // instance -> node -> decide time
        let mut decided: BTreeMap<u64, BTreeMap<String, SimTime>> = BTreeMap::new();
        let mut ops: BTreeMap<(String, u64), OpMetrics> = BTreeMap::new();
        // (client, seq) -> digest -> replicas
        let mut replies: BTreeMap<(String, u64), BTreeMap<String, BTreeSet<String>>> = BTreeMap::new();

        for r in trace {
            match r.kind {
                TraceKind::Send => {
                    let kind = r.msg.clone().unwrap_or_default();
                    if is_correct(&r.node) {
                        *m.correct_sends.entry(kind.clone()).or_default() += 1;
                    }
                    *m.sends.entry(kind).or_default() += 1;
                }
                TraceKind::Drop => m.drops += 1,
                TraceKind::Replace => m.replaced += 1,
                TraceKind::Recv => {
                    m.delivered += 1;
                    if r.msg.as_deref() == Some(MsgKind::Reply.as_str()) {
                        if let (Some(seq), Some(d), Some(p)) = (r.inst, &r.digest, &r.peer) {
                            replies
                                .entry((r.node.clone(), seq))
                                .or_default()
                                .entry(d.clone())
                                .or_default()
                                .insert(p.clone());
                        }
                    }
                }
                TraceKind::Decide => {
                    *m.decisions.entry(r.node.clone()).or_default() += 1;
                    if let Some(c) = r.inst {
                        if is_correct(&r.node) {
                            decided.entry(c).or_default().entry(r.node.clone()).or_insert(r.t);
                        }
                    }
                }
                TraceKind::Execute => {
                    let e = m.executed_up_to.entry(r.node.clone()).or_default();
                    *e = (*e).max(r.inst.unwrap_or(0));
                }
                TraceKind::StateTransfer if r.detail.as_deref() == Some("installed") => {
                    m.state_transfers += 1;
                    let e = m.executed_up_to.entry(r.node.clone()).or_default();
                    *e = (*e).max(r.inst.unwrap_or(0));
                }
                TraceKind::Regency if r.detail.is_none() && is_correct(&r.node) => {
                    installed.insert(r.inst.unwrap_or(0));
                }
                TraceKind::Stop if is_correct(&r.node) => {
                    stoppers.insert(r.node.clone());
                }
                TraceKind::Invoke => {
                    let seq = r.inst.unwrap_or(0);
                    ops.insert(
                        (r.node.clone(), seq),
                        OpMetrics {
                            client: r.node.clone(),
                            seq,
                            op: r.detail.clone().unwrap_or_default(),
                            invoke: r.t,
                            complete: None,
                            matching: 0,
                        },
                    );
                }
                TraceKind::Complete => {
                    if let Some(op) = ops.get_mut(&(r.node.clone(), r.inst.unwrap_or(0))) {
                        op.complete = Some(r.t);
                    }
                }
                _ => {}
            }
        }

        for (key, op) in ops.iter_mut() {
            if let Some(groups) = replies.get(key) {
                op.matching = groups.values().map(BTreeSet::len).max().unwrap_or(0);
            }
        }
        m.ops = ops.into_values().collect();
        m.ops.sort_by_key(|o| (o.invoke, o.client.clone(), o.seq));
        m.regency_changes = installed.len() as u64;
        m.stop_senders = stoppers.len() as u64;

        let mut lag: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for per_node in decided.values() {
            let first = per_node.values().copied().min().unwrap_or(0);
            for (node, t) in per_node {
                let e = lag.entry(node.clone()).or_default();
                e.0 += t - first;
                e.1 += 1;
            }
        }
        m.decide_lag = lag
            .into_iter()
            .map(|(node, (sum, count))| (node, sum as f64 / count as f64))
            .collect();
        m
    }

    pub fn sent(&self, kind: MsgKind) -> u64 {
        self.sends.get(kind.as_str()).copied().unwrap_or(0)
    }

    pub fn invoked(&self) -> usize {
        self.ops.len()
    }

    pub fn completed(&self) -> usize {
        self.ops.iter().filter(|o| o.complete.is_some()).count()
    }

    pub fn client_ops(&self, client: NodeId) -> impl Iterator<Item = &OpMetrics> {
        let name = client.to_string();
        self.ops.iter().filter(move |o| o.client == name)
    }

    pub fn decisions_of(&self, node: NodeId) -> u64 {
        self.decisions.get(&node.to_string()).copied().unwrap_or(0)
    }

    pub fn executed_of(&self, node: NodeId) -> u64 {
        self.executed_up_to.get(&node.to_string()).copied().unwrap_or(0)
    }

    pub fn mean_latency(&self, reads: Option<bool>) -> Option<f64> {
        let lat: Vec<u64> = self
            .ops
            .iter()
            .filter(|o| reads.is_none_or(|r| o.is_read() == r))
            .filter_map(OpMetrics::latency)
            .collect();
        (!lat.is_empty()).then(|| lat.iter().sum::<u64>() as f64 / lat.len() as f64)
    }

    /// Long-format CSV: `metric,key,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,key,value\n");
        let mut row = |metric: &str, key: &str, value: String| {
            let _ = writeln!(s, "{metric},{key},{value}");
        };
        for (k, v) in &self.sends {
            row("sends", k, v.to_string());
        }
        for (k, v) in &self.correct_sends {
            row("correct_sends", k, v.to_string());
        }
        row("drops", "", self.drops.to_string());
        row("replaced", "", self.replaced.to_string());
        row("delivered", "", self.delivered.to_string());
        for (k, v) in &self.decisions {
            row("decisions", k, v.to_string());
        }
        for (k, v) in &self.executed_up_to {
            row("executed_up_to", k, v.to_string());
        }
        row("regency_changes", "", self.regency_changes.to_string());
        row("stop_senders", "", self.stop_senders.to_string());
        row("state_transfers", "", self.state_transfers.to_string());
        for (k, v) in &self.decide_lag {
            row("decide_lag", k, format!("{v:.3}"));
        }
        row("ops_invoked", "", self.invoked().to_string());
        row("ops_completed", "", self.completed().to_string());
        for o in &self.ops {
            let key = format!("{}#{}", o.client, o.seq);
            row("op_invoke", &key, o.invoke.to_string());
            if let Some(l) = o.latency() {
                row("op_latency", &key, l.to_string());
            }
            row("op_matching", &key, o.matching.to_string());
        }
        s
    }
}
