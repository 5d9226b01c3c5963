//! Binding a scenario to replicas, clients, the adversary and the engine.

use std::path::Path;

use crate::adversary::Adversary;
use crate::client::Client;
use crate::lincheck::{write_history, HistoryEntry};
use crate::message::Message;
use crate::replica::Replica;
use crate::simnet::{Engine, Node, Outbox, TimerId};
use crate::trace::{write_jsonl, SimTime, TraceRecord};
use crate::types::{ClientId, Instance, NodeId, Regency, ReplicaId};

use super::metrics::RunMetrics;
use super::scenario::Scenario;

#[derive(Debug)]
pub enum Process {
    Replica(Box<Replica>),
    Client(Box<Client>),
}

impl Node<Message> for Process {
    fn on_start(&mut self, now: SimTime, out: &mut Outbox<Message>) {
        match self {
            Process::Replica(r) => r.on_start(now, out),
            Process::Client(c) => c.on_start(now, out),
        }
    }

    fn on_message(&mut self, now: SimTime, from: NodeId, msg: Message, out: &mut Outbox<Message>) {
        match self {
            Process::Replica(r) => r.on_message(now, from, msg, out),
            Process::Client(c) => c.on_message(now, from, msg, out),
        }
    }

    fn on_timer(&mut self, now: SimTime, timer: TimerId, out: &mut Outbox<Message>) {
        match self {
            Process::Replica(r) => r.on_timer(now, timer, out),
            Process::Client(c) => c.on_timer(now, timer, out),
        }
    }
}

pub type Sim = Engine<Message, Process, Adversary>;

/// Builds the engine for a validated scenario without running it.
pub fn build(s: &Scenario) -> Sim {
    let params = s.params();
    let auth = s.system.auth.build(params.n(), s.seed);
    let policy = s.attack.clone().unwrap_or_default();
    let adversary = Adversary::new(policy, s.seed ^ 0x5eed_0adf);
    let mut sim = Engine::new(s.network.clone(), s.seed, adversary);
    for r in params.replicas() {
        let replica = Replica::new(r, params, auth.clone(), s.replica.clone());
        sim.add_node(NodeId::Replica(r), Process::Replica(Box::new(replica)));
    }
    let required = s.replica.read_quorum.required(params);
    for plan in s.client_plans() {
        let client = Client::new(
            plan.id,
            params,
            s.client.clone(),
            required,
            plan.ops,
            plan.start,
            plan.think,
        );
        sim.add_node(NodeId::Client(plan.id), Process::Client(Box::new(client)));
    }
    sim
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientSummary {
    pub id: ClientId,
    pub done: bool,
    pub completed: usize,
    /// Matching replies gathered so far for the operation still outstanding.
    pub pending_matching: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaSummary {
    pub id: ReplicaId,
    pub correct: bool,
    pub regency: Regency,
    pub last_executed: Instance,
    pub checkpoint: Option<Instance>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub scenario: String,
    pub trace: Vec<TraceRecord>,
    pub history: Vec<HistoryEntry>,
    pub metrics: RunMetrics,
    pub end_time: SimTime,
    /// No events were left when the run stopped.
    pub quiescent: bool,
    pub events: u64,
    pub clients: Vec<ClientSummary>,
    pub replicas: Vec<ReplicaSummary>,
}

impl RunOutput {
    pub fn client(&self, id: u32) -> &ClientSummary {
        &self.clients[id as usize]
    }

    pub fn replica(&self, id: u32) -> &ReplicaSummary {
        &self.replicas[id as usize]
    }

    pub fn trace_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_jsonl(&self.trace, &mut buf).expect("in-memory write");
        buf
    }

    /// Writes `trace.jsonl`, `metrics.csv` and `history.jsonl` into `dir`.
    pub fn persist(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("trace.jsonl"), self.trace_jsonl())?;
        std::fs::write(dir.join("metrics.csv"), self.metrics.to_csv())?;
        let mut hist = Vec::new();
        write_history(&self.history, &mut hist)?;
        std::fs::write(dir.join("history.jsonl"), hist)
    }
}

/// Runs until no events remain or the horizon is reached.
pub fn run_scenario(s: &Scenario) -> RunOutput {
    let mut sim = build(s);
    let (end_time, quiescent) = match sim.run_until(s.horizon, |_| false) {
        Ok(t) => (t, false),
        Err(h) => (h.at, h.quiescent),
    };
    let controlled = s.controlled();
    let mut clients = Vec::new();
    let mut replicas = Vec::new();
    let mut history = Vec::new();
    for (id, p) in sim.nodes() {
        match p {
            Process::Replica(r) => replicas.push(ReplicaSummary {
                id: r.id(),
                correct: !controlled.contains(&r.id()),
                regency: r.regency(),
                last_executed: r.last_executed(),
                checkpoint: r.checkpoint().map(|c| c.up_to),
            }),
            Process::Client(c) => {
                debug_assert_eq!(*id, NodeId::Client(c.id()));
                clients.push(ClientSummary {
                    id: c.id(),
                    done: c.is_done(),
                    completed: c.completed(),
                    pending_matching: c.pending_matching(),
                });
                history.extend(c.history().iter().cloned());
            }
        }
    }
    clients.sort_by_key(|c| c.id);
    replicas.sort_by_key(|r| r.id);
    history.sort_by_key(|h| (h.invoke, h.client, h.seq));
    let events = sim.events_processed();
    let trace = sim.take_trace();
    let metrics = RunMetrics::from_trace(&trace, &controlled);
    RunOutput {
        scenario: s.name.clone(),
        trace,
        history,
        metrics,
        end_time,
        quiescent,
        events,
        clients,
        replicas,
    }
}
