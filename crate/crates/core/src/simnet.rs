//! Deterministic discrete-event network and timer engine.
//!
//! Events are processed in `(time, sequence)` order, where the sequence number
//! is a global counter assigned at scheduling time. All randomness comes from
//! one seeded ChaCha stream, so a `(seed, config)` pair always yields the
//! same trace.
//!
//! Before GST the network may drop (followed by link-level retransmission)
//! and delay messages arbitrarily within `[pre_gst.min_delay,
//! pre_gst.max_delay]`. After GST nothing is lost and every delay is
//! `base(from, to) + jitter <= delta`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::{Message, MsgSummary};
use crate::trace::{Note, SimTime, TraceKind, TraceRecord};
use crate::types::NodeId;

pub type TimerId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimerOp {
    Set(TimerId, SimTime),
    Cancel(TimerId),
}

/// Effects a node emits while handling one event.
#[derive(Debug)]
pub struct Outbox<M> {
    sends: Vec<(NodeId, M)>,
    timers: Vec<TimerOp>,
    notes: Vec<Note>,
}

impl<M> Default for Outbox<M> {
    fn default() -> Self {
        Outbox {
            sends: Vec::new(),
            timers: Vec::new(),
            notes: Vec::new(),
        }
    }
}

impl<M> Outbox<M> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, to: NodeId, msg: M) {
        self.sends.push((to, msg));
    }

    /// (Re)arms `timer` to fire `delay` from now; an armed timer with the same
    /// id is replaced.
    pub fn set_timer(&mut self, timer: TimerId, delay: SimTime) {
        self.timers.push(TimerOp::Set(timer, delay));
    }

    pub fn cancel_timer(&mut self, timer: TimerId) {
        self.timers.push(TimerOp::Cancel(timer));
    }

    pub fn note(&mut self, note: Note) {
        self.notes.push(note);
    }

    pub fn sends(&self) -> &[(NodeId, M)] {
        &self.sends
    }

    pub fn notes(&self) -> &[Note] {
        &self.notes
    }

    /// Timers set (not cancelled) by this batch of effects, in order.
    pub fn timers_set(&self) -> Vec<(TimerId, SimTime)> {
        self.timers
            .iter()
            .filter_map(|op| match op {
                TimerOp::Set(id, d) => Some((*id, *d)),
                TimerOp::Cancel(_) => None,
            })
            .collect()
    }

    pub fn timers_cancelled(&self) -> Vec<TimerId> {
        self.timers
            .iter()
            .filter_map(|op| match op {
                TimerOp::Cancel(id) => Some(*id),
                TimerOp::Set(..) => None,
            })
            .collect()
    }

    pub fn take_sends(&mut self) -> Vec<(NodeId, M)> {
        std::mem::take(&mut self.sends)
    }

    pub fn clear(&mut self) {
        self.sends.clear();
        self.timers.clear();
        self.notes.clear();
    }
}

/// A single-threaded event reactor.
pub trait Node<M> {
    fn on_start(&mut self, _now: SimTime, _out: &mut Outbox<M>) {}
    fn on_message(&mut self, now: SimTime, from: NodeId, msg: M, out: &mut Outbox<M>);
    fn on_timer(&mut self, now: SimTime, timer: TimerId, out: &mut Outbox<M>);
}

pub trait Describe {
    fn summary(&self) -> MsgSummary;
}

impl Describe for Message {
    fn summary(&self) -> MsgSummary {
        Message::summary(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict<M> {
    Pass,
    Drop,
    Replace(M),
}

/// Hook consulted on every send; used to model Byzantine senders.
pub trait Interposer<M> {
    fn filter(&mut self, from: NodeId, to: NodeId, msg: &M) -> Verdict<M>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoAdversary;

impl<M> Interposer<M> for NoAdversary {
    fn filter(&mut self, _from: NodeId, _to: NodeId, _msg: &M) -> Verdict<M> {
        Verdict::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreGstPolicy {
    #[serde(default = "one")]
    pub min_delay: SimTime,
    #[serde(default = "one")]
    pub max_delay: SimTime,
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default = "default_retransmit")]
    pub retransmit_interval: SimTime,
}

fn one() -> SimTime {
    1
}

fn default_retransmit() -> SimTime {
    50
}

impl Default for PreGstPolicy {
    fn default() -> Self {
        PreGstPolicy {
            min_delay: 1,
            max_delay: 1,
            drop_probability: 0.0,
            retransmit_interval: default_retransmit(),
        }
    }
}

/// Per-link base delays: `delays[a][b]` between regions `a` and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionMatrix {
    #[serde(default)]
    pub names: Vec<String>,
    pub delays: Vec<Vec<SimTime>>,
    /// Region of each replica, by replica index.
    pub replicas: Vec<usize>,
    /// Region of each client; clients beyond the list wrap around.
    pub clients: Vec<usize>,
}

/// Links to and from `nodes` lose everything sent in `[from, until)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    pub nodes: Vec<String>,
    pub from: SimTime,
    pub until: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default)]
    pub gst: SimTime,
    /// Uniform base delay when no region matrix is given.
    #[serde(default = "default_delay")]
    pub delay: SimTime,
    #[serde(default)]
    pub jitter: SimTime,
    /// Post-GST delay bound; defaults to the largest base delay plus jitter.
    #[serde(default)]
    pub delta: Option<SimTime>,
    #[serde(default)]
    pub regions: Option<RegionMatrix>,
    #[serde(default)]
    pub pre_gst: PreGstPolicy,
    #[serde(default)]
    pub partitions: Vec<Partition>,
}

fn default_delay() -> SimTime {
    10
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::uniform(default_delay())
    }
}

impl NetConfig {
    pub fn uniform(delay: SimTime) -> Self {
        NetConfig {
            gst: 0,
            delay,
            jitter: 0,
            delta: None,
            regions: None,
            pre_gst: PreGstPolicy::default(),
            partitions: Vec::new(),
        }
    }

    fn max_base(&self) -> SimTime {
        match &self.regions {
            Some(m) => m.delays.iter().flatten().copied().max().unwrap_or(0),
            None => self.delay,
        }
    }

    /// Effective post-GST bound.
    pub fn delta(&self) -> SimTime {
        self.delta.unwrap_or(self.max_base() + self.jitter)
    }

    pub fn validate(&self, replicas: u32) -> Result<(), String> {
        if let Some(m) = &self.regions {
            let k = m.delays.len();
            if k == 0 || m.delays.iter().any(|row| row.len() != k) {
                return Err("network.regions.delays must be a non-empty square matrix".into());
            }
            if m.replicas.len() != replicas as usize {
                return Err(format!(
                    "network.regions.replicas lists {} regions for {} replicas",
                    m.replicas.len(),
                    replicas
                ));
            }
            if m.clients.is_empty() {
                return Err("network.regions.clients must not be empty".into());
            }
            if m.replicas.iter().chain(&m.clients).any(|&r| r >= k) {
                return Err(format!("network.regions: region index out of range (have {k})"));
            }
        }
        if let Some(d) = self.delta {
            if d < self.max_base() + self.jitter {
                return Err(format!(
                    "network.delta = {d} is below the largest base delay plus jitter ({})",
                    self.max_base() + self.jitter
                ));
            }
        }
        let p = &self.pre_gst;
        if p.min_delay > p.max_delay {
            return Err("network.pre_gst.min_delay exceeds max_delay".into());
        }
        if !(0.0..1.0).contains(&p.drop_probability) {
            return Err("network.pre_gst.drop_probability must be in [0, 1)".into());
        }
        if p.retransmit_interval == 0 {
            return Err("network.pre_gst.retransmit_interval must be positive".into());
        }
        for part in &self.partitions {
            for n in &part.nodes {
                n.parse::<NodeId>().map_err(|e| format!("network.partitions: {e}"))?;
            }
        }
        Ok(())
    }

    fn region(&self, node: NodeId) -> Option<usize> {
        let m = self.regions.as_ref()?;
        match node {
            NodeId::Replica(r) => m.replicas.get(r.0 as usize).copied(),
            NodeId::Client(c) => Some(m.clients[c.0 as usize % m.clients.len()]),
        }
    }

    pub fn base_delay(&self, from: NodeId, to: NodeId) -> SimTime {
        match (&self.regions, self.region(from), self.region(to)) {
            (Some(m), Some(a), Some(b)) => m.delays[a][b],
            _ => self.delay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("condition not met by sim-time {at} (queue {})", if *.quiescent { "drained" } else { "non-empty" })]
pub struct HorizonExhausted {
    pub at: SimTime,
    pub quiescent: bool,
}

enum EventBody<M> {
    Deliver { from: NodeId, to: NodeId, msg: M },
    Retransmit { from: NodeId, to: NodeId, msg: M },
    Timer { node: NodeId, id: TimerId, generation: u64 },
}

struct Scheduled<M> {
    time: SimTime,
    seq: u64,
    body: EventBody<M>,
}

impl<M> PartialEq for Scheduled<M> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<M> Eq for Scheduled<M> {}

impl<M> PartialOrd for Scheduled<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<M> Ord for Scheduled<M> {
    // min-heap on (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

pub struct Engine<M, N, I> {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Scheduled<M>>,
    nodes: BTreeMap<NodeId, N>,
    timers: HashMap<(NodeId, TimerId), u64>,
    timer_generation: u64,
    net: NetConfig,
    partitions: Vec<(Vec<NodeId>, SimTime, SimTime)>,
    rng: ChaCha8Rng,
    interposer: I,
    trace: Vec<TraceRecord>,
    started: bool,
    events_processed: u64,
}

impl<M, N, I> Engine<M, N, I>
where
    M: Describe + Clone,
    N: Node<M>,
    I: Interposer<M>,
{
    pub fn new(net: NetConfig, seed: u64, interposer: I) -> Self {
        let partitions = net
            .partitions
            .iter()
            .map(|p| {
                let nodes = p.nodes.iter().filter_map(|s| s.parse().ok()).collect();
                (nodes, p.from, p.until)
            })
            .collect();
        Engine {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes: BTreeMap::new(),
            timers: HashMap::new(),
            timer_generation: 0,
            net,
            partitions,
            rng: ChaCha8Rng::seed_from_u64(seed),
            interposer,
            trace: Vec::new(),
            started: false,
            events_processed: 0,
        }
    }

    pub fn add_node(&mut self, id: NodeId, node: N) {
        self.nodes.insert(id, node);
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn net(&self) -> &NetConfig {
        &self.net
    }

    pub fn node(&self, id: NodeId) -> Option<&N> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut N> {
        self.nodes.get_mut(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, &N)> {
        self.nodes.iter()
    }

    pub fn interposer(&self) -> &I {
        &self.interposer
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    fn schedule(&mut self, time: SimTime, body: EventBody<M>) {
        self.seq += 1;
        self.queue.push(Scheduled {
            time,
            seq: self.seq,
            body,
        });
    }

    /// Injects a message as if `from` had sent it now.
    pub fn inject(&mut self, from: NodeId, to: NodeId, msg: M) {
        self.send(from, to, msg);
    }

    fn partitioned(&self, from: NodeId, to: NodeId) -> bool {
        self.partitions.iter().any(|(nodes, start, end)| {
            (*start..*end).contains(&self.now) && (nodes.contains(&from) || nodes.contains(&to))
        })
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: M) {
        let summary = msg.summary();
        self.trace.push(TraceRecord::message(
            self.now,
            TraceKind::Send,
            from,
            to,
            &summary,
            None,
        ));
        let msg = match self.interposer.filter(from, to, &msg) {
            Verdict::Pass => msg,
            Verdict::Drop => {
                self.trace.push(TraceRecord::message(
                    self.now,
                    TraceKind::Drop,
                    from,
                    to,
                    &summary,
                    Some("adversary".into()),
                ));
                return;
            }
            Verdict::Replace(m) => {
                self.trace.push(TraceRecord::message(
                    self.now,
                    TraceKind::Replace,
                    from,
                    to,
                    &m.summary(),
                    None,
                ));
                m
            }
        };
        self.transmit(from, to, msg);
    }

    fn transmit(&mut self, from: NodeId, to: NodeId, msg: M) {
        if self.partitioned(from, to) {
            self.trace.push(TraceRecord::message(
                self.now,
                TraceKind::Drop,
                from,
                to,
                &msg.summary(),
                Some("partition".into()),
            ));
            return;
        }
        let delay = if self.now < self.net.gst {
            let p = self.net.pre_gst.clone();
            if p.drop_probability > 0.0 && self.rng.gen_bool(p.drop_probability) {
                self.trace.push(TraceRecord::message(
                    self.now,
                    TraceKind::Drop,
                    from,
                    to,
                    &msg.summary(),
                    Some("pre-gst".into()),
                ));
                let at = self.now + p.retransmit_interval;
                self.schedule(at, EventBody::Retransmit { from, to, msg });
                return;
            }
            self.rng.gen_range(p.min_delay..=p.max_delay)
        } else {
            let jitter = if self.net.jitter > 0 {
                self.rng.gen_range(0..=self.net.jitter)
            } else {
                0
            };
            self.net.base_delay(from, to) + jitter
        };
        let at = self.now + delay;
        self.schedule(at, EventBody::Deliver { from, to, msg });
    }

    fn apply(&mut self, node: NodeId, mut out: Outbox<M>) {
        for note in out.notes.drain(..) {
            self.trace.push(note.stamp(self.now, node));
        }
        for op in out.timers.drain(..) {
            match op {
                TimerOp::Set(id, delay) => {
                    self.timer_generation += 1;
                    let generation = self.timer_generation;
                    self.timers.insert((node, id), generation);
                    let at = self.now + delay;
                    self.schedule(at, EventBody::Timer { node, id, generation });
                }
                TimerOp::Cancel(id) => {
                    self.timers.remove(&(node, id));
                }
            }
        }
        for (to, msg) in out.sends.drain(..) {
            self.send(node, to, msg);
        }
    }

    fn start(&mut self) {
        if self.started {
            return;
        }
        self.started = true;
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            let mut out = Outbox::new();
            if let Some(n) = self.nodes.get_mut(&id) {
                n.on_start(self.now, &mut out);
            }
            self.apply(id, out);
        }
    }

    /// Processes the next event. Returns `false` once the queue is empty.
    pub fn step(&mut self) -> bool {
        self.start();
        let Some(ev) = self.queue.pop() else {
            return false;
        };
        debug_assert!(ev.time >= self.now, "causality");
        self.now = ev.time;
        self.events_processed += 1;
        match ev.body {
            EventBody::Deliver { from, to, msg } => {
                let mut out = Outbox::new();
                let summary = msg.summary();
                if let Some(n) = self.nodes.get_mut(&to) {
                    self.trace.push(TraceRecord::message(
                        self.now,
                        TraceKind::Recv,
                        to,
                        from,
                        &summary,
                        None,
                    ));
                    n.on_message(self.now, from, msg, &mut out);
                }
                self.apply(to, out);
            }
            EventBody::Retransmit { from, to, msg } => {
                self.trace.push(TraceRecord::message(
                    self.now,
                    TraceKind::Retransmit,
                    from,
                    to,
                    &msg.summary(),
                    None,
                ));
                self.transmit(from, to, msg);
            }
            EventBody::Timer { node, id, generation } => {
                if self.timers.get(&(node, id)) == Some(&generation) {
                    self.timers.remove(&(node, id));
                    let mut out = Outbox::new();
                    if let Some(n) = self.nodes.get_mut(&node) {
                        n.on_timer(self.now, id, &mut out);
                    }
                    self.apply(node, out);
                }
            }
        }
        true
    }

    /// Runs until `done` holds (checked before every event) or the next event
    /// lies beyond `horizon`.
    pub fn run_until(
        &mut self,
        horizon: SimTime,
        mut done: impl FnMut(&Self) -> bool,
    ) -> Result<SimTime, HorizonExhausted> {
        self.start();
        loop {
            if done(self) {
                return Ok(self.now);
            }
            match self.queue.peek() {
                None => {
                    return Err(HorizonExhausted {
                        at: self.now,
                        quiescent: true,
                    })
                }
                Some(ev) if ev.time > horizon => {
                    self.now = horizon;
                    return Err(HorizonExhausted {
                        at: horizon,
                        quiescent: false,
                    });
                }
                Some(_) => {
                    self.step();
                }
            }
        }
    }
}
