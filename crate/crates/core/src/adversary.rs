//! Byzantine behaviour, applied as a filter on everything controlled replicas
//! send. Controlled replicas otherwise run the correct protocol, so the
//! adversary never needs (or has) the signing keys of correct replicas.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::message::{Message, MsgKind};
use crate::protocol::SystemParams;
use crate::simnet::{Interposer, Verdict};
use crate::types::{ClientId, NodeId, OpResult, Operation, Proposal, ReplicaId, Request};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackVariant {
    /// Withhold PROPOSE from the isolated replicas.
    #[default]
    OmitPropose,
    /// Send the isolated replicas a well-formed proposal for a different batch.
    ConflictingPropose,
    /// Controlled replicas send nothing at all.
    Silent,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackPolicy {
    pub controlled: BTreeSet<ReplicaId>,
    pub isolated: BTreeSet<ReplicaId>,
    /// Clients whose replies controlled replicas suppress.
    pub target_clients: BTreeSet<ClientId>,
    pub variant: AttackVariant,
    /// Per-message drop probability for anything a controlled replica sends.
    pub drop_probability: f64,
    /// Message kinds controlled replicas never send.
    pub withhold: BTreeSet<MsgKind>,
    /// Answer fast-path reads with the initial value.
    pub stale_reads: bool,
}

impl AttackPolicy {
    pub fn validate(&self, params: SystemParams, clients: u32) -> Result<(), String> {
        let f = params.f() as usize;
        if self.controlled.len() > f {
            return Err(format!(
                "attack.controlled has {} replicas, at most f = {f} allowed",
                self.controlled.len()
            ));
        }
        if self.isolated.len() > f {
            return Err(format!(
                "attack.isolated has {} replicas, at most f = {f} allowed",
                self.isolated.len()
            ));
        }
        if let Some(r) = self.controlled.iter().chain(&self.isolated).find(|r| r.0 >= params.n()) {
            return Err(format!("attack: replica {r} out of range (n = {})", params.n()));
        }
        if let Some(r) = self.isolated.intersection(&self.controlled).next() {
            return Err(format!("attack: replica {r} is both controlled and isolated"));
        }
        if let Some(c) = self.target_clients.iter().find(|c| c.0 >= clients) {
            return Err(format!("attack.target_clients: {c} out of range ({clients} clients)"));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err("attack.drop_probability must be in [0, 1]".into());
        }
        Ok(())
    }

    pub fn is_correct(&self, r: ReplicaId) -> bool {
        !self.controlled.contains(&r)
    }
}

/// Draws a random policy: up to `f` controlled replicas (the initial leader
/// with probability one half), up to `f` isolated correct replicas, a variant,
/// a drop coin and a random set of withheld kinds.
pub fn randomized_adversary(seed: u64, params: SystemParams, clients: u32) -> AttackPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xadd5_eed5);
    let n = params.n();
    let f = params.f() as usize;
    let mut controlled = BTreeSet::new();
    if rng.gen_bool(0.5) {
        controlled.insert(ReplicaId(0));
    }
    let extra = rng.gen_range(0..=f);
    while controlled.len() < extra.max(controlled.len()).min(f) {
        controlled.insert(ReplicaId(rng.gen_range(0..n)));
    }
    let mut isolated = BTreeSet::new();
    for _ in 0..rng.gen_range(0..=f) {
        let r = ReplicaId(rng.gen_range(0..n));
        if !controlled.contains(&r) {
            isolated.insert(r);
        }
    }
    let variant = match rng.gen_range(0..3) {
        0 => AttackVariant::OmitPropose,
        1 => AttackVariant::ConflictingPropose,
        _ => AttackVariant::Silent,
    };
    let target_clients = (0..clients).filter(|_| rng.gen_bool(0.3)).map(ClientId).collect();
    let mut withhold = BTreeSet::new();
    for kind in [MsgKind::Prepare, MsgKind::Accept, MsgKind::Stop, MsgKind::Checkpoint] {
        if rng.gen_bool(0.15) {
            withhold.insert(kind);
        }
    }
    AttackPolicy {
        controlled,
        isolated,
        target_clients,
        variant,
        drop_probability: if rng.gen_bool(0.5) {
            rng.gen_range(0.0..0.3)
        } else {
            0.0
        },
        withhold,
        stale_reads: rng.gen_bool(0.3),
    }
}

/// A different, well-formed batch for the same instance.
fn conflicting(value: &Proposal) -> Proposal {
    if value.batch().is_empty() {
        Proposal::new(
            value.instance(),
            vec![Request {
                client: ClientId(u32::MAX),
                seq: value.instance(),
                op: Operation::Read { key: 0 },
            }],
        )
    } else {
        Proposal::noop(value.instance())
    }
}

#[derive(Debug, Clone)]
pub struct Adversary {
    policy: AttackPolicy,
    rng: ChaCha8Rng,
}

impl Adversary {
    pub fn new(policy: AttackPolicy, seed: u64) -> Self {
        Adversary {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn policy(&self) -> &AttackPolicy {
        &self.policy
    }
}

impl Interposer<Message> for Adversary {
    fn filter(&mut self, from: NodeId, to: NodeId, msg: &Message) -> Verdict<Message> {
        let Some(sender) = from.as_replica() else {
            return Verdict::Pass;
        };
        let p = &self.policy;
        if !p.controlled.contains(&sender) {
            return Verdict::Pass;
        }
        if p.variant == AttackVariant::Silent || p.withhold.contains(&msg.kind()) {
            return Verdict::Drop;
        }
        if p.drop_probability > 0.0 && self.rng.gen_bool(p.drop_probability) {
            return Verdict::Drop;
        }
        let to_isolated = to.as_replica().is_some_and(|r| p.isolated.contains(&r));
        match msg {
            Message::Propose { view, proposal } if to_isolated => match p.variant {
                AttackVariant::ConflictingPropose => Verdict::Replace(Message::Propose {
                    view: *view,
                    proposal: conflicting(proposal),
                }),
                _ => Verdict::Drop,
            },
            // keep isolated replicas from learning decisions through us
            Message::FwdDecision { .. } | Message::OutdatedReq { .. } if to_isolated => Verdict::Drop,
            Message::Reply(_) if to.as_client().is_some_and(|c| p.target_clients.contains(&c)) => Verdict::Drop,
            Message::Reply(r) if p.stale_reads && !r.ordered => {
                let mut stale = r.clone();
                stale.result = OpResult::Value(None);
                Verdict::Replace(Message::Reply(stale))
            }
            _ => Verdict::Pass,
        }
    }
}
