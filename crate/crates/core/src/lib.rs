//! Deterministic simulator for PBFT/BFT-SMaRt style state machine replication
//! with the read-only optimization.
//!
//! The crate models a Byzantine leader that isolates correct replicas from
//! proposals while censoring client replies, two ways of propagating
//! decisions that defeat it (eager broadcast and on-demand forwarding),
//! checkpointing with a client reply store, a simplified leader change and a
//! linearizability checker for the resulting client histories.
//!
//! Everything runs on a single-threaded discrete-event engine seeded from one
//! value, so a scenario file plus a seed reproduces a byte-identical trace.
//!
//! ```
//! use smrsim_core::harness::{builtin, run_scenario};
//!
//! let scenario = builtin("step-ratio").unwrap();
//! let out = run_scenario(&scenario);
//! assert_eq!(out.metrics.completed(), 2);
//! ```

pub mod adversary;
pub mod client;
pub mod harness;
pub mod lincheck;
pub mod message;
pub mod protocol;
pub mod replica;
pub mod simnet;
pub mod trace;
pub mod types;

pub use adversary::{randomized_adversary, Adversary, AttackPolicy, AttackVariant};
pub use client::{Client, ClientConfig};
pub use lincheck::{check_linearizable, CheckOptions, HistoryEntry, Outcome, Violation};
pub use message::{Message, MsgKind};
pub use protocol::{quorum_size, weak_certificate_size, AuthScheme, Digest, SystemParams};
pub use replica::{PatchMode, ReadQuorumMode, Replica, ReplicaConfig};
pub use simnet::{Engine, NetConfig};
pub use trace::{SimTime, TraceKind, TraceRecord};
pub use types::{ClientId, Instance, NodeId, OpResult, Operation, Proposal, Regency, ReplicaId, Request};
