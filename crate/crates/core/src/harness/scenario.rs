//! Scenario files: TOML, schema documented in `docs/scenario-format.md`.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AttackPolicy;
use crate::client::ClientConfig;
use crate::protocol::{AuthScheme, SystemParams};
use crate::replica::ReplicaConfig;
use crate::simnet::NetConfig;
use crate::trace::SimTime;
use crate::types::{ClientId, Key, Operation, ReplicaId};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("{origin}: {message}")]
    Invalid { origin: String, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("unknown scenario `{0}` (see list-scenarios)")]
    Unknown(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n: u32,
    pub f: u32,
    #[serde(default)]
    pub auth: AuthScheme,
}

fn one_u32() -> u32 {
    1
}

fn one_u64() -> u64 {
    1
}

fn default_payload() -> usize {
    8
}

/// A group of identical clients. Client ids are assigned in file order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadGroup {
    #[serde(default = "one_u32")]
    pub clients: u32,
    /// Operations per client when no script is given.
    #[serde(default)]
    pub ops: usize,
    #[serde(default)]
    pub read_ratio: f64,
    #[serde(default = "one_u64")]
    pub keys: u64,
    #[serde(default = "default_payload")]
    pub payload: usize,
    #[serde(default)]
    pub start: SimTime,
    #[serde(default)]
    pub think: SimTime,
    /// Fixed operations (`read K`, `update K V`) run by every client of the group.
    #[serde(default)]
    pub script: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckName {
    Agreement,
    Liveness,
    Linearizability,
}

impl CheckName {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckName::Agreement => "agreement",
            CheckName::Liveness => "liveness",
            CheckName::Linearizability => "linearizability",
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checks {
    #[serde(default = "yes")]
    pub agreement: bool,
    #[serde(default = "yes")]
    pub liveness: bool,
    #[serde(default = "yes")]
    pub linearizability: bool,
    /// Maximum latency of any operation, counted from `max(invoke, gst)`.
    #[serde(default)]
    pub liveness_bound: Option<SimTime>,
    /// Checks this scenario is designed to fail.
    #[serde(default)]
    pub expect_fail: BTreeSet<CheckName>,
}

impl Default for Checks {
    fn default() -> Self {
        Checks {
            agreement: true,
            liveness: true,
            linearizability: true,
            liveness_bound: None,
            expect_fail: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub horizon: SimTime,
    pub system: SystemSection,
    #[serde(default)]
    pub replica: ReplicaConfig,
    #[serde(default)]
    pub client: ClientConfig,
    #[serde(default)]
    pub workload: Vec<WorkloadGroup>,
    #[serde(default)]
    pub network: NetConfig,
    #[serde(default)]
    pub attack: Option<AttackPolicy>,
    #[serde(default)]
    pub checks: Checks,
}

/// Per-client plan derived from the workload groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientPlan {
    pub id: ClientId,
    pub ops: Vec<Operation>,
    pub start: SimTime,
    pub think: SimTime,
}

impl Scenario {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        s.validate().map_err(|message| ConfigError::Invalid {
            origin: origin.to_string(),
            message,
        })?;
        Ok(s)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn params(&self) -> SystemParams {
        SystemParams::new(self.system.n, self.system.f).expect("validated")
    }

    pub fn client_count(&self) -> u32 {
        self.workload.iter().map(|g| g.clients).sum()
    }

    pub fn controlled(&self) -> BTreeSet<ReplicaId> {
        self.attack.as_ref().map(|a| a.controlled.clone()).unwrap_or_default()
    }

    pub fn isolated(&self) -> BTreeSet<ReplicaId> {
        self.attack.as_ref().map(|a| a.isolated.clone()).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.version != SCENARIO_VERSION {
            return Err(format!(
                "version = {}: this build reads version {SCENARIO_VERSION}",
                self.version
            ));
        }
        let params = SystemParams::new(self.system.n, self.system.f).map_err(|e| format!("system: {e}"))?;
        if self.horizon <= self.network.gst {
            return Err(format!(
                "horizon = {} must exceed network.gst = {}",
                self.horizon, self.network.gst
            ));
        }
        self.replica.validate()?;
        self.client.validate()?;
        self.network.validate(params.n())?;
        if let Some(a) = &self.attack {
            a.validate(params, self.client_count())?;
        }
        for (i, g) in self.workload.iter().enumerate() {
            let at = format!("workload[{i}]");
            if !(0.0..=1.0).contains(&g.read_ratio) {
                return Err(format!("{at}.read_ratio must be in [0, 1]"));
            }
            if g.keys == 0 {
                return Err(format!("{at}.keys must be at least 1"));
            }
            for op in &g.script {
                op.parse::<Operation>().map_err(|e| format!("{at}.script: {e}"))?;
            }
        }
        Ok(())
    }

    /// Expands workload groups into per-client operation lists. Generated
    /// update values are unique per client and operation.
    pub fn client_plans(&self) -> Vec<ClientPlan> {
        let mut plans = Vec::new();
        let mut next = 0u32;
        for g in &self.workload {
            for _ in 0..g.clients {
                let id = ClientId(next);
                next += 1;
                let ops = if g.script.is_empty() {
                    generate_ops(self.seed, id, g)
                } else {
                    g.script.iter().map(|s| s.parse().expect("validated")).collect()
                };
                plans.push(ClientPlan {
                    id,
                    ops,
                    start: g.start,
                    think: g.think,
                });
            }
        }
        plans
    }
}

fn generate_ops(seed: u64, client: ClientId, g: &WorkloadGroup) -> Vec<Operation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(client.0 as u64));
    (0..g.ops)
        .map(|i| {
            let key: Key = rng.gen_range(0..g.keys);
            if rng.gen_bool(g.read_ratio) {
                Operation::Read { key }
            } else {
                let mut value = format!("{client}.{i}");
                while value.len() < g.payload {
                    value.push('_');
                }
                Operation::Update {
                    key,
                    value: value.into_bytes(),
                }
            }
        })
        .collect()
}
