//! Mode comparisons and randomized safety campaigns. Independent runs are
//! spread over a rayon pool; each simulation stays single-threaded.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adversary::randomized_adversary;
use crate::lincheck::{check_linearizable, CheckOptions, Outcome};
use crate::message::MsgKind;
use crate::protocol::{AuthScheme, SystemParams};
use crate::replica::{PatchMode, ReplicaConfig};
use crate::simnet::{NetConfig, PreGstPolicy};
use crate::types::NodeId;

use super::check::{check_agreement, AgreementReport};
use super::run::run_scenario;
use super::scenario::{Checks, Scenario, SystemSection, WorkloadGroup, SCENARIO_VERSION};

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub scenario: String,
    pub mode: PatchMode,
    pub seed: u64,
    pub invoked: usize,
    pub completed: usize,
    pub mean_latency: Option<f64>,
    pub mean_read_latency: Option<f64>,
    pub mean_update_latency: Option<f64>,
    pub req_decision: u64,
    pub fwd_decision: u64,
    pub total_sends: u64,
    pub regency_changes: u64,
    /// Mean decide lag of the isolated replicas (0 when none are isolated).
    pub isolated_decide_lag: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"))
}

/// Runs every scenario under every mode (all else unchanged).
pub fn compare_modes(scenarios: &[Scenario], modes: &[PatchMode]) -> Vec<CompareRow> {
    let jobs: Vec<(Scenario, PatchMode)> = scenarios
        .iter()
        .flat_map(|s| modes.iter().map(move |m| (s.clone(), *m)))
        .collect();
    jobs.into_par_iter()
        .map(|(mut s, mode)| {
            s.replica.mode = mode;
            let out = run_scenario(&s);
            let m = &out.metrics;
            let isolated = s.isolated();
            let lags: Vec<f64> = isolated
                .iter()
                .filter_map(|r| m.decide_lag.get(&NodeId::Replica(*r).to_string()).copied())
                .collect();
            CompareRow {
                scenario: s.name.clone(),
                mode,
                seed: s.seed,
                invoked: m.invoked(),
                completed: m.completed(),
                mean_latency: m.mean_latency(None),
                mean_read_latency: m.mean_latency(Some(true)),
                mean_update_latency: m.mean_latency(Some(false)),
                req_decision: m.sent(MsgKind::ReqDecision),
                fwd_decision: m.sent(MsgKind::FwdDecision),
                total_sends: m.sends.values().sum(),
                regency_changes: m.regency_changes,
                isolated_decide_lag: if lags.is_empty() {
                    0.0
                } else {
                    lags.iter().sum::<f64>() / lags.len() as f64
                },
            }
        })
        .collect()
}

const COLUMNS: [&str; 13] = [
    "scenario",
    "mode",
    "seed",
    "invoked",
    "completed",
    "mean_latency",
    "read_latency",
    "update_latency",
    "req_decision",
    "fwd_decision",
    "sends",
    "regency_changes",
    "isolated_lag",
];

fn cells(r: &CompareRow) -> [String; 13] {
    [
        r.scenario.clone(),
        r.mode.to_string(),
        r.seed.to_string(),
        r.invoked.to_string(),
        r.completed.to_string(),
        fmt_opt(r.mean_latency),
        fmt_opt(r.mean_read_latency),
        fmt_opt(r.mean_update_latency),
        r.req_decision.to_string(),
        r.fwd_decision.to_string(),
        r.total_sends.to_string(),
        r.regency_changes.to_string(),
        format!("{:.1}", r.isolated_decide_lag),
    ]
}

pub fn comparison_csv(rows: &[CompareRow]) -> String {
    let mut s = COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&cells(r).join(","));
        s.push('\n');
    }
    s
}

pub fn comparison_table(rows: &[CompareRow]) -> String {
    let body: Vec<[String; 13]> = rows.iter().map(cells).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|i| {
            body.iter()
                .map(|r| r[i].len())
                .chain([COLUMNS[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut s = String::new();
    let line = |s: &mut String, row: &[String]| {
        let padded: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(s, "{}", padded.join("  ").trim_end());
    };
    line(&mut s, &COLUMNS.map(String::from));
    for r in &body {
        line(&mut s, r);
    }
    s
}

/// A random scenario for safety campaigns: random adversary, pre-GST loss and
/// delay, random workload and checkpoint period.
pub fn campaign_scenario(seed: u64, mode: PatchMode) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = if rng.gen_bool(0.2) {
        SystemParams::new(7, 2).expect("valid")
    } else {
        SystemParams::minimal(1)
    };
    let clients = rng.gen_range(1..=3);
    let gst = rng.gen_range(0..3000);
    let min_delay = rng.gen_range(1..20);
    let network = NetConfig {
        gst,
        delay: rng.gen_range(5..20),
        jitter: rng.gen_range(0..10),
        pre_gst: PreGstPolicy {
            min_delay,
            max_delay: min_delay + rng.gen_range(0..200),
            drop_probability: rng.gen_range(0.0..0.3),
            retransmit_interval: rng.gen_range(20..100),
        },
        ..NetConfig::default()
    };
    let replica = ReplicaConfig {
        mode,
        checkpoint_period: [4, 8, 16][rng.gen_range(0..3)],
        request_timeout: rng.gen_range(200..600),
        batch_limit: rng.gen_range(1..8),
        ..ReplicaConfig::default()
    };
    let workload = vec![WorkloadGroup {
        clients,
        ops: rng.gen_range(3..8),
        read_ratio: 0.5,
        keys: rng.gen_range(1..3),
        payload: 8,
        start: 0,
        think: rng.gen_range(0..50),
        script: Vec::new(),
    }];
    Scenario {
        version: SCENARIO_VERSION,
        name: format!("campaign-{mode}-{seed}"),
        description: String::new(),
        seed,
        horizon: gst + 60_000,
        system: SystemSection {
            n: params.n(),
            f: params.f(),
            auth: AuthScheme::Mac,
        },
        replica,
        client: Default::default(),
        workload,
        network,
        attack: Some(randomized_adversary(seed, params, clients)),
        checks: Checks::default(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CampaignRun {
    pub seed: u64,
    pub mode: PatchMode,
    pub agreement: AgreementReport,
    /// `None` when the history exceeded the checker's budget.
    pub linearizable: Option<bool>,
    pub invoked: usize,
    pub completed: usize,
    pub regency_changes: u64,
    pub state_transfers: u64,
    /// Messages lost to the adversary, the network before GST or partitions.
    pub drops: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CampaignReport {
    pub runs: Vec<CampaignRun>,
}

impl CampaignReport {
    pub fn conflicting_instances(&self) -> usize {
        self.runs.iter().map(|r| r.agreement.conflicts.len()).sum()
    }

    pub fn double_decides(&self) -> usize {
        self.runs.iter().map(|r| r.agreement.double_decides.len()).sum()
    }

    pub fn execution_errors(&self) -> usize {
        self.runs.iter().map(|r| r.agreement.execution_errors.len()).sum()
    }

    pub fn checkpoint_mismatches(&self) -> usize {
        self.runs.iter().map(|r| r.agreement.checkpoint_mismatches.len()).sum()
    }

    pub fn linearizability_failures(&self) -> Vec<(u64, PatchMode)> {
        self.runs
            .iter()
            .filter(|r| r.linearizable == Some(false))
            .map(|r| (r.seed, r.mode))
            .collect()
    }

    pub fn linearizability_unchecked(&self) -> usize {
        self.runs.iter().filter(|r| r.linearizable.is_none()).count()
    }

    pub fn completion_rate(&self) -> f64 {
        let invoked: usize = self.runs.iter().map(|r| r.invoked).sum();
        let completed: usize = self.runs.iter().map(|r| r.completed).sum();
        if invoked == 0 {
            1.0
        } else {
            completed as f64 / invoked as f64
        }
    }

    pub fn summary(&self) -> String {
        let with = |f: fn(&CampaignRun) -> bool| self.runs.iter().filter(|r| f(r)).count();
        format!(
            "{} runs: {} conflicting instances, {} double decides, {} execution errors, {} diverging checkpoints, \
             {} linearizability failures ({} unchecked), completion {:.1}%; \
             runs with a leader change {}, with state transfer {}, with lost messages {}",
            self.runs.len(),
            self.conflicting_instances(),
            self.double_decides(),
            self.execution_errors(),
            self.checkpoint_mismatches(),
            self.linearizability_failures().len(),
            self.linearizability_unchecked(),
            100.0 * self.completion_rate(),
            with(|r| r.regency_changes > 0),
            with(|r| r.state_transfers > 0),
            with(|r| r.drops > 0),
        )
    }
}

/// Runs `runs` seeds (starting at `base_seed`) under every mode.
pub fn run_campaign(base_seed: u64, runs: u64, modes: &[PatchMode]) -> CampaignReport {
    let jobs: Vec<(u64, PatchMode)> = (base_seed..base_seed + runs)
        .flat_map(|s| modes.iter().map(move |m| (s, *m)))
        .collect();
    let runs = jobs
        .into_par_iter()
        .map(|(seed, mode)| {
            let s = campaign_scenario(seed, mode);
            let out = run_scenario(&s);
            let linearizable = match check_linearizable(&out.history, &CheckOptions::default()) {
                Ok(Outcome::Linearizable) => Some(true),
                Ok(Outcome::Violation(_)) => Some(false),
                Err(_) => None,
            };
            CampaignRun {
                seed,
                mode,
                agreement: check_agreement(&out.trace, &s.controlled()),
                linearizable,
                invoked: out.metrics.invoked(),
                completed: out.metrics.completed(),
                regency_changes: out.metrics.regency_changes,
                state_transfers: out.metrics.state_transfers,
                drops: out.metrics.drops,
            }
        })
        .collect();
    CampaignReport { runs }
}
