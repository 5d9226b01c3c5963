//! Post-run checks over the persisted artifacts: agreement recount from the
//! trace, liveness, linearizability of the client history and metric recount.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::lincheck::{check_linearizable, CheckOptions, HistoryEntry, Outcome};
use crate::trace::{SimTime, TraceKind, TraceRecord};
use crate::types::{NodeId, ReplicaId};

use super::metrics::RunMetrics;
use super::scenario::{CheckName, Scenario};

/// Safety violations found in a trace.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AgreementReport {
    pub instances: usize,
    /// Instances for which two correct replicas decided different digests.
    pub conflicts: Vec<u64>,
    /// `(replica, instance)` pairs decided more than once.
    pub double_decides: Vec<(String, u64)>,
    /// Execution gaps, reorders or executions of an undecided digest.
    pub execution_errors: Vec<String>,
    /// Checkpoints for which two correct replicas computed different digests.
    pub checkpoint_mismatches: Vec<u64>,
}

impl AgreementReport {
    pub fn ok(&self) -> bool {
        self.conflicts.is_empty()
            && self.double_decides.is_empty()
            && self.execution_errors.is_empty()
            && self.checkpoint_mismatches.is_empty()
    }
}

impl fmt::Display for AgreementReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} instances decided", self.instances)?;
        if !self.conflicts.is_empty() {
            write!(f, "; conflicting decisions at {:?}", self.conflicts)?;
        }
        if !self.double_decides.is_empty() {
            write!(f, "; double decides {:?}", self.double_decides)?;
        }
        if !self.checkpoint_mismatches.is_empty() {
            write!(f, "; diverging checkpoints at {:?}", self.checkpoint_mismatches)?;
        }
        if let Some(e) = self.execution_errors.first() {
            write!(f, "; {} execution errors, first: {e}", self.execution_errors.len())?;
        }
        Ok(())
    }
}

pub fn check_agreement(trace: &[TraceRecord], controlled: &BTreeSet<ReplicaId>) -> AgreementReport {
    let correct = |r: &TraceRecord| matches!(r.node_id(), Some(NodeId::Replica(id)) if !controlled.contains(&id));
    let mut report = AgreementReport::default();
    let mut agreed: BTreeMap<u64, String> = BTreeMap::new();
    let mut seen: BTreeSet<(String, u64)> = BTreeSet::new();
    let mut conflicts = BTreeSet::new();
    let mut next_exec: BTreeMap<String, u64> = BTreeMap::new();
    let mut checkpoints: BTreeMap<u64, String> = BTreeMap::new();
    let mut diverging = BTreeSet::new();

    for r in trace.iter().filter(|r| correct(r)) {
        match r.kind {
            TraceKind::Decide => {
                let (Some(c), Some(d)) = (r.inst, r.digest.clone()) else {
                    report.execution_errors.push(format!(
                        "t={} {}: decide record without instance or digest",
                        r.t, r.node
                    ));
                    continue;
                };
                if !seen.insert((r.node.clone(), c)) {
                    report.double_decides.push((r.node.clone(), c));
                }
                let first = agreed.entry(c).or_insert_with(|| d.clone());
                if *first != d {
                    conflicts.insert(c);
                }
            }
            TraceKind::Execute => {
                let c = r.inst.unwrap_or(0);
                let next = next_exec.entry(r.node.clone()).or_insert(1);
                if c != *next {
                    report
                        .execution_errors
                        .push(format!("t={} {}: executed {c}, expected {next}", r.t, r.node));
                }
                *next = c + 1;
                if agreed.get(&c) != r.digest.as_ref() {
                    report
                        .execution_errors
                        .push(format!("t={} {}: executed {c} with a digest not decided", r.t, r.node));
                }
            }
            TraceKind::Checkpoint => {
                if let (Some(c), Some(d)) = (r.inst, &r.digest) {
                    if checkpoints.entry(c).or_insert_with(|| d.clone()) != d {
                        diverging.insert(c);
                    }
                }
            }
            TraceKind::StateTransfer if r.detail.as_deref() == Some("installed") => {
                let up_to = r.inst.unwrap_or(0);
                let next = next_exec.entry(r.node.clone()).or_insert(1);
                if up_to + 1 < *next {
                    report.execution_errors.push(format!(
                        "t={} {}: installed state {up_to} behind execution",
                        r.t, r.node
                    ));
                }
                *next = up_to + 1;
            }
            _ => {}
        }
    }
    report.instances = agreed.len();
    report.conflicts = conflicts.into_iter().collect();
    report.checkpoint_mismatches = diverging.into_iter().collect();
    report
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub expected_fail: bool,
    pub detail: String,
}

impl CheckResult {
    /// The check behaved as the scenario declares.
    pub fn as_expected(&self) -> bool {
        self.passed != self.expected_fail
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Report {
    pub results: Vec<CheckResult>,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.results.iter().all(CheckResult::as_expected)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn exit_code(&self) -> i32 {
        if self.ok() {
            0
        } else {
            1
        }
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let status = match (r.passed, r.expected_fail) {
                (true, false) => "PASS",
                (false, false) => "FAIL",
                (false, true) => "FAIL (expected)",
                (true, true) => "PASS (expected to fail)",
            };
            writeln!(f, "{:<16} {status}: {}", r.name, r.detail)?;
        }
        Ok(())
    }
}

fn liveness(history: &[HistoryEntry], gst: SimTime, bound: Option<SimTime>) -> (bool, String) {
    let incomplete: Vec<_> = history.iter().filter(|h| h.response.is_none()).collect();
    if let Some(h) = incomplete.first() {
        return (
            false,
            format!(
                "{} of {} operations incomplete, first: {h}",
                incomplete.len(),
                history.len()
            ),
        );
    }
    if let Some(bound) = bound {
        let slow = history
            .iter()
            .filter_map(|h| h.response.map(|r| (h, r.saturating_sub(h.invoke.max(gst)))))
            .max_by_key(|(_, l)| *l);
        if let Some((h, l)) = slow {
            if l > bound {
                return (false, format!("latency {l} after GST exceeds bound {bound}: {h}"));
            }
        }
    }
    (true, format!("{} operations completed", history.len()))
}

/// Runs the checks the scenario enables. `metrics_csv`, when given, must equal
/// the metrics recomputed from `trace`.
pub fn check_run(
    scenario: &Scenario,
    metrics_csv: Option<&str>,
    history: &[HistoryEntry],
    trace: &[TraceRecord],
) -> Report {
    let checks = &scenario.checks;
    let controlled = scenario.controlled();
    let mut report = Report::default();
    let mut push = |name: CheckName, passed: bool, detail: String| {
        report.results.push(CheckResult {
            name: name.as_str().to_string(),
            passed,
            expected_fail: checks.expect_fail.contains(&name),
            detail,
        });
    };
    if checks.agreement {
        let a = check_agreement(trace, &controlled);
        push(CheckName::Agreement, a.ok(), a.to_string());
    }
    if checks.liveness {
        let (ok, detail) = liveness(history, scenario.network.gst, checks.liveness_bound);
        push(CheckName::Liveness, ok, detail);
    }
    if checks.linearizability {
        match check_linearizable(history, &CheckOptions::default()) {
            Ok(Outcome::Linearizable) => push(CheckName::Linearizability, true, "linearizable".into()),
            Ok(Outcome::Violation(v)) => push(CheckName::Linearizability, false, v.to_string()),
            Err(e) => push(CheckName::Linearizability, false, e.to_string()),
        }
    }
    if let Some(csv) = metrics_csv {
        let recount = RunMetrics::from_trace(trace, &controlled).to_csv();
        let (passed, detail) = if recount == csv {
            (true, "metrics match the trace".to_string())
        } else {
            let diff = recount
                .lines()
                .zip(csv.lines())
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("recount `{a}`, file `{b}`"))
                .unwrap_or_else(|| "row count differs".into());
            (false, diff)
        };
        report.results.push(CheckResult {
            name: "metrics".into(),
            passed,
            expected_fail: false,
            detail,
        });
    }
    report
}
