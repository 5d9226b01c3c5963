//! Linearizability checking for key-value histories.
//!
//! Every key is an independent read/write register whose initial value is
//! "absent", so a history is linearizable iff each per-key sub-history is.
//! Each key is checked by depth-first search over linearization prefixes,
//! memoizing `(linearized set, register value)` pairs.
//!
//! Operation `a` precedes `b` in real time iff `a.response < b.invoke`.
//! Incomplete reads are dropped. Incomplete updates are either optional
//! (they may or may not have taken effect) or dropped, per
//! [`IncompletePolicy`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::SimTime;
use crate::types::{ClientId, Key, OpResult, Operation};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub client: ClientId,
    pub seq: u64,
    pub op: Operation,
    pub invoke: SimTime,
    pub response: Option<SimTime>,
    pub result: Option<OpResult>,
}

impl fmt::Display for HistoryEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} #{} {} [{}, ", self.client, self.seq, self.op, self.invoke)?;
        match (self.response, &self.result) {
            (Some(t), Some(r)) => write!(f, "{t}] -> {r}"),
            _ => write!(f, "..] -> (incomplete)"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IncompletePolicy {
    #[default]
    PossiblyEffective,
    Drop,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckOptions {
    pub incomplete: IncompletePolicy,
    /// Larger per-key histories are refused.
    pub max_ops_per_key: usize,
    /// Search states explored per key before giving up.
    pub max_states: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            incomplete: IncompletePolicy::PossiblyEffective,
            max_ops_per_key: 128,
            max_states: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinError {
    #[error("search budget exceeded on key {key} ({ops} operations)")]
    SearchBudgetExceeded { key: Key, ops: usize },
    #[error("malformed history: {0}")]
    Malformed(String),
}

/// A non-linearizable prefix of one key's history: everything invoked up to
/// `cut`, with responses after `cut` treated as not yet received.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub key: Key,
    pub cut: SimTime,
    pub witness: Vec<HistoryEntry>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "not linearizable: key {} (minimal prefix up to t={})",
            self.key, self.cut
        )?;
        for e in &self.witness {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Linearizable,
    Violation(Violation),
}

impl Outcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, Outcome::Linearizable)
    }
}

fn validate(history: &[HistoryEntry]) -> Result<(), LinError> {
    let mut per_client: BTreeMap<ClientId, Vec<&HistoryEntry>> = BTreeMap::new();
    for e in history {
        if e.response.is_some() != e.result.is_some() {
            return Err(LinError::Malformed(format!("{e}: response without result")));
        }
        if e.response.is_some_and(|r| r < e.invoke) {
            return Err(LinError::Malformed(format!("{e}: responds before invocation")));
        }
        per_client.entry(e.client).or_default().push(e);
    }
    for (c, mut ops) in per_client {
        ops.sort_by_key(|e| (e.invoke, e.seq));
        for w in ops.windows(2) {
            match w[0].response {
                Some(r) if r <= w[1].invoke => {}
                _ => {
                    return Err(LinError::Malformed(format!(
                        "{c}: invocations and responses do not alternate at #{}",
                        w[1].seq
                    )))
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Read(u32),
    Write(u32),
}

#[derive(Clone, Copy, Debug)]
struct KOp {
    inv: SimTime,
    resp: SimTime,
    step: Step,
    required: bool,
}

/// Per-key register search.
struct Search<'a> {
    ops: &'a [KOp],
    required: u128,
    memo: HashSet<(u128, u32)>,
    budget: usize,
}

impl Search<'_> {
    fn run(&mut self, mask: u128, state: u32) -> Option<bool> {
        if mask & self.required == self.required {
            return Some(true);
        }
        if !self.memo.insert((mask, state)) {
            return Some(false);
        }
        if self.memo.len() > self.budget {
            return None;
        }
        let open = |i: usize| mask & (1u128 << i) == 0;
        let min_resp = (0..self.ops.len())
            .filter(|&i| open(i))
            .map(|i| self.ops[i].resp)
            .min()
            .unwrap_or(SimTime::MAX);
        for i in 0..self.ops.len() {
            let op = self.ops[i];
            if !open(i) || op.inv > min_resp {
                continue;
            }
            let next = match op.step {
                Step::Read(v) if v == state => state,
                Step::Read(_) => continue,
                Step::Write(v) => v,
            };
            if self.run(mask | (1u128 << i), next)? {
                return Some(true);
            }
        }
        Some(false)
    }
}

/// Linearizability of one key's operations, all of which must target `key`.
fn check_key(
    key: Key,
    entries: &[HistoryEntry],
    forced_optional: &[bool],
    opts: &CheckOptions,
) -> Result<bool, LinError> {
    let mut values: HashMap<Vec<u8>, u32> = HashMap::new();
    let mut intern = |v: &[u8]| {
        let next = values.len() as u32 + 1;
        *values.entry(v.to_vec()).or_insert(next)
    };
    let mut ops = Vec::new();
    for (e, &optional) in entries.iter().zip(forced_optional) {
        let complete = e.response.is_some() && !optional;
        match (&e.op, complete) {
            (Operation::Read { .. }, false) => {}
            (Operation::Read { .. }, true) => {
                let v = match &e.result {
                    Some(OpResult::Value(Some(v))) => intern(v),
                    Some(OpResult::Value(None)) => 0,
                    // an ordered read never returns a write acknowledgement
                    _ => u32::MAX,
                };
                ops.push(KOp {
                    inv: e.invoke,
                    resp: e.response.unwrap_or(SimTime::MAX),
                    step: Step::Read(v),
                    required: true,
                });
            }
            (Operation::Update { value, .. }, complete) => {
                if !complete && !optional && opts.incomplete == IncompletePolicy::Drop {
                    continue;
                }
                ops.push(KOp {
                    inv: e.invoke,
                    resp: if complete { e.response.unwrap() } else { SimTime::MAX },
                    step: Step::Write(intern(value)),
                    required: complete,
                });
            }
        }
    }
    if ops.len() > opts.max_ops_per_key.min(128) {
        return Err(LinError::SearchBudgetExceeded { key, ops: ops.len() });
    }
    let required = ops
        .iter()
        .enumerate()
        .filter(|(_, o)| o.required)
        .fold(0u128, |m, (i, _)| m | (1u128 << i));
    let mut search = Search {
        ops: &ops,
        required,
        memo: HashSet::new(),
        budget: opts.max_states,
    };
    search
        .run(0, 0)
        .ok_or(LinError::SearchBudgetExceeded { key, ops: ops.len() })
}

/// Restricts a key's history to what was visible at `cut`.
fn prefix(entries: &[HistoryEntry], cut: SimTime) -> (Vec<HistoryEntry>, Vec<bool>) {
    let mut out = Vec::new();
    let mut optional = Vec::new();
    for e in entries.iter().filter(|e| e.invoke <= cut) {
        let mut e = e.clone();
        let truncated = e.response.is_some_and(|r| r > cut);
        if truncated {
            e.response = None;
            e.result = None;
        }
        optional.push(truncated);
        out.push(e);
    }
    (out, optional)
}

pub fn check_linearizable(history: &[HistoryEntry], opts: &CheckOptions) -> Result<Outcome, LinError> {
    validate(history)?;
    let mut by_key: BTreeMap<Key, Vec<HistoryEntry>> = BTreeMap::new();
    for e in history {
        by_key.entry(e.op.key()).or_default().push(e.clone());
    }
    for (key, mut entries) in by_key {
        entries.sort_by_key(|e| (e.invoke, e.client, e.seq));
        let none = vec![false; entries.len()];
        if check_key(key, &entries, &none, opts)? {
            continue;
        }
        // Prefixes of a linearizable history are linearizable, so the
        // smallest violating cut can be found by bisection over event times.
        let mut times: Vec<SimTime> = entries
            .iter()
            .flat_map(|e| std::iter::once(e.invoke).chain(e.response))
            .collect();
        times.sort_unstable();
        times.dedup();
        let (mut lo, mut hi) = (0usize, times.len() - 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            let (p, opt) = prefix(&entries, times[mid]);
            if check_key(key, &p, &opt, opts)? {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        let cut = times[lo];
        let (witness, _) = prefix(&entries, cut);
        return Ok(Outcome::Violation(Violation { key, cut, witness }));
    }
    Ok(Outcome::Linearizable)
}

pub fn write_history<W: Write>(history: &[HistoryEntry], mut w: W) -> io::Result<()> {
    for e in history {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_history<R: BufRead>(r: R) -> io::Result<Vec<HistoryEntry>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
