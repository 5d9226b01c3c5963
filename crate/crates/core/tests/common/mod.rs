//! Shared test helpers: random small histories and a brute-force
//! linearizability oracle to compare the checker against.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smrsim_core::lincheck::HistoryEntry;
use smrsim_core::{ClientId, OpResult, Operation};

/// A well-formed history of at most `max_ops` operations over two keys and
/// two values, with overlapping intervals, coinciding timestamps and an
/// occasional incomplete final operation per client.
pub fn random_history(seed: u64, max_ops: usize) -> Vec<HistoryEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = rng.gen_range(1..=max_ops);
    let clients = rng.gen_range(1..=3u32);
    let mut clock = vec![0u64; clients as usize];
    let mut open = vec![false; clients as usize];
    let mut seqs = vec![0u64; clients as usize];
    let mut out = Vec::new();
    for _ in 0..total {
        let c = rng.gen_range(0..clients) as usize;
        if open[c] {
            continue;
        }
        let invoke = clock[c] + rng.gen_range(0..4);
        let complete = rng.gen_bool(0.85);
        let response = invoke + rng.gen_range(0..6);
        seqs[c] += 1;
        let key = rng.gen_range(0..2);
        let value = |rng: &mut ChaCha8Rng| [b"a".to_vec(), b"b".to_vec()][rng.gen_range(0..2)].clone();
        let (op, result) = if rng.gen_bool(0.5) {
            let v = value(&mut rng);
            (Operation::Update { key, value: v.clone() }, OpResult::Written(v))
        } else {
            let r = if rng.gen_bool(0.3) { None } else { Some(value(&mut rng)) };
            (Operation::Read { key }, OpResult::Value(r))
        };
        out.push(HistoryEntry {
            client: ClientId(c as u32),
            seq: seqs[c],
            op,
            invoke,
            response: complete.then_some(response),
            result: complete.then_some(result),
        });
        clock[c] = response;
        open[c] = !complete;
    }
    out
}

/// Tries every order of the completed operations together with every subset
/// of incomplete updates.
pub fn brute_force_linearizable(history: &[HistoryEntry]) -> bool {
    let complete: Vec<&HistoryEntry> = history.iter().filter(|e| e.response.is_some()).collect();
    let pending: Vec<&HistoryEntry> = history
        .iter()
        .filter(|e| e.response.is_none() && matches!(e.op, Operation::Update { .. }))
        .collect();
    for subset in 0u32..(1 << pending.len()) {
        let mut ops = complete.clone();
        ops.extend(
            pending
                .iter()
                .enumerate()
                .filter(|(i, _)| subset & (1 << i) != 0)
                .map(|(_, e)| *e),
        );
        let mut used = vec![false; ops.len()];
        let mut order = Vec::new();
        if permute(&ops, &mut used, &mut order) {
            return true;
        }
    }
    false
}

fn precedes(a: &HistoryEntry, b: &HistoryEntry) -> bool {
    a.response.is_some_and(|r| r < b.invoke)
}

fn permute<'a>(ops: &[&'a HistoryEntry], used: &mut [bool], order: &mut Vec<&'a HistoryEntry>) -> bool {
    if order.len() == ops.len() {
        return legal(order);
    }
    for i in 0..ops.len() {
        if used[i] {
            continue;
        }
        // nothing still unplaced may be required to come first
        if (0..ops.len()).any(|j| !used[j] && j != i && precedes(ops[j], ops[i])) {
            continue;
        }
        used[i] = true;
        order.push(ops[i]);
        if permute(ops, used, order) {
            return true;
        }
        order.pop();
        used[i] = false;
    }
    false
}

fn legal(order: &[&HistoryEntry]) -> bool {
    let mut state: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
    for e in order {
        match &e.op {
            Operation::Update { key, value } => {
                state.insert(*key, value.clone());
            }
            Operation::Read { key } => {
                if e.result != Some(OpResult::Value(state.get(key).cloned())) {
                    return false;
                }
            }
        }
    }
    true
}
