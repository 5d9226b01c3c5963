//! Log synchronization for a new regency.
//!
//! The new leader collects signed `StopData` from a quorum and relays the set
//! in `SYNC`. Every replica derives the same plan from that set:
//!
//! * `D` is the highest instance with a valid decision proof;
//! * every instance in `(D, H]`, where `H` is the highest instance with a
//!   valid prepared certificate, is re-proposed with the value of its
//!   highest-view certificate, or a no-op when none exists;
//! * fresh proposals start at `max(D, H) + 1`.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::message::StopData;
use crate::protocol::{quorum_size, verify_prepared, verify_proof, Authenticator, DecisionProof, SystemParams};
use crate::types::{Instance, Proposal, Regency};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("sync carries {have} valid stop-data reports, quorum is {need}")]
    NotEnoughStopData { have: usize, need: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncPlan {
    pub regency: Regency,
    pub decided: BTreeMap<Instance, (Proposal, DecisionProof)>,
    pub decided_up_to: Instance,
    pub reproposals: BTreeMap<Instance, Proposal>,
    pub next_instance: Instance,
}

pub fn compute_plan(
    params: SystemParams,
    auth: &dyn Authenticator,
    regency: Regency,
    stop_data: &[StopData],
) -> Result<SyncPlan, SyncError> {
    let mut senders = BTreeSet::new();
    let valid: Vec<&StopData> = stop_data
        .iter()
        .filter(|sd| sd.regency == regency && sd.sender.0 < params.n() && sd.verify(auth) && senders.insert(sd.sender))
        .collect();
    let need = quorum_size(params);
    if valid.len() < need {
        return Err(SyncError::NotEnoughStopData {
            have: valid.len(),
            need,
        });
    }

    let mut decided = BTreeMap::new();
    for sd in &valid {
        for (value, proof) in &sd.decided {
            let c = value.instance();
            if !decided.contains_key(&c) && verify_proof(params, auth, c, value, proof) {
                decided.insert(c, (value.clone(), proof.clone()));
            }
        }
    }
    let decided_up_to = decided.keys().next_back().copied().unwrap_or(0);

    let mut best: BTreeMap<Instance, (Regency, &Proposal)> = BTreeMap::new();
    for sd in &valid {
        for (value, cert) in &sd.prepared {
            let c = value.instance();
            if c <= decided_up_to || !verify_prepared(params, auth, value, cert) {
                continue;
            }
            match best.get(&c) {
                Some((view, _)) if *view >= cert.view => {}
                _ => {
                    best.insert(c, (cert.view, value));
                }
            }
        }
    }
    let high = best.keys().next_back().copied().unwrap_or(0).max(decided_up_to);
    let reproposals = (decided_up_to + 1..=high)
        .map(|c| {
            let v = best
                .get(&c)
                .map(|(_, v)| (*v).clone())
                .unwrap_or_else(|| Proposal::noop(c));
            (c, v)
        })
        .collect();

    Ok(SyncPlan {
        regency,
        decided,
        decided_up_to,
        reproposals,
        next_instance: high + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{make_prepared_certificate, make_proof, Attestation, MacAuthenticator, Phase};
    use crate::types::{ClientId, Operation, ReplicaId, Request};

    fn value(c: Instance, tag: &str) -> Proposal {
        Proposal::new(
            c,
            vec![Request {
                client: ClientId(0),
                seq: c,
                op: Operation::Update {
                    key: 0,
                    value: tag.as_bytes().to_vec(),
                },
            }],
        )
    }

    fn atts(auth: &MacAuthenticator, phase: Phase, v: &Proposal, view: Regency) -> Vec<Attestation> {
        (0..3)
            .map(|i| Attestation::sign(auth, phase, ReplicaId(i), v.instance(), view, v.digest()))
            .collect()
    }

    #[test]
    fn plan_adopts_decisions_and_highest_prepared() {
        let p = SystemParams::minimal(1);
        let auth = MacAuthenticator::new(4, 9);
        let d1 = value(1, "a");
        let proof = make_proof(p, 1, d1.digest(), atts(&auth, Phase::Accept, &d1, 0)).unwrap();
        let old = value(3, "old");
        let new = value(3, "new");
        let cert_old = make_prepared_certificate(p, 3, old.digest(), atts(&auth, Phase::Prepare, &old, 0)).unwrap();
        let cert_new = make_prepared_certificate(p, 3, new.digest(), atts(&auth, Phase::Prepare, &new, 1)).unwrap();
        let sds = vec![
            StopData::new(&auth, 2, ReplicaId(0), vec![(d1.clone(), proof)], vec![]),
            StopData::new(&auth, 2, ReplicaId(1), vec![], vec![(old, cert_old)]),
            StopData::new(&auth, 2, ReplicaId(2), vec![], vec![(new.clone(), cert_new)]),
        ];
        let plan = compute_plan(p, &auth, 2, &sds).unwrap();
        assert_eq!(plan.decided_up_to, 1);
        assert_eq!(plan.reproposals.len(), 2);
        assert_eq!(plan.reproposals[&2], Proposal::noop(2));
        assert_eq!(plan.reproposals[&3], new);
        assert_eq!(plan.next_instance, 4);
    }

    #[test]
    fn plan_needs_a_quorum_of_authentic_reports() {
        let p = SystemParams::minimal(1);
        let auth = MacAuthenticator::new(4, 9);
        let mut sds: Vec<StopData> = (0..3)
            .map(|i| StopData::new(&auth, 1, ReplicaId(i), vec![], vec![]))
            .collect();
        assert!(compute_plan(p, &auth, 1, &sds).is_ok());
        sds[2].tag[0] ^= 1;
        assert_eq!(
            compute_plan(p, &auth, 1, &sds),
            Err(SyncError::NotEnoughStopData { have: 2, need: 3 })
        );
        sds[2] = sds[1].clone();
        assert!(compute_plan(p, &auth, 1, &sds).is_err());
    }

    #[test]
    fn forged_certificates_are_ignored() {
        let p = SystemParams::minimal(1);
        let auth = MacAuthenticator::new(4, 9);
        let v = value(1, "x");
        let mut cert = make_prepared_certificate(p, 1, v.digest(), atts(&auth, Phase::Prepare, &v, 0)).unwrap();
        cert.attestations[0].tag[0] ^= 1;
        let sds: Vec<StopData> = (0..3)
            .map(|i| StopData::new(&auth, 1, ReplicaId(i), vec![], vec![(v.clone(), cert.clone())]))
            .collect();
        let plan = compute_plan(p, &auth, 1, &sds).unwrap();
        assert!(plan.reproposals.is_empty());
        assert_eq!(plan.next_instance, 1);
    }
}
