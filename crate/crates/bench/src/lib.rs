//! Fixtures shared by the benchmarks.

use lineage_core::gcs::{AuditRecord, GcsState};
use lineage_core::harness::{self, scenarios, FaultSpec, SimConfig};
use lineage_core::ValidatedPlan;

/// Store contents after the first `fraction` of a failure-free run's
/// transactions, rebuilt from its audit log.
pub fn state_at(plan: &ValidatedPlan, cfg: &SimConfig, fraction: f64) -> GcsState {
    let out = harness::run(plan, cfg, &FaultSpec::none()).expect("failure-free run");
    let txns: Vec<_> = out
        .audit
        .records()
        .iter()
        .filter_map(|r| match r {
            AuditRecord::Txn(t) => Some(t),
            _ => None,
        })
        .collect();
    let cut = ((txns.len() as f64) * fraction) as usize;
    let mut state = GcsState::default();
    for t in &txns[..cut] {
        state.replay_ops(&t.ops, t.time).expect("logged ops replay");
    }
    state
}

pub fn plan(name: &str) -> ValidatedPlan {
    let p = scenarios::builtin(name).expect("built-in plan");
    lineage_core::validate_plan(&p).expect("built-in plans validate")
}
