//! Deterministic discrete-event simulation of the whole cluster.
//!
//! [`run`] executes a plan under a [`SimConfig`] and [`FaultSpec`] and
//! returns the collected result, a [`RunMetrics`] summary and the audit log.
//! [`audit`] re-checks the engine's invariants offline from the log alone.

mod auditor;
mod config;
mod metrics;
pub mod scenarios;
mod sim;

use std::collections::BTreeMap;

use thiserror::Error;

pub use auditor::{audit, Violation, ViolationKind};
pub use config::{CostModel, Fault, FaultSpec, FaultTarget, SimConfig, Trigger, DEFAULT_SEED};
pub use metrics::RunMetrics;

use crate::batch::Batch;
use crate::gcs::AuditLog;
use crate::ids::{StageId, TaskName};
use crate::plan::ValidatedPlan;
use crate::worker::{BatchingPolicy, FtStrategy, WorkerError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("deadlock: {0}")]
    Deadlock(String),
    #[error("partition {0} cannot be recovered")]
    Unrecoverable(TaskName),
    #[error("every worker has failed")]
    NoLiveWorkers,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Worker(#[from] WorkerError),
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Committed rows of each sink stage.
    pub result: BTreeMap<StageId, Batch>,
    pub metrics: RunMetrics,
    pub audit: AuditLog,
}

/// Runs `plan` to completion. Progress-fraction faults are resolved against
/// a failure-free run of the same configuration first.
pub fn run(plan: &ValidatedPlan, config: &SimConfig, faults: &FaultSpec) -> Result<RunOutput, SimError> {
    config.validate().map_err(SimError::Config)?;
    faults.validate().map_err(SimError::Config)?;
    let calibrated = if faults.needs_calibration() {
        Some(run(plan, config, &FaultSpec::none())?.metrics.makespan_ticks)
    } else {
        None
    };
    let out = sim::Sim::new(plan, config, faults, calibrated).run()?;
    Ok(RunOutput {
        result: out.result,
        metrics: out.metrics,
        audit: out.gcs.into_audit(),
    })
}

/// Stage-at-a-time execution without faults.
pub fn run_blocking(plan: &ValidatedPlan, config: &SimConfig) -> Result<RunMetrics, SimError> {
    let cfg = SimConfig {
        blocking: true,
        ..config.clone()
    };
    Ok(run(plan, &cfg, &FaultSpec::none())?.metrics)
}

/// The no-fault-tolerance reference point: nothing is backed up, nothing
/// fails.
pub fn baseline(plan: &ValidatedPlan, config: &SimConfig) -> Result<RunMetrics, SimError> {
    let cfg = config
        .clone()
        .with_strategy(FtStrategy::RestartOnly)
        .with_batching(BatchingPolicy::Dynamic);
    Ok(run(plan, &cfg, &FaultSpec::none())?.metrics)
}

/// One run per strategy and batching policy, sharing the seed, with
/// overheads relative to [`baseline`].
pub fn compare_strategies(
    plan: &ValidatedPlan,
    config: &SimConfig,
    faults: &FaultSpec,
    strategies: &[FtStrategy],
    batchings: &[BatchingPolicy],
) -> Result<Vec<RunMetrics>, SimError> {
    if strategies.is_empty() || batchings.is_empty() {
        return Ok(Vec::new());
    }
    let base = baseline(plan, config)?.makespan_ticks.max(1) as f64;
    let mut rows = Vec::new();
    for &s in strategies {
        for &b in batchings {
            let cfg = config.clone().with_strategy(s).with_batching(b);
            let mut m = run(plan, &cfg, faults)?.metrics;
            m.overhead = Some(m.makespan_ticks as f64 / base);
            rows.push(m);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
