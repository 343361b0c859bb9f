use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::ids::{units, Ticks};
use crate::worker::{BatchingPolicy, FtStrategy};

/// Summary of one simulated run. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub strategy: FtStrategy,
    pub batching: String,
    pub blocking: bool,
    pub workers: u32,
    pub seed: u64,
    pub makespan_ticks: Ticks,
    /// Makespan over the baseline's, when a baseline was run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overhead: Option<f64>,
    pub tasks_committed: u64,
    pub replays_executed: u64,
    pub inputs_executed: u64,
    pub recoveries: u64,
    pub restarts: u64,
    pub rewinds_planned: u64,
    pub replays_planned: u64,
    pub inputs_planned: u64,
    pub reconstructed: u64,
    pub faults_injected: u64,
    pub push_failures: u64,
    pub aborted_attempts: u64,
    pub bytes_pushed: u64,
    pub bytes_replayed: u64,
    pub bytes_local: u64,
    pub bytes_durable: u64,
    pub lineage_bytes: u64,
    pub gcs_transactions: u64,
    pub gcs_rejected: u64,
    pub result: Digest,
}

impl RunMetrics {
    pub(crate) fn new(strategy: FtStrategy, batching: BatchingPolicy, blocking: bool, workers: u32, seed: u64) -> Self {
        Self {
            strategy,
            batching: batching.to_string(),
            blocking,
            workers,
            seed,
            makespan_ticks: 0,
            overhead: None,
            tasks_committed: 0,
            replays_executed: 0,
            inputs_executed: 0,
            recoveries: 0,
            restarts: 0,
            rewinds_planned: 0,
            replays_planned: 0,
            inputs_planned: 0,
            reconstructed: 0,
            faults_injected: 0,
            push_failures: 0,
            aborted_attempts: 0,
            bytes_pushed: 0,
            bytes_replayed: 0,
            bytes_local: 0,
            bytes_durable: 0,
            lineage_bytes: 0,
            gcs_transactions: 0,
            gcs_rejected: 0,
            result: Digest::default(),
        }
    }

    pub fn makespan(&self) -> f64 {
        units(self.makespan_ticks)
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let value = serde_json::to_value(self).expect("metrics serialize");
        let mut out = String::new();
        writeln!(out, "makespan={:.6}", self.makespan()).unwrap();
        for (k, v) in value.as_object().expect("struct") {
            let v = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) if n.is_f64() => format!("{:.6}", n.as_f64().unwrap()),
                other => other.to_string(),
            };
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}
