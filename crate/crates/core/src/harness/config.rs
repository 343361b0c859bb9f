use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ids::{TaskName, WorkerId};
use crate::worker::{BatchingPolicy, FtStrategy};

/// Costs in simulated time units. Lanes: CPU runs kernels, NET carries
/// pushes (and spooled writes), DISK carries local backups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub task_overhead: f64,
    pub kernel_per_row: f64,
    pub net_per_partition: f64,
    pub net_per_byte: f64,
    pub disk_per_byte: f64,
    pub durable_per_partition: f64,
    pub durable_per_byte: f64,
    pub gcs_txn: f64,
    pub poll_interval: f64,
    pub detection_interval: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            task_overhead: 0.01,
            kernel_per_row: 1e-4,
            net_per_partition: 0.002,
            net_per_byte: 1e-6,
            disk_per_byte: 1e-7,
            durable_per_partition: 0.02,
            durable_per_byte: 1e-5,
            gcs_txn: 0.001,
            poll_interval: 0.05,
            detection_interval: 1.0,
        }
    }
}

impl CostModel {
    fn fields(&self) -> [(&'static str, f64); 10] {
        [
            ("task_overhead", self.task_overhead),
            ("kernel_per_row", self.kernel_per_row),
            ("net_per_partition", self.net_per_partition),
            ("net_per_byte", self.net_per_byte),
            ("disk_per_byte", self.disk_per_byte),
            ("durable_per_partition", self.durable_per_partition),
            ("durable_per_byte", self.durable_per_byte),
            ("gcs_txn", self.gcs_txn),
            ("poll_interval", self.poll_interval),
            ("detection_interval", self.detection_interval),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub workers: u32,
    pub seed: u64,
    pub strategy: FtStrategy,
    #[serde(with = "display_fromstr")]
    pub batching: BatchingPolicy,
    /// Stage-at-a-time execution instead of pipelining.
    pub blocking: bool,
    pub cost: CostModel,
    /// Lineage and sentinel reads see the store as of a uniformly random
    /// instant up to this far in the past.
    pub read_lag_max: f64,
    /// A fresh worker joins when a failure is detected.
    pub replace_failed_workers: bool,
    /// No commit for this long is reported as a deadlock.
    pub stall_timeout: f64,
}

pub const DEFAULT_SEED: u64 = 42;

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            seed: DEFAULT_SEED,
            strategy: FtStrategy::WriteAheadLineage,
            batching: BatchingPolicy::Dynamic,
            blocking: false,
            cost: CostModel::default(),
            read_lag_max: 0.0,
            replace_failed_workers: true,
            stall_timeout: 500.0,
        }
    }
}

impl SimConfig {
    pub fn with_strategy(mut self, strategy: FtStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_batching(mut self, batching: BatchingPolicy) -> Self {
        self.batching = batching;
        self
    }

    pub fn with_workers(mut self, workers: u32) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.workers == 0 {
            return Err("at least one worker is required".into());
        }
        for (name, v) in self.cost.fields() {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("cost `{name}` must be a finite non-negative number, got {v}"));
            }
        }
        if self.cost.poll_interval <= 0.0 {
            return Err("poll_interval must be positive".into());
        }
        if self.cost.detection_interval <= self.cost.poll_interval {
            return Err("detection_interval must exceed poll_interval, or live workers look dead".into());
        }
        if !self.read_lag_max.is_finite() || self.read_lag_max < 0.0 {
            return Err("read_lag_max must be a finite non-negative number".into());
        }
        if self.stall_timeout.partial_cmp(&self.cost.detection_interval) != Some(std::cmp::Ordering::Greater) {
            return Err("stall_timeout must exceed detection_interval".into());
        }
        Ok(())
    }
}

mod display_fromstr {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    Worker(WorkerId),
    /// A uniformly chosen live worker, drawn from the run's seed.
    Random,
}

impl fmt::Display for FaultTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultTarget::Worker(w) => write!(f, "{}", w.0),
            FaultTarget::Random => f.write_str("random"),
        }
    }
}

impl FromStr for FaultTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.strip_prefix("worker=").unwrap_or(s);
        if s == "random" {
            return Ok(FaultTarget::Random);
        }
        s.parse::<u32>()
            .map(|w| FaultTarget::Worker(WorkerId(w)))
            .map_err(|_| format!("bad kill target `{s}` (expected a worker id or `random`)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// Fraction of the failure-free makespan under the same config.
    Progress(f64),
    /// Absolute simulated time.
    Time(f64),
    /// After this many channel tasks have committed.
    TaskCount(u64),
    /// Right after the given task commits.
    AfterCommit(TaskName),
}

impl FromStr for Trigger {
    type Err = String;

    /// `0.5` or `50%` is a progress fraction, `t=12.5` or `12.5s` an
    /// absolute time, `n=30` a task count.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad trigger `{s}` (expected a fraction in [0,1], t=<time> or n=<count>)");
        if let Some(t) = s.strip_prefix("t=").or_else(|| s.strip_suffix('s')) {
            return t.parse().map(Trigger::Time).map_err(|_| bad());
        }
        if let Some(p) = s.strip_suffix('%') {
            return p
                .parse::<f64>()
                .map(|p| Trigger::Progress(p / 100.0))
                .map_err(|_| bad());
        }
        if let Some(n) = s.strip_prefix("n=") {
            return n.parse().map(Trigger::TaskCount).map_err(|_| bad());
        }
        s.parse().map(Trigger::Progress).map_err(|_| bad())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub target: FaultTarget,
    pub trigger: Trigger,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub faults: Vec<Fault>,
}

impl FaultSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn kill(target: FaultTarget, trigger: Trigger) -> Self {
        Self {
            faults: vec![Fault { target, trigger }],
        }
    }

    pub fn and(mut self, target: FaultTarget, trigger: Trigger) -> Self {
        self.faults.push(Fault { target, trigger });
        self
    }

    pub fn is_empty(&self) -> bool {
        self.faults.is_empty()
    }

    pub fn needs_calibration(&self) -> bool {
        self.faults.iter().any(|f| matches!(f.trigger, Trigger::Progress(_)))
    }

    pub fn validate(&self) -> Result<(), String> {
        for f in &self.faults {
            match f.trigger {
                Trigger::Progress(p) if !(0.0..=1.0).contains(&p) => {
                    return Err(format!("progress fraction {p} is outside [0, 1]"))
                }
                Trigger::Time(t) if !t.is_finite() || t < 0.0 => return Err(format!("fault time {t} is invalid")),
                _ => {}
            }
        }
        Ok(())
    }
}
