//! Identities shared by every layer: stages, channels, tasks and workers.

use std::fmt;

use serde::{Deserialize, Serialize};

pub type StageId = u32;
pub type ChannelId = u32;

/// A data-parallel instance of a stage. Serialized as `[stage, channel]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(StageId, ChannelId)", into = "(StageId, ChannelId)")]
pub struct ChannelKey {
    pub stage: StageId,
    pub channel: ChannelId,
}

impl ChannelKey {
    pub const fn new(stage: StageId, channel: ChannelId) -> Self {
        Self { stage, channel }
    }

    pub const fn task(self, seq: u64) -> TaskName {
        TaskName {
            stage: self.stage,
            channel: self.channel,
            seq,
        }
    }
}

impl From<(StageId, ChannelId)> for ChannelKey {
    fn from((stage, channel): (StageId, ChannelId)) -> Self {
        Self::new(stage, channel)
    }
}

impl From<ChannelKey> for (StageId, ChannelId) {
    fn from(k: ChannelKey) -> Self {
        (k.stage, k.channel)
    }
}

impl fmt::Display for ChannelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.stage, self.channel)
    }
}

/// Globally unique name of a task. A task's output partitions carry the
/// same name as the task that produced them. Serialized as
/// `[stage, channel, seq]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(StageId, ChannelId, u64)", into = "(StageId, ChannelId, u64)")]
pub struct TaskName {
    pub stage: StageId,
    pub channel: ChannelId,
    pub seq: u64,
}

impl TaskName {
    pub const fn new(stage: StageId, channel: ChannelId, seq: u64) -> Self {
        Self { stage, channel, seq }
    }

    pub const fn channel_key(self) -> ChannelKey {
        ChannelKey::new(self.stage, self.channel)
    }

    pub const fn successor(self) -> TaskName {
        TaskName::new(self.stage, self.channel, self.seq + 1)
    }
}

impl From<(StageId, ChannelId, u64)> for TaskName {
    fn from((stage, channel, seq): (StageId, ChannelId, u64)) -> Self {
        Self::new(stage, channel, seq)
    }
}

impl From<TaskName> for (StageId, ChannelId, u64) {
    fn from(t: TaskName) -> Self {
        (t.stage, t.channel, t.seq)
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.stage, self.channel, self.seq)
    }
}

/// Simulated worker (TaskManager) identity. Replacement workers receive
/// fresh ids; an id is never reused within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkerId(pub u32);

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

/// Simulated time in ticks; one cost-model unit is [`TICKS_PER_UNIT`] ticks.
pub type Ticks = u64;

pub const TICKS_PER_UNIT: Ticks = 1_000_000;

pub fn ticks(units: f64) -> Ticks {
    (units * TICKS_PER_UNIT as f64).round().max(0.0) as Ticks
}

pub fn units(t: Ticks) -> f64 {
    t as f64 / TICKS_PER_UNIT as f64
}
