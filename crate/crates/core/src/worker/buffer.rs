use std::collections::BTreeMap;
use std::sync::Arc;

use crate::batch::Batch;
use crate::digest::Digest;
use crate::ids::{ChannelKey, TaskName};

#[derive(Debug, Clone)]
struct Received {
    /// Dropped once consumed; the digest is kept for dedup.
    batch: Option<Arc<Batch>>,
    digest: Digest,
    consumed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    /// Same name and bytes as an earlier push: dropped.
    Duplicate,
    /// Same name, different bytes, not yet consumed. The earlier copy can
    /// only have come from an attempt that never committed.
    Replaced,
    /// Same name, different bytes, already consumed. Never legal.
    Conflict,
}

/// Per-consumer-channel watermarks: entry `i` counts the outputs of
/// upstream channel `i` already consumed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InputRequirement {
    pub watermarks: Vec<u64>,
}

impl InputRequirement {
    pub fn new(upstream_channels: usize) -> Self {
        Self {
            watermarks: vec![0; upstream_channels],
        }
    }
}

/// Partitions pushed to one worker, keyed by consumer channel and name.
#[derive(Debug, Clone, Default)]
pub struct ExchangeBuffer {
    received: BTreeMap<ChannelKey, BTreeMap<TaskName, Received>>,
    requirements: BTreeMap<ChannelKey, InputRequirement>,
}

impl ExchangeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, consumer: ChannelKey, name: TaskName, batch: Arc<Batch>, digest: Digest) -> InsertOutcome {
        let slot = self.received.entry(consumer).or_default();
        match slot.get_mut(&name) {
            None => {
                slot.insert(
                    name,
                    Received {
                        batch: Some(batch),
                        digest,
                        consumed: false,
                    },
                );
                InsertOutcome::Inserted
            }
            Some(old) if old.digest == digest => InsertOutcome::Duplicate,
            Some(old) if old.consumed => InsertOutcome::Conflict,
            Some(old) => {
                old.batch = Some(batch);
                old.digest = digest;
                InsertOutcome::Replaced
            }
        }
    }

    pub fn contains(&self, consumer: ChannelKey, name: TaskName) -> bool {
        self.received.get(&consumer).is_some_and(|m| m.contains_key(&name))
    }

    /// An unconsumed partition and its digest.
    pub fn get(&self, consumer: ChannelKey, name: TaskName) -> Option<(Arc<Batch>, Digest)> {
        let r = self.received.get(&consumer)?.get(&name)?;
        Some((r.batch.clone()?, r.digest))
    }

    pub fn is_consumed(&self, consumer: ChannelKey, name: TaskName) -> bool {
        self.received
            .get(&consumer)
            .and_then(|m| m.get(&name))
            .is_some_and(|r| r.consumed)
    }

    pub fn mark_consumed(&mut self, consumer: ChannelKey, name: TaskName) {
        if let Some(r) = self.received.get_mut(&consumer).and_then(|m| m.get_mut(&name)) {
            r.consumed = true;
            r.batch = None;
        }
    }

    /// Number of consecutive partitions of `upstream`, starting at `from`,
    /// that are present and satisfy `committed`.
    pub fn contiguous(
        &self,
        consumer: ChannelKey,
        upstream: ChannelKey,
        from: u64,
        mut committed: impl FnMut(TaskName) -> bool,
    ) -> u32 {
        let Some(m) = self.received.get(&consumer) else {
            return 0;
        };
        let mut n = 0u32;
        for (seq, (name, r)) in (from..).zip(m.range(upstream.task(from)..=upstream.task(u64::MAX))) {
            if name.seq != seq || r.consumed || !committed(*name) {
                break;
            }
            n += 1;
        }
        n
    }

    pub fn requirement(&self, consumer: ChannelKey) -> Option<&InputRequirement> {
        self.requirements.get(&consumer)
    }

    pub fn requirement_mut(&mut self, consumer: ChannelKey, upstream_channels: usize) -> &mut InputRequirement {
        self.requirements
            .entry(consumer)
            .or_insert_with(|| InputRequirement::new(upstream_channels))
    }

    /// Forgets everything received for `consumer` and zeroes its
    /// watermarks. Only a coordinator rewind of the channel does this.
    pub fn rewind(&mut self, consumer: ChannelKey) {
        self.received.remove(&consumer);
        self.requirements.remove(&consumer);
    }

    pub fn partition_count(&self) -> usize {
        self.received.values().map(BTreeMap::len).sum()
    }
}
