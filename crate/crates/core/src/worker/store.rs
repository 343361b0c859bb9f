use std::collections::BTreeMap;
use std::sync::Arc;

use crate::batch::Batch;
use crate::digest::Digest;
use crate::ids::TaskName;
use crate::kernel::Destination;

use super::InsertOutcome;

/// Serialized output partitions by task name and destination. Names are
/// globally unique, so writers never coordinate.
#[derive(Debug, Clone, Default)]
pub struct PartitionStore {
    parts: BTreeMap<TaskName, BTreeMap<Destination, Arc<Vec<u8>>>>,
    bytes_written: u64,
}

/// A worker's volatile upstream-backup disk.
pub type LocalBackupStore = PartitionStore;

/// The spooling target; survives every worker failure.
pub type DurableStore = PartitionStore;

impl PartitionStore {
    pub fn backup_partition(&mut self, name: TaskName, dest: Destination, bytes: Arc<Vec<u8>>) {
        self.bytes_written += bytes.len() as u64;
        self.parts.entry(name).or_default().insert(dest, bytes);
    }

    pub fn fetch(&self, name: TaskName, dest: Destination) -> Option<Arc<Vec<u8>>> {
        self.parts.get(&name)?.get(&dest).cloned()
    }

    pub fn contains(&self, name: TaskName) -> bool {
        self.parts.contains_key(&name)
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }
}

/// Sink-stage outputs as received by the submitting client. The client
/// keeps the latest copy per name; only names whose lineage committed
/// count towards the result.
#[derive(Debug, Clone, Default)]
pub struct ClientSink {
    parts: BTreeMap<TaskName, (Arc<Batch>, Digest)>,
}

impl ClientSink {
    pub fn insert(&mut self, name: TaskName, batch: Arc<Batch>, digest: Digest) -> InsertOutcome {
        match self.parts.insert(name, (batch, digest)) {
            None => InsertOutcome::Inserted,
            Some((_, d)) if d == digest => InsertOutcome::Duplicate,
            Some(_) => InsertOutcome::Replaced,
        }
    }

    pub fn get(&self, name: TaskName) -> Option<&Arc<Batch>> {
        self.parts.get(&name).map(|(b, _)| b)
    }

    pub fn clear(&mut self) {
        self.parts.clear();
    }
}
