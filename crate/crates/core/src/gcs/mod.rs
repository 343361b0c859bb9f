//! The global control store (GCS): lineage table, outstanding-task queues,
//! sentinels, partition locations, the channel mapping and the recovery
//! control flag.
//!
//! Every mutation goes through [`Gcs::apply_transaction`]. A transaction is
//! a list of [`Op`]s applied in order against an undo log; if any op fails,
//! or an injected crash interrupts the sequence, the undo log restores the
//! pre-transaction state. Applied transactions are appended to the audit
//! log together with the state digest before and after.

mod audit;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use audit::{
    AuditLog, AuditParseError, AuditRecord, ConsumedInput, ExecKind, ExecRecord, MigrationRecord, OutputDigest,
    PlannedInput, PlannedReplay, RecoveryRecord, RewindRecord, StateDigest, TxnRecord, AUDIT_FORMAT, AUDIT_VERSION,
};

use crate::digest::fnv1a64;
use crate::ids::{ChannelKey, TaskName, Ticks, WorkerId};

/// A committed task's lineage: it consumed `count` partitions from upstream
/// channel `upstream` of its stage, continuing from that channel's
/// watermark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LineageEntry {
    pub task: TaskName,
    pub upstream: u32,
    pub count: u32,
}

impl LineageEntry {
    pub const ENCODED_LEN: usize = 24;

    pub fn new(task: TaskName, upstream: u32, count: u32) -> Self {
        Self { task, upstream, count }
    }

    /// Fixed-size record: name then `(i, K)`.
    pub fn encode(&self) -> [u8; Self::ENCODED_LEN] {
        let mut out = [0u8; Self::ENCODED_LEN];
        out[0..4].copy_from_slice(&self.task.stage.to_le_bytes());
        out[4..8].copy_from_slice(&self.task.channel.to_le_bytes());
        out[8..16].copy_from_slice(&self.task.seq.to_le_bytes());
        out[16..20].copy_from_slice(&self.upstream.to_le_bytes());
        out[20..24].copy_from_slice(&self.count.to_le_bytes());
        out
    }

    pub fn same_selection(&self, other: &LineageEntry) -> bool {
        self.upstream == other.upstream && self.count == other.count
    }
}

/// Where the backed-up output partitions of a committed task live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Worker(WorkerId),
    /// Survives worker failure.
    Durable,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// The channel's next task. While `seq <= replay_until` the task must
    /// reproduce its logged lineage instead of choosing inputs.
    Execute {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        replay_until: Option<u64>,
    },
    /// Re-push a backed-up partition to `consumer`'s current worker.
    Replay { consumer: ChannelKey, durable: bool },
    /// Re-read a lost source partition and push it to `consumers`.
    Input { consumers: Vec<ChannelKey> },
}

/// One entry of a worker's outstanding-task queue.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueuedTask {
    pub name: TaskName,
    #[serde(flatten)]
    pub kind: TaskKind,
}

impl QueuedTask {
    pub fn execute(name: TaskName) -> Self {
        Self {
            name,
            kind: TaskKind::Execute { replay_until: None },
        }
    }

    pub fn rewound(name: TaskName, replay_until: Option<u64>) -> Self {
        Self {
            name,
            kind: TaskKind::Execute { replay_until },
        }
    }

    pub fn is_execute(&self) -> bool {
        matches!(self.kind, TaskKind::Execute { .. })
    }

    /// An Execute entry that must follow logged lineage.
    pub fn is_prescribed(&self) -> bool {
        matches!(self.kind, TaskKind::Execute { replay_until: Some(f) } if self.name.seq <= f)
    }

    /// The queue entry that follows this one in its channel.
    pub fn successor(&self) -> Option<QueuedTask> {
        match &self.kind {
            TaskKind::Execute { replay_until } => Some(QueuedTask {
                name: self.name.successor(),
                kind: TaskKind::Execute {
                    replay_until: *replay_until,
                },
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub value: T,
    pub applied_at: Ticks,
}

/// A single sub-write of a transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    /// Rejected if a different entry exists; a no-op for an identical one.
    InsertLineage {
        entry: LineageEntry,
    },
    /// Removes the first queue entry equal to `task`.
    RemoveTask {
        worker: WorkerId,
        task: QueuedTask,
    },
    PushTask {
        worker: WorkerId,
        task: QueuedTask,
    },
    ClearQueue {
        worker: WorkerId,
    },
    SetSentinel {
        channel: ChannelKey,
        count: Option<u64>,
    },
    SetLocation {
        task: TaskName,
        location: Option<Location>,
    },
    SetMapping {
        channel: ChannelKey,
        worker: Option<WorkerId>,
    },
    BumpGeneration {
        channel: ChannelKey,
    },
    SetFlag,
    ClearFlag {
        epoch: u64,
    },
    Ack {
        worker: WorkerId,
    },
    /// Drops all lineage, queues, sentinels and locations.
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Worker(WorkerId),
    Coordinator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub actor: Actor,
    /// Epoch the submitter believes is current. Worker transactions are
    /// fenced on it; coordinator transactions are not.
    pub epoch: u64,
    /// Worker attempt id, carried into the audit log.
    pub attempt: Option<u64>,
    pub ops: Vec<Op>,
}

impl Transaction {
    pub fn coordinator(epoch: u64, ops: Vec<Op>) -> Self {
        Self {
            actor: Actor::Coordinator,
            epoch,
            attempt: None,
            ops,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GcsError {
    #[error("task {0} is already committed")]
    DuplicateCommit(TaskName),
    #[error("transaction epoch {txn} is older than current epoch {current}")]
    StaleEpoch { txn: u64, current: u64 },
    #[error("recovery barrier is active")]
    BarrierActive,
    #[error("control flag is already set")]
    FlagAlreadySet,
    #[error("control flag is not set")]
    FlagNotSet,
    #[error("clear_control_flag expects epoch {expected}, got {got}")]
    EpochMismatch { expected: u64, got: u64 },
    #[error("task {task} is not queued on {worker}")]
    TaskNotQueued { worker: WorkerId, task: TaskName },
    #[error("lineage of {task} is immutable: logged {logged:?}, submitted {submitted:?}")]
    LineageConflict {
        task: TaskName,
        logged: (u32, u32),
        submitted: (u32, u32),
    },
    #[error("lineage entry names {entry} but the commit is for {task}")]
    MisnamedLineage { task: TaskName, entry: TaskName },
    #[error("simulated crash after {applied} of {total} sub-writes; transaction rolled back")]
    Crashed { applied: usize, total: usize },
}

/// Everything a worker needs to commit one channel task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitRequest {
    pub worker: WorkerId,
    pub task: QueuedTask,
    pub lineage: LineageEntry,
    /// Set on a channel's last task: the channel's final output count.
    pub sentinel: Option<u64>,
    pub location: Option<Location>,
    pub epoch: u64,
    pub attempt: u64,
}

/// Snapshot returned by [`Gcs::poll_tasks`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PollResponse {
    pub tasks: Vec<QueuedTask>,
    pub control_flag: bool,
    pub epoch: u64,
}

#[derive(Debug, Clone)]
enum Undo {
    Lineage(TaskName, Option<Stamped<LineageEntry>>),
    Queue(WorkerId, Option<Vec<QueuedTask>>),
    Sentinel(ChannelKey, Option<Stamped<u64>>),
    Location(TaskName, Option<Location>),
    Mapping(ChannelKey, Option<WorkerId>),
    Generation(ChannelKey, Option<u64>),
    Control(bool, u64, BTreeSet<WorkerId>),
    Tables(Box<Tables>),
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Tables {
    lineage: BTreeMap<TaskName, Stamped<LineageEntry>>,
    queues: BTreeMap<WorkerId, Vec<QueuedTask>>,
    sentinels: BTreeMap<ChannelKey, Stamped<u64>>,
    locations: BTreeMap<TaskName, Location>,
}

/// The store's contents. Reads are free; writes happen only via
/// transactions on [`Gcs`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GcsState {
    tables: Tables,
    mapping: BTreeMap<ChannelKey, WorkerId>,
    generations: BTreeMap<ChannelKey, u64>,
    control_flag: bool,
    epoch: u64,
    acks: BTreeSet<WorkerId>,
    /// Wrapping sum of element hashes of every table row.
    acc: u64,
}

fn h_lineage(e: &LineageEntry) -> u64 {
    let mut b = vec![1u8];
    b.extend_from_slice(&e.encode());
    fnv1a64(&b)
}

fn h_queue(w: WorkerId, t: &QueuedTask) -> u64 {
    let mut b = Vec::with_capacity(48);
    b.push(2u8);
    b.extend_from_slice(&w.0.to_le_bytes());
    push_name(&mut b, t.name);
    match &t.kind {
        TaskKind::Execute { replay_until } => {
            b.push(0);
            b.extend_from_slice(&replay_until.map_or(u64::MAX, |f| f).to_le_bytes());
        }
        TaskKind::Replay { consumer, durable } => {
            b.push(1 + u8::from(*durable));
            push_channel(&mut b, *consumer);
        }
        TaskKind::Input { consumers } => {
            b.push(3);
            for c in consumers {
                push_channel(&mut b, *c);
            }
        }
    }
    fnv1a64(&b)
}

fn push_name(b: &mut Vec<u8>, t: TaskName) {
    b.extend_from_slice(&t.stage.to_le_bytes());
    b.extend_from_slice(&t.channel.to_le_bytes());
    b.extend_from_slice(&t.seq.to_le_bytes());
}

fn push_channel(b: &mut Vec<u8>, c: ChannelKey) {
    b.extend_from_slice(&c.stage.to_le_bytes());
    b.extend_from_slice(&c.channel.to_le_bytes());
}

fn h_key(tag: u8, c: ChannelKey, v: u64) -> u64 {
    let mut b = vec![tag];
    push_channel(&mut b, c);
    b.extend_from_slice(&v.to_le_bytes());
    fnv1a64(&b)
}

fn h_location(t: TaskName, l: Location) -> u64 {
    let mut b = vec![4u8];
    push_name(&mut b, t);
    match l {
        Location::Worker(w) => b.extend_from_slice(&u64::from(w.0).to_le_bytes()),
        Location::Durable => b.extend_from_slice(&u64::MAX.to_le_bytes()),
    }
    fnv1a64(&b)
}

impl GcsState {
    pub fn lineage(&self, task: TaskName) -> Option<&LineageEntry> {
        self.tables.lineage.get(&task).map(|s| &s.value)
    }

    /// Lineage as seen by a reader whose view lags: entries applied after
    /// `cutoff` are not yet visible.
    pub fn lineage_visible(&self, task: TaskName, cutoff: Ticks) -> Option<&LineageEntry> {
        self.tables
            .lineage
            .get(&task)
            .filter(|s| s.applied_at <= cutoff)
            .map(|s| &s.value)
    }

    pub fn lineage_entries(&self) -> impl Iterator<Item = &LineageEntry> {
        self.tables.lineage.values().map(|s| &s.value)
    }

    pub fn lineage_len(&self) -> usize {
        self.tables.lineage.len()
    }

    /// Highest committed seq of `channel`.
    pub fn frontier(&self, channel: ChannelKey) -> Option<u64> {
        self.tables
            .lineage
            .range(channel.task(0)..=channel.task(u64::MAX))
            .next_back()
            .map(|(t, _)| t.seq)
    }

    pub fn committed_in(&self, channel: ChannelKey) -> impl Iterator<Item = &LineageEntry> {
        self.tables
            .lineage
            .range(channel.task(0)..=channel.task(u64::MAX))
            .map(|(_, s)| &s.value)
    }

    pub fn queue(&self, worker: WorkerId) -> &[QueuedTask] {
        self.tables.queues.get(&worker).map_or(&[], Vec::as_slice)
    }

    pub fn queues(&self) -> impl Iterator<Item = (WorkerId, &[QueuedTask])> {
        self.tables.queues.iter().map(|(w, q)| (*w, q.as_slice()))
    }

    pub fn is_queued(&self, task: TaskName) -> bool {
        self.tables.queues.values().any(|q| q.iter().any(|t| t.name == task))
    }

    pub fn sentinel(&self, channel: ChannelKey) -> Option<u64> {
        self.tables.sentinels.get(&channel).map(|s| s.value)
    }

    pub fn sentinel_visible(&self, channel: ChannelKey, cutoff: Ticks) -> Option<u64> {
        self.tables
            .sentinels
            .get(&channel)
            .filter(|s| s.applied_at <= cutoff)
            .map(|s| s.value)
    }

    pub fn sentinels(&self) -> impl Iterator<Item = (ChannelKey, u64)> + '_ {
        self.tables.sentinels.iter().map(|(c, s)| (*c, s.value))
    }

    pub fn location(&self, task: TaskName) -> Option<Location> {
        self.tables.locations.get(&task).copied()
    }

    pub fn mapping(&self, channel: ChannelKey) -> Option<WorkerId> {
        self.mapping.get(&channel).copied()
    }

    pub fn mappings(&self) -> impl Iterator<Item = (ChannelKey, WorkerId)> + '_ {
        self.mapping.iter().map(|(c, w)| (*c, *w))
    }

    pub fn generation(&self, channel: ChannelKey) -> u64 {
        self.generations.get(&channel).copied().unwrap_or(0)
    }

    pub fn control_flag(&self) -> bool {
        self.control_flag
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn acks(&self) -> &BTreeSet<WorkerId> {
        &self.acks
    }

    /// Order-independent digest of the whole store.
    pub fn digest(&self) -> StateDigest {
        let mut b = vec![9u8, u8::from(self.control_flag)];
        b.extend_from_slice(&self.epoch.to_le_bytes());
        for w in &self.acks {
            b.extend_from_slice(&w.0.to_le_bytes());
        }
        StateDigest(self.acc ^ fnv1a64(&b))
    }

    /// Tasks that are both committed and queued as fresh work. Prescribed
    /// re-executions, replays and input tasks legitimately carry committed
    /// names and are excluded.
    pub fn atomicity_violations(&self) -> Vec<TaskName> {
        let mut out = Vec::new();
        for q in self.tables.queues.values() {
            for t in q {
                if t.is_execute() && !t.is_prescribed() && self.tables.lineage.contains_key(&t.name) {
                    out.push(t.name);
                }
            }
        }
        out
    }

    fn set_lineage(&mut self, k: TaskName, v: Option<Stamped<LineageEntry>>) -> Option<Stamped<LineageEntry>> {
        let old = match v {
            Some(v) => {
                self.acc = self.acc.wrapping_add(h_lineage(&v.value));
                self.tables.lineage.insert(k, v)
            }
            None => self.tables.lineage.remove(&k),
        };
        if let Some(o) = &old {
            self.acc = self.acc.wrapping_sub(h_lineage(&o.value));
        }
        old
    }

    fn set_queue(&mut self, w: WorkerId, v: Option<Vec<QueuedTask>>) -> Option<Vec<QueuedTask>> {
        if let Some(v) = &v {
            for t in v {
                self.acc = self.acc.wrapping_add(h_queue(w, t));
            }
        }
        let old = match v {
            Some(v) => self.tables.queues.insert(w, v),
            None => self.tables.queues.remove(&w),
        };
        if let Some(o) = &old {
            for t in o {
                self.acc = self.acc.wrapping_sub(h_queue(w, t));
            }
        }
        old
    }

    fn set_sentinel(&mut self, c: ChannelKey, v: Option<Stamped<u64>>) -> Option<Stamped<u64>> {
        let old = match v {
            Some(v) => {
                self.acc = self.acc.wrapping_add(h_key(3, c, v.value));
                self.tables.sentinels.insert(c, v)
            }
            None => self.tables.sentinels.remove(&c),
        };
        if let Some(o) = &old {
            self.acc = self.acc.wrapping_sub(h_key(3, c, o.value));
        }
        old
    }

    fn set_location(&mut self, t: TaskName, v: Option<Location>) -> Option<Location> {
        let old = match v {
            Some(v) => {
                self.acc = self.acc.wrapping_add(h_location(t, v));
                self.tables.locations.insert(t, v)
            }
            None => self.tables.locations.remove(&t),
        };
        if let Some(o) = old {
            self.acc = self.acc.wrapping_sub(h_location(t, o));
        }
        old
    }

    fn set_mapping(&mut self, c: ChannelKey, v: Option<WorkerId>) -> Option<WorkerId> {
        let old = match v {
            Some(v) => {
                self.acc = self.acc.wrapping_add(h_key(5, c, u64::from(v.0)));
                self.mapping.insert(c, v)
            }
            None => self.mapping.remove(&c),
        };
        if let Some(o) = old {
            self.acc = self.acc.wrapping_sub(h_key(5, c, u64::from(o.0)));
        }
        old
    }

    fn set_generation(&mut self, c: ChannelKey, v: Option<u64>) -> Option<u64> {
        let old = match v {
            Some(v) => {
                self.acc = self.acc.wrapping_add(h_key(6, c, v));
                self.generations.insert(c, v)
            }
            None => self.generations.remove(&c),
        };
        if let Some(o) = old {
            self.acc = self.acc.wrapping_sub(h_key(6, c, o));
        }
        old
    }

    fn replace_tables(&mut self, new: Tables) -> Tables {
        let old = std::mem::take(&mut self.tables);
        let mut acc = self.acc;
        for v in old.lineage.values() {
            acc = acc.wrapping_sub(h_lineage(&v.value));
        }
        for (w, q) in &old.queues {
            for t in q {
                acc = acc.wrapping_sub(h_queue(*w, t));
            }
        }
        for (c, s) in &old.sentinels {
            acc = acc.wrapping_sub(h_key(3, *c, s.value));
        }
        for (t, l) in &old.locations {
            acc = acc.wrapping_sub(h_location(*t, *l));
        }
        for v in new.lineage.values() {
            acc = acc.wrapping_add(h_lineage(&v.value));
        }
        for (w, q) in &new.queues {
            for t in q {
                acc = acc.wrapping_add(h_queue(*w, t));
            }
        }
        for (c, s) in &new.sentinels {
            acc = acc.wrapping_add(h_key(3, *c, s.value));
        }
        for (t, l) in &new.locations {
            acc = acc.wrapping_add(h_location(*t, *l));
        }
        self.acc = acc;
        self.tables = new;
        old
    }

    fn apply_op(&mut self, op: &Op, now: Ticks) -> Result<Option<Undo>, GcsError> {
        Ok(Some(match op {
            Op::InsertLineage { entry } => {
                if let Some(old) = self.lineage(entry.task) {
                    if old.same_selection(entry) {
                        return Ok(None);
                    }
                    return Err(GcsError::LineageConflict {
                        task: entry.task,
                        logged: (old.upstream, old.count),
                        submitted: (entry.upstream, entry.count),
                    });
                }
                let old = self.set_lineage(
                    entry.task,
                    Some(Stamped {
                        value: *entry,
                        applied_at: now,
                    }),
                );
                Undo::Lineage(entry.task, old)
            }
            Op::RemoveTask { worker, task } => {
                let mut q = self.queue(*worker).to_vec();
                let pos = q.iter().position(|t| t == task).ok_or(GcsError::TaskNotQueued {
                    worker: *worker,
                    task: task.name,
                })?;
                q.remove(pos);
                Undo::Queue(*worker, self.set_queue(*worker, Some(q)))
            }
            Op::PushTask { worker, task } => {
                let mut q = self.queue(*worker).to_vec();
                q.push(task.clone());
                Undo::Queue(*worker, self.set_queue(*worker, Some(q)))
            }
            Op::ClearQueue { worker } => Undo::Queue(*worker, self.set_queue(*worker, None)),
            Op::SetSentinel { channel, count } => {
                let v = count.map(|value| Stamped { value, applied_at: now });
                Undo::Sentinel(*channel, self.set_sentinel(*channel, v))
            }
            Op::SetLocation { task, location } => Undo::Location(*task, self.set_location(*task, *location)),
            Op::SetMapping { channel, worker } => Undo::Mapping(*channel, self.set_mapping(*channel, *worker)),
            Op::BumpGeneration { channel } => {
                let next = self.generation(*channel) + 1;
                Undo::Generation(*channel, self.set_generation(*channel, Some(next)))
            }
            Op::SetFlag => {
                if self.control_flag {
                    return Err(GcsError::FlagAlreadySet);
                }
                let undo = Undo::Control(self.control_flag, self.epoch, self.acks.clone());
                self.control_flag = true;
                self.acks.clear();
                undo
            }
            Op::ClearFlag { epoch } => {
                if !self.control_flag {
                    return Err(GcsError::FlagNotSet);
                }
                if *epoch != self.epoch + 1 {
                    return Err(GcsError::EpochMismatch {
                        expected: self.epoch + 1,
                        got: *epoch,
                    });
                }
                let undo = Undo::Control(self.control_flag, self.epoch, self.acks.clone());
                self.control_flag = false;
                self.epoch = *epoch;
                self.acks.clear();
                undo
            }
            Op::Ack { worker } => {
                if !self.control_flag {
                    return Err(GcsError::FlagNotSet);
                }
                let undo = Undo::Control(self.control_flag, self.epoch, self.acks.clone());
                self.acks.insert(*worker);
                undo
            }
            Op::Reset => Undo::Tables(Box::new(self.replace_tables(Tables::default()))),
        }))
    }

    fn undo(&mut self, u: Undo) {
        match u {
            Undo::Lineage(k, v) => {
                self.set_lineage(k, v);
            }
            Undo::Queue(w, v) => {
                self.set_queue(w, v);
            }
            Undo::Sentinel(c, v) => {
                self.set_sentinel(c, v);
            }
            Undo::Location(t, v) => {
                self.set_location(t, v);
            }
            Undo::Mapping(c, v) => {
                self.set_mapping(c, v);
            }
            Undo::Generation(c, v) => {
                self.set_generation(c, v);
            }
            Undo::Control(flag, epoch, acks) => {
                self.control_flag = flag;
                self.epoch = epoch;
                self.acks = acks;
            }
            Undo::Tables(t) => {
                self.replace_tables(*t);
            }
        }
    }

    /// Applies `ops` all-or-nothing. With `crash_after = Some(n)` the
    /// sequence is interrupted after `n` sub-writes and rolled back.
    fn apply_ops(&mut self, ops: &[Op], now: Ticks, crash_after: Option<usize>) -> Result<(), GcsError> {
        let mut undo_log = Vec::with_capacity(ops.len());
        for (n, op) in ops.iter().enumerate() {
            if crash_after == Some(n) {
                self.rollback(undo_log);
                return Err(GcsError::Crashed {
                    applied: n,
                    total: ops.len(),
                });
            }
            match self.apply_op(op, now) {
                Ok(u) => undo_log.extend(u),
                Err(e) => {
                    self.rollback(undo_log);
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    fn rollback(&mut self, undo_log: Vec<Undo>) {
        for u in undo_log.into_iter().rev() {
            self.undo(u);
        }
    }

    /// Replays logged ops without fencing; used by the auditor.
    pub fn replay_ops(&mut self, ops: &[Op], now: Ticks) -> Result<(), GcsError> {
        self.apply_ops(ops, now, None)
    }
}

/// The store plus its audit log.
#[derive(Debug, Clone)]
pub struct Gcs {
    state: GcsState,
    next_txn: u64,
    log: AuditLog,
}

impl Default for Gcs {
    fn default() -> Self {
        Self::new()
    }
}

impl Gcs {
    pub fn new() -> Self {
        Self {
            state: GcsState::default(),
            next_txn: 0,
            log: AuditLog::new(),
        }
    }

    pub fn state(&self) -> &GcsState {
        &self.state
    }

    pub fn audit(&self) -> &AuditLog {
        &self.log
    }

    pub fn record(&mut self, record: AuditRecord) {
        self.log.push(record);
    }

    pub fn into_audit(self) -> AuditLog {
        self.log
    }

    pub fn transactions_applied(&self) -> u64 {
        self.next_txn
    }

    pub fn apply_transaction(&mut self, txn: Transaction, now: Ticks) -> Result<u64, GcsError> {
        self.apply_inner(txn, now, None)
    }

    /// Like [`apply_transaction`](Self::apply_transaction) but simulates a
    /// store crash after `crash_after` sub-writes.
    pub fn apply_with_crash(&mut self, txn: Transaction, now: Ticks, crash_after: usize) -> Result<u64, GcsError> {
        self.apply_inner(txn, now, Some(crash_after))
    }

    fn fence(&self, txn: &Transaction) -> Result<(), GcsError> {
        if let Actor::Worker(_) = txn.actor {
            if txn.epoch != self.state.epoch {
                return Err(GcsError::StaleEpoch {
                    txn: txn.epoch,
                    current: self.state.epoch,
                });
            }
            let ack_only = txn.ops.iter().all(|o| matches!(o, Op::Ack { .. }));
            if self.state.control_flag && !ack_only {
                return Err(GcsError::BarrierActive);
            }
        }
        Ok(())
    }

    fn apply_inner(&mut self, txn: Transaction, now: Ticks, crash_after: Option<usize>) -> Result<u64, GcsError> {
        if let Err(e) = self.fence(&txn) {
            self.reject(&txn, now, &e);
            return Err(e);
        }
        let pre = self.state.digest();
        if let Err(e) = self.state.apply_ops(&txn.ops, now, crash_after) {
            debug_assert_eq!(self.state.digest(), pre);
            self.reject(&txn, now, &e);
            return Err(e);
        }
        let id = self.next_txn;
        self.next_txn += 1;
        self.log.push(AuditRecord::Txn(TxnRecord {
            id,
            time: now,
            epoch: self.state.epoch,
            actor: txn.actor,
            attempt: txn.attempt,
            ops: txn.ops,
            pre,
            post: self.state.digest(),
        }));
        Ok(id)
    }

    fn reject(&mut self, txn: &Transaction, now: Ticks, e: &GcsError) {
        self.log.push(AuditRecord::Rejected {
            time: now,
            actor: txn.actor,
            epoch: txn.epoch,
            attempt: txn.attempt,
            error: e.to_string(),
        });
    }

    /// Builds the single commit transaction for a channel task: record the
    /// lineage, dequeue the task and enqueue its successor (or record the
    /// channel's sentinel).
    pub fn commit_ops(&self, req: &CommitRequest) -> Result<Vec<Op>, GcsError> {
        if req.lineage.task != req.task.name {
            return Err(GcsError::MisnamedLineage {
                task: req.task.name,
                entry: req.lineage.task,
            });
        }
        let queued = self.state.queue(req.worker).contains(&req.task);
        let logged = self.state.lineage(req.task.name).copied();
        if !queued {
            return Err(match logged {
                Some(_) => GcsError::DuplicateCommit(req.task.name),
                None => GcsError::TaskNotQueued {
                    worker: req.worker,
                    task: req.task.name,
                },
            });
        }
        let mut ops = vec![Op::RemoveTask {
            worker: req.worker,
            task: req.task.clone(),
        }];
        match logged {
            Some(old) if !old.same_selection(&req.lineage) => {
                return Err(GcsError::LineageConflict {
                    task: req.task.name,
                    logged: (old.upstream, old.count),
                    submitted: (req.lineage.upstream, req.lineage.count),
                })
            }
            Some(_) => {}
            None => ops.push(Op::InsertLineage { entry: req.lineage }),
        }
        if let Some(location) = req.location {
            ops.push(Op::SetLocation {
                task: req.task.name,
                location: Some(location),
            });
        }
        match req.sentinel {
            Some(count) => {
                if self.state.sentinel(req.task.name.channel_key()) != Some(count) {
                    ops.push(Op::SetSentinel {
                        channel: req.task.name.channel_key(),
                        count: Some(count),
                    });
                }
            }
            None => ops.push(Op::PushTask {
                worker: req.worker,
                task: req.task.successor().expect("execute entries have successors"),
            }),
        }
        Ok(ops)
    }

    /// Commits a channel task in one transaction. A retried commit of an
    /// already committed task yields `DuplicateCommit` and changes nothing.
    pub fn commit_task_completion(&mut self, req: &CommitRequest, now: Ticks) -> Result<u64, GcsError> {
        let txn = Transaction {
            actor: Actor::Worker(req.worker),
            epoch: req.epoch,
            attempt: Some(req.attempt),
            ops: Vec::new(),
        };
        self.fence(&txn).inspect_err(|e| self.reject(&txn, now, e))?;
        let ops = self.commit_ops(req).inspect_err(|e| self.reject(&txn, now, e))?;
        self.apply_transaction(Transaction { ops, ..txn }, now)
    }

    /// Completes a replay or input task: dequeue it and, for a regenerated
    /// partition, record its new location.
    pub fn commit_auxiliary(
        &mut self,
        worker: WorkerId,
        task: &QueuedTask,
        location: Option<Location>,
        epoch: u64,
        attempt: u64,
        now: Ticks,
    ) -> Result<u64, GcsError> {
        let mut ops = vec![Op::RemoveTask {
            worker,
            task: task.clone(),
        }];
        if let (TaskKind::Input { .. }, Some(location)) = (&task.kind, location) {
            ops.push(Op::SetLocation {
                task: task.name,
                location: Some(location),
            });
        }
        self.apply_transaction(
            Transaction {
                actor: Actor::Worker(worker),
                epoch,
                attempt: Some(attempt),
                ops,
            },
            now,
        )
    }

    pub fn read_lineage(&self, task: TaskName) -> Option<LineageEntry> {
        self.state.lineage(task).copied()
    }

    pub fn poll_tasks(&self, worker: WorkerId) -> PollResponse {
        PollResponse {
            tasks: self.state.queue(worker).to_vec(),
            control_flag: self.state.control_flag,
            epoch: self.state.epoch,
        }
    }

    pub fn set_control_flag(&mut self, now: Ticks) -> Result<u64, GcsError> {
        let epoch = self.state.epoch;
        self.apply_transaction(Transaction::coordinator(epoch, vec![Op::SetFlag]), now)
    }

    pub fn clear_control_flag(&mut self, new_epoch: u64, now: Ticks) -> Result<u64, GcsError> {
        let epoch = self.state.epoch;
        self.apply_transaction(
            Transaction::coordinator(epoch, vec![Op::ClearFlag { epoch: new_epoch }]),
            now,
        )
    }
}

/// A [`Gcs`] shared between threads; the mutex serializes transactions.
#[derive(Debug, Clone, Default)]
pub struct SharedGcs(Arc<Mutex<Gcs>>);

impl SharedGcs {
    pub fn new(gcs: Gcs) -> Self {
        Self(Arc::new(Mutex::new(gcs)))
    }

    pub fn lock(&self) -> MutexGuard<'_, Gcs> {
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn apply_transaction(&self, txn: Transaction, now: Ticks) -> Result<u64, GcsError> {
        self.lock().apply_transaction(txn, now)
    }

    pub fn commit_task_completion(&self, req: &CommitRequest, now: Ticks) -> Result<u64, GcsError> {
        self.lock().commit_task_completion(req, now)
    }

    pub fn read_lineage(&self, task: TaskName) -> Option<LineageEntry> {
        self.lock().read_lineage(task)
    }

    pub fn poll_tasks(&self, worker: WorkerId) -> PollResponse {
        self.lock().poll_tasks(worker)
    }
}

#[cfg(test)]
mod tests;
