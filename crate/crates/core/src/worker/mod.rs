//! The TaskManager: committed-lineage input gating, kernel execution, push
//! exchange, upstream backup and commit.
//!
//! A task attempt runs in three steps that the simulator separates in time:
//! [`TaskManager::prepare`] selects inputs and runs the kernel,
//! [`Cluster::push_outputs`] and [`Cluster::backup_outputs`] move the
//! output partitions, and the GCS commit is followed by
//! [`TaskManager::apply_commit`]. Until the commit succeeds nothing on the
//! worker changes except the receive buffers of push targets.
//! [`try_execute`] chains the steps synchronously.

mod buffer;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use buffer::{ExchangeBuffer, InputRequirement, InsertOutcome};
pub use store::{ClientSink, DurableStore, LocalBackupStore, PartitionStore};

use crate::batch::{Batch, BatchError};
use crate::digest::Digest;
use crate::gcs::{CommitRequest, ExecKind, Gcs, GcsError, GcsState, LineageEntry, Location, QueuedTask, TaskKind};
use crate::ids::{ChannelKey, StageId, TaskName, Ticks, WorkerId};
use crate::kernel::{execute_kernel, ChannelState, Destination, KernelError, StageKernel};
use crate::plan::{InputSide, ValidatedPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtStrategy {
    /// Commit lineage before outputs are consumed; back up outputs on the
    /// producer's local disk.
    #[serde(alias = "wal")]
    WriteAheadLineage,
    /// Persist every output partition to a durable store.
    #[serde(alias = "spool")]
    Spooling,
    /// No backups; any failure restarts the whole query.
    #[serde(alias = "restart")]
    RestartOnly,
}

impl FtStrategy {
    pub const ALL: [FtStrategy; 3] = [
        FtStrategy::WriteAheadLineage,
        FtStrategy::Spooling,
        FtStrategy::RestartOnly,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            FtStrategy::WriteAheadLineage => "wal",
            FtStrategy::Spooling => "spool",
            FtStrategy::RestartOnly => "restart",
        }
    }
}

impl fmt::Display for FtStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for FtStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wal" | "write_ahead_lineage" => Ok(FtStrategy::WriteAheadLineage),
            "spool" | "spooling" => Ok(FtStrategy::Spooling),
            "restart" | "restart_only" => Ok(FtStrategy::RestartOnly),
            other => Err(format!("unknown strategy `{other}` (expected wal, spool or restart)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchingPolicy {
    /// Consume everything eligible from the richest upstream channel.
    Dynamic,
    /// Consume exactly `B` partitions per task, except a final flush.
    Static(u32),
}

impl fmt::Display for BatchingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchingPolicy::Dynamic => f.write_str("dynamic"),
            BatchingPolicy::Static(b) => write!(f, "static:{b}"),
        }
    }
}

impl FromStr for BatchingPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "dynamic" {
            return Ok(BatchingPolicy::Dynamic);
        }
        match s.strip_prefix("static:").map(str::parse::<u32>) {
            Some(Ok(b)) if b > 0 => Ok(BatchingPolicy::Static(b)),
            _ => Err(format!(
                "unknown batching `{s}` (expected dynamic or static:B with B >= 1)"
            )),
        }
    }
}

/// An `(i, K)` choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub upstream: u32,
    pub count: u32,
}

/// Per upstream channel: how many gap-free committed partitions follow the
/// watermark, and whether taking all of them reaches that channel's
/// sentinel.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Eligibility {
    pub counts: Vec<u32>,
    pub exhausts: Vec<bool>,
}

/// Picks the next `(i, K)` to consume.
pub fn choose_inputs(eligible: &Eligibility, policy: BatchingPolicy) -> Option<Selection> {
    let counts = &eligible.counts;
    match policy {
        BatchingPolicy::Dynamic => {
            let (i, &k) = counts
                .iter()
                .enumerate()
                .filter(|(_, &k)| k > 0)
                .max_by(|(ia, ka), (ib, kb)| ka.cmp(kb).then(ib.cmp(ia)))?;
            Some(Selection {
                upstream: i as u32,
                count: k,
            })
        }
        BatchingPolicy::Static(b) => {
            if let Some(i) = counts.iter().position(|&k| k >= b) {
                return Some(Selection {
                    upstream: i as u32,
                    count: b,
                });
            }
            counts
                .iter()
                .zip(&eligible.exhausts)
                .position(|(&k, &done)| k > 0 && done)
                .map(|i| Selection {
                    upstream: i as u32,
                    count: counts[i],
                })
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkerError {
    #[error("kernel failed on {task}: {source}")]
    Kernel { task: TaskName, source: KernelError },
    #[error("prescribed task {0} has no logged lineage")]
    MissingLineage(TaskName),
    #[error("source task {0} has no input split")]
    MissingSplit(TaskName),
    #[error("backup of {0} is corrupt: {1}")]
    Decode(TaskName, BatchError),
    #[error("channel {0} has no worker")]
    Unmapped(ChannelKey),
    #[error("task {0} does not belong to the plan")]
    UnknownTask(TaskName),
}

/// One output partition with its encoding.
#[derive(Debug, Clone)]
pub struct Output {
    pub dest: Destination,
    pub batch: Arc<Batch>,
    pub bytes: Arc<Vec<u8>>,
    pub digest: Digest,
}

impl Output {
    pub fn new(dest: Destination, batch: Batch) -> Self {
        let bytes = batch.encode();
        let digest = Digest::of(&bytes);
        Self {
            dest,
            batch: Arc::new(batch),
            bytes: Arc::new(bytes),
            digest,
        }
    }

    pub fn size(&self) -> u64 {
        self.bytes.len() as u64
    }
}

/// A fully computed attempt, not yet pushed or committed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub task: QueuedTask,
    pub kind: ExecKind,
    pub lineage: Option<LineageEntry>,
    pub consumed: Vec<(TaskName, Digest)>,
    pub new_state: Option<ChannelState>,
    pub outputs: Vec<Output>,
    /// Indices into `outputs` that must be pushed.
    pub push: Vec<usize>,
    pub is_final: bool,
    pub rows_in: usize,
}

impl Prepared {
    pub fn channel(&self) -> ChannelKey {
        self.task.name.channel_key()
    }

    pub fn prescribed(&self) -> bool {
        self.task.is_prescribed()
    }

    pub fn pushed(&self) -> impl Iterator<Item = &Output> {
        self.push.iter().map(move |&i| &self.outputs[i])
    }

    pub fn output_bytes(&self) -> u64 {
        self.outputs.iter().map(Output::size).sum()
    }
}

#[derive(Debug, Clone)]
pub enum PrepareOutcome {
    Ready(Box<Prepared>),
    /// No input with committed lineage is available yet.
    NoEligibleInput,
    /// A replay whose backup is gone.
    Missing,
}

/// Read-only inputs to [`TaskManager::prepare`].
#[derive(Clone, Copy)]
pub struct ExecContext<'a> {
    pub plan: &'a ValidatedPlan,
    pub kernels: &'a BTreeMap<StageId, StageKernel>,
    pub gcs: &'a GcsState,
    /// Lineage and sentinels applied after this time are not visible yet.
    pub cutoff: Ticks,
    pub policy: BatchingPolicy,
    pub durable: &'a DurableStore,
}

impl ExecContext<'_> {
    fn committed(&self, t: TaskName) -> bool {
        self.gcs.lineage_visible(t, self.cutoff).is_some()
    }

    fn sentinel(&self, c: ChannelKey) -> Option<u64> {
        self.gcs.sentinel_visible(c, self.cutoff)
    }
}

#[derive(Debug, Clone, Default)]
struct ChannelRuntime {
    generation: u64,
    state: ChannelState,
}

/// A simulated worker process. Everything here is volatile.
#[derive(Debug, Clone)]
pub struct TaskManager {
    pub id: WorkerId,
    pub buffer: ExchangeBuffer,
    pub backups: LocalBackupStore,
    channels: BTreeMap<ChannelKey, ChannelRuntime>,
}

impl TaskManager {
    pub fn new(id: WorkerId) -> Self {
        Self {
            id,
            buffer: ExchangeBuffer::new(),
            backups: LocalBackupStore::default(),
            channels: BTreeMap::new(),
        }
    }

    /// Brings the local copy of `channel` to `generation`; a newer
    /// generation means the coordinator rewound the channel, so its state,
    /// watermarks and received partitions start over. Returns whether a
    /// reset happened.
    pub fn sync_channel(&mut self, channel: ChannelKey, generation: u64) -> bool {
        let rt = self.channels.entry(channel).or_default();
        if rt.generation == generation {
            return false;
        }
        rt.generation = generation;
        rt.state = ChannelState::Empty;
        self.buffer.rewind(channel);
        true
    }

    pub fn state(&self, channel: ChannelKey) -> Option<&ChannelState> {
        self.channels.get(&channel).map(|r| &r.state)
    }

    fn current_state(&self, channel: ChannelKey) -> ChannelState {
        self.state(channel).cloned().unwrap_or_default()
    }

    /// Everything before the push: select committed inputs,
    /// run the kernel. Pure with respect to the worker.
    pub fn prepare(&self, ctx: &ExecContext<'_>, task: &QueuedTask) -> Result<PrepareOutcome, WorkerError> {
        let name = task.name;
        let stage = ctx.plan.try_stage(name.stage).ok_or(WorkerError::UnknownTask(name))?;
        if name.channel >= stage.spec.channels {
            return Err(WorkerError::UnknownTask(name));
        }
        let kernel = &ctx.kernels[&name.stage];
        let run = |state: ChannelState, inputs: &[Batch], side: InputSide, finalize: bool| {
            execute_kernel(kernel, state, inputs, side, finalize)
                .map_err(|source| WorkerError::Kernel { task: name, source })
        };
        match &task.kind {
            TaskKind::Replay { consumer, durable } => {
                let store = if *durable { ctx.durable } else { &self.backups };
                let dest = Destination::Channel(*consumer);
                let Some(bytes) = store.fetch(name, dest) else {
                    return Ok(PrepareOutcome::Missing);
                };
                let batch = Batch::decode(&bytes).map_err(|e| WorkerError::Decode(name, e))?;
                let out = Output {
                    dest,
                    digest: Digest::of(&bytes),
                    batch: Arc::new(batch),
                    bytes,
                };
                Ok(ready(Prepared {
                    task: task.clone(),
                    kind: ExecKind::Replay,
                    lineage: None,
                    consumed: Vec::new(),
                    new_state: None,
                    outputs: vec![out],
                    push: vec![0],
                    is_final: false,
                    rows_in: 0,
                }))
            }
            TaskKind::Input { consumers } => {
                let (inputs, _) = source_split(stage.splits.get(name.channel as usize), name)?;
                let out = run(ChannelState::Empty, &inputs, InputSide::Data, false)?;
                let outputs: Vec<Output> = out.outputs.into_iter().map(|(d, b)| Output::new(d, b)).collect();
                let push = outputs
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| matches!(o.dest, Destination::Channel(c) if consumers.contains(&c)))
                    .map(|(i, _)| i)
                    .collect();
                Ok(ready(Prepared {
                    task: task.clone(),
                    kind: ExecKind::Input,
                    lineage: None,
                    consumed: Vec::new(),
                    new_state: None,
                    outputs,
                    push,
                    is_final: false,
                    rows_in: out.rows_in,
                }))
            }
            TaskKind::Execute { .. } if stage.is_source() => {
                let (inputs, is_final) = source_split(stage.splits.get(name.channel as usize), name)?;
                let count = inputs.len() as u32;
                let out = run(
                    self.current_state(name.channel_key()),
                    &inputs,
                    InputSide::Data,
                    is_final,
                )?;
                Ok(ready(finish_execute(
                    task,
                    LineageEntry::new(name, 0, count),
                    Vec::new(),
                    out,
                    is_final,
                )))
            }
            TaskKind::Execute { .. } => {
                let key = name.channel_key();
                let c = stage.upstream.len();
                let marks: Vec<u64> = self
                    .buffer
                    .requirement(key)
                    .map_or_else(|| vec![0; c], |r| r.watermarks.clone());
                let (selection, is_final) = if task.is_prescribed() {
                    let entry = ctx.gcs.lineage(name).ok_or(WorkerError::MissingLineage(name))?;
                    let sel = Selection {
                        upstream: entry.upstream,
                        count: entry.count,
                    };
                    if sel.count > 0 {
                        let up = stage.upstream[sel.upstream as usize];
                        let have = self
                            .buffer
                            .contiguous(key, up, marks[sel.upstream as usize], |t| ctx.committed(t));
                        if have < sel.count {
                            return Ok(PrepareOutcome::NoEligibleInput);
                        }
                    }
                    (sel, ctx.gcs.sentinel(key) == Some(name.seq + 1))
                } else {
                    let eligible = self.eligibility(ctx, key, &marks);
                    let sel = match choose_inputs(&eligible, ctx.policy) {
                        Some(sel) => sel,
                        None => {
                            let all_done = (0..c).all(|i| ctx.sentinel(stage.upstream[i]) == Some(marks[i]));
                            if !all_done {
                                return Ok(PrepareOutcome::NoEligibleInput);
                            }
                            Selection { upstream: 0, count: 0 }
                        }
                    };
                    let is_final = (0..c).all(|i| {
                        let after = marks[i]
                            + if i == sel.upstream as usize {
                                u64::from(sel.count)
                            } else {
                                0
                            };
                        ctx.sentinel(stage.upstream[i]) == Some(after)
                    });
                    (sel, is_final)
                };
                let mut inputs = Vec::with_capacity(selection.count as usize);
                let mut consumed = Vec::with_capacity(selection.count as usize);
                let side = if selection.count == 0 {
                    InputSide::Data
                } else {
                    let i = selection.upstream as usize;
                    let up = stage.upstream[i];
                    for seq in marks[i]..marks[i] + u64::from(selection.count) {
                        let t = up.task(seq);
                        let (b, d) = self.buffer.get(key, t).expect("eligible partitions are buffered");
                        inputs.push((*b).clone());
                        consumed.push((t, d));
                    }
                    stage.upstream_side[i]
                };
                let out = run(self.current_state(key), &inputs, side, is_final)?;
                let lineage = LineageEntry::new(name, selection.upstream, selection.count);
                Ok(ready(finish_execute(task, lineage, consumed, out, is_final)))
            }
        }
    }

    /// Eligible contiguous counts per upstream channel. Probe-side inputs
    /// stay ineligible until every build-side channel is fully consumed.
    pub fn eligibility(&self, ctx: &ExecContext<'_>, channel: ChannelKey, marks: &[u64]) -> Eligibility {
        let stage = ctx.plan.stage(channel.stage);
        let build_done = stage
            .upstream
            .iter()
            .zip(&stage.upstream_side)
            .enumerate()
            .filter(|(_, (_, side))| **side == InputSide::Build)
            .all(|(j, (up, _))| ctx.sentinel(*up) == Some(marks[j]));
        let is_probe = stage.upstream_side.contains(&InputSide::Build);
        let mut e = Eligibility::default();
        for (i, up) in stage.upstream.iter().enumerate() {
            let gated = is_probe && stage.upstream_side[i] == InputSide::Data && !build_done;
            let n = if gated {
                0
            } else {
                self.buffer.contiguous(channel, *up, marks[i], |t| ctx.committed(t))
            };
            e.counts.push(n);
            e.exhausts.push(ctx.sentinel(*up) == Some(marks[i] + u64::from(n)));
        }
        e
    }

    /// Makes a committed attempt's effects visible locally.
    pub fn apply_commit(&mut self, plan: &ValidatedPlan, prepared: &Prepared) {
        if prepared.kind != ExecKind::Execute {
            return;
        }
        let key = prepared.channel();
        if let Some(state) = &prepared.new_state {
            self.channels.entry(key).or_default().state = state.clone();
        }
        let stage = plan.stage(key.stage);
        if let Some(l) = prepared.lineage.filter(|l| l.count > 0 && !stage.is_source()) {
            let req = self.buffer.requirement_mut(key, stage.upstream.len());
            req.watermarks[l.upstream as usize] += u64::from(l.count);
        }
        for (t, _) in &prepared.consumed {
            self.buffer.mark_consumed(key, *t);
        }
    }
}

fn ready(p: Prepared) -> PrepareOutcome {
    PrepareOutcome::Ready(Box::new(p))
}

fn source_split(splits: Option<&Vec<Arc<Batch>>>, name: TaskName) -> Result<(Vec<Batch>, bool), WorkerError> {
    let splits = splits.ok_or(WorkerError::MissingSplit(name))?;
    let n = splits.len() as u64;
    if n == 0 && name.seq == 0 {
        return Ok((Vec::new(), true));
    }
    let split = splits.get(name.seq as usize).ok_or(WorkerError::MissingSplit(name))?;
    Ok((vec![(**split).clone()], name.seq + 1 == n))
}

fn finish_execute(
    task: &QueuedTask,
    lineage: LineageEntry,
    consumed: Vec<(TaskName, Digest)>,
    out: crate::kernel::KernelOutput,
    is_final: bool,
) -> Prepared {
    let outputs: Vec<Output> = out.outputs.into_iter().map(|(d, b)| Output::new(d, b)).collect();
    Prepared {
        task: task.clone(),
        kind: ExecKind::Execute,
        lineage: Some(lineage),
        consumed,
        new_state: Some(out.state),
        push: (0..outputs.len()).collect(),
        outputs,
        is_final,
        rows_in: out.rows_in,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PushError {
    #[error("target {0} is down")]
    TargetDown(WorkerId),
    #[error("channel {0} has no worker")]
    Unmapped(ChannelKey),
}

/// What one push delivery did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub target: Option<WorkerId>,
    pub outcome: InsertOutcome,
}

/// All workers plus the stores that outlive them.
#[derive(Debug, Clone, Default)]
pub struct Cluster {
    pub workers: BTreeMap<WorkerId, TaskManager>,
    pub dead: BTreeSet<WorkerId>,
    pub durable: DurableStore,
    pub client: ClientSink,
}

impl Cluster {
    pub fn new(workers: impl IntoIterator<Item = WorkerId>) -> Self {
        Self {
            workers: workers.into_iter().map(|w| (w, TaskManager::new(w))).collect(),
            ..Self::default()
        }
    }

    pub fn is_alive(&self, w: WorkerId) -> bool {
        self.workers.contains_key(&w) && !self.dead.contains(&w)
    }

    pub fn live_workers(&self) -> Vec<WorkerId> {
        self.workers
            .keys()
            .copied()
            .filter(|w| !self.dead.contains(w))
            .collect()
    }

    pub fn add_worker(&mut self, w: WorkerId) {
        self.workers.insert(w, TaskManager::new(w));
    }

    /// Kills a worker: buffer, backups and channel states are lost at once.
    pub fn kill(&mut self, w: WorkerId) {
        if let Some(tm) = self.workers.get_mut(&w) {
            *tm = TaskManager::new(w);
            self.dead.insert(w);
        }
    }

    pub fn worker(&self, w: WorkerId) -> &TaskManager {
        &self.workers[&w]
    }

    pub fn worker_mut(&mut self, w: WorkerId) -> &mut TaskManager {
        self.workers.get_mut(&w).expect("known worker")
    }

    /// Pushes one partition to its destination's current worker (or the
    /// client), subject to receive-side dedup.
    pub fn push_partition(&mut self, gcs: &GcsState, name: TaskName, out: &Output) -> Result<Delivery, PushError> {
        match out.dest {
            Destination::Client => Ok(Delivery {
                target: None,
                outcome: self.client.insert(name, out.batch.clone(), out.digest),
            }),
            Destination::Channel(c) => {
                let w = gcs.mapping(c).ok_or(PushError::Unmapped(c))?;
                if !self.is_alive(w) {
                    return Err(PushError::TargetDown(w));
                }
                let tm = self.worker_mut(w);
                tm.sync_channel(c, gcs.generation(c));
                Ok(Delivery {
                    target: Some(w),
                    outcome: tm.buffer.insert(c, name, out.batch.clone(), out.digest),
                })
            }
        }
    }

    /// Delivers every pushed output of `p` to live targets; any dead target
    /// makes the whole push fail.
    pub fn push_outputs(&mut self, gcs: &GcsState, p: &Prepared) -> Result<Vec<Delivery>, PushError> {
        let mut delivered = Vec::with_capacity(p.push.len());
        let mut failure = None;
        for out in p.pushed() {
            match self.push_partition(gcs, p.task.name, out) {
                Ok(d) => delivered.push(d),
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(delivered),
        }
    }

    /// Stores outputs for replay: locally under write-ahead lineage,
    /// durably under spooling, nowhere for restart-only. Returns the
    /// location to record at commit.
    pub fn backup_outputs(&mut self, worker: WorkerId, strategy: FtStrategy, p: &Prepared) -> Option<Location> {
        match (strategy, p.kind) {
            (_, ExecKind::Replay) | (FtStrategy::RestartOnly, _) => None,
            (FtStrategy::WriteAheadLineage, _) => {
                let store = &mut self.worker_mut(worker).backups;
                for out in &p.outputs {
                    store.backup_partition(p.task.name, out.dest, out.bytes.clone());
                }
                Some(Location::Worker(worker))
            }
            (FtStrategy::Spooling, _) => {
                for out in &p.outputs {
                    self.durable.backup_partition(p.task.name, out.dest, out.bytes.clone());
                }
                Some(Location::Durable)
            }
        }
    }

    /// Re-pushes a backed-up partition. `None` means the backup is gone.
    pub fn replay_partition(
        &mut self,
        gcs: &GcsState,
        owner: Option<WorkerId>,
        name: TaskName,
        consumer: ChannelKey,
    ) -> Option<Result<Delivery, PushError>> {
        let dest = Destination::Channel(consumer);
        let bytes = match owner {
            Some(w) if self.is_alive(w) => self.worker(w).backups.fetch(name, dest)?,
            Some(_) => return None,
            None => self.durable.fetch(name, dest)?,
        };
        let batch = Batch::decode(&bytes).ok()?;
        let out = Output {
            dest,
            digest: Digest::of(&bytes),
            batch: Arc::new(batch),
            bytes,
        };
        Some(self.push_partition(gcs, name, &out))
    }
}

/// Result of [`try_execute`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TryOutcome {
    Executed { txn: u64 },
    NoEligibleInput,
    PushFailed { target: WorkerId },
    Aborted(GcsError),
    Missing,
}

/// One task on one worker, start to commit, with no simulated time passing
/// between its steps.
#[allow(clippy::too_many_arguments)]
pub fn try_execute(
    cluster: &mut Cluster,
    gcs: &mut Gcs,
    plan: &ValidatedPlan,
    kernels: &BTreeMap<StageId, StageKernel>,
    worker: WorkerId,
    task: &QueuedTask,
    strategy: FtStrategy,
    policy: BatchingPolicy,
    now: Ticks,
    attempt: u64,
) -> Result<TryOutcome, WorkerError> {
    let epoch = gcs.state().epoch();
    if gcs.state().control_flag() {
        return Ok(TryOutcome::Aborted(GcsError::BarrierActive));
    }
    for c in plan.channels() {
        let g = gcs.state().generation(c);
        if gcs.state().mapping(c) == Some(worker) {
            cluster.worker_mut(worker).sync_channel(c, g);
        }
    }
    let prepared = {
        let ctx = ExecContext {
            plan,
            kernels,
            gcs: gcs.state(),
            cutoff: now,
            policy,
            durable: &cluster.durable,
        };
        match cluster.worker(worker).prepare(&ctx, task)? {
            PrepareOutcome::Ready(p) => p,
            PrepareOutcome::NoEligibleInput => return Ok(TryOutcome::NoEligibleInput),
            PrepareOutcome::Missing => return Ok(TryOutcome::Missing),
        }
    };
    match cluster.push_outputs(gcs.state(), &prepared) {
        Ok(_) => {}
        Err(PushError::TargetDown(target)) => return Ok(TryOutcome::PushFailed { target }),
        Err(PushError::Unmapped(c)) => return Err(WorkerError::Unmapped(c)),
    }
    let location = cluster.backup_outputs(worker, strategy, &prepared);
    let result = match prepared.kind {
        ExecKind::Execute => {
            let req = CommitRequest {
                worker,
                task: prepared.task.clone(),
                lineage: prepared.lineage.expect("execute attempts carry lineage"),
                sentinel: prepared.is_final.then_some(task.name.seq + 1),
                location,
                epoch,
                attempt,
            };
            gcs.commit_task_completion(&req, now)
        }
        _ => gcs.commit_auxiliary(worker, &prepared.task, location, epoch, attempt, now),
    };
    match result {
        Ok(txn) => {
            cluster.worker_mut(worker).apply_commit(plan, &prepared);
            Ok(TryOutcome::Executed { txn })
        }
        Err(e) => Ok(TryOutcome::Aborted(e)),
    }
}
