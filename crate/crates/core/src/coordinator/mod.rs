//! Failure detection and lineage-driven recovery.
//!
//! Recovery runs under the GCS control flag. [`plan_recovery`] computes the
//! rewind set in one reverse-topological pass over the stages: every
//! rewound channel needs all committed outputs of its upstream channels, and
//! each needed partition is replayed from a live backup, regenerated by an
//! input task (source stages), or forces its producer channel to rewind.
//! [`place_recovery`] assigns workers and [`reconcile`] writes the result
//! as one transaction before the flag is cleared under a new epoch.
//!
//! Source channels are never rewound: a source task depends on nothing, so
//! a source channel that was running on a failed worker simply continues
//! elsewhere at its next sequence number.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gcs::{
    Gcs, GcsError, GcsState, Location, MigrationRecord, Op, PlannedInput, PlannedReplay, QueuedTask, RecoveryRecord,
    RewindRecord, TaskKind, Transaction,
};
use crate::ids::{ChannelKey, StageId, TaskName, Ticks, WorkerId};
use crate::plan::ValidatedPlan;
use crate::worker::FtStrategy;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecoveryError {
    #[error("partition {task} has no live backup and its channel cannot be rewound")]
    Unrecoverable { task: TaskName },
    #[error("no live workers remain")]
    NoLiveWorkers,
    #[error("a worker failed during recovery: {0:?}")]
    NestedFailure(Vec<WorkerId>),
    #[error(transparent)]
    Gcs(#[from] GcsError),
}

/// Who is alive and where channels run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClusterView {
    pub live: BTreeSet<WorkerId>,
    pub failed: BTreeSet<WorkerId>,
    pub mapping: BTreeMap<ChannelKey, WorkerId>,
}

impl ClusterView {
    pub fn from_gcs(gcs: &GcsState, live: BTreeSet<WorkerId>, failed: BTreeSet<WorkerId>) -> Self {
        Self {
            live,
            failed,
            mapping: gcs.mappings().collect(),
        }
    }

    pub fn is_live(&self, w: WorkerId) -> bool {
        self.live.contains(&w) && !self.failed.contains(&w)
    }

    fn live_sorted(&self) -> Vec<WorkerId> {
        self.live.iter().copied().filter(|w| !self.failed.contains(w)).collect()
    }
}

/// Workers whose last heartbeat is at least `interval` old.
pub fn detect_failures(
    last_heartbeat: &BTreeMap<WorkerId, Ticks>,
    already_failed: &BTreeSet<WorkerId>,
    now: Ticks,
    interval: Ticks,
) -> BTreeSet<WorkerId> {
    last_heartbeat
        .iter()
        .filter(|(w, &t)| !already_failed.contains(w) && now.saturating_sub(t) >= interval)
        .map(|(w, _)| *w)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayTask {
    pub task: TaskName,
    pub consumer: ChannelKey,
    /// `None` for a durable (spooled) partition.
    pub owner: Option<WorkerId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputTask {
    pub task: TaskName,
    pub consumers: Vec<ChannelKey>,
}

/// What to redo after a failure, and where.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryPlan {
    pub failed: BTreeSet<WorkerId>,
    /// Rewound channel and its frontier (highest committed seq).
    pub rewinds: BTreeMap<ChannelKey, Option<u64>>,
    pub replays: Vec<ReplayTask>,
    pub input_tasks: Vec<InputTask>,
    /// Channels that lived on failed workers but are not rewound, with the
    /// queue entry to resume (none for finished channels).
    pub migrations: BTreeMap<ChannelKey, Option<QueuedTask>>,
    /// Queue entries on live workers that the plan supersedes.
    pub dropped: Vec<(WorkerId, QueuedTask)>,
    /// Input entries on live workers whose consumer list shrinks.
    pub trimmed: Vec<(WorkerId, QueuedTask, Vec<ChannelKey>)>,
    pub placements: BTreeMap<ChannelKey, WorkerId>,
    pub migration_placements: BTreeMap<ChannelKey, WorkerId>,
    pub input_placements: Vec<WorkerId>,
}

impl RecoveryPlan {
    pub fn is_empty(&self) -> bool {
        self.rewinds.is_empty() && self.replays.is_empty() && self.input_tasks.is_empty() && self.migrations.is_empty()
    }

    /// Partitions recomputed: every rewound task up to its channel's
    /// frontier, plus every regenerated source partition.
    pub fn reconstructed(&self) -> u64 {
        let rewound: u64 = self.rewinds.values().map(|f| f.map_or(0, |f| f + 1)).sum();
        rewound + self.input_tasks.len() as u64
    }
}

/// The lineage a rewound channel must reproduce, in seq order.
pub fn prescribed_lineage_for(channel: ChannelKey, gcs: &GcsState) -> Vec<(u32, u32)> {
    gcs.committed_in(channel).map(|e| (e.upstream, e.count)).collect()
}

enum Need {
    Replay(Option<WorkerId>),
    Input,
    Rewind,
}

fn classify(plan: &ValidatedPlan, gcs: &GcsState, view: &ClusterView, name: TaskName) -> Need {
    match gcs.location(name) {
        Some(Location::Durable) => Need::Replay(None),
        Some(Location::Worker(w)) if view.is_live(w) => Need::Replay(Some(w)),
        _ if plan.stage(name.stage).is_source() => Need::Input,
        _ => Need::Rewind,
    }
}

/// Committed outputs of `upstream` a rewound consumer needs.
fn committed_outputs(gcs: &GcsState, upstream: ChannelKey) -> impl Iterator<Item = TaskName> {
    let frontier = gcs.frontier(upstream);
    (0..frontier.map_or(0, |f| f + 1)).map(move |s| upstream.task(s))
}

/// Requires a consistent snapshot taken under the control flag.
pub fn plan_recovery(plan: &ValidatedPlan, gcs: &GcsState, view: &ClusterView) -> Result<RecoveryPlan, RecoveryError> {
    let mut out = RecoveryPlan {
        failed: view.failed.clone(),
        ..RecoveryPlan::default()
    };
    let failed_failed: Vec<WorkerId> = view.failed.iter().copied().collect();
    let lost: Vec<QueuedTask> = failed_failed.iter().flat_map(|w| gcs.queue(*w).to_vec()).collect();

    let mut rewind: BTreeSet<ChannelKey> = BTreeSet::new();
    for t in &lost {
        if t.is_execute() && !plan.stage(t.name.stage).is_source() {
            rewind.insert(t.name.channel_key());
        }
    }

    loop {
        // Rewind closure: reverse topological order means a producer added here
        // is visited later in the same pass.
        for &stage in plan.topological_order().iter().rev() {
            let info = plan.stage(stage);
            for ch in info.channels() {
                if !rewind.contains(&ch) {
                    continue;
                }
                for &up in &info.upstream {
                    for name in committed_outputs(gcs, up) {
                        if let Need::Rewind = classify(plan, gcs, view, name) {
                            rewind.insert(up);
                        }
                    }
                }
            }
        }
        // Lost replays whose target survives must be regenerated some other
        // way; that can grow the rewind set, which needs another pass.
        let before = rewind.len();
        for t in &lost {
            if let TaskKind::Replay { consumer, .. } = &t.kind {
                if !rewind.contains(consumer) {
                    if let Need::Rewind = classify(plan, gcs, view, t.name) {
                        rewind.insert(t.name.channel_key());
                    }
                }
            }
        }
        if rewind.len() == before {
            break;
        }
    }

    let mut replays: BTreeSet<(TaskName, ChannelKey, Option<WorkerId>)> = BTreeSet::new();
    let mut inputs: BTreeMap<TaskName, BTreeSet<ChannelKey>> = BTreeMap::new();
    let mut need = |name: TaskName, consumer: ChannelKey| -> Result<(), RecoveryError> {
        if rewind.contains(&name.channel_key()) {
            return Ok(());
        }
        match classify(plan, gcs, view, name) {
            Need::Replay(owner) => {
                replays.insert((name, consumer, owner));
            }
            Need::Input => {
                inputs.entry(name).or_default().insert(consumer);
            }
            Need::Rewind => return Err(RecoveryError::Unrecoverable { task: name }),
        }
        Ok(())
    };
    for &ch in &rewind {
        for &up in &plan.stage(ch.stage).upstream {
            for name in committed_outputs(gcs, up) {
                need(name, ch)?;
            }
        }
    }
    for t in &lost {
        match &t.kind {
            TaskKind::Replay { consumer, .. } if !rewind.contains(consumer) => need(t.name, *consumer)?,
            TaskKind::Input { consumers } => {
                for c in consumers.iter().filter(|c| !rewind.contains(c)) {
                    need(t.name, *c)?;
                }
            }
            _ => {}
        }
    }

    // Auxiliary work already queued on live workers.
    for (w, queue) in gcs.queues() {
        if view.failed.contains(&w) {
            continue;
        }
        for t in queue {
            match &t.kind {
                TaskKind::Replay { consumer, .. } if rewind.contains(consumer) => out.dropped.push((w, t.clone())),
                TaskKind::Replay { consumer, .. } => {
                    replays.retain(|(n, c, _)| !(*n == t.name && c == consumer));
                }
                TaskKind::Input { consumers } => {
                    let keep: Vec<ChannelKey> = consumers.iter().copied().filter(|c| !rewind.contains(c)).collect();
                    if keep.is_empty() {
                        out.dropped.push((w, t.clone()));
                    } else if keep.len() != consumers.len() {
                        out.trimmed.push((w, t.clone(), keep.clone()));
                    }
                    if let Some(set) = inputs.get_mut(&t.name) {
                        for c in &keep {
                            set.remove(c);
                        }
                        if set.is_empty() {
                            inputs.remove(&t.name);
                        }
                    }
                }
                TaskKind::Execute { .. } if rewind.contains(&t.name.channel_key()) => out.dropped.push((w, t.clone())),
                TaskKind::Execute { .. } => {}
            }
        }
    }

    for t in &lost {
        let ch = t.name.channel_key();
        if t.is_execute() && !rewind.contains(&ch) {
            out.migrations.insert(ch, Some(t.clone()));
        }
    }
    for (ch, w) in &view.mapping {
        if view.failed.contains(w) && !rewind.contains(ch) {
            out.migrations.entry(*ch).or_insert(None);
        }
    }

    out.rewinds = rewind.iter().map(|&c| (c, gcs.frontier(c))).collect();
    out.replays = replays
        .into_iter()
        .map(|(task, consumer, owner)| ReplayTask { task, consumer, owner })
        .collect();
    out.input_tasks = inputs
        .into_iter()
        .map(|(task, consumers)| InputTask {
            task,
            consumers: consumers.into_iter().collect(),
        })
        .collect();
    Ok(out)
}

/// Assigns workers. Candidates are ordered by how many surviving channels
/// they already host, so fresh joiners come first; ties rotate with the
/// epoch. Rewound stateful stages land on disjoint worker groups whenever
/// there are at least as many workers as stages. Stateless rewinds and
/// migrations each take the least-loaded worker; input tasks are dealt
/// across all of them.
pub fn place_recovery(
    plan: &ValidatedPlan,
    mut rp: RecoveryPlan,
    view: &ClusterView,
    epoch: u64,
) -> Result<RecoveryPlan, RecoveryError> {
    let live = view.live_sorted();
    let n = live.len();
    if n == 0 {
        return if rp.is_empty() {
            Ok(rp)
        } else {
            Err(RecoveryError::NoLiveWorkers)
        };
    }
    let offset = (epoch as usize) % n;
    let mut load: BTreeMap<WorkerId, usize> = live.iter().map(|&w| (w, 0)).collect();
    for (ch, w) in &view.mapping {
        if !rp.rewinds.contains_key(ch) && !rp.migrations.contains_key(ch) {
            if let Some(l) = load.get_mut(w) {
                *l += 1;
            }
        }
    }
    let mut order: Vec<(usize, WorkerId)> = (0..n).map(|r| ((r + n - offset) % n, live[r])).collect();
    order.sort_by_key(|&(rot, w)| (load[&w], rot));
    let order: Vec<WorkerId> = order.into_iter().map(|(_, w)| w).collect();

    let mut stateful: BTreeMap<StageId, Vec<ChannelKey>> = BTreeMap::new();
    let mut stateless: Vec<ChannelKey> = Vec::new();
    for &ch in rp.rewinds.keys() {
        if plan.stage(ch.stage).spec.stateful() {
            stateful.entry(ch.stage).or_default().push(ch);
        } else {
            stateless.push(ch);
        }
    }
    let m = stateful.len();
    rp.placements.clear();
    fn place(
        load: &mut BTreeMap<WorkerId, usize>,
        placements: &mut BTreeMap<ChannelKey, WorkerId>,
        ch: ChannelKey,
        w: WorkerId,
    ) {
        *load.get_mut(&w).expect("candidate") += 1;
        placements.insert(ch, w);
    }
    for (k, channels) in stateful.values().enumerate() {
        let group: Vec<WorkerId> = if m <= n {
            (0..n).filter(|r| r % m == k).map(|r| order[r]).collect()
        } else {
            vec![*order.iter().min_by_key(|w| load[w]).expect("non-empty")]
        };
        for (j, ch) in channels.iter().enumerate() {
            place(&mut load, &mut rp.placements, *ch, group[j % group.len()]);
        }
    }
    let least = |load: &BTreeMap<WorkerId, usize>| *order.iter().min_by_key(|w| load[w]).expect("non-empty");
    for ch in stateless {
        let w = least(&load);
        place(&mut load, &mut rp.placements, ch, w);
    }
    let mut migration_placements = BTreeMap::new();
    for &ch in rp.migrations.keys() {
        let w = least(&load);
        place(&mut load, &mut migration_placements, ch, w);
    }
    rp.migration_placements = migration_placements;
    rp.input_placements = (0..rp.input_tasks.len()).map(|i| order[i % n]).collect();
    Ok(rp)
}

fn replay_executor(rp: &RecoveryPlan, view: &ClusterView, r: &ReplayTask) -> WorkerId {
    r.owner.unwrap_or_else(|| {
        rp.placements
            .get(&r.consumer)
            .or_else(|| rp.migration_placements.get(&r.consumer))
            .or_else(|| view.mapping.get(&r.consumer))
            .copied()
            .expect("every consumer channel is mapped")
    })
}

/// The reconciliation transaction's sub-writes.
pub fn reconciliation_ops(gcs: &GcsState, rp: &RecoveryPlan, view: &ClusterView) -> Vec<Op> {
    let mut ops = Vec::new();
    for &w in &rp.failed {
        if !gcs.queue(w).is_empty() {
            ops.push(Op::ClearQueue { worker: w });
        }
    }
    for (w, t) in &rp.dropped {
        ops.push(Op::RemoveTask {
            worker: *w,
            task: t.clone(),
        });
    }
    for (w, t, keep) in &rp.trimmed {
        ops.push(Op::RemoveTask {
            worker: *w,
            task: t.clone(),
        });
        ops.push(Op::PushTask {
            worker: *w,
            task: QueuedTask {
                name: t.name,
                kind: TaskKind::Input {
                    consumers: keep.clone(),
                },
            },
        });
    }
    for (&ch, &frontier) in &rp.rewinds {
        let w = rp.placements[&ch];
        ops.push(Op::BumpGeneration { channel: ch });
        ops.push(Op::SetMapping {
            channel: ch,
            worker: Some(w),
        });
        ops.push(Op::PushTask {
            worker: w,
            task: QueuedTask::rewound(ch.task(0), frontier),
        });
    }
    for (ch, resume) in &rp.migrations {
        let w = rp.migration_placements[ch];
        ops.push(Op::SetMapping {
            channel: *ch,
            worker: Some(w),
        });
        if let Some(t) = resume {
            ops.push(Op::PushTask {
                worker: w,
                task: t.clone(),
            });
        }
    }
    for r in &rp.replays {
        ops.push(Op::PushTask {
            worker: replay_executor(rp, view, r),
            task: QueuedTask {
                name: r.task,
                kind: TaskKind::Replay {
                    consumer: r.consumer,
                    durable: r.owner.is_none(),
                },
            },
        });
    }
    for (i, w) in rp.input_tasks.iter().zip(&rp.input_placements) {
        ops.push(Op::PushTask {
            worker: *w,
            task: QueuedTask {
                name: i.task,
                kind: TaskKind::Input {
                    consumers: i.consumers.clone(),
                },
            },
        });
    }
    ops
}

/// Initial channel placement: channel `c` of every stage runs on the
/// `c mod n`-th worker, and every channel's first task is queued.
pub fn bootstrap_ops(plan: &ValidatedPlan, workers: &[WorkerId]) -> Vec<Op> {
    let mut ops = Vec::new();
    for ch in plan.channels() {
        let w = workers[ch.channel as usize % workers.len()];
        ops.push(Op::SetMapping {
            channel: ch,
            worker: Some(w),
        });
        ops.push(Op::PushTask {
            worker: w,
            task: QueuedTask::execute(ch.task(0)),
        });
    }
    ops
}

/// Writes the recovery plan and returns its audit record. The control
/// flag must be set; it is cleared with `epoch + 1` in a second
/// transaction.
pub fn reconcile(
    gcs: &mut Gcs,
    plan: &ValidatedPlan,
    view: &ClusterView,
    strategy: FtStrategy,
    now: Ticks,
) -> Result<RecoveryRecord, RecoveryError> {
    let epoch = gcs.state().epoch();
    let new_epoch = epoch + 1;
    let live = view.live_sorted();
    let record = if strategy == FtStrategy::RestartOnly {
        if live.is_empty() {
            return Err(RecoveryError::NoLiveWorkers);
        }
        let mut ops = vec![Op::Reset];
        for ch in plan.channels() {
            ops.push(Op::BumpGeneration { channel: ch });
        }
        ops.extend(bootstrap_ops(plan, &live));
        gcs.apply_transaction(Transaction::coordinator(epoch, ops), now)?;
        RecoveryRecord {
            time: now,
            epoch: new_epoch,
            failed: view.failed.iter().copied().collect(),
            live,
            rewinds: Vec::new(),
            replays: Vec::new(),
            inputs: Vec::new(),
            migrations: Vec::new(),
            reconstructed: 0,
            restart: true,
        }
    } else {
        let rp = plan_recovery(plan, gcs.state(), view)?;
        let rp = place_recovery(plan, rp, view, new_epoch)?;
        let ops = reconciliation_ops(gcs.state(), &rp, view);
        gcs.apply_transaction(Transaction::coordinator(epoch, ops), now)?;
        record_of(plan, &rp, view, now, new_epoch)
    };
    gcs.clear_control_flag(new_epoch, now)?;
    Ok(record)
}

fn record_of(plan: &ValidatedPlan, rp: &RecoveryPlan, view: &ClusterView, now: Ticks, epoch: u64) -> RecoveryRecord {
    RecoveryRecord {
        time: now,
        epoch,
        failed: rp.failed.iter().copied().collect(),
        live: view.live_sorted(),
        rewinds: rp
            .rewinds
            .iter()
            .map(|(&channel, &frontier)| RewindRecord {
                channel,
                frontier,
                worker: rp.placements[&channel],
                stateful: plan.stage(channel.stage).spec.stateful(),
            })
            .collect(),
        replays: rp
            .replays
            .iter()
            .map(|r| PlannedReplay {
                task: r.task,
                consumer: r.consumer,
                executor: replay_executor(rp, view, r),
                durable: r.owner.is_none(),
            })
            .collect(),
        inputs: rp
            .input_tasks
            .iter()
            .zip(&rp.input_placements)
            .map(|(i, w)| PlannedInput {
                task: i.task,
                consumers: i.consumers.clone(),
                worker: *w,
            })
            .collect(),
        migrations: rp
            .migrations
            .iter()
            .map(|(ch, t)| MigrationRecord {
                channel: *ch,
                worker: rp.migration_placements[ch],
                next_seq: t.as_ref().map(|t| t.name.seq),
            })
            .collect(),
        reconstructed: rp.reconstructed(),
        restart: false,
    }
}

/// The whole recovery sequence without simulated time: raise the barrier
/// (or join one already raised by a nested failure), reconcile, clear.
pub fn execute_recovery(
    gcs: &mut Gcs,
    plan: &ValidatedPlan,
    view: &ClusterView,
    strategy: FtStrategy,
    now: Ticks,
) -> Result<u64, RecoveryError> {
    match gcs.set_control_flag(now) {
        Ok(_) | Err(GcsError::FlagAlreadySet) => {}
        Err(e) => return Err(e.into()),
    }
    let record = reconcile(gcs, plan, view, strategy, now)?;
    gcs.record(crate::gcs::AuditRecord::Recovery(record));
    Ok(gcs.state().epoch())
}
