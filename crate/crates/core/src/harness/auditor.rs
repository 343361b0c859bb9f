//! Offline invariant checks over an audit log. Needs nothing but the log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::digest::Digest;
use crate::gcs::{AuditLog, AuditRecord, ExecKind, GcsState, Op};
use crate::ids::{ChannelKey, TaskName, Ticks};
use crate::kernel::Destination;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A task consumed a partition whose lineage was not committed when the
    /// task selected its inputs.
    Gating,
    /// The store digests do not chain, a logged transaction does not replay,
    /// or lineage and the task queues disagree.
    AtomicCommit,
    /// An attempt committed after one of its pushes failed.
    CommitAfterPushFailure,
    /// A consumed partition differs from the committed one of that name.
    Dedup,
    /// Re-execution produced different bytes under the same name.
    OutputDigest,
    /// Work re-executed outside the recovery plan, or a plan whose counts
    /// do not add up.
    RecoveryLocality,
    /// An execution record without a matching commit.
    UncommittedExec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Index of the offending record, counting from the first after the
    /// header.
    pub record: usize,
    pub task: Option<TaskName>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {}: {:?}", self.record, self.kind)?;
        if let Some(t) = self.task {
            write!(f, " task {t}")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Default)]
struct Planned {
    rewound: BTreeMap<ChannelKey, Option<u64>>,
    replays: BTreeSet<(TaskName, ChannelKey)>,
    inputs: BTreeSet<TaskName>,
}

/// Checks a complete log. An empty result means the run was clean.
pub fn audit(log: &AuditLog) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut state = GcsState::default();
    let mut committed_at: BTreeMap<TaskName, Ticks> = BTreeMap::new();
    let mut committed_attempts: BTreeSet<u64> = BTreeSet::new();
    let mut push_failed: BTreeSet<u64> = BTreeSet::new();
    let mut outputs: BTreeMap<(TaskName, Destination), Digest> = BTreeMap::new();
    let mut executed: BTreeSet<TaskName> = BTreeSet::new();
    let mut planned = Planned::default();
    let mut bad = |kind, record, task, message: String| {
        out.push(Violation {
            kind,
            record,
            task,
            message,
        })
    };

    for (i, r) in log.records().iter().enumerate() {
        match r {
            AuditRecord::Txn(t) => {
                if state.digest() != t.pre {
                    bad(
                        ViolationKind::AtomicCommit,
                        i,
                        None,
                        format!(
                            "transaction {} starts from {} but the store is at {}",
                            t.id,
                            t.pre,
                            state.digest()
                        ),
                    );
                }
                if let Err(e) = state.replay_ops(&t.ops, t.time) {
                    bad(
                        ViolationKind::AtomicCommit,
                        i,
                        None,
                        format!("transaction {} does not replay: {e}", t.id),
                    );
                }
                if state.digest() != t.post {
                    bad(
                        ViolationKind::AtomicCommit,
                        i,
                        None,
                        format!(
                            "transaction {} ends at {} but replays to {}",
                            t.id,
                            t.post,
                            state.digest()
                        ),
                    );
                }
                for task in state.atomicity_violations() {
                    bad(
                        ViolationKind::AtomicCommit,
                        i,
                        Some(task),
                        "task is both committed and queued as new work".into(),
                    );
                }
                if let Some(a) = t.attempt {
                    if push_failed.contains(&a) {
                        let task = t.ops.iter().find_map(|o| match o {
                            Op::RemoveTask { task, .. } => Some(task.name),
                            _ => None,
                        });
                        bad(
                            ViolationKind::CommitAfterPushFailure,
                            i,
                            task,
                            format!("attempt {a} committed after a failed push"),
                        );
                    }
                    committed_attempts.insert(a);
                }
                for op in &t.ops {
                    match op {
                        Op::InsertLineage { entry } => {
                            committed_at.insert(entry.task, t.time);
                        }
                        Op::Reset => {
                            committed_at.clear();
                            outputs.clear();
                            executed.clear();
                            planned = Planned::default();
                        }
                        _ => {}
                    }
                }
            }
            AuditRecord::PushFailed { attempt, .. } => {
                push_failed.insert(*attempt);
            }
            AuditRecord::Recovery(rec) if !rec.restart => {
                let expected: u64 =
                    rec.rewinds.iter().map(|r| r.frontier.map_or(0, |f| f + 1)).sum::<u64>() + rec.inputs.len() as u64;
                if expected != rec.reconstructed {
                    bad(
                        ViolationKind::RecoveryLocality,
                        i,
                        None,
                        format!(
                            "plan reconstructs {expected} partitions but reports {}",
                            rec.reconstructed
                        ),
                    );
                }
                for r in &rec.rewinds {
                    planned.rewound.insert(r.channel, r.frontier);
                }
                for r in &rec.replays {
                    planned.replays.insert((r.task, r.consumer));
                }
                for r in &rec.inputs {
                    planned.inputs.insert(r.task);
                }
            }
            AuditRecord::Exec(e) => {
                if !committed_attempts.contains(&e.attempt) {
                    bad(
                        ViolationKind::UncommittedExec,
                        i,
                        Some(e.task),
                        format!("attempt {} has no committed transaction", e.attempt),
                    );
                }
                for c in &e.consumed {
                    match committed_at.get(&c.task) {
                        Some(&at) if at <= e.started => {}
                        Some(&at) => bad(
                            ViolationKind::Gating,
                            i,
                            Some(e.task),
                            format!(
                                "consumed {} at {} before its lineage committed at {at}",
                                c.task, e.started
                            ),
                        ),
                        None => bad(
                            ViolationKind::Gating,
                            i,
                            Some(e.task),
                            format!("consumed {} whose lineage never committed", c.task),
                        ),
                    }
                    let dest = Destination::Channel(e.task.channel_key());
                    if let Some(d) = outputs.get(&(c.task, dest)) {
                        if *d != c.digest {
                            bad(
                                ViolationKind::Dedup,
                                i,
                                Some(e.task),
                                format!("consumed a copy of {} that differs from the committed one", c.task),
                            );
                        }
                    }
                }
                match e.kind {
                    ExecKind::Execute if executed.contains(&e.task) => {
                        let ch = e.task.channel_key();
                        match planned.rewound.get(&ch) {
                            Some(Some(f)) if e.task.seq <= *f => {}
                            _ => bad(
                                ViolationKind::RecoveryLocality,
                                i,
                                Some(e.task),
                                "re-executed outside the planned rewinds".into(),
                            ),
                        }
                    }
                    ExecKind::Replay => {
                        for o in &e.outputs {
                            if let Destination::Channel(c) = o.dest {
                                if !planned.replays.contains(&(e.task, c)) {
                                    bad(
                                        ViolationKind::RecoveryLocality,
                                        i,
                                        Some(e.task),
                                        format!("replay to {c} was never planned"),
                                    );
                                }
                            }
                        }
                    }
                    ExecKind::Input if !planned.inputs.contains(&e.task) => bad(
                        ViolationKind::RecoveryLocality,
                        i,
                        Some(e.task),
                        "input task was never planned".into(),
                    ),
                    _ => {}
                }
                for o in &e.outputs {
                    match outputs.get(&(e.task, o.dest)) {
                        Some(d) if *d != o.digest => bad(
                            ViolationKind::OutputDigest,
                            i,
                            Some(e.task),
                            format!("output to {:?} changed across executions", o.dest),
                        ),
                        Some(_) => {}
                        None if e.kind == ExecKind::Replay => bad(
                            ViolationKind::Dedup,
                            i,
                            Some(e.task),
                            "replayed a partition that was never produced".into(),
                        ),
                        None => {
                            outputs.insert((e.task, o.dest), o.digest);
                        }
                    }
                }
                if e.kind == ExecKind::Execute {
                    executed.insert(e.task);
                }
            }
            _ => {}
        }
    }
    out
}
