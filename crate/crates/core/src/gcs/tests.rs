use super::*;
use proptest::prelude::*;

const W0: WorkerId = WorkerId(0);
const W1: WorkerId = WorkerId(1);

fn name(stage: u32, channel: u32, seq: u64) -> TaskName {
    (stage, channel, seq).into()
}

fn seeded(tasks: &[(WorkerId, TaskName)]) -> Gcs {
    let mut g = Gcs::new();
    let ops = tasks
        .iter()
        .map(|&(worker, t)| Op::PushTask {
            worker,
            task: QueuedTask::execute(t),
        })
        .collect();
    g.apply_transaction(Transaction::coordinator(0, ops), 0).unwrap();
    g
}

fn request(worker: WorkerId, task: TaskName, i: u32, k: u32) -> CommitRequest {
    CommitRequest {
        worker,
        task: QueuedTask::execute(task),
        lineage: LineageEntry::new(task, i, k),
        sentinel: None,
        location: Some(Location::Worker(worker)),
        epoch: 0,
        attempt: 1,
    }
}

fn names(q: &[QueuedTask]) -> Vec<TaskName> {
    q.iter().map(|t| t.name).collect()
}

#[test]
fn first_commit_records_lineage_and_queues_successor() {
    let mut g = seeded(&[(W0, name(1, 0, 0))]);
    g.commit_task_completion(&request(W0, name(1, 0, 0), 0, 3), 5).unwrap();
    let s = g.state();
    assert_eq!(s.lineage(name(1, 0, 0)), Some(&LineageEntry::new(name(1, 0, 0), 0, 3)));
    assert_eq!(names(s.queue(W0)), [name(1, 0, 1)]);
    assert_eq!(s.location(name(1, 0, 0)), Some(Location::Worker(W0)));
    assert_eq!(s.frontier(ChannelKey::new(1, 0)), Some(0));
    assert!(s.atomicity_violations().is_empty());
}

#[test]
fn second_commit_is_a_duplicate_and_changes_nothing() {
    let mut g = seeded(&[(W0, name(1, 0, 0))]);
    let req = request(W0, name(1, 0, 0), 0, 3);
    g.commit_task_completion(&req, 5).unwrap();
    let before = g.state().clone();
    assert_eq!(
        g.commit_task_completion(&req, 6),
        Err(GcsError::DuplicateCommit(name(1, 0, 0)))
    );
    assert_eq!(g.state(), &before);
    assert!(matches!(g.audit().records().last(), Some(AuditRecord::Rejected { .. })));
}

#[test]
fn final_commit_sets_the_sentinel_instead_of_a_successor() {
    let mut g = seeded(&[(W0, name(0, 1, 0))]);
    let mut req = request(W0, name(0, 1, 0), 0, 0);
    req.sentinel = Some(1);
    g.commit_task_completion(&req, 1).unwrap();
    assert!(g.state().queue(W0).is_empty());
    assert_eq!(g.state().sentinel(ChannelKey::new(0, 1)), Some(1));
}

#[test]
fn stale_epoch_commit_is_fenced() {
    let mut g = seeded(&[(W0, name(1, 0, 0))]);
    g.set_control_flag(1).unwrap();
    g.clear_control_flag(1, 2).unwrap();
    let before = g.state().clone();
    let err = g
        .commit_task_completion(&request(W0, name(1, 0, 0), 0, 3), 3)
        .unwrap_err();
    assert_eq!(err, GcsError::StaleEpoch { txn: 0, current: 1 });
    assert_eq!(g.state(), &before);
}

#[test]
fn worker_writes_are_barred_while_the_flag_is_set() {
    let mut g = seeded(&[(W0, name(1, 0, 0))]);
    g.set_control_flag(1).unwrap();
    let before = g.state().digest();
    let err = g
        .commit_task_completion(&request(W0, name(1, 0, 0), 0, 3), 2)
        .unwrap_err();
    assert_eq!(err, GcsError::BarrierActive);
    assert_eq!(g.state().digest(), before);
    // Acks are the one worker write allowed under the barrier.
    let ack = Transaction {
        actor: Actor::Worker(W0),
        epoch: 0,
        attempt: None,
        ops: vec![Op::Ack { worker: W0 }],
    };
    g.apply_transaction(ack, 3).unwrap();
    assert!(g.state().acks().contains(&W0));
    assert!(g.poll_tasks(W0).control_flag);
}

#[test]
fn control_flag_transitions() {
    let mut g = Gcs::new();
    assert_eq!(g.clear_control_flag(1, 0), Err(GcsError::FlagNotSet));
    g.set_control_flag(0).unwrap();
    assert_eq!(g.set_control_flag(0), Err(GcsError::FlagAlreadySet));
    assert_eq!(
        g.clear_control_flag(5, 0),
        Err(GcsError::EpochMismatch { expected: 1, got: 5 })
    );
    g.clear_control_flag(1, 0).unwrap();
    assert_eq!(g.state().epoch(), 1);
    assert!(!g.state().control_flag());
}

#[test]
fn read_lineage_is_absent_until_committed() {
    let mut g = seeded(&[(W1, name(2, 1, 4))]);
    assert_eq!(g.read_lineage(name(2, 1, 4)), None);
    g.commit_task_completion(&request(W1, name(2, 1, 4), 1, 2), 10).unwrap();
    assert_eq!(
        g.read_lineage(name(2, 1, 4)),
        Some(LineageEntry::new(name(2, 1, 4), 1, 2))
    );
}

#[test]
fn lagged_reads_see_commits_only_after_their_apply_time() {
    let mut g = seeded(&[(W1, name(2, 1, 4))]);
    let mut req = request(W1, name(2, 1, 4), 1, 2);
    req.sentinel = Some(5);
    g.commit_task_completion(&req, 10).unwrap();
    let s = g.state();
    assert!(s.lineage_visible(name(2, 1, 4), 9).is_none());
    assert!(s.lineage_visible(name(2, 1, 4), 10).is_some());
    assert_eq!(s.sentinel_visible(ChannelKey::new(2, 1), 9), None);
    assert_eq!(s.sentinel_visible(ChannelKey::new(2, 1), 10), Some(5));
}

#[test]
fn poll_returns_queue_in_order() {
    let g = seeded(&[(W0, name(1, 0, 2)), (W0, name(2, 0, 5))]);
    let r = g.poll_tasks(W0);
    assert_eq!(names(&r.tasks), [name(1, 0, 2), name(2, 0, 5)]);
    assert!(!r.control_flag);
    assert_eq!(r.epoch, 0);
    assert!(g.poll_tasks(W1).tasks.is_empty());
}

#[test]
fn disjoint_commits_both_apply() {
    let mut g = seeded(&[(W0, name(1, 0, 0)), (W1, name(1, 1, 0))]);
    g.commit_task_completion(&request(W0, name(1, 0, 0), 0, 1), 1).unwrap();
    g.commit_task_completion(&request(W1, name(1, 1, 0), 1, 1), 1).unwrap();
    assert_eq!(g.state().lineage_len(), 2);
}

#[test]
fn empty_transaction_changes_nothing() {
    let mut g = seeded(&[(W0, name(1, 0, 0))]);
    let before = g.state().clone();
    g.apply_transaction(Transaction::coordinator(0, vec![]), 1).unwrap();
    assert_eq!(g.state(), &before);
}

#[test]
fn lineage_is_immutable() {
    let mut g = seeded(&[]);
    let e = LineageEntry::new(name(1, 0, 0), 0, 3);
    g.apply_transaction(Transaction::coordinator(0, vec![Op::InsertLineage { entry: e }]), 0)
        .unwrap();
    let same = Transaction::coordinator(0, vec![Op::InsertLineage { entry: e }]);
    g.apply_transaction(same, 1).unwrap();
    let other = LineageEntry::new(name(1, 0, 0), 1, 3);
    let err = g
        .apply_transaction(Transaction::coordinator(0, vec![Op::InsertLineage { entry: other }]), 2)
        .unwrap_err();
    assert!(matches!(err, GcsError::LineageConflict { .. }));
    assert_eq!(g.state().lineage(name(1, 0, 0)), Some(&e));
}

#[test]
fn prescribed_reexecution_must_match_logged_lineage() {
    let mut g = seeded(&[(W0, name(1, 0, 0))]);
    g.commit_task_completion(&request(W0, name(1, 0, 0), 0, 3), 1).unwrap();
    let rewound = QueuedTask::rewound(name(1, 0, 0), Some(0));
    let ops = vec![
        Op::ClearQueue { worker: W0 },
        Op::PushTask {
            worker: W1,
            task: rewound.clone(),
        },
    ];
    g.apply_transaction(Transaction::coordinator(0, ops), 2).unwrap();
    assert!(g.state().atomicity_violations().is_empty());
    let mut req = request(W1, name(1, 0, 0), 1, 3);
    req.task = rewound.clone();
    assert!(matches!(
        g.commit_task_completion(&req, 3),
        Err(GcsError::LineageConflict { .. })
    ));
    req.lineage = LineageEntry::new(name(1, 0, 0), 0, 3);
    g.commit_task_completion(&req, 4).unwrap();
    assert_eq!(g.state().queue(W1), [QueuedTask::rewound(name(1, 0, 1), Some(0))]);
    assert!(!g.state().queue(W1)[0].is_prescribed());
}

#[test]
fn misnamed_lineage_is_rejected() {
    let g = seeded(&[(W0, name(1, 0, 0))]);
    let mut req = request(W0, name(1, 0, 0), 0, 3);
    req.lineage.task = name(1, 0, 7);
    assert!(matches!(g.commit_ops(&req), Err(GcsError::MisnamedLineage { .. })));
}

#[test]
fn lineage_entries_are_constant_size() {
    const { assert!(LineageEntry::ENCODED_LEN <= 64) };
    let small = LineageEntry::new(name(0, 0, 0), 0, 1).encode();
    let large = LineageEntry::new(name(u32::MAX, u32::MAX, u64::MAX), u32::MAX, u32::MAX).encode();
    assert_eq!(small.len(), large.len());
}

#[test]
fn digest_depends_only_on_contents() {
    let a = seeded(&[(W0, name(1, 0, 0))]);
    let mut b = seeded(&[(W0, name(1, 0, 0)), (W1, name(3, 0, 0))]);
    let pop = Op::RemoveTask {
        worker: W1,
        task: QueuedTask::execute(name(3, 0, 0)),
    };
    b.apply_transaction(Transaction::coordinator(0, vec![pop, Op::ClearQueue { worker: W1 }]), 1)
        .unwrap();
    assert_eq!(a.state().digest(), b.state().digest());
    let mut c = a.clone();
    c.apply_transaction(Transaction::coordinator(0, vec![Op::Reset]), 2)
        .unwrap();
    assert_eq!(c.state().digest(), Gcs::new().state().digest());
}

#[test]
fn audit_log_round_trips_and_names_the_truncated_line() {
    let mut g = seeded(&[(W0, name(1, 0, 0))]);
    g.commit_task_completion(&request(W0, name(1, 0, 0), 0, 3), 5).unwrap();
    let _ = g.commit_task_completion(&request(W0, name(1, 0, 0), 0, 3), 6);
    let text = g.audit().to_jsonl();
    assert_eq!(AuditLog::parse(&text).unwrap(), *g.audit());
    let cut = &text[..text.len() - 20];
    let lines = cut.lines().count();
    match AuditLog::parse(cut) {
        Err(AuditParseError::Line { line, .. }) => assert_eq!(line, lines),
        other => panic!("expected a line error, got {other:?}"),
    }
    assert_eq!(AuditLog::parse(""), Err(AuditParseError::Empty));
}

#[test]
fn shared_store_serializes_threads() {
    let tasks: Vec<_> = (0..8).map(|c| (WorkerId(c), name(1, c, 0))).collect();
    let shared = SharedGcs::new(seeded(&tasks));
    std::thread::scope(|s| {
        for &(w, t) in &tasks {
            let shared = shared.clone();
            s.spawn(move || shared.commit_task_completion(&request(w, t, 0, 1), 1).unwrap());
        }
    });
    let g = shared.lock();
    assert_eq!(g.state().lineage_len(), 8);
    let mut replayed = GcsState::default();
    for t in g.audit().transactions() {
        assert_eq!(replayed.digest(), t.pre);
        replayed.replay_ops(&t.ops, t.time).unwrap();
        assert_eq!(replayed.digest(), t.post);
    }
}

/// Lineage and task queues agree: no committed name is queued as fresh work, and every
/// queued successor follows a committed predecessor.
fn tables_agree(s: &GcsState) -> bool {
    s.atomicity_violations().is_empty()
        && s.queues().all(|(_, q)| {
            q.iter().all(|t| {
                t.name.seq == 0
                    || s.lineage(TaskName {
                        seq: t.name.seq - 1,
                        ..t.name
                    })
                    .is_some()
            })
        })
}

proptest! {
    #[test]
    fn crash_between_any_sub_writes_rolls_back(
        k in 1u32..5,
        final_task in any::<bool>(),
        committed in 0u64..4,
    ) {
        let ch = ChannelKey::new(1, 0);
        let mut g = seeded(&[(W0, ch.task(0))]);
        for s in 0..committed {
            g.commit_task_completion(&request(W0, ch.task(s), 0, k), s).unwrap();
        }
        let mut req = request(W0, ch.task(committed), 0, k);
        if final_task {
            req.sentinel = Some(committed + 1);
        }
        let ops = g.commit_ops(&req).unwrap();
        let before = g.state().clone();
        prop_assert!(tables_agree(&before));
        for crash_after in 0..ops.len() {
            let txn = Transaction { actor: Actor::Worker(W0), epoch: 0, attempt: Some(9), ops: ops.clone() };
            let err = g.apply_with_crash(txn, 100, crash_after).unwrap_err();
            prop_assert_eq!(err, GcsError::Crashed { applied: crash_after, total: ops.len() });
            prop_assert_eq!(g.state(), &before);
            prop_assert!(tables_agree(g.state()));
        }
        g.commit_task_completion(&req, 101).unwrap();
        prop_assert!(tables_agree(g.state()));
    }

    #[test]
    fn replaying_the_log_reproduces_every_state(
        steps in prop::collection::vec((0u32..3, 1u32..4, any::<bool>()), 1..30),
    ) {
        let tasks: Vec<_> = (0..3).map(|c| (WorkerId(c), name(1, c, 0))).collect();
        let mut g = seeded(&tasks);
        for (i, (c, k, dup)) in steps.into_iter().enumerate() {
            let w = WorkerId(c);
            let head = g.state().queue(w).first().map(|t| t.name);
            if let Some(t) = head {
                let _ = g.commit_task_completion(&request(w, t, 0, k), i as u64);
                if dup {
                    let _ = g.commit_task_completion(&request(w, t, 0, k), i as u64);
                }
            }
        }
        let mut replayed = GcsState::default();
        for t in g.audit().transactions() {
            prop_assert_eq!(replayed.digest(), t.pre);
            replayed.replay_ops(&t.ops, t.time).unwrap();
            prop_assert_eq!(replayed.digest(), t.post);
        }
        prop_assert_eq!(&replayed, g.state());
        prop_assert!(tables_agree(g.state()));
    }
}
