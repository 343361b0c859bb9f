use super::scenarios::*;
use super::*;
use crate::gcs::AuditLog;
use crate::reference::reference_digest;
use crate::validate_plan;
use crate::worker::BatchingPolicy;
use crate::{TaskName, WorkerId};

fn check_clean(out: &RunOutput) {
    let v = audit(&out.audit);
    assert!(v.is_empty(), "violations: {:#?}", &v[..v.len().min(5)]);
}

fn run_ok(plan: &crate::QueryPlan, cfg: &SimConfig, faults: &FaultSpec) -> RunOutput {
    let vp = validate_plan(plan).unwrap();
    let out = run(&vp, cfg, faults).unwrap_or_else(|e| panic!("{}: {e}", plan.name));
    assert_eq!(
        out.metrics.result,
        reference_digest(&vp),
        "{} differs from the reference",
        plan.name
    );
    check_clean(&out);
    out
}

#[test]
fn failure_free_runs_match_reference() {
    for name in BUILTIN_NAMES {
        if name == "long-scan" {
            continue;
        }
        let plan = builtin(name).unwrap();
        for strategy in FtStrategy::ALL {
            let out = run_ok(&plan, &SimConfig::default().with_strategy(strategy), &FaultSpec::none());
            assert_eq!(out.metrics.recoveries, 0);
            assert!(out.metrics.makespan_ticks > 0);
        }
    }
}

#[test]
fn single_failure_matches_reference_under_every_strategy() {
    let plan = three_join_plan();
    for strategy in FtStrategy::ALL {
        let cfg = SimConfig::default().with_strategy(strategy);
        let out = run_ok(
            &plan,
            &cfg,
            &FaultSpec::kill(FaultTarget::Worker(crate::WorkerId(1)), Trigger::Progress(0.5)),
        );
        assert_eq!(out.metrics.faults_injected, 1);
        assert!(out.metrics.recoveries >= 1, "{strategy}");
    }
}

#[test]
fn static_batching_matches_reference() {
    let plan = three_join_plan();
    for b in [1, 4] {
        let cfg = SimConfig::default().with_batching(BatchingPolicy::Static(b));
        run_ok(
            &plan,
            &cfg,
            &FaultSpec::kill(FaultTarget::Random, Trigger::Progress(0.4)),
        );
    }
}

#[test]
fn nested_failures_recover() {
    let plan = three_join_plan();
    let faults = FaultSpec::kill(FaultTarget::Worker(crate::WorkerId(0)), Trigger::Progress(0.3))
        .and(FaultTarget::Worker(crate::WorkerId(2)), Trigger::Progress(0.31));
    let out = run_ok(&plan, &SimConfig::default(), &faults);
    assert_eq!(out.metrics.faults_injected, 2);
}

#[test]
fn read_lag_delays_but_does_not_change_results() {
    let plan = walkthrough_plan();
    let cfg = SimConfig {
        read_lag_max: 0.3,
        ..SimConfig::default()
    };
    let lagged = run_ok(
        &plan,
        &cfg,
        &FaultSpec::kill(FaultTarget::Random, Trigger::Progress(0.5)),
    );
    let strict = run_ok(&plan, &SimConfig::default(), &FaultSpec::none());
    assert!(lagged.metrics.makespan_ticks >= strict.metrics.makespan_ticks);
}

#[test]
fn reruns_are_identical() {
    let plan = walkthrough_plan();
    let faults = FaultSpec::kill(FaultTarget::Random, Trigger::Progress(0.5));
    let a = run_ok(&plan, &SimConfig::default(), &faults);
    let b = run_ok(&plan, &SimConfig::default(), &faults);
    assert_eq!(a.audit.to_jsonl(), b.audit.to_jsonl());
    assert_eq!(a.metrics.to_kv(), b.metrics.to_kv());
}

#[test]
fn empty_input_finishes_with_empty_result() {
    let plan = aggregate_plan(0);
    let vp = validate_plan(&plan).unwrap();
    let pipelined = run(&vp, &SimConfig::default(), &FaultSpec::none()).unwrap();
    let blocking = run_blocking(&vp, &SimConfig::default()).unwrap();
    assert!(pipelined.result.values().all(|b| b.is_empty()));
    assert_eq!(pipelined.metrics.result, blocking.result);
}

/// Under `Static(B)` each channel drains every upstream in full batches of
/// `B` followed by at most one short remainder, and the batches add up to
/// the upstream's final output count.
fn assert_static_lineage(plan: &ValidatedPlan, log: &AuditLog, b: u32) {
    use crate::gcs::{LineageEntry, Op};
    let mut entries: BTreeMap<TaskName, LineageEntry> = BTreeMap::new();
    let mut sentinels: BTreeMap<crate::ChannelKey, u64> = BTreeMap::new();
    for t in log.transactions() {
        for op in &t.ops {
            match op {
                Op::InsertLineage { entry } => {
                    entries.insert(entry.task, *entry);
                }
                Op::SetSentinel {
                    channel,
                    count: Some(n),
                } => {
                    sentinels.insert(*channel, *n);
                }
                _ => {}
            }
        }
    }
    let mut runs: BTreeMap<(crate::ChannelKey, u32), Vec<u32>> = BTreeMap::new();
    for e in entries
        .values()
        .filter(|e| e.count > 0 && !plan.stage(e.task.stage).is_source())
    {
        runs.entry((e.task.channel_key(), e.upstream))
            .or_default()
            .push(e.count);
    }
    assert!(!runs.is_empty());
    for ((ch, i), counts) in &runs {
        let (last, full) = counts.split_last().unwrap();
        assert!(full.iter().all(|&k| k == b), "{ch} upstream {i}: {counts:?}");
        assert!((1..=b).contains(last), "{ch} upstream {i}: {counts:?}");
        let up = plan.stage(ch.stage).upstream[*i as usize];
        let total: u64 = counts.iter().map(|&k| u64::from(k)).sum();
        assert_eq!(Some(&total), sentinels.get(&up), "{ch} drained {total} from {up}");
    }
}

#[test]
fn static_batches_are_full_except_the_last() {
    for b in [2, 3] {
        let cfg = SimConfig::default().with_batching(BatchingPolicy::Static(b));
        let out = run_ok(&walkthrough_plan(), &cfg, &FaultSpec::none());
        assert_static_lineage(&validate_plan(&walkthrough_plan()).unwrap(), &out.audit, b);
        let faults = FaultSpec::kill(FaultTarget::Worker(crate::WorkerId(1)), Trigger::Progress(0.5));
        let out = run_ok(&three_join_plan(), &cfg, &faults);
        assert!(out.metrics.recoveries > 0);
        assert_static_lineage(&validate_plan(&three_join_plan()).unwrap(), &out.audit, b);
    }
}

#[test]
fn commit_after_push_failure_is_reported_with_its_task() {
    use crate::gcs::AuditRecord;
    let out = run_ok(&walkthrough_plan(), &SimConfig::default(), &FaultSpec::none());
    let exec = out.audit.execs().nth(5).unwrap().clone();
    let mut log = out.audit.clone();
    let at = log
        .records()
        .iter()
        .position(|r| matches!(r, AuditRecord::Txn(t) if t.attempt == Some(exec.attempt)))
        .unwrap();
    log.records_mut().insert(
        at,
        AuditRecord::PushFailed {
            time: exec.started,
            attempt: exec.attempt,
            task: exec.task,
            worker: exec.worker,
            target: crate::WorkerId(99),
        },
    );
    let v = audit(&log);
    assert_eq!(v.len(), 1, "{v:#?}");
    assert_eq!(v[0].kind, ViolationKind::CommitAfterPushFailure);
    assert_eq!(v[0].task, Some(exec.task));
    assert!(v[0].to_string().contains(&exec.task.to_string()));
}

#[test]
fn lineage_recovery_beats_restart_on_a_scan_aggregate() {
    let vp = validate_plan(&aggregate_plan(50_000)).unwrap();
    let cfg = SimConfig::default().with_workers(4);
    let kill = FaultSpec::kill(FaultTarget::Worker(WorkerId(1)), Trigger::Progress(0.5));
    let rows = compare_strategies(
        &vp,
        &cfg,
        &kill,
        &[FtStrategy::WriteAheadLineage, FtStrategy::RestartOnly],
        &[BatchingPolicy::Dynamic],
    )
    .unwrap();
    let (wal, restart) = (&rows[0], &rows[1]);
    assert_eq!(wal.result, restart.result);
    assert_eq!(wal.result, reference_digest(&vp));
    assert_eq!((wal.recoveries, restart.restarts), (1, 1));
    assert!(
        wal.overhead.unwrap() < restart.overhead.unwrap(),
        "{:?} vs {:?}",
        wal.overhead,
        restart.overhead
    );
}

#[test]
fn balanced_two_stage_pipeline_beats_blocking() {
    let vp = validate_plan(&aggregate_plan(8000)).unwrap();
    let cfg = SimConfig::default().with_workers(4);
    let pipelined = run(&vp, &cfg, &FaultSpec::none()).unwrap().metrics;
    let blocking = run_blocking(&vp, &cfg).unwrap();
    assert_eq!(pipelined.result, blocking.result);
    assert!(pipelined.makespan_ticks < blocking.makespan_ticks);
}

/// With a per-partition network charge, larger static batches win at both
/// cluster sizes: small batches multiply partition counts at every shuffle.
#[test]
fn larger_static_batches_win_under_per_partition_network_cost() {
    let vp = validate_plan(&three_join_plan_with_channels(8)).unwrap();
    for workers in [4, 16] {
        let span = |b| {
            let mut cfg = SimConfig::default()
                .with_workers(workers)
                .with_batching(BatchingPolicy::Static(b));
            cfg.cost.net_per_partition = 0.02;
            let m = run(&vp, &cfg, &FaultSpec::none()).unwrap().metrics;
            assert_eq!(m.result, reference_digest(&vp));
            m.makespan_ticks
        };
        assert!(span(16) < span(4), "{workers} workers");
    }
}
