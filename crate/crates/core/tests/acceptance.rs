//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

use lineage_core::gcs::{
    Actor, AuditLog, AuditRecord, ExecKind, Gcs, GcsState, Location, Op, QueuedTask, TaskKind, Transaction,
};
use lineage_core::harness::{self, audit, scenarios, FaultSpec, FaultTarget, RunOutput, SimConfig, Trigger};
use lineage_core::plan::OperatorKind;
use lineage_core::reference::reference_digest;
use lineage_core::worker::{BatchingPolicy, FtStrategy};
use lineage_core::{validate_plan, ChannelKey, QueryPlan, StageId, TaskName, ValidatedPlan, WorkerId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn validated(plan: &QueryPlan) -> ValidatedPlan {
    validate_plan(plan).unwrap_or_else(|e| panic!("{}: {e}", plan.name))
}

fn run(plan: &ValidatedPlan, cfg: &SimConfig, faults: &FaultSpec) -> Result<RunOutput, String> {
    harness::run(plan, cfg, faults).map_err(|e| format!("run failed: {e}"))
}

fn random_batching(rng: &mut ChaCha8Rng) -> BatchingPolicy {
    if rng.gen_bool(0.5) {
        BatchingPolicy::Dynamic
    } else {
        BatchingPolicy::Static(rng.gen_range(1..=4))
    }
}

fn random_faults(rng: &mut ChaCha8Rng, workers: u32, max: usize) -> FaultSpec {
    let mut spec = FaultSpec::none();
    for _ in 0..rng.gen_range(1..=max) {
        let target = if rng.gen_bool(0.3) {
            FaultTarget::Random
        } else {
            FaultTarget::Worker(WorkerId(rng.gen_range(0..workers)))
        };
        let at = Trigger::Progress(rng.gen_range(0.02..0.98));
        spec = if spec.is_empty() {
            FaultSpec::kill(target, at)
        } else {
            spec.and(target, at)
        };
    }
    spec
}

/// Failures never change the answer.
fn c1_result_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0001);
    let scenarios = 1000;
    let mut recoveries = 0u64;
    let mut reference_checked = 0;
    let (mut closures, mut placements) = (0, 0);
    for i in 0..scenarios {
        let qp = scenarios::random_plan(rng.gen());
        let plan = validated(&qp);
        let workers = rng.gen_range(1..=4);
        let cfg = SimConfig::default()
            .with_workers(workers)
            .with_seed(rng.gen())
            .with_strategy(FtStrategy::ALL[rng.gen_range(0..3)])
            .with_batching(random_batching(&mut rng));
        let faults = random_faults(&mut rng, workers, 2);
        let clean = run(&plan, &cfg, &FaultSpec::none())?;
        let faulty = run(&plan, &cfg, &faults).map_err(|e| format!("scenario {i} ({}, {cfg:?}): {e}", plan.name))?;
        ensure(faulty.metrics.result == clean.metrics.result, || {
            format!(
                "scenario {i} ({}, {faults:?}): digest {} != failure-free {}",
                plan.name, faulty.metrics.result, clean.metrics.result
            )
        })?;
        let violations = audit(&faulty.audit);
        ensure(violations.is_empty(), || {
            format!("scenario {i} ({}): {}", plan.name, violations[0])
        })?;
        if cfg.strategy != FtStrategy::RestartOnly {
            let topo = Topology::of(&qp);
            closures +=
                check_closure(&topo, &faulty.audit).map_err(|e| format!("scenario {i} ({}): {e}", plan.name))?;
            placements += check_injective(&faulty.audit)
                .map_err(|e| format!("scenario {i} ({}): {e}", plan.name))?
                .0;
        }
        if i % 10 == 0 {
            let want = reference_digest(&plan);
            ensure(clean.metrics.result == want, || {
                format!("scenario {i}: differs from the reference evaluator")
            })?;
            reference_checked += 1;
        }
        recoveries += faulty.metrics.recoveries;
    }
    Ok(format!(
        "{scenarios} scenarios, {recoveries} recoveries, {reference_checked} also checked against the reference evaluator; \
         audit clean, {closures} rewind sets match the closure oracle, {placements} placements injective"
    ))
}

/// The three-stage walkthrough: losing worker 2 just after it commits
/// (2,2,0) rewinds exactly two channels.
fn c2_walkthrough() -> Outcome {
    let plan = validated(&scenarios::walkthrough_plan());
    let faults = FaultSpec::kill(
        FaultTarget::Worker(WorkerId(2)),
        Trigger::AfterCommit(TaskName::new(2, 2, 0)),
    );
    let out = run(&plan, &SimConfig::default(), &faults)?;
    let recs: Vec<_> = out.audit.recoveries().collect();
    ensure(recs.len() == 1, || format!("expected one recovery, got {}", recs.len()))?;
    let rec = recs[0];
    let rewound: BTreeSet<ChannelKey> = rec.rewinds.iter().map(|r| r.channel).collect();
    let want: BTreeSet<ChannelKey> = [ChannelKey::new(1, 2), ChannelKey::new(2, 2)].into();
    ensure(rewound == want, || format!("rewound {rewound:?}"))?;
    let mut first: BTreeMap<ChannelKey, u64> = BTreeMap::new();
    let mut after = false;
    for r in out.audit.records() {
        match r {
            AuditRecord::Recovery(_) => after = true,
            AuditRecord::Exec(e) if after && e.kind == ExecKind::Execute => {
                first.entry(e.task.channel_key()).or_insert(e.task.seq);
            }
            _ => {}
        }
    }
    for ch in &want {
        ensure(first.get(ch) == Some(&0), || {
            format!("{ch} restarted at {:?}", first.get(ch))
        })?;
    }
    ensure(rec.reconstructed == 4 && out.metrics.reconstructed == 4, || {
        format!(
            "reconstructed {} (metrics {})",
            rec.reconstructed, out.metrics.reconstructed
        )
    })?;
    ensure(out.metrics.result == reference_digest(&plan), || {
        "result differs from the reference".into()
    })?;
    Ok(format!(
        "rewound {{(1,2),(2,2)}} from seq 0, reconstructed 4, {} replays",
        rec.replays.len()
    ))
}

/// Restart-only recovery from a mid-query failure costs about half a run
/// on top of the full run.
fn c3_restart_overhead() -> Outcome {
    let plan = validated(&scenarios::long_scan_plan());
    let cfg = SimConfig::default().with_strategy(FtStrategy::RestartOnly);
    let base = harness::baseline(&plan, &cfg).map_err(|e| e.to_string())?;
    let faults = FaultSpec::kill(FaultTarget::Worker(WorkerId(1)), Trigger::Progress(0.5));
    let out = run(&plan, &cfg, &faults)?;
    ensure(out.metrics.restarts == 1, || {
        format!("{} restarts", out.metrics.restarts)
    })?;
    let overhead = out.metrics.makespan_ticks as f64 / base.makespan_ticks as f64;
    ensure((overhead - 1.5).abs() <= 0.1, || {
        format!("overhead {overhead:.4} outside 1.5 ± 0.1")
    })?;
    Ok(format!("overhead {overhead:.4}"))
}

/// Test-side model of the store tables, driven only by logged sub-writes.
#[derive(Clone, Default)]
struct Mirror {
    committed: BTreeSet<TaskName>,
    location: BTreeMap<TaskName, Location>,
    queues: BTreeMap<WorkerId, Vec<QueuedTask>>,
}

impl Mirror {
    fn apply(&mut self, op: &Op) {
        match op {
            Op::InsertLineage { entry } => {
                self.committed.insert(entry.task);
            }
            Op::RemoveTask { worker, task } => {
                let q = self.queues.entry(*worker).or_default();
                if let Some(i) = q.iter().position(|t| t == task) {
                    q.remove(i);
                }
            }
            Op::PushTask { worker, task } => self.queues.entry(*worker).or_default().push(task.clone()),
            Op::ClearQueue { worker } => {
                self.queues.remove(worker);
            }
            Op::SetLocation { task, location } => match location {
                Some(l) => {
                    self.location.insert(*task, *l);
                }
                None => {
                    self.location.remove(task);
                }
            },
            Op::Reset => *self = Mirror::default(),
            _ => {}
        }
    }

    fn outputs(&self, ch: ChannelKey) -> impl Iterator<Item = TaskName> + '_ {
        self.committed.iter().copied().filter(move |t| t.channel_key() == ch)
    }

    fn frontier(&self, ch: ChannelKey) -> Option<u64> {
        self.outputs(ch).map(|t| t.seq).max()
    }
}

struct Topology {
    sources: BTreeSet<StageId>,
    channels: BTreeMap<StageId, u32>,
    upstream: BTreeMap<StageId, Vec<StageId>>,
}

impl Topology {
    fn of(plan: &QueryPlan) -> Self {
        let mut upstream: BTreeMap<StageId, Vec<StageId>> = BTreeMap::new();
        for e in &plan.edges {
            upstream.entry(e.to).or_default().push(e.from);
        }
        Self {
            sources: plan
                .stages
                .iter()
                .filter(|s| matches!(s.operator, OperatorKind::InputReader { .. }))
                .map(|s| s.id)
                .collect(),
            channels: plan.stages.iter().map(|s| (s.id, s.channels)).collect(),
            upstream,
        }
    }

    fn upstream_channels(&self, stage: StageId) -> Vec<ChannelKey> {
        let ups = self.upstream.get(&stage).map(Vec::as_slice).unwrap_or_default();
        ups.iter()
            .flat_map(|&u| (0..self.channels[&u]).map(move |c| ChannelKey::new(u, c)))
            .collect()
    }
}

/// Fixed point over the lineage graph: a rewound channel needs every
/// committed output of its upstream channels; a needed output with no live
/// copy pulls its (non-source) producer in.
fn closure_oracle(
    topo: &Topology,
    m: &Mirror,
    live: &BTreeSet<WorkerId>,
    failed: &BTreeSet<WorkerId>,
) -> BTreeSet<ChannelKey> {
    let lost = |t: &TaskName| match m.location.get(t) {
        Some(Location::Durable) => false,
        Some(Location::Worker(w)) => !live.contains(w),
        None => true,
    };
    let dead_queues: Vec<&QueuedTask> = failed
        .iter()
        .flat_map(|w| m.queues.get(w).into_iter().flatten())
        .collect();
    let mut r: BTreeSet<ChannelKey> = dead_queues
        .iter()
        .filter(|t| t.is_execute() && !topo.sources.contains(&t.name.stage))
        .map(|t| t.name.channel_key())
        .collect();
    loop {
        let mut next = r.clone();
        for y in &r {
            for x in topo.upstream_channels(y.stage) {
                if !topo.sources.contains(&x.stage) && m.outputs(x).any(|p| lost(&p)) {
                    next.insert(x);
                }
            }
        }
        for t in &dead_queues {
            if let TaskKind::Replay { consumer, .. } = &t.kind {
                if !r.contains(consumer) && lost(&t.name) && !topo.sources.contains(&t.name.stage) {
                    next.insert(t.name.channel_key());
                }
            }
        }
        if next == r {
            return r;
        }
        r = next;
    }
}

fn is_reconciliation(ops: &[Op]) -> bool {
    ops.is_empty()
        || ops
            .iter()
            .any(|o| !matches!(o, Op::SetFlag | Op::ClearFlag { .. } | Op::Ack { .. }))
}

/// Checks one run's recoveries against the oracle. Returns the number of
/// recoveries checked.
fn check_closure(topo: &Topology, log: &AuditLog) -> Result<usize, String> {
    let mut mirror = Mirror::default();
    let mut snapshot = Mirror::default();
    let mut executed: BTreeSet<TaskName> = BTreeSet::new();
    let mut expected: BTreeSet<TaskName> = BTreeSet::new();
    let mut reexecuted: BTreeSet<TaskName> = BTreeSet::new();
    let mut checked = 0;
    for r in log.records() {
        match r {
            AuditRecord::Txn(t) => {
                if t.actor == Actor::Coordinator && is_reconciliation(&t.ops) {
                    snapshot = mirror.clone();
                }
                for op in &t.ops {
                    mirror.apply(op);
                }
            }
            AuditRecord::Recovery(rec) => {
                let live: BTreeSet<WorkerId> = rec.live.iter().copied().collect();
                let failed: BTreeSet<WorkerId> = rec.failed.iter().copied().collect();
                let oracle = closure_oracle(topo, &snapshot, &live, &failed);
                let planned: BTreeSet<ChannelKey> = rec.rewinds.iter().map(|r| r.channel).collect();
                ensure(planned == oracle, || format!("rewound {planned:?}, oracle {oracle:?}"))?;
                for ch in &oracle {
                    if let Some(f) = snapshot.frontier(*ch) {
                        expected.extend((0..=f).map(|s| ch.task(s)));
                    }
                }
                checked += 1;
            }
            AuditRecord::Exec(e) if e.kind == ExecKind::Execute && !executed.insert(e.task) => {
                reexecuted.insert(e.task);
            }
            _ => {}
        }
    }
    ensure(reexecuted == expected, || {
        let extra: Vec<_> = reexecuted.difference(&expected).collect();
        let missing: Vec<_> = expected.difference(&reexecuted).collect();
        format!("re-executed outside the closure {extra:?}; closure tasks never re-executed {missing:?}")
    })?;
    Ok(checked)
}

/// Re-execution is confined to the rewind closure.
fn c4_rewind_closure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0004);
    let mut plans: Vec<QueryPlan> = vec![scenarios::walkthrough_plan(), scenarios::three_join_plan()];
    plans.extend((0..300).map(|_| scenarios::random_plan(rng.gen())));
    let mut checked = 0;
    let mut runs = 0;
    for (i, qp) in plans.iter().enumerate() {
        let plan = validated(qp);
        let topo = Topology::of(qp);
        let reps = if i < 2 { 20 } else { 1 };
        for _ in 0..reps {
            let workers = rng.gen_range(2..=4);
            let strategy = [FtStrategy::WriteAheadLineage, FtStrategy::Spooling][rng.gen_range(0..2)];
            let cfg = SimConfig::default()
                .with_workers(workers)
                .with_seed(rng.gen())
                .with_strategy(strategy)
                .with_batching(random_batching(&mut rng));
            let faults = FaultSpec::kill(
                FaultTarget::Worker(WorkerId(rng.gen_range(0..workers))),
                Trigger::Progress(rng.gen_range(0.05..0.95)),
            );
            let out = run(&plan, &cfg, &faults)?;
            checked += check_closure(&topo, &out.audit).map_err(|e| format!("{} ({cfg:?}): {e}", qp.name))?;
            runs += 1;
        }
    }
    ensure(checked >= 100, || format!("only {checked} recoveries exercised"))?;
    Ok(format!(
        "{checked} recoveries over {runs} runs match the brute-force closure"
    ))
}

/// The shuffle-heavy join: write-ahead lineage beats spooling, lineage stays
/// small, and spooling writes every pushed byte.
fn c5_wal_vs_spool() -> Outcome {
    let plan = validated(&scenarios::three_join_plan());
    let faults = FaultSpec::kill(FaultTarget::Worker(WorkerId(1)), Trigger::Progress(0.5));
    let rows = harness::compare_strategies(
        &plan,
        &SimConfig::default(),
        &faults,
        &[FtStrategy::WriteAheadLineage, FtStrategy::Spooling],
        &[BatchingPolicy::Dynamic],
    )
    .map_err(|e| e.to_string())?;
    let (wal, spool) = (&rows[0], &rows[1]);
    let (ow, os) = (wal.overhead.unwrap(), spool.overhead.unwrap());
    ensure(ow < os, || format!("overhead wal {ow:.3} >= spool {os:.3}"))?;
    for m in [wal, spool] {
        ensure(m.lineage_bytes <= 64 * m.tasks_committed, || {
            format!(
                "{}: {} lineage bytes for {} commits",
                m.strategy, m.lineage_bytes, m.tasks_committed
            )
        })?;
    }
    let clean = run(
        &plan,
        &SimConfig::default().with_strategy(FtStrategy::Spooling),
        &FaultSpec::none(),
    )?;
    for m in [spool, &clean.metrics] {
        ensure(m.bytes_durable == m.bytes_pushed, || {
            format!("spooled {} bytes but pushed {}", m.bytes_durable, m.bytes_pushed)
        })?;
    }
    Ok(format!(
        "overhead wal {ow:.3} < spool {os:.3}; {:.1} lineage bytes per commit; spooled = pushed = {}",
        wal.lineage_bytes as f64 / wal.tasks_committed as f64,
        spool.bytes_pushed
    ))
}

/// Pipelining overlaps stages; with one stage there is nothing to overlap.
/// Clusters start at one worker per channel.
fn c6_pipelined_vs_blocking() -> Outcome {
    let mut notes = Vec::new();
    let join = validated(&scenarios::three_join_plan());
    for (workers, batching) in [
        (4, BatchingPolicy::Dynamic),
        (8, BatchingPolicy::Dynamic),
        (4, BatchingPolicy::Static(2)),
        (4, BatchingPolicy::Static(4)),
    ] {
        let cfg = SimConfig::default().with_workers(workers).with_batching(batching);
        let p = run(&join, &cfg, &FaultSpec::none())?.metrics;
        let b = harness::run_blocking(&join, &cfg).map_err(|e| e.to_string())?;
        ensure(p.makespan_ticks < b.makespan_ticks, || {
            format!(
                "{workers} workers {batching}: pipelined {} >= blocking {}",
                p.makespan_ticks, b.makespan_ticks
            )
        })?;
        ensure(p.result == b.result, || "blocking changed the result".into())?;
        notes.push(format!(
            "{workers}w/{batching} {:.2}x",
            b.makespan_ticks as f64 / p.makespan_ticks as f64
        ));
    }
    let single = validated(&scenarios::single_stage_plan());
    for workers in [1, 4] {
        let cfg = SimConfig::default().with_workers(workers);
        let p = run(&single, &cfg, &FaultSpec::none())?.metrics;
        let b = harness::run_blocking(&single, &cfg).map_err(|e| e.to_string())?;
        ensure(p.makespan_ticks == b.makespan_ticks, || {
            format!(
                "single stage: pipelined {} != blocking {}",
                p.makespan_ticks, b.makespan_ticks
            )
        })?;
    }
    Ok(format!(
        "three-join blocking/pipelined {}; single stage equal",
        notes.join(", ")
    ))
}

/// Checks that no worker hosts two rewound stateful stages whenever the
/// live workers suffice. Returns (qualifying, total) non-restart recoveries.
fn check_injective(log: &AuditLog) -> Result<(usize, usize), String> {
    let (mut checked, mut recoveries) = (0, 0);
    for rec in log.recoveries().filter(|r| !r.restart) {
        recoveries += 1;
        let stages: BTreeSet<StageId> = rec
            .rewinds
            .iter()
            .filter(|r| r.stateful)
            .map(|r| r.channel.stage)
            .collect();
        if stages.is_empty() || stages.len() > rec.live.len() {
            continue;
        }
        let mut host: BTreeMap<WorkerId, StageId> = BTreeMap::new();
        for r in rec.rewinds.iter().filter(|r| r.stateful) {
            ensure(rec.live.contains(&r.worker), || {
                format!("{} placed on dead {}", r.channel, r.worker)
            })?;
            if let Some(prev) = host.insert(r.worker, r.channel.stage) {
                ensure(prev == r.channel.stage, || {
                    format!("worker {} hosts stages {prev} and {}", r.worker, r.channel.stage)
                })?;
            }
        }
        checked += 1;
    }
    Ok((checked, recoveries))
}

/// Rewound stateful stages never share a worker when there are enough.
fn c7_injective_placement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0007);
    let fixed = [scenarios::walkthrough_plan(), scenarios::three_join_plan()];
    let mut checked = 0;
    let mut recoveries = 0;
    for i in 0..400 {
        let qp = if i % 4 == 0 {
            fixed[(i / 4) % 2].clone()
        } else {
            scenarios::random_plan(rng.gen())
        };
        let plan = validated(&qp);
        let workers = rng.gen_range(1..=8);
        let cfg = SimConfig::default()
            .with_workers(workers)
            .with_seed(rng.gen())
            .with_strategy([FtStrategy::WriteAheadLineage, FtStrategy::Spooling][rng.gen_range(0..2)])
            .with_batching(random_batching(&mut rng));
        let out = run(&plan, &cfg, &random_faults(&mut rng, workers, 2))?;
        let (q, n) = check_injective(&out.audit).map_err(|e| format!("{} ({cfg:?}): {e}", qp.name))?;
        checked += q;
        recoveries += n;
    }
    ensure(checked >= 100, || format!("only {checked} qualifying recoveries"))?;
    Ok(format!("{checked} of {recoveries} recoveries qualified; all injective"))
}

/// Lineage and the task queues agree: nothing committed is queued as fresh
/// work, queued successors follow committed predecessors, and replays name
/// committed partitions.
fn tables_agree(s: &GcsState) -> Result<(), String> {
    for (w, q) in s.queues() {
        for t in q {
            let ok = match &t.kind {
                TaskKind::Execute { .. } if t.is_prescribed() => true,
                TaskKind::Execute { .. } => {
                    s.lineage(t.name).is_none()
                        && (t.name.seq == 0
                            || s.lineage(TaskName {
                                seq: t.name.seq - 1,
                                ..t.name
                            })
                            .is_some())
                }
                TaskKind::Replay { .. } | TaskKind::Input { .. } => s.lineage(t.name).is_some(),
            };
            ensure(ok, || format!("{w} queues {:?} against lineage", t))?;
        }
    }
    ensure(s.atomicity_violations().is_empty(), || {
        format!("{:?}", s.atomicity_violations())
    })
}

/// Crash between every pair of sub-writes of every logged transaction.
fn c8_crash_sweep() -> Outcome {
    let logs = [
        (
            scenarios::three_join_plan(),
            SimConfig::default(),
            FaultSpec::kill(FaultTarget::Worker(WorkerId(1)), Trigger::Progress(0.4))
                .and(FaultTarget::Random, Trigger::Progress(0.7)),
        ),
        (
            scenarios::walkthrough_plan(),
            SimConfig::default().with_batching(BatchingPolicy::Static(2)),
            FaultSpec::kill(
                FaultTarget::Worker(WorkerId(2)),
                Trigger::AfterCommit(TaskName::new(2, 2, 0)),
            ),
        ),
        (
            scenarios::aggregate_plan(3000),
            SimConfig::default().with_strategy(FtStrategy::RestartOnly),
            FaultSpec::kill(FaultTarget::Worker(WorkerId(0)), Trigger::Progress(0.5)),
        ),
    ];
    let mut points = 0u64;
    let mut txns = 0u64;
    for (qp, cfg, faults) in &logs {
        let out = run(&validated(qp), cfg, faults)?;
        let mut g = Gcs::new();
        for t in out.audit.transactions() {
            let txn = || Transaction {
                actor: t.actor,
                epoch: t.epoch,
                attempt: t.attempt,
                ops: t.ops.clone(),
            };
            let before = g.state().clone();
            for k in 0..t.ops.len() {
                ensure(g.apply_with_crash(txn(), t.time, k).is_err(), || {
                    format!("crash point {k} of txn {} applied", t.id)
                })?;
                ensure(g.state() == &before, || {
                    format!("txn {} left partial state at crash point {k}", t.id)
                })?;
                tables_agree(g.state()).map_err(|e| format!("txn {} crash point {k}: {e}", t.id))?;
                points += 1;
            }
            g.apply_transaction(txn(), t.time)
                .map_err(|e| format!("txn {} no longer applies: {e}", t.id))?;
            ensure(g.state().digest() == t.post, || {
                format!("txn {} replays to a different state", t.id)
            })?;
            tables_agree(g.state()).map_err(|e| format!("after txn {}: {e}", t.id))?;
            txns += 1;
        }
    }
    Ok(format!("{points} crash points over {txns} transactions"))
}

/// Same inputs, same bytes.
fn c9_determinism() -> Outcome {
    let plan = validated(&scenarios::three_join_plan());
    let faults = FaultSpec::kill(FaultTarget::Random, Trigger::Progress(0.3))
        .and(FaultTarget::Worker(WorkerId(2)), Trigger::Progress(0.6));
    let mut bytes = 0;
    for strategy in FtStrategy::ALL {
        let mut cfg = SimConfig::default().with_strategy(strategy).with_seed(7);
        cfg.read_lag_max = 0.05;
        let a = run(&plan, &cfg, &faults)?;
        let b = run(&plan, &cfg, &faults)?;
        let (la, lb) = (a.audit.to_jsonl(), b.audit.to_jsonl());
        ensure(la == lb, || format!("{strategy}: audit logs differ"))?;
        ensure(a.metrics.to_kv() == b.metrics.to_kv(), || {
            format!("{strategy}: metrics.txt differs")
        })?;
        ensure(a.metrics.to_json() == b.metrics.to_json(), || {
            format!("{strategy}: metrics.json differs")
        })?;
        bytes += la.len();
    }
    Ok(format!("3 strategies, {bytes} audit bytes identical across reruns"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 result equivalence under failures", c1_result_equivalence),
        ("2 recovery walkthrough", c2_walkthrough),
        ("3 restart-only overhead", c3_restart_overhead),
        ("4 rewind closure", c4_rewind_closure),
        ("5 write-ahead lineage vs spooling", c5_wal_vs_spool),
        ("6 pipelined vs blocking", c6_pipelined_vs_blocking),
        ("7 injective stateful placement", c7_injective_placement),
        ("8 crash-point sweep", c8_crash_sweep),
        ("9 deterministic replay", c9_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
