//! The event loop. Single-threaded; every source of nondeterminism is the
//! seeded RNG, and events at equal times run in scheduling order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FaultSpec, FaultTarget, SimConfig, Trigger};
use super::metrics::RunMetrics;
use super::SimError;
use crate::batch::Batch;
use crate::coordinator::{reconcile, ClusterView, RecoveryError};
use crate::digest::Digest;
use crate::gcs::{
    Actor, AuditRecord, CommitRequest, ConsumedInput, ExecKind, ExecRecord, Gcs, LineageEntry, Op, OutputDigest,
    QueuedTask, Transaction,
};
use crate::ids::{ticks, ChannelKey, StageId, TaskName, Ticks, WorkerId};
use crate::kernel::{Destination, StageKernel};
use crate::plan::ValidatedPlan;
use crate::reference::{result_digest, rows_of};
use crate::worker::{Cluster, ExecContext, FtStrategy, PrepareOutcome, Prepared, PushError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Poll { worker: WorkerId, token: u64 },
    Deliver { attempt: u64 },
    Commit { attempt: u64 },
    Detect,
    Kill { fault: usize },
    Reconcile,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Channel(ChannelKey),
    Aux(QueuedTask),
}

impl Slot {
    fn of(t: &QueuedTask) -> Slot {
        if t.is_execute() {
            Slot::Channel(t.name.channel_key())
        } else {
            Slot::Aux(t.clone())
        }
    }
}

struct Attempt {
    worker: WorkerId,
    slot: Slot,
    prepared: Box<Prepared>,
    epoch: u64,
    started: Ticks,
}

#[derive(Default)]
struct WorkerSim {
    alive: bool,
    cpu_free: Ticks,
    net_free: Ticks,
    disk_free: Ticks,
    poll_token: u64,
    next_poll: Option<Ticks>,
    inflight: BTreeMap<Slot, u64>,
    acked_epoch: Option<u64>,
}

enum Phase {
    Running,
    Barrier { reconcile_scheduled: bool },
}

/// Fault with its trigger resolved to something the loop can check.
#[derive(Debug, Clone, Copy)]
enum Armed {
    At(Ticks),
    Count(u64),
    After(TaskName),
}

pub(crate) struct Sim<'a> {
    plan: &'a ValidatedPlan,
    kernels: BTreeMap<StageId, StageKernel>,
    cfg: &'a SimConfig,
    faults: Vec<(FaultTarget, Armed, bool)>,
    rng: ChaCha8Rng,
    now: Ticks,
    seq: u64,
    events: BinaryHeap<Reverse<(Ticks, u64, Ev)>>,
    gcs: Gcs,
    cluster: Cluster,
    workers: BTreeMap<WorkerId, WorkerSim>,
    heartbeats: BTreeMap<WorkerId, Ticks>,
    detected: BTreeSet<WorkerId>,
    next_worker: u32,
    attempts: BTreeMap<u64, Attempt>,
    next_attempt: u64,
    phase: Phase,
    last_progress: Ticks,
    last_commit: Ticks,
    done: bool,
    stage_rank: BTreeMap<StageId, usize>,
    metrics: RunMetrics,
}

pub(crate) struct SimOutput {
    pub result: BTreeMap<StageId, Batch>,
    pub metrics: RunMetrics,
    pub gcs: Gcs,
}

impl<'a> Sim<'a> {
    pub(crate) fn new(
        plan: &'a ValidatedPlan,
        cfg: &'a SimConfig,
        faults: &FaultSpec,
        calibrated: Option<Ticks>,
    ) -> Self {
        let armed = faults
            .faults
            .iter()
            .map(|f| {
                let a = match f.trigger {
                    Trigger::Progress(p) => Armed::At((calibrated.unwrap_or(0) as f64 * p).round() as Ticks),
                    Trigger::Time(t) => Armed::At(ticks(t)),
                    Trigger::TaskCount(n) => Armed::Count(n),
                    Trigger::AfterCommit(t) => Armed::After(t),
                };
                (f.target, a, false)
            })
            .collect();
        let ids: Vec<WorkerId> = (0..cfg.workers).map(WorkerId).collect();
        let metrics = RunMetrics::new(cfg.strategy, cfg.batching, cfg.blocking, cfg.workers, cfg.seed);
        Self {
            plan,
            kernels: StageKernel::for_plan(plan),
            cfg,
            faults: armed,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            now: 0,
            seq: 0,
            events: BinaryHeap::new(),
            gcs: Gcs::new(),
            cluster: Cluster::new(ids.iter().copied()),
            workers: ids
                .iter()
                .map(|&w| {
                    (
                        w,
                        WorkerSim {
                            alive: true,
                            ..WorkerSim::default()
                        },
                    )
                })
                .collect(),
            heartbeats: ids.iter().map(|&w| (w, 0)).collect(),
            detected: BTreeSet::new(),
            next_worker: cfg.workers,
            attempts: BTreeMap::new(),
            next_attempt: 0,
            phase: Phase::Running,
            last_progress: 0,
            last_commit: 0,
            done: false,
            stage_rank: plan
                .topological_order()
                .iter()
                .enumerate()
                .map(|(i, s)| (*s, i))
                .collect(),
            metrics,
        }
    }

    fn schedule(&mut self, at: Ticks, ev: Ev) {
        self.seq += 1;
        self.events.push(Reverse((at, self.seq, ev)));
    }

    fn schedule_poll(&mut self, w: WorkerId, at: Ticks) {
        let ws = self.workers.get_mut(&w).expect("known worker");
        if ws.next_poll.is_some_and(|t| t <= at) {
            return;
        }
        ws.poll_token += 1;
        ws.next_poll = Some(at);
        let token = ws.poll_token;
        self.schedule(at, Ev::Poll { worker: w, token });
    }

    pub(crate) fn run(mut self) -> Result<SimOutput, SimError> {
        let ids: Vec<WorkerId> = self.workers.keys().copied().collect();
        let ops = crate::coordinator::bootstrap_ops(self.plan, &ids);
        self.gcs
            .apply_transaction(Transaction::coordinator(0, ops), 0)
            .map_err(|e| SimError::Internal(e.to_string()))?;
        for w in ids {
            self.schedule_poll(w, 0);
        }
        self.schedule(ticks(self.cfg.cost.detection_interval), Ev::Detect);
        for i in 0..self.faults.len() {
            if let (_, Armed::At(t), _) = self.faults[i] {
                self.schedule(t, Ev::Kill { fault: i });
            }
        }
        self.check_done();
        while !self.done {
            let Some(Reverse((t, _, ev))) = self.events.pop() else {
                return Err(self.deadlock("event queue drained"));
            };
            self.now = t;
            match ev {
                Ev::Poll { worker, token } => self.on_poll(worker, token)?,
                Ev::Deliver { attempt } => self.on_deliver(attempt)?,
                Ev::Commit { attempt } => self.on_commit(attempt)?,
                Ev::Detect => self.on_detect()?,
                Ev::Kill { fault } => self.on_kill(fault),
                Ev::Reconcile => self.on_reconcile()?,
            }
        }
        Ok(self.finish())
    }

    fn live_registered(&self) -> impl Iterator<Item = WorkerId> + '_ {
        self.workers.keys().copied().filter(|w| !self.detected.contains(w))
    }

    fn cancel_all(&mut self, w: WorkerId) {
        let ws = self.workers.get_mut(&w).expect("known worker");
        let slots = std::mem::take(&mut ws.inflight);
        for a in slots.into_values() {
            self.attempts.remove(&a);
            self.metrics.aborted_attempts += 1;
        }
        let ws = self.workers.get_mut(&w).expect("known worker");
        ws.cpu_free = ws.cpu_free.min(self.now);
        ws.net_free = ws.net_free.min(self.now);
        ws.disk_free = ws.disk_free.min(self.now);
    }

    fn drop_attempt(&mut self, id: u64) -> Option<Attempt> {
        let a = self.attempts.remove(&id)?;
        if let Some(ws) = self.workers.get_mut(&a.worker) {
            ws.inflight.remove(&a.slot);
        }
        Some(a)
    }

    /// Stage-at-a-time mode: a stage may run once every stage before it in
    /// topological order has committed all its sentinels.
    fn blocking_frontier(&self) -> usize {
        let order = self.plan.topological_order();
        order
            .iter()
            .position(|s| {
                self.plan
                    .stage(*s)
                    .channels()
                    .any(|c| self.gcs.state().sentinel(c).is_none())
            })
            .unwrap_or(order.len())
    }

    fn on_poll(&mut self, w: WorkerId, token: u64) -> Result<(), SimError> {
        let ws = &self.workers[&w];
        if !ws.alive || ws.poll_token != token {
            return Ok(());
        }
        self.workers.get_mut(&w).unwrap().next_poll = None;
        self.heartbeats.insert(w, self.now);
        let interval = ticks(self.cfg.cost.poll_interval);
        let resp = self.gcs.poll_tasks(w);
        if resp.control_flag {
            if self.workers[&w].acked_epoch != Some(resp.epoch) {
                self.cancel_all(w);
                let txn = Transaction {
                    actor: Actor::Worker(w),
                    epoch: resp.epoch,
                    attempt: None,
                    ops: vec![Op::Ack { worker: w }],
                };
                if self.gcs.apply_transaction(txn, self.now).is_ok() {
                    self.workers.get_mut(&w).unwrap().acked_epoch = Some(resp.epoch);
                }
                self.maybe_reconcile();
            }
            self.schedule_poll(w, self.now + interval);
            return Ok(());
        }
        for (c, owner) in self.gcs.state().mappings().collect::<Vec<_>>() {
            if owner == w {
                let g = self.gcs.state().generation(c);
                self.cluster.worker_mut(w).sync_channel(c, g);
            }
        }
        let frontier = if self.cfg.blocking {
            self.blocking_frontier()
        } else {
            usize::MAX
        };
        let lag = if self.cfg.read_lag_max > 0.0 {
            ticks(self.rng.gen_range(0.0..=self.cfg.read_lag_max))
        } else {
            0
        };
        let cutoff = self.now.saturating_sub(lag);
        for task in resp.tasks {
            let slot = Slot::of(&task);
            if self.workers[&w].inflight.contains_key(&slot) {
                continue;
            }
            if task.is_execute() && self.stage_rank[&task.name.stage] > frontier {
                continue;
            }
            let outcome = {
                let ctx = ExecContext {
                    plan: self.plan,
                    kernels: &self.kernels,
                    gcs: self.gcs.state(),
                    cutoff,
                    policy: self.cfg.batching,
                    durable: &self.cluster.durable,
                };
                self.cluster.worker(w).prepare(&ctx, &task)?
            };
            if let PrepareOutcome::Ready(p) = outcome {
                self.start_attempt(w, slot, p, resp.epoch);
            }
        }
        self.schedule_poll(w, self.now + interval);
        Ok(())
    }

    fn start_attempt(&mut self, w: WorkerId, slot: Slot, p: Box<Prepared>, epoch: u64) {
        let cost = &self.cfg.cost;
        let cpu = cost.task_overhead
            + match p.kind {
                ExecKind::Replay => 0.0,
                _ => cost.kernel_per_row * p.rows_in as f64,
            };
        let mut net = 0.0;
        for out in p.pushed() {
            let local = matches!(out.dest, Destination::Channel(c) if self.gcs.state().mapping(c) == Some(w));
            if !local {
                net += cost.net_per_partition + cost.net_per_byte * out.size() as f64;
            }
        }
        let mut disk = 0.0;
        if p.kind != ExecKind::Replay {
            match self.cfg.strategy {
                FtStrategy::Spooling => {
                    for out in &p.outputs {
                        net += cost.durable_per_partition + cost.durable_per_byte * out.size() as f64;
                    }
                }
                FtStrategy::WriteAheadLineage => disk = cost.disk_per_byte * p.output_bytes() as f64,
                FtStrategy::RestartOnly => {}
            }
        }
        let now = self.now;
        let ws = self.workers.get_mut(&w).unwrap();
        let cpu_end = ws.cpu_free.max(now) + ticks(cpu);
        ws.cpu_free = cpu_end;
        let net_end = ws.net_free.max(cpu_end) + ticks(net);
        ws.net_free = net_end;
        let disk_end = ws.disk_free.max(cpu_end) + ticks(disk);
        ws.disk_free = disk_end;
        let id = self.next_attempt;
        self.next_attempt += 1;
        ws.inflight.insert(slot.clone(), id);
        self.attempts.insert(
            id,
            Attempt {
                worker: w,
                slot,
                prepared: p,
                epoch,
                started: now,
            },
        );
        let commit_at = net_end.max(disk_end) + ticks(cost.gcs_txn);
        self.schedule(net_end, Ev::Deliver { attempt: id });
        self.schedule(commit_at, Ev::Commit { attempt: id });
    }

    fn on_deliver(&mut self, id: u64) -> Result<(), SimError> {
        let Some(a) = self.attempts.get(&id) else {
            return Ok(());
        };
        let (w, name) = (a.worker, a.prepared.task.name);
        match self.cluster.push_outputs(self.gcs.state(), &a.prepared) {
            Ok(_) => Ok(()),
            Err(PushError::TargetDown(target)) => {
                self.gcs.record(AuditRecord::PushFailed {
                    time: self.now,
                    attempt: id,
                    task: name,
                    worker: w,
                    target,
                });
                self.metrics.push_failures += 1;
                self.drop_attempt(id);
                Ok(())
            }
            Err(PushError::Unmapped(c)) => Err(SimError::Internal(format!("channel {c} has no worker"))),
        }
    }

    fn on_commit(&mut self, id: u64) -> Result<(), SimError> {
        let Some(a) = self.drop_attempt(id) else {
            return Ok(());
        };
        let w = a.worker;
        let p = &a.prepared;
        let durable_before = self.cluster.durable.bytes_written();
        let local_before = self.cluster.worker(w).backups.bytes_written();
        let location = self.cluster.backup_outputs(w, self.cfg.strategy, p);
        let result = match p.kind {
            ExecKind::Execute => {
                let req = CommitRequest {
                    worker: w,
                    task: p.task.clone(),
                    lineage: p.lineage.expect("execute attempts carry lineage"),
                    sentinel: p.is_final.then_some(p.task.name.seq + 1),
                    location,
                    epoch: a.epoch,
                    attempt: id,
                };
                self.gcs.commit_task_completion(&req, self.now)
            }
            _ => self.gcs.commit_auxiliary(w, &p.task, location, a.epoch, id, self.now),
        };
        match result {
            Ok(_) => {
                self.cluster.worker_mut(w).apply_commit(self.plan, p);
                let m = &mut self.metrics;
                m.bytes_durable += self.cluster.durable.bytes_written() - durable_before;
                m.bytes_local += self.cluster.worker(w).backups.bytes_written() - local_before;
                match p.kind {
                    ExecKind::Execute => {
                        m.tasks_committed += 1;
                        m.bytes_pushed += p.output_bytes();
                    }
                    ExecKind::Replay => {
                        m.replays_executed += 1;
                        m.bytes_replayed += p.output_bytes();
                    }
                    ExecKind::Input => {
                        m.inputs_executed += 1;
                        m.bytes_pushed += p.pushed().map(|o| o.size()).sum::<u64>();
                    }
                }
                self.gcs.record(AuditRecord::Exec(ExecRecord {
                    time: self.now,
                    started: a.started,
                    worker: w,
                    attempt: id,
                    epoch: a.epoch,
                    task: p.task.name,
                    kind: p.kind,
                    prescribed: p.prescribed(),
                    lineage: p.lineage.map(|l: LineageEntry| (l.upstream, l.count)),
                    consumed: p
                        .consumed
                        .iter()
                        .map(|(t, d)| ConsumedInput { task: *t, digest: *d })
                        .collect(),
                    outputs: p
                        .pushed()
                        .map(|o| OutputDigest {
                            dest: o.dest,
                            digest: o.digest,
                        })
                        .collect(),
                    is_final: p.is_final,
                }));
                self.last_progress = self.now;
                self.last_commit = self.now;
                if p.kind == ExecKind::Execute {
                    self.fire_commit_faults(p.task.name);
                }
                self.check_done();
                self.schedule_poll(w, self.now);
            }
            Err(_) => {
                self.metrics.aborted_attempts += 1;
            }
        }
        Ok(())
    }

    fn fire_commit_faults(&mut self, name: TaskName) {
        let count = self.metrics.tasks_committed;
        for i in 0..self.faults.len() {
            let (_, armed, fired) = self.faults[i];
            let hit = match armed {
                Armed::Count(n) => count == n,
                Armed::After(t) => t == name,
                Armed::At(_) => false,
            };
            if hit && !fired {
                self.faults[i].2 = true;
                self.schedule(self.now, Ev::Kill { fault: i });
            }
        }
    }

    fn on_kill(&mut self, fault: usize) {
        if self.done {
            return;
        }
        self.faults[fault].2 = true;
        let alive: Vec<WorkerId> = self.workers.iter().filter(|(_, s)| s.alive).map(|(w, _)| *w).collect();
        let target = match self.faults[fault].0 {
            FaultTarget::Worker(w) if alive.contains(&w) => w,
            FaultTarget::Worker(_) => return,
            FaultTarget::Random if alive.is_empty() => return,
            FaultTarget::Random => alive[self.rng.gen_range(0..alive.len())],
        };
        self.cancel_all(target);
        let ws = self.workers.get_mut(&target).unwrap();
        ws.alive = false;
        ws.next_poll = None;
        self.cluster.kill(target);
        self.metrics.faults_injected += 1;
        self.gcs.record(AuditRecord::Fault {
            time: self.now,
            worker: target,
        });
    }

    fn on_detect(&mut self) -> Result<(), SimError> {
        if self.done {
            return Ok(());
        }
        let interval = ticks(self.cfg.cost.detection_interval);
        let suspects = crate::coordinator::detect_failures(&self.heartbeats, &self.detected, self.now, interval);
        if !suspects.is_empty() {
            for &w in &suspects {
                self.detected.insert(w);
                self.heartbeats.remove(&w);
                if self.cfg.replace_failed_workers {
                    let fresh = WorkerId(self.next_worker);
                    self.next_worker += 1;
                    self.cluster.add_worker(fresh);
                    self.workers.insert(
                        fresh,
                        WorkerSim {
                            alive: true,
                            ..WorkerSim::default()
                        },
                    );
                    self.heartbeats.insert(fresh, self.now);
                    self.gcs.record(AuditRecord::Join {
                        time: self.now,
                        worker: fresh,
                    });
                    self.schedule_poll(fresh, self.now);
                }
            }
            if let Phase::Running = self.phase {
                self.gcs
                    .set_control_flag(self.now)
                    .map_err(|e| SimError::Internal(e.to_string()))?;
                self.phase = Phase::Barrier {
                    reconcile_scheduled: false,
                };
            }
            self.maybe_reconcile();
        }
        if self.now.saturating_sub(self.last_progress) > ticks(self.cfg.stall_timeout) {
            return Err(self.deadlock("no progress within the stall timeout"));
        }
        self.schedule(self.now + interval, Ev::Detect);
        Ok(())
    }

    fn all_acked(&self) -> bool {
        let acks = self.gcs.state().acks();
        self.live_registered().all(|w| acks.contains(&w))
    }

    fn maybe_reconcile(&mut self) {
        if let Phase::Barrier { reconcile_scheduled } = self.phase {
            if !reconcile_scheduled && self.all_acked() {
                self.phase = Phase::Barrier {
                    reconcile_scheduled: true,
                };
                self.schedule(self.now + ticks(self.cfg.cost.gcs_txn), Ev::Reconcile);
            }
        }
    }

    fn on_reconcile(&mut self) -> Result<(), SimError> {
        if !matches!(self.phase, Phase::Barrier { .. }) {
            return Ok(());
        }
        if !self.all_acked() {
            self.phase = Phase::Barrier {
                reconcile_scheduled: false,
            };
            return Ok(());
        }
        let view = ClusterView::from_gcs(
            self.gcs.state(),
            self.live_registered().collect(),
            self.detected.clone(),
        );
        let record = match reconcile(&mut self.gcs, self.plan, &view, self.cfg.strategy, self.now) {
            Ok(r) => r,
            Err(RecoveryError::Unrecoverable { task }) => return Err(SimError::Unrecoverable(task)),
            Err(RecoveryError::NoLiveWorkers) => return Err(SimError::NoLiveWorkers),
            Err(e) => return Err(SimError::Internal(e.to_string())),
        };
        let m = &mut self.metrics;
        m.recoveries += 1;
        if record.restart {
            m.restarts += 1;
            self.cluster.client.clear();
        }
        m.rewinds_planned += record.rewinds.len() as u64;
        m.replays_planned += record.replays.len() as u64;
        m.inputs_planned += record.inputs.len() as u64;
        m.reconstructed += record.reconstructed;
        self.gcs.record(AuditRecord::Recovery(record));
        self.phase = Phase::Running;
        self.last_progress = self.now;
        let live: Vec<WorkerId> = self.live_registered().collect();
        for w in live {
            if self.workers[&w].alive {
                self.schedule_poll(w, self.now);
            }
        }
        Ok(())
    }

    fn check_done(&mut self) {
        if self.gcs.state().control_flag() {
            return;
        }
        let all = self.plan.channels().all(|c| self.gcs.state().sentinel(c).is_some());
        if all {
            self.done = true;
        }
    }

    fn collect_result(&self) -> BTreeMap<StageId, Batch> {
        let state = self.gcs.state();
        self.plan
            .sink_stages()
            .map(|s| {
                let mut parts: Vec<Arc<Batch>> = Vec::new();
                for c in s.channels() {
                    for seq in 0..state.sentinel(c).unwrap_or(0) {
                        let t = c.task(seq);
                        if state.lineage(t).is_some() {
                            if let Some(b) = self.cluster.client.get(t) {
                                parts.push(b.clone());
                            }
                        }
                    }
                }
                let refs: Vec<&Batch> = parts.iter().map(|b| b.as_ref()).collect();
                let batch = Batch::concat(&s.output_schema, &refs).expect("sink partitions share the stage schema");
                (s.id(), batch)
            })
            .collect()
    }

    fn finish(mut self) -> SimOutput {
        let result = self.collect_result();
        let rows = result.iter().map(|(s, b)| (*s, rows_of([b]))).collect();
        let digest: Digest = result_digest(&rows);
        self.gcs.record(AuditRecord::Done {
            time: self.last_commit,
            result: digest,
        });
        let m = &mut self.metrics;
        m.result = digest;
        m.makespan_ticks = self.last_commit;
        for t in self.gcs.audit().transactions() {
            for op in &t.ops {
                if let Op::InsertLineage { .. } = op {
                    m.lineage_bytes += LineageEntry::ENCODED_LEN as u64;
                }
            }
        }
        m.gcs_transactions = self.gcs.transactions_applied();
        m.gcs_rejected = self
            .gcs
            .audit()
            .records()
            .iter()
            .filter(|r| matches!(r, AuditRecord::Rejected { .. }))
            .count() as u64;
        SimOutput {
            result,
            metrics: self.metrics,
            gcs: self.gcs,
        }
    }

    fn deadlock(&self, why: &str) -> SimError {
        let state = self.gcs.state();
        let mut dump = String::new();
        writeln!(dump, "{why} at t={}", crate::ids::units(self.now)).unwrap();
        writeln!(dump, "epoch={} flag={}", state.epoch(), state.control_flag()).unwrap();
        for (w, q) in state.queues() {
            let alive = self.workers.get(&w).is_some_and(|s| s.alive);
            writeln!(dump, "worker {w} alive={alive} queue={q:?}").unwrap();
        }
        for c in self.plan.channels() {
            writeln!(
                dump,
                "channel {c} mapped={:?} frontier={:?} sentinel={:?}",
                state.mapping(c),
                state.frontier(c),
                state.sentinel(c)
            )
            .unwrap();
        }
        SimError::Deadlock(dump)
    }
}
