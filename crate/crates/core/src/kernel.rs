//! Deterministic operator kernels and the output partitioner.
//!
//! Every kernel is a pure function of `(state, input batches)`; replaying a
//! channel's consumption sequence from the empty state reproduces the same
//! state and the same output bytes.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::batch::{Batch, BatchError, Column, DataType, Scalar, Schema};
use crate::digest::{fnv1a64, Digest};
use crate::ids::{ChannelKey, StageId};
use crate::plan::{AggFunc, AggSpec, ArithOp, InputSide, MapFn, Operand, OperatorKind, Predicate, ValidatedPlan};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("{op} received a {state} state")]
    StateMismatch { op: &'static str, state: &'static str },
}

impl From<BatchError> for KernelError {
    fn from(e: BatchError) -> Self {
        KernelError::SchemaMismatch(e.to_string())
    }
}

/// Build-side rows plus a key index.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinTable {
    rows: Batch,
    key_col: usize,
    index: HashMap<Scalar, Vec<usize>>,
}

impl JoinTable {
    fn new(schema: Schema, key: &str) -> Result<Self, KernelError> {
        let key_col = schema
            .index_of(key)
            .ok_or_else(|| KernelError::SchemaMismatch(format!("missing join key `{key}`")))?;
        Ok(Self {
            rows: Batch::empty(schema),
            key_col,
            index: HashMap::new(),
        })
    }

    fn insert(&mut self, batch: &Batch) -> Result<(), KernelError> {
        if batch.schema() != self.rows.schema() {
            return Err(KernelError::SchemaMismatch(
                "build batch schema differs from table".into(),
            ));
        }
        let base = self.rows.row_count();
        let keys = &batch.columns()[self.key_col];
        for r in 0..batch.row_count() {
            self.index.entry(keys.value(r)).or_default().push(base + r);
        }
        self.rows.append(batch)?;
        Ok(())
    }

    pub fn rows(&self) -> &Batch {
        &self.rows
    }

    pub fn key_count(&self) -> usize {
        self.index.len()
    }

    pub fn contains_key(&self, key: &Scalar) -> bool {
        self.index.contains_key(key)
    }

    fn matches(&self, key: &Scalar) -> &[usize] {
        self.index.get(key).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Accumulator {
    Count(i64),
    Sum(i64),
    Min(Option<Scalar>),
    Max(Option<Scalar>),
}

impl Accumulator {
    fn new(func: AggFunc) -> Self {
        match func {
            AggFunc::Count => Accumulator::Count(0),
            AggFunc::Sum => Accumulator::Sum(0),
            AggFunc::Min => Accumulator::Min(None),
            AggFunc::Max => Accumulator::Max(None),
        }
    }

    fn update(&mut self, value: Option<Scalar>) {
        match (self, value) {
            (Accumulator::Count(n), _) => *n += 1,
            (Accumulator::Sum(s), Some(Scalar::Int64(v))) => *s = s.wrapping_add(v),
            (Accumulator::Min(m), Some(v)) => {
                if m.as_ref().is_none_or(|cur| v < *cur) {
                    *m = Some(v);
                }
            }
            (Accumulator::Max(m), Some(v)) => {
                if m.as_ref().is_none_or(|cur| v > *cur) {
                    *m = Some(v);
                }
            }
            _ => unreachable!("aggregate inputs are type-checked at validation"),
        }
    }

    fn finish(&self) -> Scalar {
        match self {
            Accumulator::Count(n) | Accumulator::Sum(n) => Scalar::Int64(*n),
            Accumulator::Min(v) | Accumulator::Max(v) => v.clone().expect("groups exist only after one update"),
        }
    }
}

/// Group key to accumulators, ordered so that finalization is deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggTable {
    groups: BTreeMap<Vec<Scalar>, Vec<Accumulator>>,
}

impl AggTable {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

/// The state variable threaded through a channel's tasks.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ChannelState {
    #[default]
    Empty,
    Join(JoinTable),
    Aggregate(AggTable),
}

impl ChannelState {
    fn kind(&self) -> &'static str {
        match self {
            ChannelState::Empty => "empty",
            ChannelState::Join(_) => "hash table",
            ChannelState::Aggregate(_) => "accumulator",
        }
    }

    /// Canonical digest of the state, independent of hash-map iteration order.
    pub fn digest(&self) -> Digest {
        match self {
            ChannelState::Empty => Digest::of(b"empty"),
            ChannelState::Join(t) => Digest::of_parts([b"join".as_slice(), &t.rows.encode()]),
            ChannelState::Aggregate(t) => {
                let mut buf = Vec::new();
                for (key, accs) in &t.groups {
                    for v in key {
                        encode_scalar(&mut buf, Some(v));
                    }
                    for acc in accs {
                        match acc {
                            Accumulator::Count(n) | Accumulator::Sum(n) => {
                                encode_scalar(&mut buf, Some(&Scalar::Int64(*n)))
                            }
                            Accumulator::Min(v) | Accumulator::Max(v) => encode_scalar(&mut buf, v.as_ref()),
                        }
                    }
                }
                Digest::of_parts([b"agg".as_slice(), &buf])
            }
        }
    }
}

fn encode_scalar(buf: &mut Vec<u8>, v: Option<&Scalar>) {
    match v {
        None => buf.push(0),
        Some(Scalar::Int64(x)) => {
            buf.push(1);
            buf.extend_from_slice(&x.to_le_bytes());
        }
        Some(Scalar::Float64(x)) => {
            buf.push(2);
            buf.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        Some(Scalar::Utf8(x)) => {
            buf.push(3);
            buf.extend_from_slice(&(x.len() as u32).to_le_bytes());
            buf.extend_from_slice(x.as_bytes());
        }
    }
}

/// Where a stage's output rows go.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Routing {
    /// `(consumer stage, consumer channel count)` in ascending stage order.
    pub consumers: Vec<(StageId, u32)>,
    pub partition_by: Option<String>,
}

impl Routing {
    pub fn sink() -> Self {
        Self {
            consumers: Vec::new(),
            partition_by: None,
        }
    }
}

/// Destination of one output partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Channel(ChannelKey),
    /// Final results collected by the submitting client.
    Client,
}

#[derive(Debug, Clone)]
pub struct KernelOutput {
    pub state: ChannelState,
    /// Exactly one (possibly empty) batch per destination, in destination order.
    pub outputs: Vec<(Destination, Batch)>,
    pub rows_in: usize,
}

/// The consumer channel a key hashes to: a fixed 64-bit multiplicative hash
/// of the key's bits, high word modulo the channel count.
pub fn partition_for(key: &Scalar, channels: u32) -> u32 {
    let bits = match key {
        Scalar::Int64(v) => *v as u64,
        Scalar::Float64(v) => v.to_bits(),
        Scalar::Utf8(s) => fnv1a64(s.as_bytes()),
    };
    let h = bits.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ((h >> 32) % u64::from(channels)) as u32
}

/// Splits `batch` into one partition per consumer channel.
pub fn partition_output(batch: &Batch, routing: &Routing) -> Result<Vec<(Destination, Batch)>, KernelError> {
    if routing.consumers.is_empty() {
        return Ok(vec![(Destination::Client, batch.clone())]);
    }
    let col = routing
        .partition_by
        .as_deref()
        .ok_or_else(|| KernelError::SchemaMismatch("no partitioning column".into()))?;
    let keys = batch.column(col)?;
    let mut out = Vec::new();
    for &(stage, channels) in &routing.consumers {
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); channels as usize];
        for r in 0..batch.row_count() {
            buckets[partition_for(&keys.value(r), channels) as usize].push(r);
        }
        for (c, rows) in buckets.iter().enumerate() {
            out.push((Destination::Channel(ChannelKey::new(stage, c as u32)), batch.take(rows)));
        }
    }
    Ok(out)
}

/// Everything a channel needs to run its stage's operator.
#[derive(Debug, Clone)]
pub struct StageKernel {
    pub op: OperatorKind,
    pub output_schema: Schema,
    pub routing: Routing,
    /// Build-side key column, for probe stages.
    pub build_key: Option<String>,
}

impl StageKernel {
    pub fn for_stage(plan: &ValidatedPlan, stage: StageId) -> Self {
        let info = plan.stage(stage);
        let build_key = match &info.spec.operator {
            OperatorKind::HashJoinProbe { build_stage, .. } => match &plan.stage(*build_stage).spec.operator {
                OperatorKind::HashJoinBuild { key } => Some(key.clone()),
                _ => None,
            },
            _ => None,
        };
        Self {
            op: info.spec.operator.clone(),
            output_schema: info.output_schema.clone(),
            routing: Routing {
                consumers: info
                    .consumers
                    .iter()
                    .map(|&c| (c, plan.stage(c).spec.channels))
                    .collect(),
                partition_by: info.spec.partition_by.clone(),
            },
            build_key,
        }
    }

    /// Kernels for every stage of `plan`.
    pub fn for_plan(plan: &ValidatedPlan) -> BTreeMap<StageId, StageKernel> {
        plan.stages().map(|s| (s.id(), Self::for_stage(plan, s.id()))).collect()
    }
}

/// Applies the stage operator to `inputs` starting from `state`.
///
/// `side` tells a probe stage whether the inputs are build rows; `finalize`
/// is set on a channel's last task and makes stateful operators emit their
/// accumulated result. Build and aggregate stages emit nothing before that.
pub fn execute_kernel(
    kernel: &StageKernel,
    state: ChannelState,
    inputs: &[Batch],
    side: InputSide,
    finalize: bool,
) -> Result<KernelOutput, KernelError> {
    let rows_in = inputs.iter().map(Batch::row_count).sum();
    let (state, rows) = run_operator(kernel, state, inputs, side, finalize)?;
    if rows.schema() != &kernel.output_schema {
        return Err(KernelError::SchemaMismatch(format!(
            "{} produced an unexpected schema",
            kernel.op.name()
        )));
    }
    let outputs = partition_output(&rows, &kernel.routing)?;
    Ok(KernelOutput {
        state,
        outputs,
        rows_in,
    })
}

fn run_operator(
    kernel: &StageKernel,
    state: ChannelState,
    inputs: &[Batch],
    side: InputSide,
    finalize: bool,
) -> Result<(ChannelState, Batch), KernelError> {
    let op = &kernel.op;
    let output_schema = &kernel.output_schema;
    match op {
        OperatorKind::InputReader { .. } => {
            expect_empty(op, &state)?;
            let refs: Vec<&Batch> = inputs.iter().collect();
            Ok((state, Batch::concat(output_schema, &refs)?))
        }
        OperatorKind::Filter { predicate } => {
            expect_empty(op, &state)?;
            let mut parts = Vec::with_capacity(inputs.len());
            for b in inputs {
                parts.push(filter(b, predicate)?);
            }
            let refs: Vec<&Batch> = parts.iter().collect();
            Ok((state, Batch::concat(output_schema, &refs)?))
        }
        OperatorKind::Map { function } => {
            expect_empty(op, &state)?;
            let mut parts = Vec::with_capacity(inputs.len());
            for b in inputs {
                parts.push(map(b, function, output_schema)?);
            }
            let refs: Vec<&Batch> = parts.iter().collect();
            Ok((state, Batch::concat(output_schema, &refs)?))
        }
        OperatorKind::HashJoinBuild { key } => {
            let mut table = match state {
                ChannelState::Empty => JoinTable::new(output_schema.clone(), key)?,
                ChannelState::Join(t) => t,
                other => return Err(state_mismatch(op, &other)),
            };
            for b in inputs {
                table.insert(b)?;
            }
            let out = if finalize {
                table.rows.clone()
            } else {
                Batch::empty(output_schema.clone())
            };
            Ok((ChannelState::Join(table), out))
        }
        OperatorKind::HashJoinProbe { key, .. } => match side {
            InputSide::Build => {
                let mut table = match state {
                    ChannelState::Join(t) => t,
                    ChannelState::Empty => match inputs.first() {
                        Some(b) => {
                            let build_key = kernel
                                .build_key
                                .as_deref()
                                .ok_or_else(|| KernelError::SchemaMismatch("probe stage without a build key".into()))?;
                            JoinTable::new(b.schema().clone(), build_key)?
                        }
                        None => return Ok((ChannelState::Empty, Batch::empty(output_schema.clone()))),
                    },
                    other => return Err(state_mismatch(op, &other)),
                };
                for b in inputs {
                    table.insert(b)?;
                }
                Ok((ChannelState::Join(table), Batch::empty(output_schema.clone())))
            }
            InputSide::Data => {
                let mut parts = Vec::with_capacity(inputs.len());
                match &state {
                    ChannelState::Join(table) => {
                        for b in inputs {
                            parts.push(probe(table, b, key, output_schema)?);
                        }
                    }
                    // No build rows reached this channel: inner join is empty.
                    ChannelState::Empty => {}
                    other => return Err(state_mismatch(op, other)),
                }
                let refs: Vec<&Batch> = parts.iter().collect();
                Ok((state, Batch::concat(output_schema, &refs)?))
            }
        },
        OperatorKind::Aggregate { group_by, aggregates } => {
            let mut table = match state {
                ChannelState::Empty => AggTable::default(),
                ChannelState::Aggregate(t) => t,
                other => return Err(state_mismatch(op, &other)),
            };
            for b in inputs {
                accumulate(&mut table, b, group_by, aggregates)?;
            }
            let out = if finalize {
                let rows: Vec<Vec<Scalar>> = table
                    .groups
                    .iter()
                    .map(|(k, accs)| k.iter().cloned().chain(accs.iter().map(Accumulator::finish)).collect())
                    .collect();
                Batch::from_rows(output_schema.clone(), &rows)?
            } else {
                Batch::empty(output_schema.clone())
            };
            Ok((ChannelState::Aggregate(table), out))
        }
    }
}

fn expect_empty(op: &OperatorKind, state: &ChannelState) -> Result<(), KernelError> {
    match state {
        ChannelState::Empty => Ok(()),
        other => Err(state_mismatch(op, other)),
    }
}

fn state_mismatch(op: &OperatorKind, state: &ChannelState) -> KernelError {
    KernelError::StateMismatch {
        op: op.name(),
        state: state.kind(),
    }
}

fn filter(batch: &Batch, predicate: &Predicate) -> Result<Batch, KernelError> {
    let col = batch.column(&predicate.column)?;
    let literal = match (col.data_type(), &predicate.value) {
        (DataType::Float64, Scalar::Int64(v)) => Scalar::Float64(*v as f64),
        (t, v) if t == v.data_type() => v.clone(),
        (t, v) => {
            return Err(KernelError::SchemaMismatch(format!(
                "cannot compare {t:?} with {:?}",
                v.data_type()
            )))
        }
    };
    let keep: Vec<usize> = (0..batch.row_count())
        .filter(|&r| predicate.op.holds(col.value(r).cmp(&literal)))
        .collect();
    Ok(batch.take(&keep))
}

fn operand_values(batch: &Batch, op: &Operand) -> Result<Column, KernelError> {
    match op {
        Operand::Column(name) => Ok(batch.column(name)?.clone()),
        Operand::Literal(v) => {
            let mut c = Column::empty(v.data_type());
            for _ in 0..batch.row_count() {
                c.push(v.clone());
            }
            Ok(c)
        }
    }
}

fn as_f64(c: &Column, r: usize) -> f64 {
    match c {
        Column::Int64(v) => v[r] as f64,
        Column::Float64(v) => v[r],
        Column::Utf8(_) => unreachable!("validated"),
    }
}

fn map(batch: &Batch, function: &MapFn, output_schema: &Schema) -> Result<Batch, KernelError> {
    match function {
        MapFn::Project { columns } => {
            let cols = columns
                .iter()
                .map(|c| batch.column(c).cloned())
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Batch::try_new(output_schema.clone(), cols)?)
        }
        MapFn::Arith { left, op, right, .. } => {
            let l = operand_values(batch, left)?;
            let r = operand_values(batch, right)?;
            let n = batch.row_count();
            let out = match (&l, &r) {
                (Column::Int64(a), Column::Int64(b)) => Column::Int64(
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| match op {
                            ArithOp::Add => x.wrapping_add(*y),
                            ArithOp::Sub => x.wrapping_sub(*y),
                            ArithOp::Mul => x.wrapping_mul(*y),
                        })
                        .collect(),
                ),
                _ => Column::Float64(
                    (0..n)
                        .map(|i| {
                            let (x, y) = (as_f64(&l, i), as_f64(&r, i));
                            match op {
                                ArithOp::Add => x + y,
                                ArithOp::Sub => x - y,
                                ArithOp::Mul => x * y,
                            }
                        })
                        .collect(),
                ),
            };
            let mut cols = batch.columns().to_vec();
            cols.push(out);
            Ok(Batch::try_new(output_schema.clone(), cols)?)
        }
    }
}

fn probe(table: &JoinTable, batch: &Batch, key: &str, output_schema: &Schema) -> Result<Batch, KernelError> {
    let keys = batch.column(key)?;
    let build = &table.rows;
    let build_cols: Vec<usize> = (0..build.schema().len()).filter(|&c| c != table.key_col).collect();
    let mut columns: Vec<Column> = output_schema
        .fields
        .iter()
        .map(|f| Column::empty(f.data_type))
        .collect();
    let probe_width = batch.schema().len();
    for r in 0..batch.row_count() {
        for &b in table.matches(&keys.value(r)) {
            for (c, col) in batch.columns().iter().enumerate() {
                columns[c].push(col.value(r));
            }
            for (j, &bc) in build_cols.iter().enumerate() {
                columns[probe_width + j].push(build.columns()[bc].value(b));
            }
        }
    }
    Ok(Batch::try_new(output_schema.clone(), columns)?)
}

fn accumulate(
    table: &mut AggTable,
    batch: &Batch,
    group_by: &[String],
    aggregates: &[AggSpec],
) -> Result<(), KernelError> {
    let keys = group_by
        .iter()
        .map(|g| batch.column(g))
        .collect::<Result<Vec<_>, _>>()?;
    let inputs = aggregates
        .iter()
        .map(|a| match (a.func, &a.column) {
            (AggFunc::Count, _) | (_, None) => Ok(None),
            (_, Some(c)) => batch.column(c).map(Some),
        })
        .collect::<Result<Vec<_>, _>>()?;
    for r in 0..batch.row_count() {
        let key: Vec<Scalar> = keys.iter().map(|c| c.value(r)).collect();
        let accs = table
            .groups
            .entry(key)
            .or_insert_with(|| aggregates.iter().map(|a| Accumulator::new(a.func)).collect());
        for (acc, input) in accs.iter_mut().zip(&inputs) {
            acc.update(input.map(|c| c.value(r)));
        }
    }
    Ok(())
}
