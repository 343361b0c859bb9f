//! Query plans: DAGs of stages, their operators and validation.

mod dataset;
mod file;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{Batch, DataType, Field, Scalar, Schema};
use crate::ids::{ChannelKey, StageId};

pub use dataset::{ColumnGen, Dataset, DatasetSource};
pub use file::{PlanFileError, PLAN_FORMAT_VERSION};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("plan has no stages")]
    Empty,
    #[error("stage {0} is declared more than once")]
    DuplicateStage(StageId),
    #[error("stage {0} must have at least one channel")]
    ZeroChannels(StageId),
    #[error("edge references unknown stage {stage}")]
    DanglingEdge { stage: StageId },
    #[error("plan contains a cycle through stage {stage}")]
    CyclicPlan { stage: StageId },
    #[error("stage {stage} feeds downstream stages but declares no partitioning column")]
    MissingPartitioner { stage: StageId },
    #[error("stage {stage}: {reason}")]
    InvalidOperator { stage: StageId, reason: String },
    #[error("stage {stage}: {reason}")]
    SchemaMismatch { stage: StageId, reason: String },
    #[error("stage {stage}: rows are not co-partitioned: {reason}")]
    PartitionMismatch { stage: StageId, reason: String },
    #[error("stage {stage} reads unknown dataset `{dataset}`")]
    UnknownDataset { stage: StageId, dataset: String },
    #[error("dataset `{dataset}`: {reason}")]
    Dataset { dataset: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CmpOp::Eq => ord == Equal,
            CmpOp::Ne => ord != Equal,
            CmpOp::Lt => ord == Less,
            CmpOp::Le => ord != Greater,
            CmpOp::Gt => ord == Greater,
            CmpOp::Ge => ord != Less,
        }
    }
}

/// `column <op> value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub column: String,
    pub op: CmpOp,
    pub value: Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Column(String),
    Literal(Scalar),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapFn {
    /// Keep the listed columns, in that order.
    Project { columns: Vec<String> },
    /// Append `output = left <op> right`. Integer arithmetic wraps.
    Arith {
        output: String,
        left: Operand,
        op: ArithOp,
        right: Operand,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggFunc {
    Count,
    Sum,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggSpec {
    pub func: AggFunc,
    /// Input column; ignored by `count`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OperatorKind {
    InputReader {
        dataset: String,
    },
    Filter {
        predicate: Predicate,
    },
    Map {
        function: MapFn,
    },
    HashJoinBuild {
        key: String,
    },
    /// Probes the hash table built from `build_stage`'s output with rows from
    /// the other producer. Output is the probe row followed by the build
    /// row's non-key columns.
    HashJoinProbe {
        key: String,
        build_stage: StageId,
    },
    Aggregate {
        #[serde(default)]
        group_by: Vec<String>,
        aggregates: Vec<AggSpec>,
    },
}

impl OperatorKind {
    /// Operators that thread a state variable between consecutive tasks.
    pub fn is_stateful(&self) -> bool {
        matches!(
            self,
            OperatorKind::HashJoinBuild { .. } | OperatorKind::HashJoinProbe { .. } | OperatorKind::Aggregate { .. }
        )
    }

    pub fn is_source(&self) -> bool {
        matches!(self, OperatorKind::InputReader { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::InputReader { .. } => "input_reader",
            OperatorKind::Filter { .. } => "filter",
            OperatorKind::Map { .. } => "map",
            OperatorKind::HashJoinBuild { .. } => "hash_join_build",
            OperatorKind::HashJoinProbe { .. } => "hash_join_probe",
            OperatorKind::Aggregate { .. } => "aggregate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub id: StageId,
    pub channels: u32,
    pub operator: OperatorKind,
    /// Column whose hash routes output rows to consumer channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_by: Option<String>,
}

impl StageSpec {
    pub fn stateful(&self) -> bool {
        self.operator.is_stateful()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: StageId,
    pub to: StageId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub datasets: BTreeMap<String, Dataset>,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    /// Directory that relative dataset paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Where a consumer-side upstream channel index points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSide {
    /// Ordinary input (also the probe side of a join).
    Data,
    /// Build-side input of a hash-join probe stage.
    Build,
}

#[derive(Debug, Clone)]
pub struct StageInfo {
    pub spec: StageSpec,
    /// Producer stages in ascending id order.
    pub producers: Vec<StageId>,
    /// Consumer stages in ascending id order; empty for sink stages.
    pub consumers: Vec<StageId>,
    /// The upstream channel list: channel `i` of a task's lineage `(i, K)`
    /// indexes into this vector. Length is `C`.
    pub upstream: Vec<ChannelKey>,
    pub upstream_side: Vec<InputSide>,
    pub output_schema: Schema,
    /// Input splits for source stages, one entry per channel, in sequence order.
    pub splits: Vec<Vec<Arc<Batch>>>,
}

impl StageInfo {
    pub fn id(&self) -> StageId {
        self.spec.id
    }

    pub fn is_source(&self) -> bool {
        self.spec.operator.is_source()
    }

    pub fn is_sink(&self) -> bool {
        self.consumers.is_empty()
    }

    pub fn channels(&self) -> impl Iterator<Item = ChannelKey> + '_ {
        (0..self.spec.channels).map(move |c| ChannelKey::new(self.spec.id, c))
    }

    pub fn upstream_index(&self, key: ChannelKey) -> Option<usize> {
        self.upstream.iter().position(|k| *k == key)
    }
}

/// A plan that passed validation, with derived metadata.
#[derive(Debug, Clone)]
pub struct ValidatedPlan {
    pub name: String,
    stages: BTreeMap<StageId, StageInfo>,
    order: Vec<StageId>,
}

impl ValidatedPlan {
    pub fn stage(&self, id: StageId) -> &StageInfo {
        &self.stages[&id]
    }

    pub fn try_stage(&self, id: StageId) -> Option<&StageInfo> {
        self.stages.get(&id)
    }

    pub fn stages(&self) -> impl Iterator<Item = &StageInfo> {
        self.order.iter().map(move |id| &self.stages[id])
    }

    /// Producers before consumers; ties by ascending stage id.
    pub fn topological_order(&self) -> &[StageId] {
        &self.order
    }

    pub fn channels(&self) -> impl Iterator<Item = ChannelKey> + '_ {
        self.stages().flat_map(StageInfo::channels)
    }

    pub fn channel_count(&self) -> usize {
        self.stages.values().map(|s| s.spec.channels as usize).sum()
    }

    pub fn sink_stages(&self) -> impl Iterator<Item = &StageInfo> {
        self.stages().filter(|s| s.is_sink())
    }

    pub fn contains(&self, key: ChannelKey) -> bool {
        self.stages
            .get(&key.stage)
            .is_some_and(|s| key.channel < s.spec.channels)
    }
}

pub fn topological_stage_order(plan: &ValidatedPlan) -> Vec<StageId> {
    plan.order.clone()
}

fn kahn_order(ids: &BTreeSet<StageId>, edges: &[Edge]) -> Result<Vec<StageId>, PlanError> {
    let mut indegree: BTreeMap<StageId, usize> = ids.iter().map(|&id| (id, 0)).collect();
    let mut out: BTreeMap<StageId, BTreeSet<StageId>> = BTreeMap::new();
    for e in edges {
        if out.entry(e.from).or_default().insert(e.to) {
            *indegree.get_mut(&e.to).unwrap() += 1;
        }
    }
    let mut ready: BinaryHeap<Reverse<StageId>> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| Reverse(*id))
        .collect();
    let mut order = Vec::with_capacity(ids.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        for next in out.get(&id).into_iter().flatten() {
            let d = indegree.get_mut(next).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(*next));
            }
        }
    }
    if order.len() != ids.len() {
        let stuck = indegree
            .iter()
            .find(|(id, d)| **d > 0 && !order.contains(id))
            .map(|(id, _)| *id)
            .unwrap_or_default();
        return Err(PlanError::CyclicPlan { stage: stuck });
    }
    Ok(order)
}

pub fn validate_plan(plan: &QueryPlan) -> Result<ValidatedPlan, PlanError> {
    if plan.stages.is_empty() {
        return Err(PlanError::Empty);
    }
    let mut ids = BTreeSet::new();
    for s in &plan.stages {
        if !ids.insert(s.id) {
            return Err(PlanError::DuplicateStage(s.id));
        }
        if s.channels == 0 {
            return Err(PlanError::ZeroChannels(s.id));
        }
    }
    for e in &plan.edges {
        for stage in [e.from, e.to] {
            if !ids.contains(&stage) {
                return Err(PlanError::DanglingEdge { stage });
            }
        }
        if e.from == e.to {
            return Err(PlanError::CyclicPlan { stage: e.from });
        }
    }
    let order = kahn_order(&ids, &plan.edges)?;

    let specs: BTreeMap<StageId, &StageSpec> = plan.stages.iter().map(|s| (s.id, s)).collect();
    let mut producers: BTreeMap<StageId, BTreeSet<StageId>> = BTreeMap::new();
    let mut consumers: BTreeMap<StageId, BTreeSet<StageId>> = BTreeMap::new();
    for e in &plan.edges {
        producers.entry(e.to).or_default().insert(e.from);
        consumers.entry(e.from).or_default().insert(e.to);
    }

    let mut infos: BTreeMap<StageId, StageInfo> = BTreeMap::new();
    for &id in &order {
        let spec = specs[&id];
        let prods: Vec<StageId> = producers.get(&id).into_iter().flatten().copied().collect();
        let cons: Vec<StageId> = consumers.get(&id).into_iter().flatten().copied().collect();
        let invalid = |reason: String| PlanError::InvalidOperator { stage: id, reason };
        let schema_err = |reason: String| PlanError::SchemaMismatch { stage: id, reason };

        if spec.operator.is_source() && !prods.is_empty() {
            return Err(invalid("input readers cannot have producers".into()));
        }
        if !spec.operator.is_source() && prods.is_empty() {
            return Err(invalid(format!("{} stage has no producer", spec.operator.name())));
        }
        if !cons.is_empty() && spec.partition_by.is_none() {
            return Err(PlanError::MissingPartitioner { stage: id });
        }

        let mut upstream = Vec::new();
        let mut upstream_side = Vec::new();
        for &p in &prods {
            let side = match &spec.operator {
                OperatorKind::HashJoinProbe { build_stage, .. } if *build_stage == p => InputSide::Build,
                _ => InputSide::Data,
            };
            for c in 0..specs[&p].channels {
                upstream.push(ChannelKey::new(p, c));
                upstream_side.push(side);
            }
        }

        let input_schema = |p: StageId| infos[&p].output_schema.clone();
        let data_producers: Vec<StageId> = match &spec.operator {
            OperatorKind::HashJoinProbe { build_stage, .. } => {
                prods.iter().copied().filter(|p| p != build_stage).collect()
            }
            _ => prods.clone(),
        };
        let data_schema = match data_producers.first() {
            Some(&first) => {
                let schema = input_schema(first);
                for &p in &data_producers[1..] {
                    if input_schema(p) != schema {
                        return Err(schema_err(format!("producers {first} and {p} have different schemas")));
                    }
                }
                Some(schema)
            }
            None => None,
        };

        let mut splits = Vec::new();
        let output_schema = match &spec.operator {
            OperatorKind::InputReader { dataset } => {
                let ds = plan.datasets.get(dataset).ok_or_else(|| PlanError::UnknownDataset {
                    stage: id,
                    dataset: dataset.clone(),
                })?;
                let all = ds.load(plan.base_dir.as_deref()).map_err(|reason| PlanError::Dataset {
                    dataset: dataset.clone(),
                    reason,
                })?;
                let n = spec.channels as usize;
                splits = vec![Vec::new(); n];
                for (i, b) in all.into_iter().enumerate() {
                    splits[i % n].push(Arc::new(b));
                }
                ds.schema.clone()
            }
            OperatorKind::Filter { predicate } => {
                let schema = data_schema.clone().unwrap();
                let field = schema
                    .field(&predicate.column)
                    .ok_or_else(|| schema_err(format!("unknown column `{}`", predicate.column)))?;
                if !comparable(field.data_type, predicate.value.data_type()) {
                    return Err(schema_err(format!(
                        "cannot compare {:?} column `{}` with {:?} literal",
                        field.data_type,
                        predicate.column,
                        predicate.value.data_type()
                    )));
                }
                schema
            }
            OperatorKind::Map { function } => {
                let schema = data_schema.clone().unwrap();
                map_output_schema(&schema, function).map_err(schema_err)?
            }
            OperatorKind::HashJoinBuild { key } => {
                let schema = data_schema.clone().unwrap();
                if schema.field(key).is_none() {
                    return Err(schema_err(format!("unknown build key `{key}`")));
                }
                if cons.is_empty() {
                    return Err(invalid("a hash-join build stage must feed a probe stage".into()));
                }
                for c in &cons {
                    match &specs[c].operator {
                        OperatorKind::HashJoinProbe { build_stage, .. } if build_stage == &id => {}
                        _ => return Err(invalid(format!("build output consumed by non-probe stage {c}"))),
                    }
                }
                if spec.partition_by.as_deref() != Some(key.as_str()) {
                    return Err(PlanError::PartitionMismatch {
                        stage: id,
                        reason: format!("build output must be partitioned by its key `{key}`"),
                    });
                }
                schema
            }
            OperatorKind::HashJoinProbe { key, build_stage } => {
                if !prods.contains(build_stage) {
                    return Err(invalid(format!("build stage {build_stage} is not a producer")));
                }
                let build_key = match &specs[build_stage].operator {
                    OperatorKind::HashJoinBuild { key } => key.clone(),
                    _ => return Err(invalid(format!("stage {build_stage} is not a hash-join build"))),
                };
                if data_producers.len() != 1 {
                    return Err(invalid(format!(
                        "probe needs exactly one probe-side producer, found {}",
                        data_producers.len()
                    )));
                }
                let probe = data_schema.clone().unwrap();
                let build = input_schema(*build_stage);
                let pk = probe
                    .field(key)
                    .ok_or_else(|| schema_err(format!("unknown probe key `{key}`")))?;
                let bk = build.field(&build_key).unwrap();
                if pk.data_type != bk.data_type {
                    return Err(schema_err(format!(
                        "join keys differ in type: {:?} vs {:?}",
                        pk.data_type, bk.data_type
                    )));
                }
                let probe_producer = data_producers[0];
                if spec.channels > 1 && specs[&probe_producer].partition_by.as_deref() != Some(key.as_str()) {
                    return Err(PlanError::PartitionMismatch {
                        stage: id,
                        reason: format!("probe input must be partitioned by `{key}`"),
                    });
                }
                let mut fields = probe.fields.clone();
                for f in &build.fields {
                    if f.name == build_key {
                        continue;
                    }
                    if fields.iter().any(|g| g.name == f.name) {
                        return Err(schema_err(format!("column `{}` appears on both join sides", f.name)));
                    }
                    fields.push(f.clone());
                }
                Schema::new(fields)
            }
            OperatorKind::Aggregate { group_by, aggregates } => {
                let schema = data_schema.clone().unwrap();
                if group_by.is_empty() && spec.channels != 1 {
                    return Err(PlanError::PartitionMismatch {
                        stage: id,
                        reason: "a global aggregate must have exactly one channel".into(),
                    });
                }
                if spec.channels > 1 {
                    for &p in &prods {
                        let pb = specs[&p].partition_by.as_deref().unwrap_or_default();
                        if !group_by.iter().any(|g| g == pb) {
                            return Err(PlanError::PartitionMismatch {
                                stage: id,
                                reason: format!("producer {p} partitions by `{pb}`, not a grouping column"),
                            });
                        }
                    }
                }
                aggregate_output_schema(&schema, group_by, aggregates).map_err(schema_err)?
            }
        };

        if let Some(col) = &spec.partition_by {
            if !cons.is_empty() && output_schema.field(col).is_none() {
                return Err(schema_err(format!("partitioning column `{col}` is not in the output")));
            }
        }

        infos.insert(
            id,
            StageInfo {
                spec: spec.clone(),
                producers: prods,
                consumers: cons,
                upstream,
                upstream_side,
                output_schema,
                splits,
            },
        );
    }

    Ok(ValidatedPlan {
        name: plan.name.clone(),
        stages: infos,
        order,
    })
}

fn comparable(column: DataType, literal: DataType) -> bool {
    column == literal || (column == DataType::Float64 && literal == DataType::Int64)
}

fn operand_type(schema: &Schema, op: &Operand) -> Result<DataType, String> {
    match op {
        Operand::Column(c) => schema
            .field(c)
            .map(|f| f.data_type)
            .ok_or_else(|| format!("unknown column `{c}`")),
        Operand::Literal(v) => Ok(v.data_type()),
    }
}

pub(crate) fn map_output_schema(schema: &Schema, function: &MapFn) -> Result<Schema, String> {
    match function {
        MapFn::Project { columns } => {
            let mut fields = Vec::with_capacity(columns.len());
            for c in columns {
                let f = schema.field(c).ok_or_else(|| format!("unknown column `{c}`"))?;
                if fields.iter().any(|g: &Field| g.name == *c) {
                    return Err(format!("column `{c}` projected twice"));
                }
                fields.push(f.clone());
            }
            Ok(Schema::new(fields))
        }
        MapFn::Arith {
            output, left, right, ..
        } => {
            let lt = operand_type(schema, left)?;
            let rt = operand_type(schema, right)?;
            if lt == DataType::Utf8 || rt == DataType::Utf8 {
                return Err("arithmetic on utf8 values".into());
            }
            if schema.field(output).is_some() {
                return Err(format!("output column `{output}` already exists"));
            }
            let out = if lt == DataType::Int64 && rt == DataType::Int64 {
                DataType::Int64
            } else {
                DataType::Float64
            };
            let mut fields = schema.fields.clone();
            fields.push(Field::new(output.clone(), out));
            Ok(Schema::new(fields))
        }
    }
}

pub(crate) fn aggregate_output_schema(
    schema: &Schema,
    group_by: &[String],
    aggregates: &[AggSpec],
) -> Result<Schema, String> {
    let mut fields = Vec::new();
    for g in group_by {
        let f = schema
            .field(g)
            .ok_or_else(|| format!("unknown grouping column `{g}`"))?;
        fields.push(f.clone());
    }
    for a in aggregates {
        let data_type = match a.func {
            AggFunc::Count => DataType::Int64,
            func => {
                let col = a
                    .column
                    .as_deref()
                    .ok_or_else(|| format!("{func:?} needs an input column"))?;
                let t = schema
                    .field(col)
                    .ok_or_else(|| format!("unknown column `{col}`"))?
                    .data_type;
                // Float sums depend on summation order, which varies with
                // dynamic batching; only order-insensitive aggregates allowed.
                if func == AggFunc::Sum && t != DataType::Int64 {
                    return Err(format!("sum over {t:?} column `{col}` is not supported"));
                }
                t
            }
        };
        if fields.iter().any(|f: &Field| f.name == a.output) {
            return Err(format!("duplicate output column `{}`", a.output));
        }
        fields.push(Field::new(a.output.clone(), data_type));
    }
    Ok(Schema::new(fields))
}

#[cfg(test)]
mod tests;
