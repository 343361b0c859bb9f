//! Single-threaded, row-at-a-time evaluation of a plan, written without the
//! kernels so that it can serve as an oracle for the distributed engine.
//! Also the canonical result digest both sides share.

use std::collections::BTreeMap;

use sha2::{Digest as _, Sha256};

use crate::batch::{Batch, DataType, Scalar};
use crate::digest::Digest;
use crate::ids::StageId;
use crate::plan::{AggFunc, ArithOp, InputSide, MapFn, Operand, OperatorKind, ValidatedPlan};

pub type Row = Vec<Scalar>;

/// Every stage's complete output, as rows.
pub fn evaluate(plan: &ValidatedPlan) -> BTreeMap<StageId, Vec<Row>> {
    let mut out: BTreeMap<StageId, Vec<Row>> = BTreeMap::new();
    for info in plan.stages() {
        let id = info.id();
        let mut data: Vec<Row> = Vec::new();
        let mut build: Vec<Row> = Vec::new();
        for &p in &info.producers {
            let side = info
                .upstream
                .iter()
                .zip(&info.upstream_side)
                .find(|(k, _)| k.stage == p)
                .map_or(InputSide::Data, |(_, s)| *s);
            let rows = out[&p].iter().cloned();
            match side {
                InputSide::Build => build.extend(rows),
                InputSide::Data => data.extend(rows),
            }
        }
        let input_schema = |p: StageId| &plan.stage(p).output_schema;
        let rows = match &info.spec.operator {
            OperatorKind::InputReader { .. } => info.splits.iter().flatten().flat_map(|b| b.rows()).collect(),
            OperatorKind::Filter { predicate } => {
                let schema = input_schema(info.producers[0]);
                let col = schema.index_of(&predicate.column).expect("validated");
                let literal = match (&predicate.value, schema.fields[col].data_type) {
                    (Scalar::Int64(v), DataType::Float64) => Scalar::Float64(*v as f64),
                    (v, _) => v.clone(),
                };
                data.into_iter()
                    .filter(|r| predicate.op.holds(r[col].cmp(&literal)))
                    .collect()
            }
            OperatorKind::Map { function } => {
                let schema = input_schema(info.producers[0]);
                match function {
                    MapFn::Project { columns } => {
                        let idx: Vec<usize> = columns.iter().map(|c| schema.index_of(c).unwrap()).collect();
                        data.into_iter()
                            .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
                            .collect()
                    }
                    MapFn::Arith { left, op, right, .. } => {
                        let value = |r: &Row, o: &Operand| match o {
                            Operand::Column(c) => r[schema.index_of(c).unwrap()].clone(),
                            Operand::Literal(v) => v.clone(),
                        };
                        data.into_iter()
                            .map(|mut r| {
                                let v = arith(value(&r, left), *op, value(&r, right));
                                r.push(v);
                                r
                            })
                            .collect()
                    }
                }
            }
            OperatorKind::HashJoinBuild { .. } => data,
            OperatorKind::HashJoinProbe { key, build_stage } => {
                let probe_schema = &info.output_schema;
                let pk = probe_schema.index_of(key).unwrap();
                let bkey = match &plan.stage(*build_stage).spec.operator {
                    OperatorKind::HashJoinBuild { key } => key.clone(),
                    _ => unreachable!("validated"),
                };
                let bk = input_schema(*build_stage).index_of(&bkey).unwrap();
                let mut rows = Vec::new();
                for p in &data {
                    for b in build.iter().filter(|b| b[bk] == p[pk]) {
                        let mut r = p.clone();
                        r.extend(b.iter().enumerate().filter(|(i, _)| *i != bk).map(|(_, v)| v.clone()));
                        rows.push(r);
                    }
                }
                rows
            }
            OperatorKind::Aggregate { group_by, aggregates } => {
                let schema = input_schema(info.producers[0]);
                let gidx: Vec<usize> = group_by.iter().map(|g| schema.index_of(g).unwrap()).collect();
                let mut groups: BTreeMap<Row, Vec<Row>> = BTreeMap::new();
                for r in data {
                    groups
                        .entry(gidx.iter().map(|&i| r[i].clone()).collect())
                        .or_default()
                        .push(r);
                }
                groups
                    .into_iter()
                    .map(|(mut key, members)| {
                        for a in aggregates {
                            let col = a.column.as_deref().and_then(|c| schema.index_of(c));
                            let vals = members.iter().map(|m| m[col.unwrap_or(0)].clone());
                            key.push(match a.func {
                                AggFunc::Count => Scalar::Int64(members.len() as i64),
                                AggFunc::Sum => Scalar::Int64(vals.fold(0i64, |s, v| match v {
                                    Scalar::Int64(x) => s.wrapping_add(x),
                                    _ => unreachable!("validated"),
                                })),
                                AggFunc::Min => vals.min().unwrap(),
                                AggFunc::Max => vals.max().unwrap(),
                            });
                        }
                        key
                    })
                    .collect()
            }
        };
        out.insert(id, rows);
    }
    out
}

fn arith(l: Scalar, op: ArithOp, r: Scalar) -> Scalar {
    match (l, r) {
        (Scalar::Int64(a), Scalar::Int64(b)) => Scalar::Int64(match op {
            ArithOp::Add => a.wrapping_add(b),
            ArithOp::Sub => a.wrapping_sub(b),
            ArithOp::Mul => a.wrapping_mul(b),
        }),
        (l, r) => {
            let f = |s: Scalar| match s {
                Scalar::Int64(v) => v as f64,
                Scalar::Float64(v) => v,
                Scalar::Utf8(_) => unreachable!("validated"),
            };
            let (a, b) = (f(l), f(r));
            Scalar::Float64(match op {
                ArithOp::Add => a + b,
                ArithOp::Sub => a - b,
                ArithOp::Mul => a * b,
            })
        }
    }
}

/// Sink-stage rows of the reference evaluation.
pub fn reference_result(plan: &ValidatedPlan) -> BTreeMap<StageId, Vec<Row>> {
    let mut all = evaluate(plan);
    plan.sink_stages()
        .map(|s| (s.id(), all.remove(&s.id()).unwrap()))
        .collect()
}

pub fn reference_digest(plan: &ValidatedPlan) -> Digest {
    result_digest(&reference_result(plan))
}

/// Order-insensitive digest of per-sink-stage row multisets.
pub fn result_digest(result: &BTreeMap<StageId, Vec<Row>>) -> Digest {
    let mut h = Sha256::new();
    for (stage, rows) in result {
        let mut rows: Vec<&Row> = rows.iter().collect();
        rows.sort();
        h.update(b"stage");
        h.update(stage.to_le_bytes());
        h.update((rows.len() as u64).to_le_bytes());
        for r in rows {
            h.update((r.len() as u32).to_le_bytes());
            for v in r {
                match v {
                    Scalar::Int64(x) => {
                        h.update([0]);
                        h.update(x.to_le_bytes());
                    }
                    Scalar::Float64(x) => {
                        h.update([1]);
                        h.update(x.to_bits().to_le_bytes());
                    }
                    Scalar::Utf8(s) => {
                        h.update([2]);
                        h.update((s.len() as u64).to_le_bytes());
                        h.update(s.as_bytes());
                    }
                }
            }
        }
    }
    Digest(h.finalize().into())
}

/// Rows of a set of batches, for [`result_digest`].
pub fn rows_of<'a>(batches: impl IntoIterator<Item = &'a Batch>) -> Vec<Row> {
    batches.into_iter().flat_map(|b| b.rows().collect::<Vec<_>>()).collect()
}
