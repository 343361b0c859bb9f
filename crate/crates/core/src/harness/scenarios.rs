//! Built-in plans: the recovery walkthrough topology, a shuffle-heavy
//! three-join query, trivial shapes, and a random plan generator.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::{DataType, Scalar};
use crate::ids::StageId;
use crate::plan::{
    AggFunc, AggSpec, ArithOp, CmpOp, ColumnGen, Dataset, Edge, MapFn, Operand, OperatorKind, Predicate, QueryPlan,
    StageSpec,
};

struct Builder {
    plan: QueryPlan,
}

fn int(name: &str, distinct: u64) -> ColumnGen {
    ColumnGen {
        name: name.into(),
        data_type: DataType::Int64,
        distinct,
    }
}

fn agg(func: AggFunc, column: Option<&str>, output: &str) -> AggSpec {
    AggSpec {
        func,
        column: column.map(str::to_string),
        output: output.into(),
    }
}

impl Builder {
    fn new(name: &str) -> Self {
        Self {
            plan: QueryPlan {
                name: name.into(),
                datasets: BTreeMap::new(),
                stages: Vec::new(),
                edges: Vec::new(),
                base_dir: None,
            },
        }
    }

    fn dataset(&mut self, name: &str, rows: usize, batch_rows: usize, seed: u64, columns: Vec<ColumnGen>) {
        self.plan
            .datasets
            .insert(name.into(), Dataset::generated(rows, batch_rows, seed, columns));
    }

    fn stage(
        &mut self,
        channels: u32,
        operator: OperatorKind,
        partition_by: Option<&str>,
        from: &[StageId],
    ) -> StageId {
        let id = self.plan.stages.len() as StageId;
        self.plan.stages.push(StageSpec {
            id,
            channels,
            operator,
            partition_by: partition_by.map(str::to_string),
        });
        for &f in from {
            self.plan.edges.push(Edge { from: f, to: id });
        }
        id
    }

    fn reader(&mut self, dataset: &str, channels: u32, partition_by: Option<&str>) -> StageId {
        self.stage(
            channels,
            OperatorKind::InputReader {
                dataset: dataset.into(),
            },
            partition_by,
            &[],
        )
    }
}

/// Three stages of three channels: a reader whose six splits land two per
/// channel, then two chained grouped aggregations. Channel `c` of every
/// stage starts on worker `c`.
pub fn walkthrough_plan() -> QueryPlan {
    let mut b = Builder::new("recovery-walkthrough");
    b.dataset("t", 600, 100, 5, vec![int("k", 60), int("v", 1000)]);
    let r = b.reader("t", 3, Some("k"));
    let a1 = b.stage(
        3,
        OperatorKind::Aggregate {
            group_by: vec!["k".into()],
            aggregates: vec![agg(AggFunc::Count, None, "n"), agg(AggFunc::Sum, Some("v"), "s")],
        },
        Some("k"),
        &[r],
    );
    b.stage(
        3,
        OperatorKind::Aggregate {
            group_by: vec!["k".into()],
            aggregates: vec![
                agg(AggFunc::Sum, Some("s"), "total"),
                agg(AggFunc::Max, Some("n"), "most"),
            ],
        },
        None,
        &[a1],
    );
    b.plan
}

/// Lineitem-like facts joined with orders, then customers, then nations,
/// aggregated per nation. Every join input is shuffled.
pub fn three_join_plan() -> QueryPlan {
    three_join_plan_with_channels(4)
}

/// [`three_join_plan`] with `channels` channels in every stage except the
/// small dimension readers.
pub fn three_join_plan_with_channels(channels: u32) -> QueryPlan {
    let mut b = Builder::new("three-join");
    if channels != 4 {
        b.plan.name = format!("three-join-{channels}");
    }
    b.dataset("lineitem", 24_000, 500, 11, vec![int("l_ok", 6000), int("l_qty", 50)]);
    b.dataset("orders", 3000, 250, 12, vec![int("o_ok", 6000), int("o_ck", 800)]);
    b.dataset("customer", 400, 100, 13, vec![int("c_ck", 800), int("c_nk", 25)]);
    b.dataset("nation", 25, 25, 14, vec![int("n_nk", 25), int("n_region", 5)]);
    let li = b.reader("lineitem", channels, Some("l_ok"));
    let or = b.reader("orders", channels, Some("o_ok"));
    let ob = b.stage(
        channels,
        OperatorKind::HashJoinBuild { key: "o_ok".into() },
        Some("o_ok"),
        &[or],
    );
    let j1 = b.stage(
        channels,
        OperatorKind::HashJoinProbe {
            key: "l_ok".into(),
            build_stage: ob,
        },
        Some("o_ck"),
        &[li, ob],
    );
    let cu = b.reader("customer", 2, Some("c_ck"));
    let cb = b.stage(
        channels,
        OperatorKind::HashJoinBuild { key: "c_ck".into() },
        Some("c_ck"),
        &[cu],
    );
    let j2 = b.stage(
        channels,
        OperatorKind::HashJoinProbe {
            key: "o_ck".into(),
            build_stage: cb,
        },
        Some("c_nk"),
        &[j1, cb],
    );
    let na = b.reader("nation", 1, Some("n_nk"));
    let nb = b.stage(
        channels,
        OperatorKind::HashJoinBuild { key: "n_nk".into() },
        Some("n_nk"),
        &[na],
    );
    let j3 = b.stage(
        channels,
        OperatorKind::HashJoinProbe {
            key: "c_nk".into(),
            build_stage: nb,
        },
        Some("n_region"),
        &[j2, nb],
    );
    b.stage(
        channels,
        OperatorKind::Aggregate {
            group_by: vec!["n_region".into()],
            aggregates: vec![
                agg(AggFunc::Count, None, "lines"),
                agg(AggFunc::Sum, Some("l_qty"), "qty"),
            ],
        },
        None,
        &[j3],
    );
    b.plan
}

/// A lone reader: the whole query is one stage.
pub fn single_stage_plan() -> QueryPlan {
    let mut b = Builder::new("single-stage");
    b.dataset("t", 4000, 250, 21, vec![int("k", 100), int("v", 1000)]);
    b.reader("t", 4, None);
    b.plan
}

/// Reader into a grouped aggregate.
pub fn aggregate_plan(rows: usize) -> QueryPlan {
    let mut b = Builder::new("scan-aggregate");
    b.dataset("t", rows, 250, 31, vec![int("k", 200), int("v", 1000)]);
    let r = b.reader("t", 4, Some("k"));
    b.stage(
        4,
        OperatorKind::Aggregate {
            group_by: vec!["k".into()],
            aggregates: vec![agg(AggFunc::Count, None, "n"), agg(AggFunc::Sum, Some("v"), "s")],
        },
        None,
        &[r],
    );
    b.plan
}

/// A long single-reader, single-aggregate query whose failure-free makespan
/// dwarfs detection latency.
pub fn long_scan_plan() -> QueryPlan {
    let mut b = Builder::new("long-scan");
    b.dataset("t", 500_000, 1000, 41, vec![int("k", 500), int("v", 1000)]);
    let r = b.reader("t", 4, Some("k"));
    let f = b.stage(
        4,
        OperatorKind::Filter {
            predicate: Predicate {
                column: "v".into(),
                op: CmpOp::Lt,
                value: Scalar::Int64(900),
            },
        },
        Some("k"),
        &[r],
    );
    b.stage(
        4,
        OperatorKind::Aggregate {
            group_by: vec!["k".into()],
            aggregates: vec![agg(AggFunc::Count, None, "n"), agg(AggFunc::Max, Some("v"), "top")],
        },
        None,
        &[f],
    );
    b.plan
}

/// Built-in plans by name.
pub fn builtin(name: &str) -> Option<QueryPlan> {
    Some(match name {
        "walkthrough" => walkthrough_plan(),
        "three-join" => three_join_plan(),
        "single-stage" => single_stage_plan(),
        "scan-aggregate" => aggregate_plan(8000),
        "long-scan" => long_scan_plan(),
        _ => return None,
    })
}

pub const BUILTIN_NAMES: [&str; 5] = [
    "walkthrough",
    "three-join",
    "single-stage",
    "scan-aggregate",
    "long-scan",
];

/// A random valid plan of at most five stages.
pub fn random_plan(seed: u64) -> QueryPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&format!("random-{seed}"));
    let ch = |rng: &mut ChaCha8Rng| rng.gen_range(1..=3u32);
    let rows = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.05) {
            0
        } else {
            rng.gen_range(1..400usize)
        }
    };
    let batch = |rng: &mut ChaCha8Rng| rng.gen_range(8..80usize);
    let keys = rng.gen_range(2..40u64);
    let r0 = rows(&mut rng);
    let b0 = batch(&mut rng);
    b.dataset("a", r0, b0, seed ^ 0xA, vec![int("k", keys), int("v", 100)]);
    let grouped = |b: &mut Builder, rng: &mut ChaCha8Rng, from: StageId, col: &str, value: &str, sink: bool| {
        let aggregates = match rng.gen_range(0..3) {
            0 => vec![agg(AggFunc::Count, None, "n")],
            1 => vec![
                agg(AggFunc::Sum, Some(value), "s"),
                agg(AggFunc::Min, Some(value), "lo"),
            ],
            _ => vec![agg(AggFunc::Max, Some(value), "hi"), agg(AggFunc::Count, None, "n")],
        };
        let c = ch(rng);
        b.stage(
            c,
            OperatorKind::Aggregate {
                group_by: vec![col.into()],
                aggregates,
            },
            (!sink).then_some(col),
            &[from],
        )
    };
    match rng.gen_range(0..6) {
        0 => {
            b.reader("a", ch(&mut rng), None);
        }
        1 => {
            let r = b.reader("a", ch(&mut rng), Some("k"));
            let c = ch(&mut rng);
            let f = b.stage(
                c,
                OperatorKind::Filter {
                    predicate: Predicate {
                        column: "v".into(),
                        op: [CmpOp::Lt, CmpOp::Ge, CmpOp::Ne][rng.gen_range(0..3)],
                        value: Scalar::Int64(rng.gen_range(0..100)),
                    },
                },
                Some("k"),
                &[r],
            );
            grouped(&mut b, &mut rng, f, "k", "v", true);
        }
        2 => {
            let r = b.reader("a", ch(&mut rng), Some("k"));
            let a1 = grouped(&mut b, &mut rng, r, "k", "v", false);
            let value = first_output(&b, a1);
            grouped(&mut b, &mut rng, a1, "k", &value, true);
        }
        3 => {
            let r = b.reader("a", ch(&mut rng), Some("k"));
            let c = ch(&mut rng);
            let m = b.stage(
                c,
                OperatorKind::Map {
                    function: MapFn::Arith {
                        output: "w".into(),
                        left: Operand::Column("v".into()),
                        op: [ArithOp::Add, ArithOp::Mul, ArithOp::Sub][rng.gen_range(0..3)],
                        right: Operand::Literal(Scalar::Int64(rng.gen_range(1..7))),
                    },
                },
                Some("k"),
                &[r],
            );
            let c = ch(&mut rng);
            let f = b.stage(
                c,
                OperatorKind::Filter {
                    predicate: Predicate {
                        column: "w".into(),
                        op: CmpOp::Gt,
                        value: Scalar::Int64(rng.gen_range(0..60)),
                    },
                },
                Some("k"),
                &[m],
            );
            grouped(&mut b, &mut rng, f, "k", "w", true);
        }
        _ => {
            let r1 = rows(&mut rng);
            let b1 = batch(&mut rng);
            b.dataset("d", r1, b1, seed ^ 0xD, vec![int("dk", keys), int("dv", 100)]);
            let build_src = b.reader("d", ch(&mut rng), Some("dk"));
            let c = ch(&mut rng);
            let build = b.stage(
                c,
                OperatorKind::HashJoinBuild { key: "dk".into() },
                Some("dk"),
                &[build_src],
            );
            let probe_src = b.reader("a", ch(&mut rng), Some("k"));
            let with_agg = rng.gen_bool(0.5);
            let c = ch(&mut rng);
            let j = b.stage(
                c,
                OperatorKind::HashJoinProbe {
                    key: "k".into(),
                    build_stage: build,
                },
                with_agg.then_some("k"),
                &[build, probe_src],
            );
            if with_agg {
                grouped(&mut b, &mut rng, j, "k", "dv", true);
            }
        }
    }
    b.plan
}

fn first_output(b: &Builder, stage: StageId) -> String {
    match &b.plan.stages[stage as usize].operator {
        OperatorKind::Aggregate { aggregates, .. } => aggregates[0].output.clone(),
        _ => "v".into(),
    }
}
