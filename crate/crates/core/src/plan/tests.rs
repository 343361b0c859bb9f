use super::*;
use crate::harness::scenarios;

fn kv_schema() -> Schema {
    Schema::new(vec![Field::new("k", DataType::Int64), Field::new("v", DataType::Int64)])
}

fn kv_dataset(rows: i64) -> Dataset {
    Dataset::inline(
        kv_schema(),
        2,
        (0..rows)
            .map(|i| vec![Scalar::Int64(i % 3), Scalar::Int64(i)])
            .collect(),
    )
}

fn stage(id: StageId, channels: u32, operator: OperatorKind, partition_by: Option<&str>) -> StageSpec {
    StageSpec {
        id,
        channels,
        operator,
        partition_by: partition_by.map(str::to_string),
    }
}

fn reader(id: StageId, channels: u32, dataset: &str) -> StageSpec {
    stage(
        id,
        channels,
        OperatorKind::InputReader {
            dataset: dataset.into(),
        },
        Some("k"),
    )
}

fn plan(stages: Vec<StageSpec>, edges: &[(StageId, StageId)]) -> QueryPlan {
    let mut datasets = BTreeMap::new();
    datasets.insert("a".to_string(), kv_dataset(8));
    datasets.insert("b".to_string(), kv_dataset(5));
    QueryPlan {
        name: "t".into(),
        datasets,
        stages,
        edges: edges.iter().map(|&(from, to)| Edge { from, to }).collect(),
        base_dir: None,
    }
}

fn count_by_k() -> OperatorKind {
    OperatorKind::Aggregate {
        group_by: vec!["k".into()],
        aggregates: vec![AggSpec {
            func: AggFunc::Count,
            column: None,
            output: "n".into(),
        }],
    }
}

#[test]
fn linear_build_probe_counts_upstream_channels() {
    let mut p = plan(
        vec![
            reader(0, 2, "a"),
            stage(1, 3, OperatorKind::HashJoinBuild { key: "k".into() }, Some("k")),
            reader(2, 4, "b"),
            stage(
                3,
                2,
                OperatorKind::HashJoinProbe {
                    key: "k".into(),
                    build_stage: 1,
                },
                None,
            ),
        ],
        &[(0, 1), (1, 3), (2, 3)],
    );
    // The probe side must not collide with build columns other than the key.
    p.datasets.insert(
        "b".into(),
        Dataset::inline(
            Schema::new(vec![Field::new("k", DataType::Int64), Field::new("w", DataType::Int64)]),
            2,
            vec![vec![Scalar::Int64(1), Scalar::Int64(10)]],
        ),
    );
    let vp = validate_plan(&p).unwrap();
    let probe = vp.stage(3);
    assert_eq!(probe.upstream.len(), 3 + 4);
    assert_eq!(
        probe.upstream_side.iter().filter(|s| **s == InputSide::Build).count(),
        3
    );
    assert_eq!(vp.stage(1).upstream.len(), 2);
    let names: Vec<_> = probe.output_schema.fields.iter().map(|f| f.name.as_str()).collect();
    assert_eq!(names, ["k", "w", "v"]);
}

#[test]
fn two_node_cycle_is_rejected() {
    let p = plan(
        vec![
            reader(0, 1, "a"),
            stage(1, 1, count_by_k(), Some("k")),
            stage(2, 1, count_by_k(), Some("k")),
        ],
        &[(0, 1), (2, 1), (1, 2)],
    );
    assert!(matches!(validate_plan(&p), Err(PlanError::CyclicPlan { .. })));
}

#[test]
fn self_loop_is_rejected() {
    let p = plan(
        vec![reader(0, 1, "a"), stage(1, 1, count_by_k(), None)],
        &[(0, 1), (1, 1)],
    );
    assert_eq!(validate_plan(&p).unwrap_err(), PlanError::CyclicPlan { stage: 1 });
}

#[test]
fn dangling_edge_names_the_stage() {
    let p = plan(vec![reader(0, 1, "a")], &[(0, 7)]);
    assert_eq!(validate_plan(&p).unwrap_err(), PlanError::DanglingEdge { stage: 7 });
}

#[test]
fn missing_partitioner_names_the_stage() {
    let mut r = reader(0, 1, "a");
    r.partition_by = None;
    let p = plan(vec![r, stage(1, 1, count_by_k(), None)], &[(0, 1)]);
    assert_eq!(
        validate_plan(&p).unwrap_err(),
        PlanError::MissingPartitioner { stage: 0 }
    );
}

#[test]
fn structural_errors() {
    assert_eq!(validate_plan(&plan(vec![], &[])).unwrap_err(), PlanError::Empty);
    let p = plan(vec![reader(0, 0, "a")], &[]);
    assert_eq!(validate_plan(&p).unwrap_err(), PlanError::ZeroChannels(0));
    let p = plan(vec![reader(0, 1, "a"), reader(0, 1, "b")], &[]);
    assert_eq!(validate_plan(&p).unwrap_err(), PlanError::DuplicateStage(0));
    let p = plan(vec![reader(0, 1, "zzz")], &[]);
    assert!(matches!(
        validate_plan(&p),
        Err(PlanError::UnknownDataset { stage: 0, .. })
    ));
    let p = plan(vec![stage(0, 1, count_by_k(), None)], &[]);
    assert!(matches!(
        validate_plan(&p),
        Err(PlanError::InvalidOperator { stage: 0, .. })
    ));
    let orphan = plan(
        vec![
            reader(0, 1, "a"),
            stage(1, 1, OperatorKind::HashJoinBuild { key: "k".into() }, Some("k")),
        ],
        &[],
    );
    assert!(matches!(
        validate_plan(&orphan),
        Err(PlanError::InvalidOperator { stage: 1, .. })
    ));
}

#[test]
fn partitioning_must_match_grouping() {
    let mut r = reader(0, 2, "a");
    r.partition_by = Some("v".into());
    let p = plan(vec![r, stage(1, 2, count_by_k(), None)], &[(0, 1)]);
    assert!(matches!(
        validate_plan(&p),
        Err(PlanError::PartitionMismatch { stage: 1, .. })
    ));
    let global = OperatorKind::Aggregate {
        group_by: vec![],
        aggregates: vec![],
    };
    let p = plan(vec![reader(0, 2, "a"), stage(1, 2, global, None)], &[(0, 1)]);
    assert!(matches!(
        validate_plan(&p),
        Err(PlanError::PartitionMismatch { stage: 1, .. })
    ));
}

#[test]
fn schema_errors() {
    let bad_filter = OperatorKind::Filter {
        predicate: Predicate {
            column: "nope".into(),
            op: CmpOp::Gt,
            value: Scalar::Int64(1),
        },
    };
    let p = plan(vec![reader(0, 1, "a"), stage(1, 1, bad_filter, None)], &[(0, 1)]);
    assert!(matches!(
        validate_plan(&p),
        Err(PlanError::SchemaMismatch { stage: 1, .. })
    ));
    let float_sum = OperatorKind::Aggregate {
        group_by: vec!["k".into()],
        aggregates: vec![AggSpec {
            func: AggFunc::Sum,
            column: Some("f".into()),
            output: "s".into(),
        }],
    };
    let arith = OperatorKind::Map {
        function: MapFn::Arith {
            output: "f".into(),
            left: Operand::Column("v".into()),
            op: ArithOp::Mul,
            right: Operand::Literal(Scalar::Float64(0.5)),
        },
    };
    let p = plan(
        vec![
            reader(0, 1, "a"),
            stage(1, 1, arith, Some("k")),
            stage(2, 1, float_sum, None),
        ],
        &[(0, 1), (1, 2)],
    );
    assert!(matches!(
        validate_plan(&p),
        Err(PlanError::SchemaMismatch { stage: 2, .. })
    ));
}

#[test]
fn walkthrough_topology_is_valid() {
    let vp = validate_plan(&scenarios::walkthrough_plan()).unwrap();
    assert_eq!(topological_stage_order(&vp), [0, 1, 2]);
    assert!(!vp.stage(0).spec.stateful());
    assert!(vp.stage(1).spec.stateful());
    assert!(vp.stage(2).spec.stateful());
    assert!(vp.stages().all(|s| s.spec.channels == 3));
    assert_eq!(vp.stage(0).splits.iter().map(Vec::len).collect::<Vec<_>>(), [2, 2, 2]);
}

#[test]
fn topological_orders() {
    let chain = plan(
        vec![
            reader(0, 1, "a"),
            stage(1, 1, count_by_k(), Some("k")),
            stage(2, 1, count_by_k(), None),
        ],
        &[(0, 1), (1, 2)],
    );
    assert_eq!(validate_plan(&chain).unwrap().topological_order(), [0, 1, 2]);

    let single = plan(vec![reader(0, 3, "a")], &[]);
    let vp = validate_plan(&single).unwrap();
    assert_eq!(topological_stage_order(&vp), [0]);
    assert!(vp.stage(0).is_sink());

    let ids: BTreeSet<StageId> = [0, 1, 2, 3].into();
    let diamond = [(0, 1), (0, 2), (1, 3), (2, 3)].map(|(from, to)| Edge { from, to });
    assert_eq!(kahn_order(&ids, &diamond).unwrap(), [0, 1, 2, 3]);
    let reversed = [(0, 2), (0, 1), (2, 3), (1, 3)].map(|(from, to)| Edge { from, to });
    assert_eq!(kahn_order(&ids, &reversed).unwrap(), [0, 1, 2, 3]);
}

#[test]
fn splits_are_dealt_round_robin() {
    let vp = validate_plan(&plan(vec![reader(0, 3, "a")], &[])).unwrap();
    let splits = &vp.stage(0).splits;
    // 8 rows in 2-row splits: 4 splits over 3 channels.
    assert_eq!(splits.iter().map(Vec::len).collect::<Vec<_>>(), [2, 1, 1]);
    assert_eq!(splits[0][1].row(0), vec![Scalar::Int64(0), Scalar::Int64(6)]);
}

#[test]
fn plan_json_round_trips() {
    for name in scenarios::BUILTIN_NAMES {
        let p = scenarios::builtin(name).unwrap();
        let back = QueryPlan::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
    }
}

#[test]
fn plan_json_rejects_unknown_versions() {
    let text = scenarios::single_stage_plan()
        .to_json()
        .replacen("\"version\": 1", "\"version\": 99", 1);
    assert!(QueryPlan::from_json(&text).is_err());
}

#[test]
fn random_plans_validate() {
    for seed in 0..300 {
        let p = scenarios::random_plan(seed);
        let vp = validate_plan(&p).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(vp.topological_order().len() <= 5);
    }
}

#[test]
fn csv_datasets_resolve_against_the_plan_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("kv.csv"), "v,k\n10,1\n20,2\n30,1\n").unwrap();
    let mut p = plan(vec![reader(0, 1, "a")], &[]);
    p.datasets.insert(
        "a".into(),
        Dataset {
            schema: kv_schema(),
            batch_rows: 2,
            source: DatasetSource::Csv { path: "kv.csv".into() },
        },
    );
    let path = dir.path().join("plan.json");
    std::fs::write(&path, p.to_json()).unwrap();
    let loaded = QueryPlan::load(&path).unwrap();
    let vp = validate_plan(&loaded).unwrap();
    let splits = &vp.stage(0).splits[0];
    assert_eq!(splits.len(), 2);
    assert_eq!(splits[0].row(1), vec![Scalar::Int64(2), Scalar::Int64(20)]);

    std::fs::write(dir.path().join("kv.csv"), "v,k\nx,1\n").unwrap();
    let err = validate_plan(&QueryPlan::load(&path).unwrap()).unwrap_err();
    assert!(err.to_string().contains("row 2"), "{err}");
}

#[test]
fn generated_datasets_are_reproducible() {
    let cols = vec![ColumnGen {
        name: "k".into(),
        data_type: DataType::Int64,
        distinct: 7,
    }];
    let a = Dataset::generated(50, 8, 3, cols.clone()).load(None).unwrap();
    let b = Dataset::generated(50, 8, 3, cols).load(None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 7);
    assert!(a
        .iter()
        .flat_map(|b| b.rows())
        .all(|r| matches!(r[0], Scalar::Int64(0..=6))));
}
