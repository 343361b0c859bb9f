//! The `ablate` command: one simulated run per cell of
//! workers x strategies x batching policies (x execution mode).

use std::fmt::Write as _;
use std::str::FromStr;

use clap::Args;
use lineage_core::harness::{self, audit, RunMetrics, SimConfig};
use lineage_core::worker::{BatchingPolicy, FtStrategy};
use serde::Serialize;

use crate::run::{create_out_dir, fault_spec, load_config, load_plan, simulate, CommonArgs};
use crate::Failure;

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Strategies to sweep, comma-separated. An empty list yields a
    /// header-only table.
    #[arg(
        long = "strategy",
        env = "LINEAGE_STRATEGY",
        value_name = "LIST",
        default_value = "wal,spool,restart"
    )]
    pub strategies: String,

    /// Batching policies to sweep, comma-separated.
    #[arg(
        long = "batching",
        env = "LINEAGE_BATCHING",
        value_name = "LIST",
        default_value = "dynamic"
    )]
    pub batchings: String,

    /// Worker counts to sweep, comma-separated [default: the configured
    /// count].
    #[arg(long = "workers", env = "LINEAGE_WORKERS", value_name = "LIST")]
    pub workers: Option<String>,

    /// Add a stage-at-a-time row next to every pipelined one.
    #[arg(long, env = "LINEAGE_BLOCKING")]
    pub blocking: bool,
}

/// One table row. Overheads are relative to the failure-free,
/// no-backup, dynamically batched pipelined run with the same worker count.
#[derive(Debug, Serialize)]
struct Row {
    workers: u32,
    strategy: FtStrategy,
    batching: String,
    mode: &'static str,
    makespan: f64,
    overhead: f64,
    recoveries: u64,
    rewinds: u64,
    replays: u64,
    inputs: u64,
    reconstructed: u64,
    bytes_local: u64,
    bytes_durable: u64,
    lineage_bytes: u64,
    gcs_transactions: u64,
    result: String,
}

const HEADER: [&str; 16] = [
    "workers",
    "strategy",
    "batching",
    "mode",
    "makespan",
    "overhead",
    "recoveries",
    "rewinds",
    "replays",
    "inputs",
    "reconstructed",
    "bytes_local",
    "bytes_durable",
    "lineage_bytes",
    "gcs_txns",
    "result",
];

impl Row {
    fn new(m: &RunMetrics, base: u64) -> Self {
        Self {
            workers: m.workers,
            strategy: m.strategy,
            batching: m.batching.clone(),
            mode: if m.blocking { "blocking" } else { "pipelined" },
            makespan: m.makespan(),
            overhead: m.makespan_ticks as f64 / base.max(1) as f64,
            recoveries: m.recoveries,
            rewinds: m.rewinds_planned,
            replays: m.replays_planned,
            inputs: m.inputs_planned,
            reconstructed: m.reconstructed,
            bytes_local: m.bytes_local,
            bytes_durable: m.bytes_durable,
            lineage_bytes: m.lineage_bytes,
            gcs_transactions: m.gcs_transactions,
            result: m.result.short(),
        }
    }

    fn cells(&self) -> [String; 16] {
        [
            self.workers.to_string(),
            self.strategy.to_string(),
            self.batching.clone(),
            self.mode.to_string(),
            format!("{:.3}", self.makespan),
            format!("{:.3}", self.overhead),
            self.recoveries.to_string(),
            self.rewinds.to_string(),
            self.replays.to_string(),
            self.inputs.to_string(),
            self.reconstructed.to_string(),
            self.bytes_local.to_string(),
            self.bytes_durable.to_string(),
            self.lineage_bytes.to_string(),
            self.gcs_transactions.to_string(),
            self.result.clone(),
        ]
    }
}

fn parse_list<T: FromStr<Err = String>>(flag: &str, text: &str) -> Result<Vec<T>, Failure> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Failure::Input(format!("--{flag}: {e}"))))
        .collect()
}

fn parse_workers(text: &str) -> Result<Vec<u32>, Failure> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s.parse::<u32>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Input(format!("--workers: `{s}` is not a positive integer"))),
        })
        .collect()
}

/// Left-aligned text columns, two spaces apart.
fn render(rows: &[Row]) -> String {
    let body: Vec<[String; 16]> = rows.iter().map(Row::cells).collect();
    let mut widths = HEADER.map(str::len);
    for cells in &body {
        for (w, c) in widths.iter_mut().zip(cells) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let mut l = String::new();
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            if i > 0 {
                l.push_str("  ");
            }
            write!(l, "{c:<w$}").unwrap();
        }
        out.push_str(l.trim_end());
        out.push('\n');
    };
    line(&HEADER.map(String::from));
    for cells in &body {
        line(cells);
    }
    out
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), Failure> {
    let plan = load_plan(&args.common.plan)?;
    let cfg = load_config(&args.common)?;
    let faults = fault_spec(&args.common)?;
    let strategies: Vec<FtStrategy> = parse_list("strategy", &args.strategies)?;
    let batchings: Vec<BatchingPolicy> = parse_list("batching", &args.batchings)?;
    let workers = match &args.workers {
        Some(list) => parse_workers(list)?,
        None => vec![cfg.workers],
    };
    let modes: &[bool] = if args.blocking { &[false, true] } else { &[false] };

    let mut rows = Vec::new();
    let mut violations = Vec::new();
    if !strategies.is_empty() && !batchings.is_empty() {
        for &w in &workers {
            let cfg = SimConfig {
                workers: w,
                ..cfg.clone()
            };
            cfg.validate()
                .map_err(|e| Failure::Input(format!("configuration: {e}")))?;
            let base = harness::baseline(&plan, &cfg).map_err(|e| Failure::Simulation(e.to_string()))?;
            for &s in &strategies {
                for &b in &batchings {
                    for &blocking in modes {
                        let cell = SimConfig {
                            blocking,
                            ..cfg.clone().with_strategy(s).with_batching(b)
                        };
                        let out = simulate(&plan, &cell, &faults)?;
                        violations.extend(audit(&out.audit).iter().map(|v| format!("{w} workers, {s}, {b}: {v}")));
                        rows.push(Row::new(&out.metrics, base.makespan_ticks));
                    }
                }
            }
        }
    }

    let table = render(&rows);
    print!("{table}");
    let dir = &args.common.out;
    create_out_dir(dir)?;
    let write = |name: &str, contents: &[u8]| {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
    };
    write("ablation.txt", table.as_bytes())?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(HEADER).expect("in-memory csv");
    for r in &rows {
        csv.write_record(r.cells()).expect("in-memory csv");
    }
    write("ablation.csv", &csv.into_inner().expect("in-memory csv"))?;
    let mut json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    json.push('\n');
    write("ablation.json", json.as_bytes())?;

    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violations(violations))
    }
}
