//! Options shared by every command, and the `run` command.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use lineage_core::harness::{self, audit, scenarios, FaultSpec, FaultTarget, RunOutput, SimConfig, Trigger};
use lineage_core::worker::{BatchingPolicy, FtStrategy};
use lineage_core::{validate_plan, QueryPlan, ValidatedPlan};

use crate::Failure;

pub const DEFAULT_OUT: &str = "lineage-out";

/// Plan, configuration, faults and output location.
#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Plan file (JSON) or the name of a built-in plan.
    #[arg(long, env = "LINEAGE_PLAN")]
    pub plan: String,

    /// Simulator configuration file (JSON). Flags override its fields.
    #[arg(long, env = "LINEAGE_CONFIG")]
    pub config: Option<PathBuf>,

    /// Worker to kill: an id or `random`. Repeat (or separate with commas)
    /// for several failures.
    #[arg(long, env = "LINEAGE_KILL", value_name = "worker=<id|random>", value_delimiter = ',')]
    pub kill: Vec<FaultTarget>,

    /// When each kill fires: a progress fraction (`0.5`, `50%`), a
    /// simulated time (`t=12.5`, `12.5s`) or a commit count (`n=30`). One
    /// value applies to every kill.
    #[arg(long, env = "LINEAGE_AT", value_name = "fraction|time", value_delimiter = ',')]
    pub at: Vec<Trigger>,

    /// Simulation seed [default: 42].
    #[arg(long, env = "LINEAGE_SEED")]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, env = "LINEAGE_OUT", default_value = DEFAULT_OUT)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Fault-tolerance strategy.
    #[arg(long, env = "LINEAGE_STRATEGY", value_name = "wal|spool|restart")]
    pub strategy: Option<FtStrategy>,

    /// Input batching policy.
    #[arg(long, env = "LINEAGE_BATCHING", value_name = "dynamic|static:B")]
    pub batching: Option<BatchingPolicy>,

    /// Number of workers.
    #[arg(long, env = "LINEAGE_WORKERS", value_name = "N")]
    pub workers: Option<u32>,

    /// Execute stage at a time instead of pipelining.
    #[arg(long, env = "LINEAGE_BLOCKING")]
    pub blocking: bool,
}

/// A plan file, or a built-in plan when no such file exists.
pub fn load_plan(arg: &str) -> Result<ValidatedPlan, Failure> {
    let path = Path::new(arg);
    let plan = if path.exists() {
        QueryPlan::load(path).map_err(|e| Failure::Input(format!("plan {}: {e}", path.display())))?
    } else if let Some(p) = scenarios::builtin(arg) {
        p
    } else {
        return Err(Failure::Input(format!(
            "plan file {} does not exist (built-in plans: {})",
            path.display(),
            scenarios::BUILTIN_NAMES.join(", ")
        )));
    };
    validate_plan(&plan).map_err(|e| Failure::Input(format!("plan {arg} is invalid: {e}")))
}

pub fn load_config(common: &CommonArgs) -> Result<SimConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Input(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Input(format!("config {}: {e}", path.display())))?
        }
        None => SimConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Pairs `--kill` with `--at`.
pub fn fault_spec(common: &CommonArgs) -> Result<FaultSpec, Failure> {
    let (kill, at) = (&common.kill, &common.at);
    if kill.is_empty() && !at.is_empty() {
        return Err(Failure::Input("--at given without --kill".into()));
    }
    if !kill.is_empty() && at.is_empty() {
        return Err(Failure::Input("--kill needs --at to say when the worker dies".into()));
    }
    if at.len() != 1 && at.len() != kill.len() {
        return Err(Failure::Input(format!(
            "{} --kill targets but {} --at triggers; give one trigger or one per kill",
            kill.len(),
            at.len()
        )));
    }
    let mut faults = FaultSpec::none();
    for (i, target) in kill.iter().enumerate() {
        faults = faults.and(*target, at[if at.len() == 1 { 0 } else { i }]);
    }
    faults.validate().map_err(Failure::Input)?;
    Ok(faults)
}

pub fn simulate(plan: &ValidatedPlan, cfg: &SimConfig, faults: &FaultSpec) -> Result<RunOutput, Failure> {
    cfg.validate()
        .map_err(|e| Failure::Input(format!("configuration: {e}")))?;
    harness::run(plan, cfg, faults).map_err(|e| Failure::Simulation(e.to_string()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn create_out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("cannot create {}: {e}", dir.display())))
}

pub fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let plan = load_plan(&args.common.plan)?;
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.strategy {
        cfg.strategy = s;
    }
    if let Some(b) = args.batching {
        cfg.batching = b;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    cfg.blocking |= args.blocking;
    let faults = fault_spec(&args.common)?;
    let out = simulate(&plan, &cfg, &faults)?;

    let dir = &args.common.out;
    create_out_dir(dir)?;
    write(dir, "result.digest", &format!("{}\n", out.metrics.result.to_hex()))?;
    write(dir, "metrics.txt", &out.metrics.to_kv())?;
    write(dir, "metrics.json", &out.metrics.to_json())?;
    write(dir, "audit.log", &out.audit.to_jsonl())?;

    let m = &out.metrics;
    println!(
        "{}: result {} makespan {:.3} ({} workers, {}, {}{})",
        plan.name,
        m.result.short(),
        m.makespan(),
        m.workers,
        m.strategy,
        m.batching,
        if m.blocking { ", blocking" } else { "" }
    );
    println!(
        "faults {} recoveries {} rewinds {} replays {} inputs {} reconstructed {}",
        m.faults_injected, m.recoveries, m.rewinds_planned, m.replays_planned, m.inputs_planned, m.reconstructed
    );
    println!("wrote {}", dir.display());

    let violations = audit(&out.audit);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violations(
            violations.iter().map(ToString::to_string).collect(),
        ))
    }
}
