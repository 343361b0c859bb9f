//! The `verify` command: offline invariant checks over an audit log.

use std::path::PathBuf;

use clap::Args;
use lineage_core::gcs::AuditLog;
use lineage_core::harness::audit;

use crate::Failure;

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Audit log written by `run`.
    #[arg(env = "LINEAGE_LOG", value_name = "AUDIT_LOG")]
    pub log: PathBuf,
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let path = &args.log;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Input(format!("cannot read audit log {}: {e}", path.display())))?;
    let log = AuditLog::parse(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let violations = audit(&log);
    let recoveries = log.recoveries().count();
    let txns = log.transactions().count();
    if violations.is_empty() {
        println!(
            "{}: {} records, {txns} transactions, {recoveries} recoveries, no violations",
            path.display(),
            log.len()
        );
        return Ok(());
    }
    for v in &violations {
        println!("{v}");
    }
    Err(Failure::Violations(
        violations.iter().map(ToString::to_string).collect(),
    ))
}
