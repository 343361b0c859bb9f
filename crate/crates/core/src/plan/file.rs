//! JSON plan files.
//!
//! ```json
//! {
//!   "version": 1,
//!   "name": "orders-by-key",
//!   "datasets": {
//!     "orders": {
//!       "schema": [{"name": "k", "type": "int64"}, {"name": "v", "type": "float64"}],
//!       "batch_rows": 4,
//!       "source": {"kind": "inline", "rows": [[1, 2.5], [2, 3.0]]}
//!     }
//!   },
//!   "stages": [
//!     {"id": 0, "channels": 2, "operator": {"type": "input_reader", "dataset": "orders"}, "partition_by": "k"},
//!     {"id": 1, "channels": 2, "operator": {"type": "aggregate", "group_by": ["k"],
//!       "aggregates": [{"func": "count", "output": "n"}]}}
//!   ],
//!   "edges": [{"from": 0, "to": 1}]
//! }
//! ```
//!
//! Dataset sources are `inline`, `csv` (`"path"` relative to the plan file)
//! or `generated` (`"rows"`, `"seed"`, `"columns"`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::QueryPlan;

pub const PLAN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PlanFileError {
    #[error("cannot read plan file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed plan: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported plan format version {0} (expected {PLAN_FORMAT_VERSION})")]
    Version(u32),
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    version: u32,
    #[serde(flatten)]
    plan: QueryPlan,
}

impl QueryPlan {
    pub fn from_json(text: &str) -> Result<QueryPlan, PlanFileError> {
        let file: PlanFile = serde_json::from_str(text)?;
        if file.version != PLAN_FORMAT_VERSION {
            return Err(PlanFileError::Version(file.version));
        }
        Ok(file.plan)
    }

    pub fn load(path: &Path) -> Result<QueryPlan, PlanFileError> {
        let text = std::fs::read_to_string(path).map_err(|source| PlanFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut plan = Self::from_json(&text)?;
        plan.base_dir = path.parent().map(Path::to_path_buf);
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PlanFile {
            version: PLAN_FORMAT_VERSION,
            plan: self.clone(),
        })
        .expect("plans always serialize")
    }
}
