//! The JSON files under `plans/` are the built-in scenarios, serialized.
//! Set `LINEAGE_BLESS=1` to regenerate them.

use std::path::Path;

use lineage_core::harness::scenarios;
use lineage_core::{validate_plan, QueryPlan};

#[test]
fn plan_files_match_the_built_in_scenarios() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../plans");
    let bless = std::env::var_os("LINEAGE_BLESS").is_some();
    for name in scenarios::BUILTIN_NAMES {
        let path = dir.join(format!("{name}.json"));
        let expected = scenarios::builtin(name).unwrap().to_json();
        if bless {
            std::fs::write(&path, &expected).unwrap();
        }
        let on_disk = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(
            on_disk,
            expected,
            "{} is stale; rerun with LINEAGE_BLESS=1",
            path.display()
        );
        let loaded = QueryPlan::load(&path).unwrap();
        validate_plan(&loaded).unwrap();
    }
}
