//! Golden regression pin for the full experiment pipeline.
//!
//! Runs the small batch described by `fixtures/golden.conf` and compares
//! the produced results table byte for byte against a frozen copy. Any
//! change to the generator, prior fit, belief updates, inference loop,
//! price solver, auction engine, or CSV formatting that shifts numbers
//! shows up here as a diff. Regenerate the fixture deliberately (run the
//! CLI on the same config and copy `results.csv`) when such a change is
//! intentional.

use std::collections::BTreeMap;

use bica::harness::{config_from_sources, run_experiment, results_csv};

const CONF: &str = include_str!("fixtures/golden.conf");
const FROZEN: &str = include_str!("fixtures/golden_results.csv");

#[test]
fn pipeline_output_matches_frozen_results() {
    let dir = std::env::temp_dir().join(format!("bica_golden_{}", std::process::id()));
    let mut overrides = BTreeMap::new();
    overrides.insert("out".to_string(), dir.display().to_string());
    let cfg = config_from_sources(Some(CONF), &overrides).expect("golden config");
    let output = run_experiment(&cfg).expect("golden run");

    let written = std::fs::read_to_string(dir.join("results.csv")).expect("results file");
    std::fs::remove_dir_all(&dir).ok();

    let rendered = results_csv(&output.rows);
    assert_eq!(rendered, written, "in-memory rows differ from written file");
    assert_eq!(
        written, FROZEN,
        "pipeline output drifted from the frozen fixture"
    );
}
