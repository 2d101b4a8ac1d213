mod common;

use common::fluid::{compare_instances, fluid, STEP};

#[test]
fn oracle_reproduces_hand_computed_postponement() {
    // Same case as the exact engine test: one server alone, demand 12, P = 10.
    let r = fluid(&[(2, 10)], &[(0, 0, 0, 12)], 30);
    assert_eq!(r.postponements.len(), 1);
    assert!((r.postponements[0].1 - 10.0).abs() <= STEP);
    let (_, _, t, v) = r.completions[0];
    assert!((t - 12.0).abs() <= STEP && (v - 12.0).abs() <= STEP);
}

/// Event-driven runs agree with the fluid oracle on random 1-core sets.
#[test]
fn engine_matches_fluid_oracle() {
    let report = compare_instances(50);
    for line in &report.failures {
        eprintln!("{line}");
    }
    assert!(
        report.failures.is_empty(),
        "{} mismatching instances",
        report.failures.len()
    );
}
