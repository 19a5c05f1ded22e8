mod common;

use common::{cases, worst_over_seeds, REL_TOL, SEEDS};

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in cases() {
        let (err, seed) = worst_over_seeds(&case).unwrap_or_else(|e| panic!("{}: {e}", case.0));
        if err >= REL_TOL {
            failures.push(format!("{}: rel err {err:.3e} at seed {seed}", case.0));
        }
    }
    assert!(failures.is_empty(), "over {SEEDS} seeds:\n{}", failures.join("\n"));
}

#[test]
fn suite_covers_twenty_seeds() {
    const { assert!(SEEDS >= 20) };
    assert!(cases().len() >= 28);
}
