//! Acceptance gate: runs every verification suite and reports the eleven
//! numbered checks individually, one line per criterion. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines on success.

use measure_filter::validate::{run_suite, Check, Suite};

const SEED: u64 = 2026;

#[test]
fn all_acceptance_criteria_pass() {
    let mut checks: Vec<Check> = Vec::new();
    for suite in [
        Suite::Projection,
        Suite::Duality,
        Suite::Stability,
        Suite::Oracle,
    ] {
        checks.extend(run_suite(suite, SEED).checks);
    }
    checks.sort_by_key(|c| {
        c.name
            .split('-')
            .next()
            .and_then(|n| n.parse::<u32>().ok())
            .unwrap_or(u32::MAX)
    });

    assert_eq!(checks.len(), 11, "expected the 11 numbered criteria");
    let mut failed = Vec::new();
    for (i, check) in checks.iter().enumerate() {
        let number = i + 1;
        assert!(
            check.name.starts_with(&format!("{number}-")),
            "criterion {number} missing, found {}",
            check.name
        );
        let verdict = if check.pass { "PASS" } else { "FAIL" };
        println!("criterion {number:2}: {verdict} — {} ({})", check.name, check.details);
        if !check.pass {
            failed.push(format!("{} ({})", check.name, check.details));
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
