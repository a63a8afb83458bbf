//! Runs the finite-difference gradient-check suite over every
//! differentiable op and both contrastive losses, printing one line per
//! (op, precision) with the worst relative error observed.
//!
//! ```bash
//! cargo run --release -p slip --example gradcheck_suite
//! ```

fn main() {
    let outcome = slip::harness::cmd_gradcheck(0).expect("suite runs");
    for r in &outcome.reports {
        println!(
            "{:<22} {:?}  max rel err {:>12.3e}  (tol {:.0e})  {}",
            r.op,
            r.precision,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    assert!(outcome.all_passed, "gradient checks failed");
    println!("all gradient checks passed");
}
