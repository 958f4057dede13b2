//! Gradient verification command: runs the 64-bit finite-difference
//! suite over every differentiable op plus one full fuse block and
//! prints a pass/fail table.

use fusenet::gradcheck::{full_block_check, standard_suite, OpReport};
use fusenet::Result;

const SEEDS: u64 = 20;
const BLOCK_SEEDS: u64 = 3;

fn print_row(r: &OpReport) {
    println!(
        "{:<28} {:>12.3e}  (< {:>7.0e})  {}",
        r.name,
        r.max_rel_err,
        r.threshold,
        if r.passed() { "pass" } else { "FAIL" }
    );
}

/// Returns `Ok(true)` when every check passes; the failing ops are
/// already printed in the table.
pub fn run() -> Result<bool> {
    println!(
        "{:<28} {:>12}  {:>11}  result",
        "operation", "max rel err", "threshold"
    );
    let mut reports = standard_suite(SEEDS)?;
    reports.push(full_block_check(BLOCK_SEEDS)?);
    let mut all_pass = true;
    for r in &reports {
        print_row(r);
        all_pass &= r.passed();
    }
    if all_pass {
        println!("all {} checks passed", reports.len());
    }
    Ok(all_pass)
}
