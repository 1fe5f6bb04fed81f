//! Finite-difference verification of every differentiable op.

use modaux::diffcore::op_suite;

fn main() -> modaux::Result<()> {
    let checks = op_suite(10, 2024)?;
    let mut failed = 0;
    for c in &checks {
        let ok = c.worst.passes(1e-4);
        failed += usize::from(!ok);
        println!(
            "{:<20} worst rel err {:.3e} over {} points ({} evals) {}",
            c.op,
            c.worst.max_rel_error,
            c.points,
            c.worst.evaluations,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("{} ops checked, {failed} failed", checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
