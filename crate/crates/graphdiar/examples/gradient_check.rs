//! Verifies every analytic gradient against central finite differences on
//! random instances covering both scorers and both losses.
//!
//! Each instance perturbs every model parameter by ±h and compares
//! (f(x+h) − f(x−h)) / 2h with the hand-written backward pass. Instances
//! that land too close to a non-smooth point of the loss surface (clamp
//! bounds, histogram nodes, zero eigenvalues) are redrawn deterministically
//! so the comparison is meaningful.
//!
//! Run with: cargo run --example gradient_check

use graphdiar::gradcheck::{run_gradient_check, GradCheckConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = GradCheckConfig::default();
    let report = run_gradient_check(&cfg)?;

    println!(
        "{:>3} {:>6} {:>4} {:>14} {:>13} {:>12}",
        "#", "nodes", "dim", "loss", "scorer", "max rel err"
    );
    for inst in &report.instances {
        println!(
            "{:>3} {:>6} {:>4} {:>14} {:>13} {:>12.3e}",
            inst.index,
            inst.nodes,
            inst.dim,
            format!("{:?}", inst.loss),
            format!("{:?}", inst.scorer),
            inst.worst_rel_err
        );
    }
    println!(
        "\nworst relative error {:.3e} (tolerance {:.1e}) -> {}",
        report.worst_rel_err,
        report.tolerance,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    assert!(report.passed());
    Ok(())
}
