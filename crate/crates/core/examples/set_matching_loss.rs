//! The permutation-invariant set loss: branches are matched to targets
//! by a minimum-cost assignment, so the order of targets does not matter.
//!
//!     cargo run --release --example set_matching_loss

use memforecast::kpm::{identity_loss, permutation_loss, permutation_loss_with, Solver};

fn main() -> memforecast::Result<()> {
    let forecasts = vec![vec![1.0, 1.0, 1.0], vec![-1.0, -1.0, -1.0], vec![0.0, 0.5, 0.0]];
    let targets = vec![vec![0.0, 0.4, 0.1], vec![-0.9, -1.1, -1.0], vec![1.1, 0.9, 1.0]];

    let matched = permutation_loss(&forecasts, &targets)?;
    let fixed = identity_loss(&forecasts, &targets)?;
    println!("matched loss {:.4}, assignment {:?}", matched.loss, matched.assignment);
    println!("fixed-order loss {:.4}", fixed.loss);
    println!("per-branch errors {:?}", matched.branch_errors.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>());

    let mut reversed = targets.clone();
    reversed.reverse();
    let again = permutation_loss(&forecasts, &reversed)?;
    println!("after reversing the targets: {:.4} (unchanged: {})", again.loss, again.loss == matched.loss);

    let e = permutation_loss_with(&forecasts, &targets, Solver::Enumerate)?;
    let h = permutation_loss_with(&forecasts, &targets, Solver::Hungarian)?;
    println!("enumeration {:.6} vs Hungarian {:.6}", e.loss, h.loss);
    Ok(())
}
