//! Compares analytic gradients of the memory module and the fusion head
//! against central finite differences.
//!
//!     cargo run --release --example gradient_check

use memforecast::eval::{check_fusion_gradients, check_kpm_gradients, desk_fusion_config, desk_kpm_config};

fn main() -> memforecast::Result<()> {
    for seed in 1..=3 {
        let kpm = check_kpm_gradients(seed, desk_kpm_config(), 6, 2)?;
        let fusion = check_fusion_gradients(seed, desk_fusion_config(), 2)?;
        for (name, r) in [("memory", &kpm), ("fusion", &fusion)] {
            println!(
                "seed {seed} {name:<6} {:>5} entries, max rel err {:.2e} (tolerance {:.0e}) {}",
                r.checked,
                r.max_rel_error,
                r.tolerance,
                if r.passed { "ok" } else { "FAILED" }
            );
        }
    }
    Ok(())
}
