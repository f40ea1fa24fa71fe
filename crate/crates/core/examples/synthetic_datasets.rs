//! Generates the bimodal and regime-shift datasets and shows how they are
//! cut into leakage-free window pairs.
//!
//!     cargo run --release --example synthetic_datasets

use memforecast::data::{generate, segment_series, Split, SplitSpec, SynthKind, SynthSpec, WindowSpec};

fn main() -> memforecast::Result<()> {
    let window = WindowSpec::new(32, 8, 4)?;
    let split = SplitSpec::new(0.7, 0.1)?;

    for kind in [SynthKind::Bimodal, SynthKind::RegimeShift, SynthKind::SinusMix] {
        let spec = SynthSpec { kind, n_series: 4, length: 1200, key_len: 32, horizon: 8, ..SynthSpec::default() };
        let series = generate(&spec, 42)?;
        let mut counts = [0usize; 3];
        for s in &series {
            for p in segment_series(s, &window, &split)? {
                counts[match p.split {
                    Split::Train => 0,
                    Split::Val => 1,
                    Split::Test => 2,
                }] += 1;
            }
        }
        let first = series[0].channel_values(0);
        let mean = first.iter().sum::<f64>() / first.len() as f64;
        println!(
            "{:<13} {} series x {} steps, first mean {mean:+.3}, windows train/val/test {}/{}/{}",
            kind.as_str(),
            series.len(),
            series[0].len(),
            counts[0],
            counts[1],
            counts[2]
        );
        if kind == SynthKind::Bimodal {
            println!("{:<13} modes are {:.3} apart per window", "", spec.mode_separation());
        }
    }
    Ok(())
}
