//! Builds an inverted-file index over encoded training keys and queries it
//! with and without the leakage mask.
//!
//!     cargo run --release --example knowledge_base

use memforecast::data::{generate, segment_series, Split, SplitSpec, SynthKind, SynthSpec, WindowSpec};
use memforecast::index::{default_n_probe, KeyEncoder, LeakageMask, MemoryIndex};
use memforecast::numerics::RngState;

fn main() -> memforecast::Result<()> {
    let (k, v) = (32, 8);
    let spec = SynthSpec { kind: SynthKind::SinusMix, n_series: 6, length: 3000, key_len: k, horizon: v, ..SynthSpec::default() };
    let window = WindowSpec::new(k, v, 2)?;
    let split = SplitSpec::new(0.7, 0.1)?;
    let mut pairs = Vec::new();
    for s in generate(&spec, 5)? {
        pairs.extend(segment_series(&s, &window, &split)?.into_iter().filter(|p| p.split == Split::Train));
    }

    let mut rng = RngState::new(5);
    let encoder = KeyEncoder::new(k, 16, &mut rng)?;
    let index = MemoryIndex::build(&pairs, &encoder, None, &mut rng)?;
    let sizes = index.cell_sizes();
    println!(
        "{} entries in {} cells (smallest {}, largest {})",
        index.len(),
        index.n_cells(),
        sizes.iter().min().unwrap(),
        sizes.iter().max().unwrap()
    );

    let query = &pairs[pairs.len() / 2];
    let z = encoder.encode(query.key.data())?;
    let n_probe = default_n_probe(index.n_cells());
    let show = |label: &str, hits: &[memforecast::index::Hit]| {
        println!("{label}");
        for h in hits {
            let (s, c, t) = index.identity(h.entry);
            println!("  {s}/{c} t={t:<5} d^2={:.4}", h.distance);
        }
    };
    show(&format!("unmasked, {n_probe} probes:"), &index.query_topk(&z, 5, None, n_probe)?);

    let mask = LeakageMask::new(query.series_id.clone(), query.channel, query.t, k + v);
    show(
        &format!("masked around {}/{} t={}:", query.series_id, query.channel, query.t),
        &index.query_topk(&z, 5, Some(&mask), n_probe)?,
    );
    show("exact scan:", &index.brute_force_topk(&z, 5, Some(&mask))?);
    println!("queries served {}, leak violations {}", index.query_count(), index.leak_violations());
    Ok(())
}
