//! Wall-clock comparison of the memory module against index retrieval.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{default_n_probe, EntrySource, KeyEncoder, MemoryIndex};
use crate::kpm::KpmModel;
use crate::numerics::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Candidates fetched per query on the retrieval path.
    pub k: usize,
    /// Also time an exhaustive scan.
    pub brute_force: bool,
    /// Worker threads for the separate throughput pass; 1 skips it.
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { batch: 32, warmup: 3, reps: 10, k: 3, brute_force: true, threads: 1 }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::Config(format!("bench needs reps ≥ 3, got {}", self.reps)));
        }
        if self.batch == 0 || self.k == 0 || self.threads == 0 {
            return Err(Error::Config("bench batch, k and threads must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
}

impl Timing {
    pub fn from_samples(ms: &[f64]) -> Timing {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = if ms.len() > 1 { ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Timing { mean_ms: mean, std_ms: var.sqrt(), min_ms: ms.iter().copied().fold(f64::INFINITY, f64::min) }
    }

    /// Samples per second at `batch` samples per call.
    pub fn throughput(&self, batch: usize) -> f64 {
        batch as f64 * 1000.0 / self.mean_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeLatency {
    pub kb_size: usize,
    pub n_cells: usize,
    pub n_probe: usize,
    pub kpm_mean_ms: f64,
    pub kpm_std_ms: f64,
    pub rag_mean_ms: f64,
    pub rag_std_ms: f64,
    /// `rag_mean_ms / kpm_mean_ms`
    pub speedup: f64,
    pub kpm_throughput: f64,
    pub rag_throughput: f64,
    pub brute_mean_ms: Option<f64>,
    pub brute_std_ms: Option<f64>,
    /// Index queries observed while the memory module was being timed.
    pub kpm_index_queries: u64,
    /// Samples per second with the batch spread over the worker pool.
    pub parallel_kpm_throughput: Option<f64>,
    pub parallel_rag_throughput: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub key_len: usize,
    pub horizon: usize,
    pub latent_dim: usize,
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
    pub k: usize,
    pub threads: usize,
    pub rag_config: String,
    pub sizes: Vec<SizeLatency>,
}

impl LatencyReport {
    pub fn kb_sizes(&self) -> Vec<usize> {
        self.sizes.iter().map(|s| s.kb_size).collect()
    }

    pub fn size(&self, kb_size: usize) -> Option<&SizeLatency> {
        self.sizes.iter().find(|s| s.kb_size == kb_size)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "kb_size", "n_cells", "n_probe", "kpm_mean_ms", "kpm_std_ms", "rag_mean_ms", "rag_std_ms", "speedup", "kpm_throughput",
            "rag_throughput", "brute_mean_ms",
        ])?;
        for s in &self.sizes {
            w.write_record([
                s.kb_size.to_string(),
                s.n_cells.to_string(),
                s.n_probe.to_string(),
                s.kpm_mean_ms.to_string(),
                s.kpm_std_ms.to_string(),
                s.rag_mean_ms.to_string(),
                s.rag_std_ms.to_string(),
                s.speedup.to_string(),
                s.kpm_throughput.to_string(),
                s.rag_throughput.to_string(),
                s.brute_mean_ms.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One timed repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTiming {
    pub kb_size: usize,
    pub path: String,
    pub rep: usize,
    pub ms: f64,
}

pub fn write_raw_csv(raw: &[RawTiming], header: &str, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for line in header.lines() {
        writeln!(file, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    for r in raw {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Indexes of the requested sizes, each built from the first entries of a
/// shared shuffled pool so all sizes see the same distribution.
pub fn index_family(
    mut pool: Vec<EntrySource>,
    sizes: &[usize],
    latent_dim: usize,
    horizon: usize,
    key_len: usize,
    rng: &mut RngState,
) -> Result<Vec<MemoryIndex>> {
    let largest = sizes.iter().copied().max().unwrap_or(0);
    if largest > pool.len() {
        return Err(Error::Config(format!("knowledge base of {largest} requested but the pool holds {}", pool.len())));
    }
    rng.shuffle(&mut pool);
    sizes
        .iter()
        .map(|&n| {
            let mut build_rng = rng.fork(&format!("index-{n}"));
            MemoryIndex::from_sources(pool[..n].to_vec(), latent_dim, horizon, key_len, None, &mut build_rng)
        })
        .collect()
}

fn time_reps(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    let mut out = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        out.push(start.elapsed().as_secs_f64() * 1000.0);
    }
    Ok(out)
}

fn kpm_call(encoder: &KeyEncoder, kpm: &KpmModel, keys: &[Vec<f64>]) -> Result<usize> {
    let z = encoder.encode_batch(keys)?;
    Ok(kpm.predict_batch(&z)?.len())
}

fn rag_call(encoder: &KeyEncoder, index: &MemoryIndex, keys: &[Vec<f64>], k: usize, n_probe: Option<usize>) -> Result<usize> {
    let z = encoder.encode_batch(keys)?;
    let mut gathered = Vec::with_capacity(keys.len() * k * index.horizon());
    for i in 0..keys.len() {
        let hits = match n_probe {
            Some(p) => index.query_topk(z.row(i), k, None, p)?,
            None => index.brute_force_topk(z.row(i), k, None)?,
        };
        for h in hits {
            gathered.extend_from_slice(index.value(h.entry));
        }
    }
    Ok(gathered.len())
}

/// Times the memory module and index retrieval on the same batch of keys
/// for every index. Runs on a single worker unless `threads > 1`, in which
/// case a separate throughput pass spreads the batch across the pool.
pub fn bench_latency(
    encoder: &KeyEncoder,
    kpm: &KpmModel,
    indexes: &[MemoryIndex],
    keys: &[Vec<f64>],
    opts: &BenchOptions,
) -> Result<(LatencyReport, Vec<RawTiming>)> {
    opts.validate()?;
    if keys.len() != opts.batch {
        return Err(Error::Config(format!("bench batch is {} but {} keys were given", opts.batch, keys.len())));
    }
    if encoder.latent_dim != kpm.config.latent_dim {
        return Err(Error::Incompatible(format!("encoder d={} but memory module d={}", encoder.latent_dim, kpm.config.latent_dim)));
    }
    let pinned = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| Error::State(e.to_string()))?;
    let parallel = if opts.threads > 1 {
        Some(rayon::ThreadPoolBuilder::new().num_threads(opts.threads).build().map_err(|e| Error::State(e.to_string()))?)
    } else {
        None
    };
    let per_worker = opts.batch.div_ceil(opts.threads);

    let mut raw = Vec::new();
    let mut sizes = Vec::with_capacity(indexes.len());
    for index in indexes {
        if index.latent_dim() != encoder.latent_dim || index.horizon() != kpm.config.horizon {
            return Err(Error::Incompatible("index latent width or horizon differs from the memory module".into()));
        }
        let n_probe = default_n_probe(index.n_cells());
        let kb = index.len();
        let mut record = |path: &str, ms: &[f64]| {
            raw.extend(ms.iter().enumerate().map(|(rep, &ms)| RawTiming { kb_size: kb, path: path.to_string(), rep, ms }));
        };

        let before = index.query_count();
        let kpm_ms = pinned.install(|| time_reps(opts.warmup, opts.reps, || kpm_call(encoder, kpm, keys).map(drop)))?;
        let kpm_index_queries = index.query_count() - before;
        record("kpm", &kpm_ms);
        let rag_ms = pinned.install(|| time_reps(opts.warmup, opts.reps, || rag_call(encoder, index, keys, opts.k, Some(n_probe)).map(drop)))?;
        record("rag", &rag_ms);
        let brute = if opts.brute_force {
            let ms = pinned.install(|| time_reps(opts.warmup, opts.reps, || rag_call(encoder, index, keys, opts.k, None).map(drop)))?;
            record("brute_force", &ms);
            Some(Timing::from_samples(&ms))
        } else {
            None
        };

        let (mut par_kpm, mut par_rag) = (None, None);
        if let Some(pool) = &parallel {
            let ms = pool.install(|| {
                time_reps(opts.warmup, opts.reps, || {
                    keys.par_chunks(per_worker).map(|c| kpm_call(encoder, kpm, c)).collect::<Result<Vec<_>>>().map(drop)
                })
            })?;
            record("kpm_parallel", &ms);
            par_kpm = Some(Timing::from_samples(&ms).throughput(opts.batch));
            let ms = pool.install(|| {
                time_reps(opts.warmup, opts.reps, || {
                    keys.par_chunks(per_worker)
                        .map(|c| rag_call(encoder, index, c, opts.k, Some(n_probe)))
                        .collect::<Result<Vec<_>>>()
                        .map(drop)
                })
            })?;
            record("rag_parallel", &ms);
            par_rag = Some(Timing::from_samples(&ms).throughput(opts.batch));
        }

        let (kt, rt) = (Timing::from_samples(&kpm_ms), Timing::from_samples(&rag_ms));
        log::info!("kb {kb}: memory {:.3} ms, retrieval {:.3} ms", kt.mean_ms, rt.mean_ms);
        sizes.push(SizeLatency {
            kb_size: kb,
            n_cells: index.n_cells(),
            n_probe,
            kpm_mean_ms: kt.mean_ms,
            kpm_std_ms: kt.std_ms,
            rag_mean_ms: rt.mean_ms,
            rag_std_ms: rt.std_ms,
            speedup: rt.mean_ms / kt.mean_ms,
            kpm_throughput: kt.throughput(opts.batch),
            rag_throughput: rt.throughput(opts.batch),
            brute_mean_ms: brute.as_ref().map(|t| t.mean_ms),
            brute_std_ms: brute.as_ref().map(|t| t.std_ms),
            kpm_index_queries,
            parallel_kpm_throughput: par_kpm,
            parallel_rag_throughput: par_rag,
        });
    }
    let report = LatencyReport {
        key_len: encoder.key_len,
        horizon: kpm.config.horizon,
        latent_dim: encoder.latent_dim,
        batch: opts.batch,
        warmup: opts.warmup,
        reps: opts.reps,
        k: opts.k,
        threads: opts.threads,
        rag_config: "ivf, n_probe = n_cells/8, n_cells = sqrt(N); per-query loop over the batch".into(),
        sizes,
    };
    Ok((report, raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kpm::KpmConfig;

    fn pool(n: usize, d: usize, v: usize, rng: &mut RngState) -> Vec<EntrySource> {
        (0..n)
            .map(|i| EntrySource {
                series_id: format!("s{}", i % 7),
                channel: 0,
                t: i,
                latent: (0..d).map(|_| rng.normal()).collect(),
                value: (0..v).map(|_| rng.normal()).collect(),
            })
            .collect()
    }

    fn setup() -> (KeyEncoder, KpmModel, Vec<MemoryIndex>, Vec<Vec<f64>>) {
        let mut rng = RngState::new(5);
        let (k, d, v) = (6, 4, 4);
        let encoder = KeyEncoder::new(k, d, &mut rng).unwrap();
        let mut cfg = KpmConfig::for_horizon(v);
        cfg.latent_dim = d;
        cfg.hidden = 8;
        cfg.branches = 2;
        cfg.ctx_tokens = 2;
        cfg.enc_depth = 1;
        cfg.dec_depth = 1;
        cfg.enc_heads = 2;
        cfg.dec_heads = 2;
        let kpm = KpmModel::new(cfg, &mut rng).unwrap();
        let family = index_family(pool(400, d, v, &mut rng), &[100, 400], d, v, k, &mut rng).unwrap();
        let keys = (0..4).map(|_| (0..k).map(|_| rng.normal()).collect()).collect();
        (encoder, kpm, family, keys)
    }

    #[test]
    fn report_arithmetic_and_isolation() {
        let (encoder, kpm, family, keys) = setup();
        let opts = BenchOptions { batch: 4, warmup: 1, reps: 3, k: 2, brute_force: true, threads: 2 };
        let (report, raw) = bench_latency(&encoder, &kpm, &family, &keys, &opts).unwrap();
        assert_eq!(report.kb_sizes(), vec![100, 400]);
        for s in &report.sizes {
            assert_eq!(s.speedup, s.rag_mean_ms / s.kpm_mean_ms);
            assert_eq!(s.kpm_throughput, 4.0 * 1000.0 / s.kpm_mean_ms);
            assert_eq!(s.rag_throughput, 4.0 * 1000.0 / s.rag_mean_ms);
            assert_eq!(s.kpm_index_queries, 0);
            assert!(s.kpm_std_ms >= 0.0 && s.rag_std_ms >= 0.0);
            assert!(s.parallel_kpm_throughput.is_some());
            for path in ["kpm", "rag", "brute_force"] {
                let samples: Vec<f64> = raw.iter().filter(|r| r.kb_size == s.kb_size && r.path == path).map(|r| r.ms).collect();
                assert_eq!(samples.len(), 3);
                let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
                let mean = if path == "kpm" { s.kpm_mean_ms } else if path == "rag" { s.rag_mean_ms } else { s.brute_mean_ms.unwrap() };
                assert!(mean >= min - 1e-12);
            }
        }
        // the retrieval path does touch the counter
        assert!(family[0].query_count() > 0);
    }

    #[test]
    fn too_few_reps_is_a_config_error() {
        let (encoder, kpm, family, keys) = setup();
        let opts = BenchOptions { batch: 4, reps: 2, ..Default::default() };
        assert!(matches!(bench_latency(&encoder, &kpm, &family, &keys, &opts), Err(Error::Config(_))));
    }

    #[test]
    fn speedup_division() {
        let rag = Timing { mean_ms: 160.0, std_ms: 0.0, min_ms: 160.0 };
        let kpm = Timing { mean_ms: 1.1, std_ms: 0.0, min_ms: 1.1 };
        assert!((rag.mean_ms / kpm.mean_ms - 145.454_545_45).abs() < 1e-6);
        assert_eq!(Timing::from_samples(&[1.0, 2.0, 3.0]).std_ms, 1.0);
    }

    #[test]
    fn family_sizes_are_as_labeled() {
        let (_, _, family, _) = setup();
        assert_eq!(family.iter().map(|i| i.len()).collect::<Vec<_>>(), vec![100, 400]);
    }
}
