//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! straight to the terminal (bypassing the test harness capture) and the
//! test fails if any criterion does.

use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use memforecast::data::WindowPair;
use memforecast::eval::{check_fusion_gradients, check_kpm_gradients, desk_fusion_config, desk_kpm_config, GRADCHECK_TOLERANCE};
use memforecast::forecasters::Forecaster;
use memforecast::fusion::{fusion_checkpoint, fusion_from_checkpoint};
use memforecast::index::{EntrySource, LeakageMask, MemoryIndex};
use memforecast::kpm::{kpm_checkpoint, kpm_from_checkpoint, permutation_loss, permutation_loss_with, LossKind, Solver};
use memforecast::numerics::{RngState, Tensor};
use memforecast::persist::Checkpoint;
use memforecast::pipeline::ablation::{gating_ablation, loss_arm, topk_sweep};
use memforecast::pipeline::experiment::{branch_outputs, fit_forecaster, prepare_dataset, synthesize, Dataset};
use memforecast::pipeline::stages::run_bench;
use memforecast::pipeline::{run_pipeline, run_stage, RunConfig, RunDir, Stage, StageOptions};

const BIMODAL: &str = include_str!("../configs/bimodal.toml");
const REGIME: &str = include_str!("../configs/regime_shift.toml");
const BENCH: &str = include_str!("../configs/bench.toml");
const QUICK: &str = include_str!("../configs/quick.toml");

type Outcome = Result<String, String>;

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

/// `ACCEPTANCE_ONLY=6,9` runs a subset.
fn selected(n: u32) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|x| x.trim().parse() == Ok(n)),
        Err(_) => true,
    }
}

fn criterion(results: &mut Vec<(u32, bool)>, n: u32, name: &str, f: impl FnOnce() -> Outcome) {
    if !selected(n) {
        return;
    }
    let start = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    };
    let secs = start.elapsed().as_secs_f64();
    let (ok, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    report(&format!("criterion {n:>2} {}: {name} ({secs:.1}s) {detail}", if ok { "PASS" } else { "FAIL" }));
    results.push((n, ok));
}

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config(text: &str) -> RunConfig {
    RunConfig::from_toml(text).expect("shipped config parses")
}

fn random_rows(rng: &mut RngState, m: usize, v: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..v).map(|_| rng.normal()).collect()).collect()
}

fn matching_solvers_agree() -> Outcome {
    let mut rng = RngState::new(11);
    let start = Instant::now();
    for i in 0..1000 {
        let m = 2 + i % 5;
        let v = if i % 2 == 0 { 2 } else { 8 };
        let f = random_rows(&mut rng, m, v);
        let y = random_rows(&mut rng, m, v);
        let e = permutation_loss_with(&f, &y, Solver::Enumerate).map_err(|e| e.to_string())?;
        let h = permutation_loss_with(&f, &y, Solver::Hungarian).map_err(|e| e.to_string())?;
        if e.loss != h.loss {
            return Err(format!("instance {i} (M={m}, V={v}): enumeration {} vs hungarian {}", e.loss, h.loss));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, format!("1000 instances, identical minima, {secs:.3}s"))
}

fn shuffled_targets_same_loss() -> Outcome {
    let mut rng = RngState::new(12);
    for i in 0..1000 {
        let m = 2 + i % 5;
        let v = if i % 2 == 0 { 2 } else { 8 };
        let f = random_rows(&mut rng, m, v);
        let y = random_rows(&mut rng, m, v);
        let mut ys = y.clone();
        rng.shuffle(&mut ys);
        let a = permutation_loss(&f, &y).map_err(|e| e.to_string())?.loss;
        let b = permutation_loss(&f, &ys).map_err(|e| e.to_string())?.loss;
        if a != b {
            return Err(format!("shuffle {i}: {a} vs {b}"));
        }
    }
    Ok("1000 shuffles, bit-identical loss".into())
}

fn gradients_match_finite_differences() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 1..=3 {
        let k = check_kpm_gradients(seed, desk_kpm_config(), 6, 2).map_err(|e| e.to_string())?;
        let f = check_fusion_gradients(seed, desk_fusion_config(), 2).map_err(|e| e.to_string())?;
        for r in [&k, &f] {
            if !r.passed {
                return Err(format!("seed {seed}: max rel err {:.2e} at {:?}", r.max_rel_error, r.worst));
            }
            worst = worst.max(r.max_rel_error);
        }
    }
    ensure(worst <= GRADCHECK_TOLERANCE, format!("3 seeds, every parameter, max rel err {worst:.2e}"))
}

fn leakage_audit() -> Outcome {
    let cfg = config(BIMODAL);
    let ds = prepare_dataset(&synthesize(&cfg).unwrap(), &cfg).unwrap();
    let kpm = memforecast::pipeline::experiment::train_memory(&cfg, &ds.train, &ds.val, LossKind::Perm, true, cfg.seed)
        .map_err(|e| e.to_string())?;
    let span = cfg.data.key_len + cfg.data.horizon;
    let mut checked = 0usize;
    for entry in &kpm.audit {
        for (series, channel, t) in &entry.hits {
            checked += 1;
            if *series == entry.query.series_id && *channel == entry.query.channel && t.abs_diff(entry.query.t) < span {
                return Err(format!("`{series}`@{t} retrieved for query @{}", entry.query.t));
            }
        }
    }
    ensure(
        kpm.leak_violations == 0 && !kpm.audit.is_empty(),
        format!("{} retrievals, {checked} candidates audited, {} in-op violations", kpm.audit.len(), kpm.leak_violations),
    )
}

fn index_matches_linear_scan() -> Outcome {
    let mut rng = RngState::new(13);
    let mut queries = 0;
    for trial in 0..200 {
        let n = 20 + rng.below(481);
        let d = 1 + rng.below(16);
        let sources: Vec<EntrySource> = (0..n)
            .map(|i| EntrySource {
                series_id: format!("s{}", rng.below(4)),
                channel: rng.below(2),
                t: i,
                latent: (0..d).map(|_| rng.normal()).collect(),
                value: vec![i as f64],
            })
            .collect();
        let cells = 1 + rng.below(20.min(n));
        let index = MemoryIndex::from_sources(sources.clone(), d, 1, 4, Some(cells), &mut rng).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let mask = LeakageMask::new(format!("s{}", rng.below(4)), rng.below(2), rng.below(n), 1 + rng.below(30));
            let mut oracle: Vec<(f64, &EntrySource)> = sources
                .iter()
                .filter(|s| !mask.excludes(&s.series_id, s.channel, s.t))
                .map(|s| (s.latent.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), s))
                .collect();
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0));
            for k in 1..=10usize.min(oracle.len()) {
                queries += 1;
                let hits = index.query_topk(&z, k, Some(&mask), index.n_cells()).map_err(|e| e.to_string())?;
                for (h, (dist, src)) in hits.iter().zip(&oracle) {
                    let (s, c, t) = index.identity(h.entry);
                    let same = s == src.series_id && c == src.channel && t == src.t;
                    if !same || (h.distance - dist).abs() > 1e-12 * dist.max(1.0) {
                        return Err(format!("trial {trial}, k={k}: got `{s}`@{t} at {}, expected `{}`@{} at {dist}", h.distance, src.series_id, src.t));
                    }
                }
            }
        }
    }
    Ok(format!("200 indexes, {queries} queries, identities and distances match"))
}

/// Mean pairwise branch distance in the original units of each series.
fn raw_diversity(branches: &Tensor, m: usize, pairs: &[WindowPair], ds: &Dataset) -> f64 {
    let stds: HashMap<(&str, usize), f64> = ds.stats.iter().map(|s| ((s.series_id.as_str(), s.channel), s.std[0])).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for (i, p) in pairs.iter().enumerate() {
        let sd = stds[&(p.series_id.as_str(), p.channel)];
        for a in 0..m {
            for b in a + 1..m {
                let (ra, rb) = (branches.row(i * m + a), branches.row(i * m + b));
                total += sd * ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                count += 1;
            }
        }
    }
    total / count as f64
}

fn anti_collapse() -> Outcome {
    let cfg = config(BIMODAL);
    let ds = prepare_dataset(&synthesize(&cfg).unwrap(), &cfg).unwrap();
    if ds.train.len() < 2000 || cfg.kpm.branches != 2 {
        return Err(format!("setup: {} training pairs, M={}", ds.train.len(), cfg.kpm.branches));
    }
    let f = fit_forecaster(&cfg, &ds, cfg.seed).unwrap();
    let separation = cfg.synth_spec().mode_separation();
    let mut arms = Vec::new();
    for loss in [LossKind::Perm, LossKind::Mse] {
        let (arm, kpm) = loss_arm(&cfg, &ds, &f, loss).map_err(|e| e.to_string())?;
        let branches = branch_outputs(&kpm.model, &kpm.encoder, &ds.test).unwrap();
        arms.push((raw_diversity(&branches, 2, &ds.test, &ds) / separation, arm.fused.mse));
    }
    let (perm, mse) = (arms[0], arms[1]);
    ensure(
        perm.0 > 0.5 && mse.0 < 0.1 && perm.1 < mse.1,
        format!(
            "diversity/separation perm {:.3} mse {:.3}; fused MSE perm {:.5} mse {:.5} ({} train pairs)",
            perm.0,
            mse.0,
            perm.1,
            mse.1,
            ds.train.len()
        ),
    )
}

fn gating_benefit() -> Outcome {
    let cfg = config(REGIME);
    let ds = prepare_dataset(&synthesize(&cfg).unwrap(), &cfg).unwrap();
    let f = fit_forecaster(&cfg, &ds, cfg.seed).unwrap();
    let g = gating_ablation(&cfg, &ds, &f, 0.5).map_err(|e| e.to_string())?;
    ensure(
        g.gated.mse <= g.ungated.mse,
        format!("50% noisy memory: gated {:.5} ungated {:.5} (base {:.5})", g.gated.mse, g.ungated.mse, g.base.mse),
    )
}

fn domain_adaptation() -> Outcome {
    let base = config(REGIME);
    let mut lines = Vec::new();
    let mut all = true;
    for v in [4, 16] {
        for seed in 1..=3 {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.data.horizon = v;
            let out = run_pipeline(&cfg, &synthesize(&cfg).unwrap()).map_err(|e| e.to_string())?;
            let e = &out.evaluation;
            all &= e.fused.mse < e.base.mse && out.base_checksum.0 == out.base_checksum.1;
            lines.push(format!("V={v}/s{seed} {:.3}", e.relative_mse));
        }
    }
    ensure(all, format!("fused/base MSE: {}", lines.join(", ")))
}

fn latency_scaling() -> Outcome {
    let cfg = config(BENCH);
    let (report, _) = run_bench(&cfg).map_err(|e| e.to_string())?;
    let (small, large) = (report.size(1_000).ok_or("no 1K row")?, report.size(100_000).ok_or("no 100K row")?);
    let kpm: Vec<f64> = report.sizes.iter().map(|s| s.kpm_mean_ms).collect();
    let (lo, hi) = kpm.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let variation = (hi - lo) / lo;
    let growth = large.rag_mean_ms / small.rag_mean_ms;
    let queries: u64 = report.sizes.iter().map(|s| s.kpm_index_queries).sum();
    ensure(
        variation < 0.2 && growth >= 5.0 && large.speedup >= 10.0 && queries == 0,
        format!(
            "memory {} ms ({:.1}% spread); retrieval 1K {:.3} ms, 100K {:.3} ms ({growth:.1}x); speedup at 100K {:.1}x; {queries} index queries while timing memory",
            kpm.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/"),
            variation * 100.0,
            small.rag_mean_ms,
            large.rag_mean_ms,
            large.speedup
        ),
    )
}

fn topk_direction() -> Outcome {
    let mut cfg = config(BIMODAL);
    cfg.kpm.branches = 4;
    let raw = synthesize(&cfg).unwrap();
    let out = run_pipeline(&cfg, &raw).map_err(|e| e.to_string())?;
    let rows = topk_sweep(&cfg, &out.dataset, &out.forecaster, &out.kpm.model, &out.kpm.encoder, &[1, 2, 3, 4])
        .map_err(|e| e.to_string())?;
    let rel = |k: usize| rows.iter().find(|r| r.k == k).map(|r| r.relative_mse).unwrap_or(f64::NAN);
    let full = rows.iter().find(|r| r.k == 4).ok_or("no k=4 row")?;
    let exact = full.mse == out.evaluation.fused.mse && full.mae == out.evaluation.fused.mae;
    ensure(
        rows.len() == 4 && rel(3) <= rel(1) && exact,
        format!(
            "relative MSE k=1..4: {:.3} {:.3} {:.3} {:.3}; k=4 row equals the full pipeline: {exact}",
            rel(1),
            rel(2),
            rel(3),
            rel(4)
        ),
    )
}

fn resave(ck: &Checkpoint, reload: impl Fn(&Checkpoint) -> Checkpoint) -> bool {
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).expect("reload");
    reload(&back).to_bytes() == bytes
}

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = config(QUICK);
    cfg.out = dir.path().join("run");
    let stages = [Stage::Synth, Stage::BuildKb, Stage::TrainKpm, Stage::TrainFusion, Stage::Forecast];
    let run_dir = RunDir::new(&cfg.out);
    let mut reports = Vec::new();
    for _ in 0..2 {
        for stage in stages {
            run_stage(stage, &cfg, &StageOptions::default()).map_err(|e| format!("{stage}: {e}"))?;
        }
        reports.push(std::fs::read(run_dir.metrics()).map_err(|e| e.to_string())?);
    }
    let identical = reports[0] == reports[1];

    let seed = cfg.seed;
    let table = cfg.to_table().unwrap();
    let (forecaster, _) = Forecaster::load(&run_dir.forecaster()).map_err(|e| e.to_string())?;
    let f_ok = resave(&forecaster.to_checkpoint(seed, table.clone()).unwrap(), |ck| {
        Forecaster::from_checkpoint(ck).unwrap().0.to_checkpoint(seed, table.clone()).unwrap()
    });
    let kpm_ck = Checkpoint::load(&run_dir.kpm()).map_err(|e| e.to_string())?;
    let k_ok = resave(&kpm_ck, |ck| {
        let (m, e, _) = kpm_from_checkpoint(ck).unwrap();
        kpm_checkpoint(&m, &e, seed, table.clone()).unwrap()
    });
    let fusion_ck = Checkpoint::load(&run_dir.fusion()).map_err(|e| e.to_string())?;
    let u_ok = resave(&fusion_ck, |ck| fusion_checkpoint(&fusion_from_checkpoint(ck).unwrap().0, seed, table.clone()).unwrap());
    let kb = std::fs::read(run_dir.kb()).map_err(|e| e.to_string())?;
    let i_ok = MemoryIndex::from_bytes(&kb).map_err(|e| e.to_string())?.to_bytes() == kb;
    ensure(
        identical && f_ok && k_ok && u_ok && i_ok,
        format!("metric reports identical: {identical}; round trips forecaster {f_ok}, memory {k_ok}, fusion {u_ok}, index {i_ok}"),
    )
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    criterion(&mut results, 1, "permutation loss, enumeration vs Hungarian", matching_solvers_agree);
    criterion(&mut results, 2, "set invariance under target shuffles", shuffled_targets_same_loss);
    criterion(&mut results, 3, "gradient fidelity", gradients_match_finite_differences);
    criterion(&mut results, 4, "leakage safety", leakage_audit);
    criterion(&mut results, 5, "index exactness", index_matches_linear_scan);
    criterion(&mut results, 6, "anti-collapse", anti_collapse);
    criterion(&mut results, 7, "gating benefit", gating_benefit);
    criterion(&mut results, 8, "domain-adaptation improvement", domain_adaptation);
    criterion(&mut results, 9, "latency scaling", latency_scaling);
    criterion(&mut results, 10, "k-sweep direction", topk_direction);
    criterion(&mut results, 11, "determinism and persistence", determinism_and_persistence);
    let failed: Vec<u32> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    report(&format!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len()));
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
