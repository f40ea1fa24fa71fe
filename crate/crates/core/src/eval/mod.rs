//! Metrics, gradient checks, the latency benchmark and ablation reports.

pub mod gradients;
pub mod latency;
pub mod metrics;

pub use gradients::{check_fusion_gradients, check_kpm_gradients, desk_fusion_config, desk_kpm_config, GRADCHECK_TOLERANCE};
pub use latency::{bench_latency, index_family, write_raw_csv, BenchOptions, LatencyReport, RawTiming, SizeLatency, Timing};
pub use metrics::{branch_diversity, compute_metrics, MetricReport};
