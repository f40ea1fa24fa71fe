use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CsvLayout, SplitSpec, SynthKind, SynthSpec, WindowSpec};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionTrainConfig};
use crate::kpm::{KpmConfig, KpmTrainConfig, LossKind};
use crate::numerics::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Input CSV; when absent the `synth` stage output in the run directory is used.
    pub path: Option<PathBuf>,
    pub layout: CsvLayout,
    pub key_len: usize,
    pub horizon: usize,
    pub stride: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: None, layout: CsvLayout::Long, key_len: 32, horizon: 16, stride: 1, alpha: 0.7, beta: 0.1 }
    }
}

impl DataConfig {
    pub fn window(&self) -> WindowSpec {
        WindowSpec { key_len: self.key_len, horizon: self.horizon, stride: self.stride }
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec { alpha: self.alpha, beta: self.beta }
    }
}

/// Generator settings; window lengths come from `[data]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n_series: usize,
    pub length: usize,
    pub noise: f64,
    pub patterns: usize,
    pub mode_spread: f64,
    pub cue: f64,
    pub cue_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        SynthConfig {
            kind: s.kind,
            n_series: s.n_series,
            length: s.length,
            noise: s.noise,
            patterns: s.patterns,
            mode_spread: s.mode_spread,
            cue: s.cue,
            cue_jitter: s.cue_jitter,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self, data: &DataConfig) -> SynthSpec {
        SynthSpec {
            kind: self.kind,
            n_series: self.n_series,
            length: self.length,
            key_len: data.key_len,
            horizon: data.horizon,
            noise: self.noise,
            patterns: self.patterns,
            mode_spread: self.mode_spread,
            cue: self.cue,
            cue_jitter: self.cue_jitter,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecasterKind {
    LinearPatch,
    SeasonalNaive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecasterConfig {
    pub kind: ForecasterKind,
    /// Seasonal period; defaults to the look-back length.
    pub period: Option<usize>,
    pub lambda: f64,
    /// Fit on the target training split instead of the pretraining corpus.
    pub fit_on_target: bool,
    pub corpus_series: usize,
    pub corpus_length: usize,
    pub corpus_noise: f64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig {
            kind: ForecasterKind::LinearPatch,
            period: None,
            lambda: 1.0,
            fit_on_target: false,
            corpus_series: 32,
            corpus_length: 1000,
            corpus_noise: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    pub latent_dim: usize,
    pub n_cells: Option<usize>,
    pub n_probe: Option<usize>,
    pub standardize_keys: bool,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig { latent_dim: 64, n_cells: None, n_probe: None, standardize_keys: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KpmSection {
    pub hidden: usize,
    pub branches: usize,
    /// Chunk length `c`; defaults to `V/4` when that divides evenly.
    pub chunk: Option<usize>,
    pub ctx_tokens: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub ffn_mult: usize,
    pub loss: LossKind,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub refresh_every: usize,
    pub pool_factor: usize,
    pub dedup_tolerance: f64,
    pub max_skip_fraction: f64,
    pub grad_clip: f64,
    pub lr: f64,
}

impl Default for KpmSection {
    fn default() -> Self {
        let m = KpmConfig::for_horizon(4);
        let t = KpmTrainConfig::default();
        KpmSection {
            hidden: m.hidden,
            branches: m.branches,
            chunk: None,
            ctx_tokens: m.ctx_tokens,
            enc_depth: m.enc_depth,
            enc_heads: m.enc_heads,
            dec_depth: m.dec_depth,
            dec_heads: m.dec_heads,
            ffn_mult: m.ffn_mult,
            loss: t.loss,
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            refresh_every: t.refresh_every,
            pool_factor: t.pool_factor,
            dedup_tolerance: t.dedup_tolerance,
            max_skip_fraction: t.max_skip_fraction,
            grad_clip: t.grad_clip,
            lr: t.adam.lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub width: usize,
    /// Candidates consumed at inference; defaults to the branch count.
    pub candidates: Option<usize>,
    pub p_mem: f64,
    pub p_base: f64,
    pub temperature: f64,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub gated: bool,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub gate_lr_scale: f64,
    pub lr: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        let f = FusionConfig::new(1, 1);
        let t = FusionTrainConfig::default();
        FusionSection {
            width: f.width,
            candidates: None,
            p_mem: f.p_mem,
            p_base: f.p_base,
            temperature: f.temperature,
            depth: f.depth,
            heads: f.heads,
            ffn_mult: f.ffn_mult,
            gated: f.gated,
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            grad_clip: t.grad_clip,
            gate_lr_scale: t.gate_lr_scale,
            lr: t.adam.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub kb_sizes: Vec<usize>,
    pub key_len: usize,
    pub horizon: usize,
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Candidates retrieved per query on the retrieval path.
    pub k: usize,
    /// Worker threads for the throughput pass; 1 keeps only the pinned pass.
    pub threads: usize,
    pub brute_force: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            kb_sizes: vec![1_000, 10_000, 100_000],
            key_len: 96,
            horizon: 96,
            batch: 32,
            warmup: 3,
            reps: 10,
            k: 3,
            threads: 1,
            brute_force: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Topk,
    Loss,
    Gating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub studies: Vec<Study>,
    /// k values for the sweep; empty means `1..=M`.
    pub ks: Vec<usize>,
    /// Share of memory entries replaced by noise in the gating study.
    pub noise_fraction: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { studies: vec![Study::Topk, Study::Loss, Study::Gating], ks: Vec::new(), noise_fraction: 0.5 }
    }
}

/// Everything a run needs. Serialized verbatim into every artifact header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// When false, a stage whose outputs already exist refuses to run.
    #[serde(default = "default_overwrite")]
    pub overwrite: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub forecaster: ForecasterConfig,
    #[serde(default)]
    pub index: IndexConfig,
    #[serde(default)]
    pub kpm: KpmSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_overwrite() -> bool {
    true
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("all sections default")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("invalid run configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Format(format!("cannot serialize run configuration: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("cannot serialize run configuration: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.window().validate()?;
        self.data.split().validate()?;
        self.kpm_config().validate()?;
        self.kpm_train().validate()?;
        self.fusion_config()?.validate()?;
        self.fusion_train().validate()?;
        if self.index.latent_dim == 0 {
            return Err(Error::Config("index.latent_dim must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ablate.noise_fraction) {
            return Err(Error::Config(format!("ablate.noise_fraction must lie in [0,1], got {}", self.ablate.noise_fraction)));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        self.synth.spec(&self.data)
    }

    pub fn kpm_config(&self) -> KpmConfig {
        let k = &self.kpm;
        let mut c = KpmConfig::for_horizon(self.data.horizon);
        c.latent_dim = self.index.latent_dim;
        c.hidden = k.hidden;
        c.branches = k.branches;
        if let Some(chunk) = k.chunk {
            c.chunk = chunk;
        }
        c.ctx_tokens = k.ctx_tokens;
        c.enc_depth = k.enc_depth;
        c.enc_heads = k.enc_heads;
        c.dec_depth = k.dec_depth;
        c.dec_heads = k.dec_heads;
        c.ffn_mult = k.ffn_mult;
        c
    }

    /// The memory module at the benchmark shape; the configured chunk is
    /// kept when it divides the benchmark horizon.
    pub fn bench_kpm_config(&self) -> KpmConfig {
        let mut c = self.kpm_config();
        let fallback = KpmConfig::for_horizon(self.bench.horizon).chunk;
        c.horizon = self.bench.horizon;
        c.chunk = match self.kpm.chunk {
            Some(chunk) if chunk > 0 && self.bench.horizon % chunk == 0 => chunk,
            _ => fallback,
        };
        c
    }

    pub fn kpm_train(&self) -> KpmTrainConfig {
        let k = &self.kpm;
        KpmTrainConfig {
            loss: k.loss,
            max_epochs: k.max_epochs,
            patience: k.patience,
            batch_size: k.batch_size,
            refresh_every: k.refresh_every,
            n_cells: self.index.n_cells,
            n_probe: self.index.n_probe,
            pool_factor: k.pool_factor,
            dedup_tolerance: k.dedup_tolerance,
            max_skip_fraction: k.max_skip_fraction,
            grad_clip: k.grad_clip,
            adam: AdamConfig { lr: k.lr, ..AdamConfig::default() },
        }
    }

    pub fn fusion_candidates(&self) -> usize {
        self.fusion.candidates.unwrap_or(self.kpm.branches)
    }

    pub fn fusion_config(&self) -> Result<FusionConfig> {
        let m = self.fusion_candidates();
        if m == 0 || m > self.kpm.branches {
            return Err(Error::Config(format!("fusion consumes {m} candidates but the memory module has {} branches", self.kpm.branches)));
        }
        Ok(self.fusion_config_unchecked())
    }

    /// Fusion settings without the candidate-count check.
    pub fn fusion_config_unchecked(&self) -> FusionConfig {
        let f = &self.fusion;
        let m = self.fusion_candidates();
        FusionConfig {
            width: f.width,
            candidates: m,
            horizon: self.data.horizon,
            p_mem: f.p_mem,
            p_base: f.p_base,
            temperature: f.temperature,
            depth: f.depth,
            heads: f.heads,
            ffn_mult: f.ffn_mult,
            gated: f.gated,
        }
    }

    pub fn fusion_train(&self) -> FusionTrainConfig {
        let f = &self.fusion;
        FusionTrainConfig {
            max_epochs: f.max_epochs,
            patience: f.patience,
            batch_size: f.batch_size,
            grad_clip: f.grad_clip,
            gate_lr_scale: f.gate_lr_scale,
            adam: AdamConfig { lr: f.lr, ..AdamConfig::default() },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.kpm_config().chunk, 4);
        assert_eq!(cfg.fusion_candidates(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[kpm]\nbranchez = 2").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml("seed = 9\n[data]\nhorizon = 8\n[fusion]\ncandidates = 2\n[synth]\nkind = \"bimodal\"").unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fusion_config().unwrap().candidates, 2);
    }

    #[test]
    fn inconsistent_settings_fail_validation() {
        assert!(RunConfig::from_toml("[fusion]\ncandidates = 5").is_err());
        assert!(RunConfig::from_toml("[fusion]\np_base = 0.5").is_err());
        assert!(RunConfig::from_toml("[data]\nhorizon = 6\n[kpm]\nchunk = 4").is_err());
    }
}
