//! Frozen base forecasters standing in for a pretrained foundation model.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::WindowPair;
use crate::error::{Error, Result};
use crate::numerics::rng::checksum_f64;
use crate::numerics::Tensor;
use crate::persist::{ArtifactHeader, Checkpoint};

pub const FORECASTER_KIND: &str = "forecaster";

/// A pure map from a `K`-step look-back to a `V`-step forecast.
pub trait BaseForecaster: Send + Sync {
    fn name(&self) -> &'static str;
    fn key_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn predict_unchecked(&self, lookback: &[f64]) -> Vec<f64>;
    /// Fingerprint of every parameter, for frozen-state checks.
    fn checksum(&self) -> u64;

    fn predict(&self, lookback: &[f64]) -> Result<Vec<f64>> {
        if lookback.len() != self.key_len() {
            return Err(Error::shape("predict", format!("look-back length {} but forecaster expects {}", lookback.len(), self.key_len())));
        }
        Ok(self.predict_unchecked(lookback))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeasonalNaive {
    pub period: usize,
    pub key_len: usize,
    pub horizon: usize,
}

impl SeasonalNaive {
    pub fn new(period: usize, key_len: usize, horizon: usize) -> Result<Self> {
        if period == 0 || period > key_len || horizon == 0 {
            return Err(Error::Config(format!("seasonal period must lie in 1..={key_len}, got {period}")));
        }
        Ok(SeasonalNaive { period, key_len, horizon })
    }
}

impl BaseForecaster for SeasonalNaive {
    fn name(&self) -> &'static str {
        "seasonal_naive"
    }

    fn key_len(&self) -> usize {
        self.key_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn predict_unchecked(&self, lookback: &[f64]) -> Vec<f64> {
        let s = self.period;
        (0..self.horizon).map(|j| lookback[self.key_len - s + j % s]).collect()
    }

    fn checksum(&self) -> u64 {
        checksum_f64([self.period as f64, self.key_len as f64, self.horizon as f64])
    }
}

/// `ŷ = W·x + b` with `W` fit by closed-form ridge regression.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPatchForecaster {
    /// `[V, K]`
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub lambda: f64,
}

impl LinearPatchForecaster {
    pub fn new(weight: Tensor, bias: Vec<f64>, lambda: f64) -> Result<Self> {
        if weight.shape().len() != 2 || weight.rows() != bias.len() {
            return Err(Error::shape("LinearPatchForecaster", format!("weight {:?} with bias of {}", weight.shape(), bias.len())));
        }
        Ok(LinearPatchForecaster { weight, bias, lambda })
    }

    /// Ridge fit with an unpenalized intercept: inputs and targets are
    /// centered, `W = Ycᵀ Xc (XcᵀXc + λI)⁻¹`, then `b = ȳ − W x̄`.
    pub fn fit_ridge(pairs: &[WindowPair], lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!("ridge lambda must be ≥ 0, got {lambda}")));
        }
        let Some(first) = pairs.first() else {
            return Err(Error::Data("ridge fit needs a non-empty corpus".into()));
        };
        let (k, v) = (first.key.len(), first.value.len());
        if pairs.len() < k + v {
            return Err(Error::Data(format!("ridge fit needs ≥ K+V = {} samples, got {}", k + v, pairs.len())));
        }
        if pairs.iter().any(|p| p.key.len() != k || p.value.len() != v) {
            return Err(Error::shape("fit_ridge", "corpus windows differ in length"));
        }
        let n = pairs.len();
        let x = DMatrix::from_fn(n, k, |i, j| pairs[i].key.data()[j]);
        let y = DMatrix::from_fn(n, v, |i, j| pairs[i].value.data()[j]);
        let x_mean = x.row_mean();
        let y_mean = y.row_mean();
        let mut xc = x.clone();
        let mut yc = y.clone();
        for mut row in xc.row_iter_mut() {
            row -= &x_mean;
        }
        for mut row in yc.row_iter_mut() {
            row -= &y_mean;
        }
        let gram = xc.transpose() * &xc + DMatrix::identity(k, k) * lambda;
        if lambda == 0.0 {
            let eig = gram.clone().symmetric_eigenvalues();
            let (lo, hi) = (eig.min(), eig.max());
            if !(lo > hi.abs() * 1e-12) {
                return Err(Error::Numeric("ridge system is singular with lambda = 0; use lambda > 0".into()));
            }
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Numeric("ridge system is not positive definite; use lambda > 0".into()))?;
        let w = chol.solve(&(xc.transpose() * &yc)); // K×V
        let bias: Vec<f64> = (0..v).map(|j| y_mean[j] - (0..k).map(|i| w[(i, j)] * x_mean[i]).sum::<f64>()).collect();
        let weight = Tensor::new(&[v, k], (0..v).flat_map(|j| (0..k).map(move |i| (i, j))).map(|(i, j)| w[(i, j)]).collect())?;
        Self::new(weight, bias, lambda)
    }
}

impl BaseForecaster for LinearPatchForecaster {
    fn name(&self) -> &'static str {
        "linear_patch"
    }

    fn key_len(&self) -> usize {
        self.weight.cols()
    }

    fn horizon(&self) -> usize {
        self.weight.rows()
    }

    fn predict_unchecked(&self, lookback: &[f64]) -> Vec<f64> {
        (0..self.horizon())
            .map(|j| self.bias[j] + crate::numerics::tensor::dot(self.weight.row(j), lookback))
            .collect()
    }

    fn checksum(&self) -> u64 {
        checksum_f64(self.weight.data().iter().chain(&self.bias).copied().chain([self.lambda]))
    }
}

/// Either built-in forecaster, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Forecaster {
    SeasonalNaive(SeasonalNaive),
    LinearPatch(LinearPatchForecaster),
}

impl Forecaster {
    fn inner(&self) -> &dyn BaseForecaster {
        match self {
            Forecaster::SeasonalNaive(f) => f,
            Forecaster::LinearPatch(f) => f,
        }
    }

    /// Forecasts for a batch of look-backs, `[B, V]`.
    pub fn predict_batch<K: AsRef<[f64]>>(&self, lookbacks: &[K]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(lookbacks.len() * self.horizon());
        for l in lookbacks {
            data.extend(self.predict(l.as_ref())?);
        }
        Tensor::new(&[lookbacks.len(), self.horizon()], data)
    }

    pub fn to_checkpoint(&self, seed: u64, run: toml::Table) -> Result<Checkpoint> {
        let meta = ForecasterMeta {
            kind: self.name().to_string(),
            key_len: self.key_len(),
            horizon: self.horizon(),
            period: match self {
                Forecaster::SeasonalNaive(f) => Some(f.period),
                _ => None,
            },
            lambda: match self {
                Forecaster::LinearPatch(f) => Some(f.lambda),
                _ => None,
            },
        };
        let header = ArtifactHeader::new(FORECASTER_KIND, seed, meta, run).to_toml()?;
        let mut ck = Checkpoint::new(FORECASTER_KIND, header);
        if let Forecaster::LinearPatch(f) = self {
            ck.push("forecaster.weight", f.weight.clone());
            ck.push("forecaster.bias", Tensor::vector(f.bias.clone()));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ArtifactHeader<ForecasterMeta>)> {
        ck.expect_kind(FORECASTER_KIND)?;
        let header: ArtifactHeader<ForecasterMeta> = ArtifactHeader::from_toml(&ck.header)?;
        let m = &header.model;
        let f = match m.kind.as_str() {
            "seasonal_naive" => {
                let period = m.period.ok_or_else(|| Error::Format("seasonal forecaster without a period".into()))?;
                Forecaster::SeasonalNaive(SeasonalNaive::new(period, m.key_len, m.horizon)?)
            }
            "linear_patch" => {
                let weight = ck.get("forecaster.weight")?.clone();
                let bias = ck.get("forecaster.bias")?.data().to_vec();
                if weight.shape() != [m.horizon, m.key_len] {
                    return Err(Error::Format(format!("weight block {:?} disagrees with header", weight.shape())));
                }
                Forecaster::LinearPatch(LinearPatchForecaster::new(weight, bias, m.lambda.unwrap_or(0.0))?)
            }
            other => return Err(Error::Format(format!("unknown forecaster kind `{other}`"))),
        };
        Ok((f, header))
    }

    pub fn save(&self, path: &Path, seed: u64, run: toml::Table) -> Result<()> {
        self.to_checkpoint(seed, run)?.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, ArtifactHeader<ForecasterMeta>)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl BaseForecaster for Forecaster {
    fn name(&self) -> &'static str {
        self.inner().name()
    }

    fn key_len(&self) -> usize {
        self.inner().key_len()
    }

    fn horizon(&self) -> usize {
        self.inner().horizon()
    }

    fn predict_unchecked(&self, lookback: &[f64]) -> Vec<f64> {
        self.inner().predict_unchecked(lookback)
    }

    fn checksum(&self) -> u64 {
        self.inner().checksum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecasterMeta {
    pub kind: String,
    pub key_len: usize,
    pub horizon: usize,
    pub period: Option<usize>,
    pub lambda: Option<f64>,
}
