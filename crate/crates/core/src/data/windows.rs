use serde::{Deserialize, Serialize};

use crate::data::series::TimeSeries;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Chronological split fractions. `t_train = ⌊αL⌋`, `t_val = ⌊(α+β)L⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { alpha: 0.7, beta: 0.1 }
    }
}

impl SplitSpec {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let s = SplitSpec { alpha, beta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0 - self.alpha) {
            return Err(Error::Config(format!("beta must lie in (0, 1-alpha), got {}", self.beta)));
        }
        Ok(())
    }

    /// `(t_train, t_val)` for a series of length `len`.
    pub fn points(&self, len: usize) -> (usize, usize) {
        let t_train = (self.alpha * len as f64).floor() as usize;
        let t_val = ((self.alpha + self.beta) * len as f64).floor() as usize;
        (t_train, t_val)
    }

    /// Which split, if any, fully contains the inclusive span `[start, end]`.
    pub fn classify(&self, len: usize, start: usize, end: usize) -> Option<Split> {
        let (t_train, t_val) = self.points(len);
        if end < t_train {
            Some(Split::Train)
        } else if start >= t_train && end < t_val {
            Some(Split::Val)
        } else if start >= t_val && end < len {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// A look-back key `x[t..t+K]` and its forecast value `x[t+K..t+K+V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub series_id: String,
    pub channel: usize,
    pub t: usize,
    /// `[K, D]`
    pub key: Tensor,
    /// `[V, D]`
    pub value: Tensor,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub key_len: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(key_len: usize, horizon: usize, stride: usize) -> Result<Self> {
        let w = WindowSpec { key_len, horizon, stride };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_len == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "window lengths and stride must be ≥ 1 (K={}, V={}, stride={})",
                self.key_len, self.horizon, self.stride
            )));
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.key_len + self.horizon
    }
}

/// Start offsets of every full window, before split filtering.
pub fn window_starts(len: usize, spec: &WindowSpec) -> impl Iterator<Item = usize> {
    let last = len.checked_sub(spec.span());
    let stride = spec.stride;
    (0..=last.unwrap_or(0)).step_by(stride).filter(move |_| last.is_some())
}

/// Slides a window over `series` and keeps the pairs whose whole span lies
/// inside one split interval; boundary-straddling pairs are dropped.
pub fn segment_series(series: &TimeSeries, spec: &WindowSpec, split: &SplitSpec) -> Result<Vec<WindowPair>> {
    spec.validate()?;
    let len = series.len();
    let d = series.channels();
    let data = series.values.data();
    let mut pairs = Vec::new();
    for t in window_starts(len, spec) {
        let end = t + spec.span() - 1;
        let Some(tag) = split.classify(len, t, end) else { continue };
        let key = data[t * d..(t + spec.key_len) * d].to_vec();
        let value = data[(t + spec.key_len) * d..(end + 1) * d].to_vec();
        pairs.push(WindowPair {
            series_id: series.id.clone(),
            channel: series.channel,
            t,
            key: Tensor::new(&[spec.key_len, d], key)?,
            value: Tensor::new(&[spec.horizon, d], value)?,
            split: tag,
        });
    }
    Ok(pairs)
}
