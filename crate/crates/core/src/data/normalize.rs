use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::series::TimeSeries;
use crate::data::windows::SplitSpec;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics taken from a series' training interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub series_id: String,
    pub channel: usize,
    pub train_len: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn apply(&self, x: f64, c: usize) -> f64 {
        (x - self.mean[c]) / self.std[c]
    }

    pub fn invert(&self, z: f64, c: usize) -> f64 {
        z * self.std[c] + self.mean[c]
    }
}

/// Standardizes each channel with mean/std of `x[0..t_train]`.
pub fn normalize(series: &TimeSeries, split: &SplitSpec) -> Result<(TimeSeries, NormStats)> {
    let (t_train, _) = split.points(series.len());
    if t_train == 0 {
        return Err(Error::Data(format!("series `{}` has an empty training interval (L={})", series.id, series.len())));
    }
    let d = series.channels();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for c in 0..d {
        let vals: Vec<f64> = (0..t_train).map(|i| series.values.row(i)[c]).collect();
        let mu = vals.iter().sum::<f64>() / t_train as f64;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / t_train as f64;
        mean[c] = mu;
        std[c] = var.sqrt().max(STD_FLOOR);
    }
    let stats = NormStats { series_id: series.id.clone(), channel: series.channel, train_len: t_train, mean, std };
    let mut out = series.clone();
    for i in 0..out.len() {
        for (c, v) in out.values.row_mut(i).iter_mut().enumerate() {
            *v = stats.apply(*v, c);
        }
    }
    Ok((out, stats))
}

pub fn save_stats(path: &Path, stats: &[NormStats]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(stats)?)?;
    Ok(())
}

pub fn load_stats(path: &Path) -> Result<Vec<NormStats>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_training_segment_becomes_zero() {
        let s = TimeSeries::univariate("c", vec![5.0; 10]);
        let (n, st) = normalize(&s, &SplitSpec::default()).unwrap();
        assert_eq!(st.std[0], STD_FLOOR);
        assert!(n.channel_values(0)[..7].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_variance_segment_is_unchanged() {
        let s = TimeSeries::univariate("u", vec![-1.0, 1.0, 3.0, 4.0]);
        let (n, st) = normalize(&s, &SplitSpec { alpha: 0.5, beta: 0.25 }).unwrap();
        assert_eq!((st.mean[0], st.std[0]), (0.0, 1.0));
        assert_eq!(n.channel_values(0), vec![-1.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn arithmetic_on_test_value() {
        let st = NormStats { series_id: "x".into(), channel: 0, train_len: 1, mean: vec![10.0], std: vec![2.0] };
        assert_eq!(st.apply(14.0, 0), 2.0);
        assert_eq!(st.invert(2.0, 0), 14.0);
    }

    #[test]
    fn stats_round_trip_as_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("norm.json");
        let s = TimeSeries::univariate("r", (0..20).map(|i| (i as f64).sin()).collect());
        let (_, st) = normalize(&s, &SplitSpec::default()).unwrap();
        save_stats(&p, std::slice::from_ref(&st)).unwrap();
        assert_eq!(load_stats(&p).unwrap(), vec![st]);
    }
}
