use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Pooled errors over every forecast point, with a per-step breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub per_step_mse: Vec<f64>,
    pub per_step_mae: Vec<f64>,
    pub samples: usize,
}

/// `predictions` and `targets` are `[N, V]`.
pub fn compute_metrics(predictions: &Tensor, targets: &Tensor) -> Result<MetricReport> {
    if predictions.shape() != targets.shape() {
        return Err(Error::shape("compute_metrics", format!("{:?} vs {:?}", predictions.shape(), targets.shape())));
    }
    if predictions.is_empty() {
        return Err(Error::Data("cannot score an empty forecast set".into()));
    }
    let (n, v) = if predictions.shape().len() == 2 { (predictions.rows(), predictions.cols()) } else { (1, predictions.len()) };
    let mut sq = vec![0.0; v];
    let mut ab = vec![0.0; v];
    for (i, (p, y)) in predictions.data().iter().zip(targets.data()).enumerate() {
        let e = p - y;
        sq[i % v] += e * e;
        ab[i % v] += e.abs();
    }
    let total = (n * v) as f64;
    Ok(MetricReport {
        mse: sq.iter().sum::<f64>() / total,
        mae: ab.iter().sum::<f64>() / total,
        per_step_mse: sq.iter().map(|s| s / n as f64).collect(),
        per_step_mae: ab.iter().map(|s| s / n as f64).collect(),
        samples: n,
    })
}

/// Mean pairwise L2 distance between the `m` branch outputs of each sample;
/// `branches` is `[N·m, V]`.
pub fn branch_diversity(branches: &Tensor, m: usize) -> Result<f64> {
    if m == 0 || branches.rows() % m != 0 {
        return Err(Error::shape("branch_diversity", format!("{} rows in groups of {m}", branches.rows())));
    }
    let n = branches.rows() / m;
    if n == 0 || m < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in 0..n {
        for a in 0..m {
            for b in a + 1..m {
                total += crate::numerics::tensor::squared_distance(branches.row(s * m + a), branches.row(s * m + b)).sqrt();
            }
        }
    }
    Ok(total / (n * m * (m - 1) / 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        let r = compute_metrics(&Tensor::vector(vec![0.0, 0.0]), &Tensor::vector(vec![1.0, -1.0])).unwrap();
        assert_eq!((r.mse, r.mae), (1.0, 1.0));
        let r = compute_metrics(&Tensor::vector(vec![3.0]), &Tensor::vector(vec![1.0])).unwrap();
        assert_eq!((r.mse, r.mae), (4.0, 2.0));
        let y = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = compute_metrics(&y, &y).unwrap();
        assert_eq!((r.mse, r.mae, r.samples), (0.0, 0.0, 2));
        assert!(compute_metrics(&Tensor::vector(vec![]), &Tensor::vector(vec![])).is_err());
    }

    #[test]
    fn per_step_breakdown() {
        let p = Tensor::matrix(2, 2, vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        let r = compute_metrics(&p, &Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(r.per_step_mse, vec![5.0, 0.0]);
        assert_eq!(r.per_step_mae, vec![2.0, 0.0]);
    }

    #[test]
    fn diversity_of_two_branches() {
        let b = Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        assert_eq!(branch_diversity(&b, 2).unwrap(), 5.0);
        assert_eq!(branch_diversity(&b, 1).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn mae_squared_never_exceeds_mse(values in proptest::collection::vec(-50.0f64..50.0, 2..60)) {
            let n = values.len() / 2;
            let p = Tensor::new(&[n, 1], values[..n].to_vec()).unwrap();
            let y = Tensor::new(&[n, 1], values[n..2 * n].to_vec()).unwrap();
            let r = compute_metrics(&p, &y).unwrap();
            prop_assert!(r.mse >= 0.0 && r.mae >= 0.0);
            prop_assert!(r.mae * r.mae <= r.mse * (1.0 + 1e-12) + 1e-300);
        }
    }
}
