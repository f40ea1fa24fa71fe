use crate::error::{Error, Result};
use crate::numerics::tensor::squared_distance;

/// Largest branch count accepted by the matcher.
pub const MAX_BRANCHES: usize = 8;
/// Up to this many branches the optimum is found by trying every permutation.
pub const ENUMERATION_LIMIT: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    /// Enumeration up to [`ENUMERATION_LIMIT`], Hungarian beyond.
    Auto,
    Enumerate,
    Hungarian,
}

/// Outcome of matching `M` forecasts to `M` targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `assignment[m]` is the target matched to branch `m`.
    pub assignment: Vec<usize>,
    pub loss: f64,
    pub branch_errors: Vec<f64>,
}

/// `C[m][n] = ||ŷ_m − y_n||²`, row-major.
pub fn cost_matrix<F: AsRef<[f64]>, T: AsRef<[f64]>>(forecasts: &[F], targets: &[T]) -> Result<Vec<f64>> {
    let m = forecasts.len();
    if m != targets.len() {
        return Err(Error::shape("permutation_loss", format!("{} forecasts vs {} targets", m, targets.len())));
    }
    if m == 0 {
        return Err(Error::shape("permutation_loss", "empty forecast set"));
    }
    let v = forecasts[0].as_ref().len();
    if forecasts.iter().map(|f| f.as_ref().len()).chain(targets.iter().map(|t| t.as_ref().len())).any(|l| l != v) {
        return Err(Error::shape("permutation_loss", "horizon lengths differ"));
    }
    let mut c = Vec::with_capacity(m * m);
    for f in forecasts {
        for t in targets {
            c.push(squared_distance(f.as_ref(), t.as_ref()));
        }
    }
    Ok(c)
}

fn result_for(cost: &[f64], m: usize, assignment: Vec<usize>) -> MatchResult {
    let branch_errors: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| cost[i * m + j]).collect();
    // summed in branch order so every solver reports the same bits for the same assignment
    let loss = branch_errors.iter().fold(0.0, |acc, e| acc + e);
    MatchResult { assignment, loss, branch_errors }
}

fn assignment_cost(cost: &[f64], m: usize, perm: &[usize]) -> f64 {
    perm.iter().enumerate().fold(0.0, |acc, (i, &j)| acc + cost[i * m + j])
}

/// Exhaustive search over all `m!` assignments (Heap's algorithm).
pub fn enumerate_assignment(cost: &[f64], m: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = perm.clone();
    let mut best_cost = assignment_cost(cost, m, &perm);
    let mut c = vec![0usize; m];
    let mut i = 0;
    while i < m {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let s = assignment_cost(cost, m, &perm);
            if s < best_cost || (s == best_cost && perm < best) {
                best_cost = s;
                best.copy_from_slice(&perm);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Minimum-cost assignment by the Hungarian method with row/column potentials.
pub fn hungarian(cost: &[f64], m: usize) -> Vec<usize> {
    // 1-based arrays; column 0 is the virtual start column
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; m];
    for j in 1..=m {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Set-matching loss: the minimum over branch→target bijections of the
/// summed squared errors.
pub fn permutation_loss<F: AsRef<[f64]>, T: AsRef<[f64]>>(forecasts: &[F], targets: &[T]) -> Result<MatchResult> {
    permutation_loss_with(forecasts, targets, Solver::Auto)
}

pub fn permutation_loss_with<F: AsRef<[f64]>, T: AsRef<[f64]>>(
    forecasts: &[F],
    targets: &[T],
    solver: Solver,
) -> Result<MatchResult> {
    let m = forecasts.len();
    if m > MAX_BRANCHES {
        return Err(Error::Config(format!("{m} branches exceeds the matcher cap of {MAX_BRANCHES}")));
    }
    let cost = cost_matrix(forecasts, targets)?;
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite matching cost".into()));
    }
    let use_enum = match solver {
        Solver::Auto => m <= ENUMERATION_LIMIT,
        Solver::Enumerate => true,
        Solver::Hungarian => false,
    };
    let assignment = if use_enum { enumerate_assignment(&cost, m) } else { hungarian(&cost, m) };
    Ok(result_for(&cost, m, assignment))
}

/// Branch `m` paired with target `m` (plain per-branch regression).
pub fn identity_loss<F: AsRef<[f64]>, T: AsRef<[f64]>>(forecasts: &[F], targets: &[T]) -> Result<MatchResult> {
    let m = forecasts.len();
    let cost = cost_matrix(forecasts, targets)?;
    Ok(result_for(&cost, m, (0..m).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use proptest::prelude::*;

    fn random_set(rng: &mut RngState, m: usize, v: usize) -> Vec<Vec<f64>> {
        (0..m).map(|_| (0..v).map(|_| rng.normal()).collect()).collect()
    }

    #[test]
    fn exact_match_has_zero_loss() {
        let f = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let r = permutation_loss(&f, &f).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.assignment, vec![0, 1, 2]);
    }

    #[test]
    fn swapped_pair_is_matched() {
        let f = vec![vec![1.0], vec![3.0]];
        let y = vec![vec![3.0], vec![1.0]];
        let r = permutation_loss(&f, &y).unwrap();
        assert_eq!(r.assignment, vec![1, 0]);
        assert_eq!(r.loss, 0.0);
        assert_eq!(identity_loss(&f, &y).unwrap().loss, 8.0);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let f = vec![vec![1.0], vec![3.0]];
        let y = vec![vec![3.0]];
        assert!(matches!(permutation_loss(&f, &y), Err(Error::Shape { .. })));
        let big: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
        assert!(matches!(permutation_loss(&big, &big), Err(Error::Config(_))));
    }

    #[test]
    fn three_branch_solvers_agree() {
        let mut rng = RngState::new(21);
        for _ in 0..200 {
            let f = random_set(&mut rng, 3, 4);
            let y = random_set(&mut rng, 3, 4);
            let a = permutation_loss_with(&f, &y, Solver::Enumerate).unwrap();
            let b = permutation_loss_with(&f, &y, Solver::Hungarian).unwrap();
            assert_eq!(a.loss, b.loss);
        }
    }

    #[test]
    fn hungarian_handles_eight_branches() {
        let mut rng = RngState::new(5);
        let f = random_set(&mut rng, 8, 3);
        let y = random_set(&mut rng, 8, 3);
        let h = permutation_loss(&f, &y).unwrap();
        let e = permutation_loss_with(&f, &y, Solver::Enumerate).unwrap();
        assert_eq!(h.loss, e.loss);
        let mut seen = h.assignment.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn matched_loss_is_optimal_and_invariant(seed in 0u64..100_000, m in 1usize..7, v in 1usize..6) {
            let mut rng = RngState::new(seed);
            let f = random_set(&mut rng, m, v);
            let mut y = random_set(&mut rng, m, v);
            let r = permutation_loss(&f, &y).unwrap();
            prop_assert!(r.loss <= identity_loss(&f, &y).unwrap().loss);
            let expected: f64 = r.assignment.iter().enumerate().map(|(i, &j)| squared_distance(&f[i], &y[j])).sum();
            prop_assert!((r.loss - expected).abs() <= 1e-12 * expected.max(1.0));
            rng.shuffle(&mut y);
            prop_assert_eq!(permutation_loss(&f, &y).unwrap().loss, r.loss);
        }
    }
}
