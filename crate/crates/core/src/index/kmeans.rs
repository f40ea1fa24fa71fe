use crate::numerics::tensor::squared_distance;
use crate::numerics::RngState;

pub const DEFAULT_MAX_ITERS: usize = 20;
/// Lloyd iterations run on at most this many points per centroid.
pub const SAMPLE_PER_CELL: usize = 64;

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(point: &[f64], centroids: &[f64], d: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, cent) in centroids.chunks_exact(d).enumerate() {
        let dist = squared_distance(point, cent);
        if dist < best_d {
            best_d = dist;
            best = c;
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd refinement. `points` is `n × d`
/// row-major; returns `k × d` centroids. `k` must not exceed `n`.
pub fn kmeans(points: &[f64], d: usize, k: usize, max_iters: usize, rng: &mut RngState) -> Vec<f64> {
    let n = points.len() / d;
    assert!(k >= 1 && k <= n, "k-means with k={k} over {n} points");
    let row = |i: usize| &points[i * d..(i + 1) * d];

    let sample: Vec<usize> = if n > k * SAMPLE_PER_CELL {
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        idx.truncate(k * SAMPLE_PER_CELL);
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };

    let mut centroids = Vec::with_capacity(k * d);
    let first = sample[rng.below(sample.len())];
    centroids.extend_from_slice(row(first));
    let mut dist: Vec<f64> = sample.iter().map(|&i| squared_distance(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut chosen = sample.len() - 1;
            for (j, &dj) in dist.iter().enumerate() {
                if dj > 0.0 && target < dj {
                    chosen = j;
                    break;
                }
                target -= dj;
            }
            while dist[chosen] == 0.0 && chosen > 0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.below(sample.len())
        };
        let c = row(sample[pick]).to_vec();
        for (j, &i) in sample.iter().enumerate() {
            dist[j] = dist[j].min(squared_distance(row(i), &c));
        }
        centroids.extend(c);
    }

    let mut assign = vec![usize::MAX; sample.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (j, &i) in sample.iter().enumerate() {
            let c = nearest(row(i), &centroids, d);
            if c != assign[j] {
                assign[j] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (j, &i) in sample.iter().enumerate() {
            let c = assign[j];
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * d..(c + 1) * d].iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_clusters_split_evenly() {
        let mut pts = Vec::new();
        for _ in 0..10 {
            pts.extend([0.0, 0.0]);
        }
        for _ in 0..10 {
            pts.extend([100.0, 100.0]);
        }
        for seed in 0..20 {
            let c = kmeans(&pts, 2, 2, DEFAULT_MAX_ITERS, &mut RngState::new(seed));
            let mut counts = [0; 2];
            for p in pts.chunks(2) {
                counts[nearest(p, &c, 2)] += 1;
            }
            assert_eq!(counts, [10, 10], "seed {seed}");
        }
    }

    #[test]
    fn more_cells_than_distinct_points_still_terminates() {
        let pts = vec![1.0; 12];
        let c = kmeans(&pts, 3, 4, DEFAULT_MAX_ITERS, &mut RngState::new(0));
        assert_eq!(c.len(), 12);
    }
}
