//! k-means stratification of latent rows and gap-statistic selection of the
//! cluster count.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Cluster id (0-based) per input row.
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    /// Within-cluster sum of squared distances to the centroids.
    pub dispersion: f64,
    pub iterations: usize,
    /// Dispersion after every Lloyd iteration.
    pub dispersion_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(rows: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = rows.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.gen_range(0..n));
    let mut d2: Vec<f64> = rows.iter_rows().map(|r| sq_dist(r, rows.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every remaining point coincides with a chosen seed
            Err(_) => (0..n).find(|i| !chosen.contains(i)).expect("k <= n"),
        };
        chosen.push(next);
        for (d, r) in d2.iter_mut().zip(rows.iter_rows()) {
            *d = d.min(sq_dist(r, rows.row(next)));
        }
    }
    let mut centroids = Matrix::zeros(k, rows.cols());
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(rows.row(i));
    }
    centroids
}

fn recenter(rows: &Matrix, assignments: &[usize], centroids: &mut Matrix) -> Vec<usize> {
    let k = centroids.rows();
    let mut sizes = vec![0usize; k];
    centroids.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    for (r, &c) in rows.iter_rows().zip(assignments) {
        sizes[c] += 1;
        for (acc, &v) in centroids.row_mut(c).iter_mut().zip(r) {
            *acc += v;
        }
    }
    for (c, &size) in sizes.iter().enumerate() {
        if size > 0 {
            let inv = 1.0 / size as f64;
            centroids.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    sizes
}

fn dispersion(rows: &Matrix, assignments: &[usize], centroids: &Matrix) -> f64 {
    rows.iter_rows()
        .zip(assignments)
        .map(|(r, &c)| sq_dist(r, centroids.row(c)))
        .sum()
}

/// Lloyd's algorithm from k-means++ seeds. Stops once assignments are stable
/// or after `max_iters` iterations. A cluster that empties is given the point
/// farthest from its current centroid.
pub fn kmeans(rows: &Matrix, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    let n = rows.rows();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k = {k} outside 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(rows, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut changed = false;
        for (a, r) in assignments.iter_mut().zip(rows.iter_rows()) {
            let (c, _) = nearest(r, &centroids);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        let mut sizes = recenter(rows, &assignments, &mut centroids);
        while let Some(empty) = sizes.iter().position(|&s| s == 0) {
            let (far, _) = rows
                .iter_rows()
                .zip(&assignments)
                .enumerate()
                .filter(|(_, (_, &c))| sizes[c] > 1)
                .map(|(i, (r, &c))| (i, sq_dist(r, centroids.row(c))))
                .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if far == usize::MAX {
                break;
            }
            assignments[far] = empty;
            sizes = recenter(rows, &assignments, &mut centroids);
            changed = true;
        }
        trace.push(dispersion(rows, &assignments, &centroids));
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        dispersion: *trace.last().expect("at least one iteration"),
        assignments,
        centroids,
        iterations,
        dispersion_trace: trace,
    })
}

/// Restarts run by [`gap_statistic`] per clustering; the lowest dispersion wins.
const GAP_RESTARTS: u64 = 3;

fn best_dispersion(rows: &Matrix, k: usize, seed: u64) -> Result<f64> {
    let mut best = f64::INFINITY;
    for r in 0..GAP_RESTARTS {
        let fit = kmeans(rows, k, seed.wrapping_add(r.wrapping_mul(0x9e37_79b9_7f4a_7c15)), DEFAULT_MAX_ITERS)?;
        best = best.min(fit.dispersion);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapEntry {
    pub k: usize,
    pub gap: f64,
    /// `sd_k · √(1 + 1/B)`.
    pub standard_error: f64,
    pub log_dispersion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapStatistic {
    pub entries: Vec<GapEntry>,
    pub selected_k: usize,
}

/// Gap statistic over `k_min..=k_max` with `b` uniform references drawn from
/// the bounding box of `rows`. Selects the smallest `k` with
/// `Gap(k) ≥ Gap(k+1) − s_{k+1}`, or the largest `k` tried if none qualifies.
pub fn gap_statistic(rows: &Matrix, k_min: usize, k_max: usize, b: usize, seed: u64) -> Result<GapStatistic> {
    let n = rows.rows();
    if k_min == 0 || b == 0 || k_min > k_max {
        return Err(Error::Argument(format!(
            "need 1 <= k_min <= k_max and B >= 1 (got k_min={k_min}, k_max={k_max}, B={b})"
        )));
    }
    if n == 0 {
        return Err(Error::Argument("no rows to cluster".into()));
    }
    let dims = rows.cols();
    let mut lo = vec![f64::INFINITY; dims];
    let mut hi = vec![f64::NEG_INFINITY; dims];
    for r in rows.iter_rows() {
        for (d, &v) in r.iter().enumerate() {
            lo[d] = lo[d].min(v);
            hi[d] = hi[d].max(v);
        }
    }
    if lo.iter().zip(&hi).all(|(a, b)| a == b) {
        return Ok(GapStatistic {
            entries: Vec::new(),
            selected_k: 1,
        });
    }
    let k_max = k_max.min(n);
    if k_min > k_max {
        return Err(Error::Argument(format!("k_min = {k_min} exceeds the {n} rows")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let references: Vec<Matrix> = (0..b)
        .map(|_| {
            let data = (0..n * dims)
                .map(|l| {
                    let d = l % dims;
                    if hi[d] > lo[d] {
                        rng.gen_range(lo[d]..hi[d])
                    } else {
                        lo[d]
                    }
                })
                .collect();
            Matrix::from_vec(n, dims, data)
        })
        .collect::<Result<_>>()?;

    let log_w = |w: f64| w.max(f64::MIN_POSITIVE).ln();
    let mut entries = Vec::with_capacity(k_max - k_min + 1);
    for k in k_min..=k_max {
        let observed = log_w(best_dispersion(rows, k, seed ^ k as u64)?);
        let reference: Vec<f64> = references
            .iter()
            .enumerate()
            .map(|(i, r)| best_dispersion(r, k, seed ^ ((i as u64 + 1) << 32) ^ k as u64).map(log_w))
            .collect::<Result<_>>()?;
        let mean = reference.iter().sum::<f64>() / b as f64;
        let sd = (reference.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b as f64).sqrt();
        entries.push(GapEntry {
            k,
            gap: mean - observed,
            standard_error: sd * (1.0 + 1.0 / b as f64).sqrt(),
            log_dispersion: observed,
        });
    }
    let selected_k = entries
        .windows(2)
        .find(|w| w[0].gap >= w[1].gap - w[1].standard_error)
        .map_or(k_max, |w| w[0].k);
    Ok(GapStatistic { entries, selected_k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    /// Two Gaussian blobs whose centers are 10 apart, spread 0.1.
    pub(crate) fn two_blobs(per_blob: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let centers = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (label, c) in centers.iter().enumerate() {
            for _ in 0..per_blob {
                data.extend(c.iter().map(|v| v + noise.sample(&mut rng)));
                labels.push(label);
            }
        }
        (Matrix::from_vec(2 * per_blob, 3, data).unwrap(), labels)
    }

    #[test]
    fn separates_planted_blobs() {
        let (rows, labels) = two_blobs(30, 1);
        let fit = kmeans(&rows, 2, 7, DEFAULT_MAX_ITERS).unwrap();
        let first = fit.assignments[0];
        for (a, l) in fit.assignments.iter().zip(&labels) {
            assert_eq!(*a == first, *l == 0);
        }
    }

    #[test]
    fn one_cluster_per_point() {
        let (rows, _) = two_blobs(4, 2);
        let fit = kmeans(&rows, 8, 3, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(fit.dispersion, 0.0);
        let mut ids = fit.assignments.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn duplicate_rows_single_cluster() {
        let rows = Matrix::from_rows(&[[1.5, -2.0]; 6]).unwrap();
        let fit = kmeans(&rows, 1, 0, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(fit.centroids.row(0), &[1.5, -2.0]);
        assert_eq!(fit.dispersion, 0.0);
    }

    #[test]
    fn duplicate_rows_more_clusters_than_distinct_points() {
        let rows = Matrix::from_rows(&[[1.0], [1.0], [1.0], [5.0]]).unwrap();
        let fit = kmeans(&rows, 3, 0, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(fit.dispersion, 0.0);
    }

    #[test]
    fn k_larger_than_rows_is_rejected() {
        let rows = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        assert!(matches!(kmeans(&rows, 3, 0, 10), Err(Error::Argument(_))));
    }

    #[test]
    fn dispersion_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..200 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows = Matrix::from_vec(200, 2, data).unwrap();
        for seed in 0..10 {
            let fit = kmeans(&rows, 6, seed, DEFAULT_MAX_ITERS).unwrap();
            for w in fit.dispersion_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn gap_picks_two_blobs() {
        let (rows, _) = two_blobs(30, 5);
        let gap = gap_statistic(&rows, 1, 6, 10, 11).unwrap();
        assert_eq!(gap.selected_k, 2, "{:?}", gap.entries);
        let gap20 = gap_statistic(&rows, 1, 6, 20, 11).unwrap();
        assert_eq!(gap20.selected_k, 2);
    }

    #[test]
    fn gap_on_identical_rows_is_one() {
        let rows = Matrix::from_rows(&[[3.0, 3.0]; 10]).unwrap();
        assert_eq!(gap_statistic(&rows, 1, 5, 10, 0).unwrap().selected_k, 1);
    }

    #[test]
    fn gap_rejects_bad_arguments() {
        let (rows, _) = two_blobs(5, 1);
        assert!(gap_statistic(&rows, 0, 3, 10, 0).is_err());
        assert!(gap_statistic(&rows, 1, 3, 0, 0).is_err());
    }
}
