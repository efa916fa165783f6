//! Deterministic k-means over token rows.
//!
//! Seeding is k-means++ driven by `ChaCha8Rng` (a counter-based stream
//! cipher generator, identical output on every platform). Iterations are
//! plain Lloyd steps under squared Euclidean distance with lowest-index tie
//! breaking; a cluster that loses all members is re-seeded with the row that
//! sits farthest from its current centroid, so exactly `k` centroids always
//! come back.
//!
//! Distances are summed with a fixed lane order, so a
//! given `(rows, k, seed, init)` yields bit-identical results regardless of
//! how rayon schedules the per-row work.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{Matrix, MAX_CENTROIDS};

/// Below this many rows the per-row passes run on the calling thread.
const PAR_THRESHOLD: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    /// Nearest centroid of every row under the returned centroids.
    pub assignments: Vec<u8>,
    /// Sum of squared distances from each row to its assigned centroid.
    pub objective: f64,
    pub iterations_used: usize,
    /// Objective after 0, 1, .., `iterations_used` Lloyd steps.
    pub history: Vec<f64>,
}

impl KMeansResult {
    /// Number of Lloyd steps after which the objective first dropped to
    /// `target` or below, if it ever did.
    pub fn iterations_to_reach(&self, target: f64) -> Option<usize> {
        self.history.iter().position(|&o| o <= target)
    }
}

/// Result of a single Lloyd step.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydStep {
    /// Member means, with empty clusters re-seeded.
    pub centroids: Matrix,
    /// Assignments against the input centroids.
    pub assignments: Vec<u8>,
    /// Objective of the input centroids under those assignments.
    pub objective: f64,
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            lanes[l] += d * d;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail
}

/// Index and distance of the nearest centroid; ties go to the lowest index.
#[inline]
pub fn nearest(row: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, cent) in centroids.row_iter().enumerate() {
        let d = sq_dist(row, cent);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    (best, best_d)
}

fn map_rows<T, F>(rows: &Matrix, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[f64]) -> T + Sync + Send,
{
    if rows.rows() >= PAR_THRESHOLD {
        (0..rows.rows()).into_par_iter().map(|i| f(rows.row(i))).collect()
    } else {
        rows.row_iter().map(f).collect()
    }
}

/// Nearest-centroid assignment of every row, with the resulting objective.
pub fn assign(rows: &Matrix, centroids: &Matrix) -> (Vec<u8>, Vec<f64>, f64) {
    let pairs = map_rows(rows, |r| nearest(r, centroids));
    let assignments = pairs.iter().map(|&(c, _)| c as u8).collect();
    let dists: Vec<f64> = pairs.iter().map(|&(_, d)| d).collect();
    let objective = dists.iter().copied().sum();
    (assignments, dists, objective)
}

fn check_inputs(rows: &Matrix, k: usize) -> Result<()> {
    if rows.rows() == 0 || rows.cols() == 0 {
        return Err(Error::EmptyInput);
    }
    if k == 0 || k > MAX_CENTROIDS {
        return Err(Error::InvalidConfig(format!(
            "k must be in 1..={MAX_CENTROIDS}, got {k}"
        )));
    }
    Ok(())
}

/// k-means++ seeding. With fewer rows than `k`, rows are reused.
pub fn kmeans_pp_init(rows: &Matrix, k: usize, seed: u64) -> Result<Matrix> {
    check_inputs(rows, k)?;
    let n = rows.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Matrix::zeros(k, rows.cols());

    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(rows.row(first));
    let mut d2: Vec<f64> = map_rows(rows, |r| sq_dist(r, rows.row(first)));

    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = 0;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    last_positive = i;
                    acc += w;
                    if acc > target {
                        pick = Some(i);
                        break;
                    }
                }
            }
            pick.unwrap_or(last_positive)
        } else {
            rng.random_range(0..n)
        };
        let chosen = rows.row(pick).to_vec();
        centroids.row_mut(j).copy_from_slice(&chosen);
        let fresh: Vec<f64> = map_rows(rows, |r| sq_dist(r, &chosen));
        for (d, f) in d2.iter_mut().zip(fresh) {
            if f < *d {
                *d = f;
            }
        }
    }
    Ok(centroids)
}

fn check_centroids(rows: &Matrix, centroids: &Matrix) -> Result<()> {
    if centroids.cols() != rows.cols() {
        return Err(Error::DimensionMismatch(format!(
            "centroids have {} columns, rows have {}",
            centroids.cols(),
            rows.cols()
        )));
    }
    if centroids.rows() == 0 || centroids.rows() > MAX_CENTROIDS {
        return Err(Error::InvalidConfig(format!(
            "centroid count {} outside 1..={MAX_CENTROIDS}",
            centroids.rows()
        )));
    }
    Ok(())
}

fn update(rows: &Matrix, assignments: &[u8], dists: &[f64], k: usize) -> Matrix {
    let d = rows.cols();
    let mut sums = vec![0f64; k * d];
    let mut counts = vec![0usize; k];
    for (row, &a) in rows.row_iter().zip(assignments) {
        let a = a as usize;
        counts[a] += 1;
        for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut centroids = Matrix::zeros(k, d);
    for c in 0..k {
        if counts[c] > 0 {
            let inv = counts[c] as f64;
            for (dst, &s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                *dst = (s / inv) as f64;
            }
        }
    }

    let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empties.is_empty() {
        // farthest rows first; equal distances keep row order
        let mut order: Vec<usize> = (0..rows.rows()).collect();
        order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
        for (slot, &c) in empties.iter().enumerate() {
            let r = order[slot % order.len()];
            centroids.row_mut(c).copy_from_slice(rows.row(r));
        }
    }
    centroids
}

/// One assignment pass against `centroids` followed by a mean update.
pub fn lloyd_step(rows: &Matrix, centroids: &Matrix) -> Result<LloydStep> {
    if rows.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    check_centroids(rows, centroids)?;
    let (assignments, dists, objective) = assign(rows, centroids);
    let next = update(rows, &assignments, &dists, centroids.rows());
    Ok(LloydStep {
        centroids: next,
        assignments,
        objective,
    })
}

/// Lloyd iterations from k-means++ seeding, or from `init` when given.
///
/// Stops once the relative objective improvement falls to `tol` or below,
/// or after `max_iters` steps.
pub fn kmeans(
    rows: &Matrix,
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
    init: Option<&Matrix>,
) -> Result<KMeansResult> {
    check_inputs(rows, k)?;
    let mut centroids = match init {
        Some(c) => {
            check_centroids(rows, c)?;
            if c.rows() != k {
                return Err(Error::DimensionMismatch(format!(
                    "warm start has {} centroids, expected {k}",
                    c.rows()
                )));
            }
            c.clone()
        }
        None => kmeans_pp_init(rows, k, seed)?,
    };

    let mut step = lloyd_step(rows, &centroids)?;
    let mut history = vec![step.objective];
    let mut iterations = 0;
    while iterations < max_iters {
        let prev = step.objective;
        centroids = step.centroids;
        step = lloyd_step(rows, &centroids)?;
        iterations += 1;
        history.push(step.objective);
        if prev - step.objective <= tol * prev {
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments: step.assignments,
        objective: step.objective,
        iterations_used: iterations,
        history,
    })
}

/// Centroids of the previous chunk, to seed the next chunk's clustering.
pub fn warm_start_from_prev(prev: &KMeansResult, head_dim: usize) -> Result<Matrix> {
    if prev.centroids.cols() != head_dim {
        return Err(Error::DimensionMismatch(format!(
            "cached centroids have {} columns, chunk has {head_dim}",
            prev.centroids.cols()
        )));
    }
    Ok(prev.centroids.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn gaussian_rows(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        Matrix::from_vec(n, d, (0..n * d).map(|_| normal.sample(&mut rng)).collect()).unwrap()
    }

    fn brute_objective(rows: &Matrix, centroids: &Matrix, assignments: &[u8]) -> f64 {
        rows.row_iter()
            .zip(assignments)
            .map(|(r, &a)| {
                r.iter()
                    .zip(centroids.row(a as usize))
                    .map(|(x, c)| (x - c).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn single_row_single_centroid() {
        let rows = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let c = kmeans_pp_init(&rows, 1, 7).unwrap();
        assert_eq!(c, rows);
    }

    #[test]
    fn k_equal_n_picks_every_row_once() {
        let rows = gaussian_rows(12, 5, 3);
        let c = kmeans_pp_init(&rows, 12, 11).unwrap();
        let mut picked: Vec<usize> = c
            .row_iter()
            .map(|cr| rows.row_iter().position(|r| r == cr).unwrap())
            .collect();
        picked.sort();
        assert_eq!(picked, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn more_centroids_than_rows_reuses_rows() {
        let rows = gaussian_rows(3, 4, 1);
        let res = kmeans(&rows, 8, 10, 1e-4, 5, None).unwrap();
        assert_eq!(res.centroids.rows(), 8);
        assert_eq!(res.objective, 0.0);
    }

    #[test]
    fn seeding_is_deterministic() {
        let rows = gaussian_rows(200, 16, 9);
        assert_eq!(
            kmeans_pp_init(&rows, 10, 42).unwrap(),
            kmeans_pp_init(&rows, 10, 42).unwrap()
        );
        assert_ne!(
            kmeans_pp_init(&rows, 10, 42).unwrap(),
            kmeans_pp_init(&rows, 10, 43).unwrap()
        );
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let rows = gaussian_rows(50, 6, 2);
        let init = Matrix::from_vec(1, 6, vec![100.0; 6]).unwrap();
        let step = lloyd_step(&rows, &init).unwrap();
        for j in 0..6 {
            let mean: f64 = rows.row_iter().map(|r| r[j]).sum::<f64>() / 50.0;
            assert!((step.centroids.row(0)[j] as f64 - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn separated_clouds_split_by_cloud() {
        let mut data = gaussian_rows(40, 4, 4).into_vec();
        for v in data[80..].iter_mut() {
            *v += 50.0;
        }
        let rows = Matrix::from_vec(40, 4, data).unwrap();
        let seeds = Matrix::from_vec(2, 4, [rows.row(0), rows.row(39)].concat()).unwrap();
        let step = lloyd_step(&rows, &seeds).unwrap();
        // brute force: nearest by explicit distance to each seed
        for (i, r) in rows.row_iter().enumerate() {
            let d0 = sq_dist(r, seeds.row(0));
            let d1 = sq_dist(r, seeds.row(1));
            let want = if d1 < d0 { 1 } else { 0 };
            assert_eq!(step.assignments[i], want);
            assert_eq!(want, (i >= 20) as u8);
        }
    }

    #[test]
    fn identical_rows_zero_objective() {
        let rows = Matrix::from_vec(10, 3, vec![0.5; 30]).unwrap();
        let res = kmeans(&rows, 3, 10, 1e-4, 0, None).unwrap();
        assert_eq!(res.objective, 0.0);
    }

    #[test]
    fn empty_cluster_seizes_farthest_row() {
        let rows = Matrix::from_vec(4, 1, vec![0.0, 1.0, 2.0, 10.0]).unwrap();
        // centroid 1 is far from everything and ends up empty
        let init = Matrix::from_vec(2, 1, vec![1.0, 1000.0]).unwrap();
        let step = lloyd_step(&rows, &init).unwrap();
        assert!(step.assignments.iter().all(|&a| a == 0));
        assert_eq!(step.centroids.row(1), &[10.0]);
    }

    #[test]
    fn objective_matches_recomputation_and_assignments_are_nearest() {
        let rows = gaussian_rows(300, 8, 5);
        let res = kmeans(&rows, 16, 20, 0.0, 3, None).unwrap();
        let brute = brute_objective(&rows, &res.centroids, &res.assignments);
        assert!((brute - res.objective).abs() <= 1e-5 * brute);
        for (r, &a) in rows.row_iter().zip(&res.assignments) {
            let own = sq_dist(r, res.centroids.row(a as usize));
            for c in res.centroids.row_iter() {
                assert!(own <= sq_dist(r, c));
            }
        }
    }

    #[test]
    fn history_is_monotone() {
        let rows = gaussian_rows(500, 8, 6);
        let res = kmeans(&rows, 32, 30, 0.0, 1, None).unwrap();
        for w in res.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn warm_start_at_fixed_point_stops_after_one_step() {
        let rows = gaussian_rows(400, 8, 8);
        let cold = kmeans(&rows, 8, 100, 0.0, 2, None).unwrap();
        let init = warm_start_from_prev(&cold, 8).unwrap();
        let warm = kmeans(&rows, 8, 100, 1e-4, 99, Some(&init)).unwrap();
        assert!(warm.iterations_used <= 1);
        assert!((warm.objective - cold.objective).abs() <= 1e-6 * cold.objective);
    }

    #[test]
    fn warm_start_rejects_wrong_width() {
        let rows = gaussian_rows(20, 4, 8);
        let res = kmeans(&rows, 2, 5, 1e-4, 0, None).unwrap();
        assert!(matches!(
            warm_start_from_prev(&res, 5),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn empty_input_rejected() {
        let rows = Matrix::zeros(0, 4);
        assert!(matches!(kmeans(&rows, 2, 5, 0.0, 0, None), Err(Error::EmptyInput)));
        assert!(matches!(kmeans_pp_init(&rows, 2, 0), Err(Error::EmptyInput)));
    }
}
