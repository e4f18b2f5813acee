//! k-means with k-means++ seeding and Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Below this many point-centroid distance evaluations the assignment step
/// stays on the calling thread.
const PARALLEL_WORK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid shift.
    pub tol: f64,
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 100,
            tol: 1e-6,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to assigned centroids.
    pub objective: f64,
    pub iterations: usize,
    /// Objective after every assignment step, for each restart in order.
    pub histories: Vec<Vec<f64>>,
    pub best_restart: usize,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its distance.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(data: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let work = data.len() * centroids.len() * data.first().map_or(0, Vec::len);
    if work >= PARALLEL_WORK {
        data.par_iter().map(|p| nearest(p, centroids)).collect()
    } else {
        data.iter().map(|p| nearest(p, centroids)).collect()
    }
}

fn validate(data: &[Vec<f64>], k: usize) -> Result<usize> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if data.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} points cannot form {k} clusters",
            data.len()
        )));
    }
    let dim = data[0].len();
    if let Some(bad) = data.iter().find(|p| p.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            actual: bad.len(),
        });
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite coordinate in k-means input".into()));
    }
    Ok(dim)
}

/// k-means++ seeding.
pub fn kmeans_plus_plus(data: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = data.iter().map(|p| squared_distance(p, &data[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // guard against rounding landing on an exhausted point
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in data.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &data[next]));
        }
    }
    chosen.into_iter().map(|i| data[i].clone()).collect()
}

/// Lloyd iterations from the given centroids. Empty clusters take the
/// point farthest from its own centroid.
pub fn lloyd(data: &[Vec<f64>], initial: Vec<Vec<f64>>, max_iter: usize, tol: f64) -> KMeansFit {
    let k = initial.len();
    let dim = data[0].len();
    let mut centroids = initial;
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    // rounding slack for the monotonicity check, relative to the data scale
    let scale = data.iter().flatten().map(|v| v * v).sum::<f64>();
    let slack = |prev: f64| 1e-9 * prev + 1e-12 * scale;

    loop {
        let assigned = assign(data, &centroids);
        let objective: f64 = assigned.iter().map(|a| a.1).sum();
        if let Some(&prev) = history.last() {
            assert!(
                objective <= prev + slack(prev),
                "Lloyd objective increased: {prev} -> {objective}"
            );
        }
        history.push(objective);
        if iterations >= max_iter {
            return KMeansFit {
                centroids,
                assignments: assigned.iter().map(|a| a.0).collect(),
                objective,
                iterations,
                histories: vec![history],
                best_restart: 0,
            };
        }
        iterations += 1;

        let mut labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let mut dists: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let donor = (0..data.len())
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(p) = donor {
                counts[labels[p]] -= 1;
                labels[p] = c;
                counts[c] = 1;
                dists[p] = 0.0;
            }
        }

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &l) in data.iter().zip(&labels) {
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(squared_distance(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if shift < tol {
            // one more assignment step against the settled centroids
            let assigned = assign(data, &centroids);
            let objective: f64 = assigned.iter().map(|a| a.1).sum();
            assert!(
                objective <= history[history.len() - 1] + slack(history[history.len() - 1]),
                "Lloyd objective increased on final assignment"
            );
            history.push(objective);
            return KMeansFit {
                centroids,
                assignments: assigned.iter().map(|a| a.0).collect(),
                objective,
                iterations,
                histories: vec![history],
                best_restart: 0,
            };
        }
    }
}

/// Best of `restarts` seeded k-means++ / Lloyd runs.
pub fn kmeans_fit(data: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeansFit> {
    validate(data, config.k)?;
    if config.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<KMeansFit> = None;
    let mut histories = Vec::with_capacity(config.restarts);
    for restart in 0..config.restarts {
        let init = kmeans_plus_plus(data, config.k, &mut rng);
        let mut fit = lloyd(data, init, config.max_iter, config.tol);
        histories.push(std::mem::take(&mut fit.histories[0]));
        if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
            fit.best_restart = restart;
            best = Some(fit);
        }
    }
    let mut best = best.expect("at least one restart");
    best.histories = histories;
    Ok(best)
}

/// Mean silhouette coefficient (O(n²)).
pub fn silhouette(data: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let n = data.len();
    if n < 2 {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = assignments[i];
            if counts[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                if i != j {
                    sums[assignments[j]] += squared_distance(&data[i], &data[j]).sqrt();
                }
            }
            let a = sums[own] / (counts[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && counts[c] > 0)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                0.0
            } else {
                (b - a) / a.max(b)
            }
        })
        .sum();
    total / n as f64
}

/// Silhouette score for each candidate k.
pub fn silhouette_sweep(data: &[Vec<f64>], ks: &[usize], config: &KMeansConfig) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| {
            let fit = kmeans_fit(data, &KMeansConfig { k, ..config.clone() })?;
            Ok((k, silhouette(data, &fit.assignments, k)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sse_of_partition(data: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let dim = data[0].len();
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = data
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                return f64::INFINITY;
            }
            let mean: Vec<f64> = (0..dim)
                .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                .collect();
            total += members.iter().map(|p| squared_distance(p, &mean)).sum::<f64>();
        }
        total
    }

    /// Exhaustive optimum over all partitions into exactly k groups.
    fn brute_force_optimum(data: &[Vec<f64>], k: usize) -> f64 {
        fn rec(i: usize, used: usize, labels: &mut Vec<usize>, data: &[Vec<f64>], k: usize, best: &mut f64) {
            if i == data.len() {
                if used == k {
                    *best = best.min(sse_of_partition(data, labels, k));
                }
                return;
            }
            // restricted growth: label at most one beyond the max used so far
            for l in 0..(used + 1).min(k) {
                labels[i] = l;
                rec(i + 1, used.max(l + 1), labels, data, k, best);
            }
        }
        let mut best = f64::INFINITY;
        rec(0, 0, &mut vec![0; data.len()], data, k, &mut best);
        best
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn assert_monotone(fit: &KMeansFit) {
        for h in &fit.histories {
            for w in h.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0), "{h:?}");
            }
        }
    }

    #[test]
    fn k_equals_n_is_exact() {
        let data = random_points(6, 3, 1);
        let fit = kmeans_fit(&data, &KMeansConfig::new(6, 0)).unwrap();
        assert_eq!(fit.objective, 0.0);
        let mut a = fit.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn separated_blobs() {
        let data = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]];
        let fit = kmeans_fit(&data, &KMeansConfig::new(2, 4)).unwrap();
        let mut c = fit.centroids.clone();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 10.5]]);
        assert!((fit.objective - 1.0).abs() < 1e-12);
        assert_monotone(&fit);
    }

    #[test]
    fn matches_exhaustive_optimum() {
        for seed in 0..5 {
            let data = random_points(8, 4, 100 + seed);
            let cfg = KMeansConfig {
                restarts: 20,
                ..KMeansConfig::new(3, seed)
            };
            let fit = kmeans_fit(&data, &cfg).unwrap();
            let opt = brute_force_optimum(&data, 3);
            assert!(
                (fit.objective - opt).abs() < 1e-9,
                "seed {seed}: {} vs {opt}",
                fit.objective
            );
            assert_monotone(&fit);
        }
    }

    #[test]
    fn fixed_point_is_stable() {
        let data = random_points(40, 3, 8);
        let fit = kmeans_fit(&data, &KMeansConfig::new(4, 2)).unwrap();
        let again = lloyd(&data, fit.centroids.clone(), 100, 1e-6);
        assert_eq!(again.assignments, fit.assignments);
        for (a, b) in again.centroids.iter().flatten().zip(fit.centroids.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((again.objective - fit.objective).abs() < 1e-12);
    }

    #[test]
    fn empty_cluster_repaired() {
        // two duplicated centroids: one goes empty on first assignment
        let data = vec![vec![0.0], vec![0.1], vec![5.0], vec![5.2], vec![9.0]];
        let fit = lloyd(&data, vec![vec![0.0], vec![0.0], vec![5.0]], 100, 1e-9);
        let mut used = fit.assignments.clone();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), 3);
        for h in &fit.histories {
            assert!(h.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
    }

    #[test]
    fn duplicate_points_seed() {
        let data = vec![vec![1.0, 1.0]; 5];
        let fit = kmeans_fit(&data, &KMeansConfig::new(3, 0)).unwrap();
        assert_eq!(fit.objective, 0.0);
    }

    #[test]
    fn preconditions() {
        let data = random_points(3, 2, 0);
        assert!(kmeans_fit(&data, &KMeansConfig::new(1, 0)).is_err());
        assert!(kmeans_fit(&data, &KMeansConfig::new(4, 0)).is_err());
        let ragged = vec![vec![0.0, 1.0], vec![0.0]];
        assert!(kmeans_fit(&ragged, &KMeansConfig::new(2, 0)).is_err());
    }

    #[test]
    fn deterministic_and_parallel_consistent() {
        let data = random_points(3000, 8, 21);
        let a = kmeans_fit(&data, &KMeansConfig::new(5, 9)).unwrap();
        let b = kmeans_fit(&data, &KMeansConfig::new(5, 9)).unwrap();
        assert_eq!(a, b);
        assert_monotone(&a);
    }

    #[test]
    fn silhouette_prefers_true_k() {
        let mut data = Vec::new();
        for c in 0..3 {
            for i in 0..15 {
                data.push(vec![c as f64 * 10.0 + (i as f64) * 0.01, (i % 3) as f64 * 0.02]);
            }
        }
        let sweep = silhouette_sweep(&data, &[2, 3, 4], &KMeansConfig::new(2, 0)).unwrap();
        let best = sweep.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert_eq!(best.0, 3, "{sweep:?}");
    }
}
