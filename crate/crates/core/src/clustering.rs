//! k-means over class error-rate series.
//!
//! Lloyd iterations on squared Euclidean distance over the raw series.
//! Initialization is farthest-first: a seeded uniform pick for the first
//! centroid, then repeatedly the series farthest from every chosen centroid.
//! Input is sorted by class id first, so the seed applies to the same class
//! regardless of the caller's ordering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const DEFAULT_CLUSTERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassClustering {
    pub k: usize,
    pub seed: u64,
    /// Ascending class ids; `assignments[i]` is the cluster of `class_ids[i]`.
    pub class_ids: Vec<u32>,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Elementwise mean of member series per cluster.
    pub mean_series: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub objective_history: Vec<f64>,
}

impl ClassClustering {
    pub fn cluster_of(&self, class_id: u32) -> Option<usize> {
        self.class_ids
            .binary_search(&class_id)
            .ok()
            .map(|i| self.assignments[i])
    }

    pub fn members(&self, cluster: usize) -> Vec<u32> {
        self.class_ids
            .iter()
            .zip(&self.assignments)
            .filter(|(_, &a)| a == cluster)
            .map(|(&c, _)| c)
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(point, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn means(points: &[&[f64]], assignments: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

pub fn kmeans_classes(series: &[(u32, Vec<f64>)], k: usize, seed: u64) -> Result<ClassClustering> {
    let n = series.len();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "cluster count must lie in 1..={n}, got {k}"
        )));
    }
    let mut sorted: Vec<&(u32, Vec<f64>)> = series.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let dim = sorted[0].1.len();
    if let Some((_, s)) = sorted.iter().find(|(_, s)| s.len() != dim) {
        return Err(Error::LengthMismatch {
            left: s.len(),
            right: dim,
        });
    }
    let points: Vec<&[f64]> = sorted.iter().map(|(_, s)| s.as_slice()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..n)].to_vec()];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let far = min_d
            .iter()
            .enumerate()
            .fold(0, |best, (i, &d)| if d > min_d[best] { i } else { best });
        centroids.push(points[far].to_vec());
        for (d, p) in min_d.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let mut next: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        repair_empty(&mut next, &points, &mut centroids);
        history.push(next.iter().map(|(_, d)| d).sum());
        let next: Vec<usize> = next.into_iter().map(|(a, _)| a).collect();
        if next == assignments {
            break;
        }
        assignments = next;
        centroids = means(&points, &assignments, k, dim);
    }
    let mean_series = means(&points, &assignments, k, dim);
    Ok(ClassClustering {
        k,
        seed,
        class_ids: sorted.iter().map(|(id, _)| *id).collect(),
        assignments,
        centroids: mean_series.clone(),
        mean_series,
        iterations,
        objective_history: history,
    })
}

/// Gives every empty cluster the point farthest from its own centroid.
fn repair_empty(assign: &mut [(usize, f64)], points: &[&[f64]], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for (a, _) in assign.iter() {
            counts[*a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = assign
            .iter()
            .enumerate()
            .filter(|(_, (a, _))| counts[*a] > 1)
            .fold(None::<usize>, |best, (i, (_, d))| match best {
                Some(b) if assign[b].1 >= *d => Some(b),
                _ => Some(i),
            });
        let Some(far) = far else { return };
        centroids[empty] = points[far].to_vec();
        assign[far] = (empty, 0.0);
    }
}

pub fn cluster_mean_series(c: &ClassClustering, cluster_id: usize) -> Result<&[f64]> {
    if cluster_id >= c.k || !c.assignments.contains(&cluster_id) {
        return Err(Error::UnknownCluster(cluster_id));
    }
    Ok(&c.mean_series[cluster_id])
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
