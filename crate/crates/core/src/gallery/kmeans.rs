//! Seeded Lloyd k-means with k-means++ initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Clusters per subject; `Unlimited` keeps every medium.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterCount {
    Finite(usize),
    Unlimited,
}

impl std::str::FromStr for ClusterCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "unlimited" => Ok(ClusterCount::Unlimited),
            n => match n.parse::<usize>() {
                Ok(0) | Err(_) => Err(Error::InvalidConfig(format!(
                    "clusters must be a positive integer or 'inf', got {n:?}"
                ))),
                Ok(c) => Ok(ClusterCount::Finite(c)),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub clusters_per_subject: ClusterCount,
    pub max_iterations: usize,
    /// Stop once the summed centroid movement of an iteration is at most this.
    pub convergence_tol: f64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            clusters_per_subject: ClusterCount::Unlimited,
            max_iterations: 100,
            convergence_tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Arithmetic mean of the members of each cluster.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

impl KMeans {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_centroids(points: &[Vec<f64>], clusters: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < clusters {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn means(points: &[Vec<f64>], assignments: &[usize], clusters: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; clusters];
    let mut counts = vec![0usize; clusters];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= c as f64);
    }
    sums
}

/// Cluster `points` into `clusters` groups. With at least as many clusters as
/// points, every point becomes its own centroid, in input order.
pub fn kmeans(points: &[Vec<f64>], clusters: usize, config: &ClusterConfig) -> Result<KMeans> {
    if points.is_empty() {
        return Err(Error::Empty("points"));
    }
    if clusters == 0 {
        return Err(Error::InvalidConfig("cluster count must be at least 1".into()));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: p.len(),
        });
    }
    if clusters >= points.len() {
        return Ok(KMeans {
            centroids: points.to_vec(),
            assignments: (0..points.len()).collect(),
            iterations: 0,
        });
    }

    let mut rng = rng::stream(config.seed, &[]);
    let mut centroids = seed_centroids(points, clusters, &mut rng);
    let mut assignments = vec![0; points.len()];
    let mut iterations = 0;
    while iterations < config.max_iterations.max(1) {
        iterations += 1;
        let mut dist = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            (assignments[i], dist[i]) = nearest(p, &centroids);
        }
        // Refill empty clusters with the point farthest from its centroid.
        loop {
            let mut sizes = vec![0usize; clusters];
            assignments.iter().for_each(|&a| sizes[a] += 1);
            let Some(empty) = sizes.iter().position(|&s| s == 0) else {
                break;
            };
            let donor = (0..points.len())
                .filter(|&i| sizes[assignments[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("fewer clusters than points");
            assignments[donor] = empty;
            dist[donor] = 0.0;
        }
        let updated = means(points, &assignments, clusters);
        let movement: f64 = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .sum();
        centroids = updated;
        if movement <= config.convergence_tol {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignments,
        iterations,
    })
}
