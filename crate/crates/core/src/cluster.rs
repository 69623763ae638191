//! Seeded k-means (k-means++ initialization, Lloyd iterations) over
//! unit-normalized vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ITERATIONS: usize = 300;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClusterError {
    #[error("cannot form {k} clusters from {points} points")]
    TooFewPoints { points: usize, k: usize },
    #[error("k must be positive")]
    ZeroClusters,
    #[error("vector {0} has zero norm or a mismatched dimension")]
    InvalidVector(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster index per input vector.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Member indices of each cluster, in input order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
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

pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if vectors.len() < k {
        return Err(ClusterError::TooFewPoints {
            points: vectors.len(),
            k,
        });
    }
    let dim = vectors[0].len();
    let points: Vec<Vec<f64>> = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if v.len() != dim || dim == 0 || norm == 0.0 || !norm.is_finite() {
                Err(ClusterError::InvalidVector(i))
            } else {
                Ok(v.iter().map(|x| x / norm).collect())
            }
        })
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(&points, k, &mut rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        // An empty cluster takes the point farthest from its centroid among
        // clusters that can spare one.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let donor = (0..points.len())
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &centroids[assignments[a]]);
                    let db = sq_dist(&points[b], &centroids[assignments[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                });
            if let Some(i) = donor {
                let old = assignments[i];
                counts[old] -= 1;
                for (s, x) in sums[old].iter_mut().zip(&points[i]) {
                    *s -= x;
                }
                assignments[i] = c;
                counts[c] = 1;
                sums[c] = points[i].clone();
                changed = true;
            }
        }

        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if !changed || shift <= TOLERANCE {
            break;
        }
    }

    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum();
    Ok(Clustering {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

fn init_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.expect("positive total weight")
        } else {
            // remaining points coincide with centroids; take any unused one
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}
