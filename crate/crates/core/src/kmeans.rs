//! Seeded k-means (k-means++ seeding, Lloyd iterations) on squared
//! Euclidean distance.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::chacha;
use crate::tensor::Tensor;

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub m: usize,
    pub assign: Vec<usize>,
    /// `m × d` cluster means.
    pub centroids: Tensor,
}

impl ClusterAssignment {
    /// Sum of squared distances from each point to its centroid.
    pub fn inertia(&self, points: &Tensor) -> f64 {
        (0..points.rows())
            .map(|i| sq_dist(points.row(i), self.centroids.row(self.assign[i])))
            .sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.m];
        for &a in &self.assign {
            s[a] += 1;
        }
        s
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus(points: &Tensor, m: usize, seed: u64) -> Tensor {
    let (n, d) = (points.rows(), points.cols());
    let mut rng = chacha(seed);
    let mut centroids = Tensor::zeros(&[m, d]);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut best: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(first)))
        .collect();
    for c in 1..m {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

/// Clusters the rows of `points` into `m` groups.
///
/// Iterates until the assignment is a fixed point or [`MAX_ITERATIONS`]
/// passes. A cluster that empties is reseeded at the point farthest from
/// its current centroid.
pub fn kmeans(points: &Tensor, m: usize, seed: u64) -> Result<ClusterAssignment> {
    let (n, d) = (points.rows(), points.cols());
    if m == 0 || m > n {
        return Err(Error::InvalidParameter(format!(
            "cluster count {m} must lie in 1..={n}"
        )));
    }
    let mut centroids = seed_plus_plus(points, m, seed);
    let mut assign = vec![usize::MAX; n];

    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for i in 0..n {
            let (c, _) = nearest(points.row(i), &centroids);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }

        loop {
            let mut counts = vec![0usize; m];
            for &a in &assign {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let far = (0..n)
                .filter(|&i| counts[assign[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(points.row(a), centroids.row(assign[a]));
                    let db = sq_dist(points.row(b), centroids.row(assign[b]));
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("m <= n guarantees a donor cluster");
            assign[far] = empty;
            centroids.row_mut(empty).copy_from_slice(points.row(far));
            changed = true;
        }

        centroids = means(points, &assign, m, d);
        if !changed {
            break;
        }
    }

    Ok(ClusterAssignment {
        m,
        assign,
        centroids,
    })
}

fn means(points: &Tensor, assign: &[usize], m: usize, d: usize) -> Tensor {
    let mut sums = Tensor::zeros(&[m, d]);
    let mut counts = vec![0usize; m];
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for (s, x) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for c in 0..m {
        let k = counts[c].max(1) as f64;
        sums.row_mut(c).iter_mut().for_each(|s| *s /= k);
    }
    sums
}
