//! Seeded k-means++ initialisation followed by Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hybrid::EmbeddingStore;

pub const DEFAULT_MAX_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn init_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a centroid; fall back to unused indices
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

/// Clusters `points` into `k` groups. Empty clusters keep their previous centroid.
pub fn kmeans_points(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Usage("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::Usage(format!("{} points cannot form {k} clusters", points.len())));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::Shape {
            op: "kmeans",
            lhs: vec![dim],
            rhs: vec![p.len()],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(points, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut inertia = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters.max(1) {
        let mut sse = 0.0;
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let (j, d) = nearest(p, &centroids);
                sse += d;
                j
            })
            .collect();
        inertia.push(sse);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(p) {
                *s += x;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        converged,
    })
}

pub fn kmeans(store: &EmbeddingStore, k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let points: Vec<Vec<f64>> = store.rows().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
    kmeans_points(&points, k, seed, max_iters)
}
