//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check(points: &Tensor, k: usize) -> Result<()> {
    if points.ndim() != 2 {
        return Err(NumericsError::Parameter("kmeans expects an n×D matrix".into()));
    }
    if k == 0 || k > points.rows() {
        return Err(NumericsError::Parameter(format!(
            "kmeans needs 1 <= k <= n, got k={k}, n={}",
            points.rows()
        )));
    }
    Ok(())
}

/// Row indices of the k-means++ initial centroids.
pub fn kmeans_plus_plus(points: &Tensor, k: usize, seed: u64) -> Result<Vec<usize>> {
    check(points, k)?;
    let n = points.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // every point coincides with a chosen centroid
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    Ok(chosen)
}

/// Nearest centroid for each point (ties to the lower centroid index) and
/// the resulting inertia.
pub fn assign(points: &Tensor, centroids: &Tensor) -> (Vec<usize>, Vec<f64>, f64) {
    let mut labels = Vec::with_capacity(points.rows());
    let mut dists = Vec::with_capacity(points.rows());
    for i in 0..points.rows() {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for c in 0..centroids.rows() {
            let dd = sq_dist(points.row(i), centroids.row(c));
            if dd < bd {
                bd = dd;
                best = c;
            }
        }
        labels.push(best);
        dists.push(bd);
    }
    let inertia = dists.iter().sum();
    (labels, dists, inertia)
}

pub fn kmeans(points: &Tensor, k: usize, max_iter: usize, seed: u64) -> Result<KMeansResult> {
    let init = kmeans_plus_plus(points, k, seed)?;
    let (n, d) = (points.rows(), points.cols());
    let mut centroids = Tensor::zeros(&[k, d]);
    for (c, &i) in init.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(points.row(i));
    }
    let (mut labels, mut dists, inertia) = assign(points, &centroids);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i] * d..][..d].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids.set(c, j, sums[c * d + j] / counts[c] as f64);
                }
            } else {
                // reseed at the point farthest from its current centroid
                let mut far = None;
                for i in 0..n {
                    if taken[i] {
                        continue;
                    }
                    if far.is_none_or(|f: usize| dists[i] > dists[f]) {
                        far = Some(i);
                    }
                }
                let f = far.unwrap_or(0);
                taken[f] = true;
                dists[f] = 0.0;
                centroids.row_mut(c).copy_from_slice(points.row(f));
            }
        }
        let (new_labels, new_dists, inertia) = assign(points, &centroids);
        history.push(inertia);
        let changed = new_labels != labels;
        labels = new_labels;
        dists = new_dists;
        if !changed {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments: labels,
        inertia_history: history,
        iterations,
    })
}
