//! Lloyd's algorithm with k-means++ seeding and restarts.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, EvalResult};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Relative inertia improvement below which Lloyd stops.
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// `[k, d]` centroid matrix of the best restart.
    pub centroids: Tensor<f64>,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
}

/// Clusters rows of `data` into `k` groups. Deterministic for a given
/// seed; the best of `restarts` runs (lowest inertia) is returned.
pub fn kmeans<F: Scalar>(
    data: &Tensor<F>,
    k: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> EvalResult<KMeansResult> {
    let n = data.rows();
    if k == 0 || k > n {
        return Err(EvalError::BadK { k, n });
    }
    if cfg.restarts == 0 {
        return Err(EvalError::Invalid("kmeans needs restarts >= 1".into()));
    }
    let d = data.cols();
    let x: Vec<f64> = data.data().iter().map(|v| v.as_f64()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts {
        let run = lloyd_once(&x, n, d, k, cfg, &mut rng);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let c = x - y;
        s += c * c;
    }
    s
}

fn lloyd_once<R: Rng>(
    x: &[f64],
    n: usize,
    d: usize,
    k: usize,
    cfg: &KMeansConfig,
    rng: &mut R,
) -> KMeansResult {
    let row = |i: usize| &x[i * d..(i + 1) * d];

    // k-means++ seeding.
    let mut centroids = vec![0.0f64; k * d];
    let first = rng.gen_range(0..n);
    centroids[..d].copy_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| dist_sq(row(i), &centroids[..d])).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            WeightedIndex::new(&d2).map_or(rng.gen_range(0..n), |w| w.sample(rng))
        } else {
            rng.gen_range(0..n)
        };
        centroids[c * d..(c + 1) * d].copy_from_slice(row(pick));
        for i in 0..n {
            let nd = dist_sq(row(i), &centroids[c * d..(c + 1) * d]);
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut assign = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        // Assignment step.
        let mut new_inertia = 0.0;
        for i in 0..n {
            let (mut bi, mut bd) = (0usize, f64::INFINITY);
            for c in 0..k {
                let dd = dist_sq(row(i), &centroids[c * d..(c + 1) * d]);
                if dd < bd {
                    bd = dd;
                    bi = c;
                }
            }
            assign[i] = bi;
            new_inertia += bd;
        }

        // Update step.
        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0f64; k * d];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed a dead centroid from the point farthest from
                // its current assignment.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist_sq(row(a), &centroids[assign[a] * d..(assign[a] + 1) * d]);
                        let db = dist_sq(row(b), &centroids[assign[b] * d..(assign[b] + 1) * d]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c * d..(c + 1) * d].copy_from_slice(row(far));
                assign[far] = c;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (ct, &s) in centroids[c * d..(c + 1) * d]
                    .iter_mut()
                    .zip(&sums[c * d..(c + 1) * d])
                {
                    *ct = s * inv;
                }
            }
        }

        let rel = (inertia - new_inertia).abs() / inertia.max(1e-12);
        inertia = new_inertia;
        if rel <= cfg.tol {
            break;
        }
    }

    // Final assignment against the last centroid update.
    inertia = 0.0;
    for i in 0..n {
        let (mut bi, mut bd) = (0usize, f64::INFINITY);
        for c in 0..k {
            let dd = dist_sq(row(i), &centroids[c * d..(c + 1) * d]);
            if dd < bd {
                bd = dd;
                bi = c;
            }
        }
        assign[i] = bi;
        inertia += bd;
    }

    KMeansResult {
        assignments: assign,
        centroids: Tensor::new(&[k, d], centroids).expect("centroid shape"),
        inertia,
    }
}
