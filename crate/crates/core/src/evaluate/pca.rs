//! Two-component PCA via a Jacobi eigensolver on the covariance matrix.

use super::{EvalError, EvalResult};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct PcaProjection {
    /// `[n, 2]` coordinates in the top-two principal directions.
    pub coords: Tensor<f64>,
    /// Fraction of total variance captured by each of the two components.
    pub explained: [f64; 2],
    /// Set when the data had (near-)zero variance; coords are all zero.
    pub degenerate: bool,
}

/// Projects rows of `x` onto their top two principal components. Component
/// signs are fixed so the largest-magnitude loading is positive.
pub fn pca_project<F: Scalar>(x: &Tensor<F>) -> EvalResult<PcaProjection> {
    let n = x.rows();
    let d = x.cols();
    if d < 2 {
        return Err(EvalError::Invalid(format!(
            "need at least 2 feature dims for a 2-d projection, got {d}"
        )));
    }
    if n == 0 {
        return Err(EvalError::Invalid("empty input".into()));
    }
    let xf = x.to_f64_vec();

    // Column means, then covariance (population normalization; the
    // eigvec directions and explained ratios do not depend on 1/n vs
    // 1/(n-1)).
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += xf[i * d + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for i in 0..n {
        for a in 0..d {
            let va = xf[i * d + a] - mean[a];
            for b in a..d {
                cov[a * d + b] += va * (xf[i * d + b] - mean[b]);
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] *= inv_n;
            cov[b * d + a] = cov[a * d + b];
        }
    }

    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    if trace <= 1e-18 {
        eprintln!("warn: projection input has ~zero variance; output degenerate");
        return Ok(PcaProjection {
            coords: Tensor::zeros(&[n, 2]),
            explained: [0.0, 0.0],
            degenerate: true,
        });
    }

    let (eigvals, eigvecs) = jacobi_eigen(&cov, d);

    // Indices of the two largest eigenvalues.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let (i0, i1) = (order[0], order[1]);

    let mut comp = [vec![0.0f64; d], vec![0.0f64; d]];
    for (slot, &ei) in [i0, i1].iter().enumerate() {
        for a in 0..d {
            comp[slot][a] = eigvecs[a * d + ei];
        }
        // Sign convention: largest-|loading| coordinate positive.
        let lead = (0..d)
            .max_by(|&p, &q| comp[slot][p].abs().partial_cmp(&comp[slot][q].abs()).unwrap())
            .unwrap();
        if comp[slot][lead] < 0.0 {
            for c in comp[slot].iter_mut() {
                *c = -*c;
            }
        }
    }

    let mut coords = vec![0.0f64; n * 2];
    for i in 0..n {
        for (slot, c) in comp.iter().enumerate() {
            let mut s = 0.0;
            for a in 0..d {
                s += (xf[i * d + a] - mean[a]) * c[a];
            }
            coords[i * 2 + slot] = s;
        }
    }

    Ok(PcaProjection {
        coords: Tensor::new(&[n, 2], coords).expect("coords shape"),
        explained: [
            (eigvals[i0] / trace).clamp(0.0, 1.0),
            (eigvals[i1] / trace).clamp(0.0, 1.0),
        ],
        degenerate: false,
    })
}

/// Cyclic Jacobi rotations on a symmetric matrix. Returns (eigenvalues,
/// column eigenvectors). Plenty for the small covariance sizes here.
fn jacobi_eigen(sym: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = sym.to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off <= 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= 1e-18 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    (eig, v)
}
