//! Supervised probes over frozen representations: a multinomial logistic
//! classifier and a ridge regression R^2 readout.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, EvalResult};
use crate::ndgrad::{Adam, AdamParams, Tape, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub max_iters: usize,
    pub lr: f64,
    /// L2 penalty on weights (bias exempt).
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            max_iters: 500,
            lr: 0.1,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
}

/// Splits indices so every class lands in both folds. Shuffle is seeded;
/// per-class counts are rounded with at least one sample on each side.
pub fn stratified_split(
    labels: &[usize],
    train_fraction: f64,
    seed: u64,
) -> EvalResult<(Vec<usize>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(EvalError::Invalid("empty label vector".into()));
    }
    if !(0.0..1.0).contains(&train_fraction) || train_fraction <= 0.0 {
        return Err(EvalError::Invalid(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let mut by_class: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match by_class.iter_mut().find(|(c, _)| *c == l) {
            Some((_, v)) => v.push(i),
            None => by_class.push((l, vec![i])),
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(EvalError::Stratification {
                class,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let want = (idx.len() as f64 * train_fraction).round() as usize;
        let k = want.clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Fits a multinomial logistic classifier on a stratified split of `x`
/// and reports held-out accuracy and macro-F1.
pub fn linear_probe<F: Scalar>(
    x: &Tensor<F>,
    labels: &[usize],
    cfg: &ProbeConfig,
) -> EvalResult<ProbeReport> {
    let n = x.rows();
    if labels.len() != n {
        return Err(EvalError::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    let (compacted, c) = super::hungarian::compact(labels);
    if c < 2 {
        return Err(EvalError::SingleClass);
    }
    let (tr, te) = stratified_split(labels, cfg.train_fraction, cfg.seed)?;
    let d = x.cols();

    let xf = x.to_f64_vec();
    let gather = |idx: &[usize]| -> Tensor<f64> {
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xf[i * d..(i + 1) * d]);
        }
        Tensor::new(&[idx.len(), d], out).expect("gather shape")
    };
    let xtr = gather(&tr);
    let xte = gather(&te);
    let ytr: Vec<usize> = tr.iter().map(|&i| compacted[i]).collect();
    let yte: Vec<usize> = te.iter().map(|&i| compacted[i]).collect();

    // One-hot targets for the training fold.
    let mut onehot = vec![0.0f64; tr.len() * c];
    for (r, &cls) in ytr.iter().enumerate() {
        onehot[r * c + cls] = 1.0;
    }
    let target = Tensor::new(&[tr.len(), c], onehot).expect("one-hot shape");

    let mut w = Tensor::<f64>::zeros(&[d, c]);
    let mut b = Tensor::<f64>::zeros(&[c]);
    let mut opt = Adam::new(AdamParams::with_lr(cfg.lr));

    for _ in 0..cfg.max_iters {
        let mut tape = Tape::<f64>::new();
        let wv = tape.param(w.clone());
        let bv = tape.param(b.clone());
        let xv = tape.input(xtr.clone());
        let tv = tape.input(target.clone());
        let xw = tape.matmul(xv, wv)?;
        let logits = tape.add(xw, bv)?;
        let logp = tape.log_softmax(logits)?;
        let picked = tape.mul(tv, logp)?;
        let per_row = tape.row_sum(picked)?;
        let mean_lp = tape.mean_all(per_row)?;
        let loss = tape.affine(mean_lp, -1.0, 0.0)?;
        tape.backward(loss)?;

        let mut gw = tape.grad_tensor(wv);
        let gb = tape.grad_tensor(bv);
        // Weight decay applied outside the tape; bias exempt.
        for (g, &p) in gw.data_mut().iter_mut().zip(w.data()) {
            *g += cfg.l2 * p;
        }
        let gnorm: f64 = gw
            .data()
            .iter()
            .chain(gb.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        opt.step(&mut [&mut w, &mut b], &[gw, gb])?;
        if gnorm <= 1e-7 {
            break;
        }
    }

    // Held-out predictions: argmax of logits.
    let mut pred = Vec::with_capacity(te.len());
    for r in 0..te.len() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for j in 0..c {
            let mut z = b.data()[j];
            for k in 0..d {
                z += xte.data()[r * d + k] * w.data()[k * c + j];
            }
            if z > best.1 {
                best = (j, z);
            }
        }
        pred.push(best.0);
    }

    let correct = pred.iter().zip(&yte).filter(|(a, b)| a == b).count();
    let accuracy = correct as f64 / te.len() as f64;

    // Macro-F1 over the compacted classes.
    let mut f1_sum = 0.0;
    for cls in 0..c {
        let tp = pred
            .iter()
            .zip(&yte)
            .filter(|(&p, &t)| p == cls && t == cls)
            .count() as f64;
        let fp = pred
            .iter()
            .zip(&yte)
            .filter(|(&p, &t)| p == cls && t != cls)
            .count() as f64;
        let fneg = pred
            .iter()
            .zip(&yte)
            .filter(|(&p, &t)| p != cls && t == cls)
            .count() as f64;
        let denom = 2.0 * tp + fp + fneg;
        f1_sum += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }

    Ok(ProbeReport {
        accuracy,
        macro_f1: f1_sum / c as f64,
        n_train: tr.len(),
        n_test: te.len(),
        classes: c,
    })
}

/// Ridge regression from `x` to every column of `y`; returns the test-fold
/// R^2 averaged uniformly over target dimensions. A random (seeded) split
/// is used since regression targets have no classes to stratify.
pub fn linear_regression_r2<F: Scalar>(
    x: &Tensor<F>,
    y: &Tensor<F>,
    train_fraction: f64,
    ridge: f64,
    seed: u64,
) -> EvalResult<f64> {
    let n = x.rows();
    if y.rows() != n {
        return Err(EvalError::LengthMismatch {
            left: n,
            right: y.rows(),
        });
    }
    if n < 4 {
        return Err(EvalError::Invalid("need at least 4 rows".into()));
    }
    if !(0.0..1.0).contains(&train_fraction) || train_fraction <= 0.0 {
        return Err(EvalError::Invalid(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let d = x.cols();
    let q = y.cols();

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let k = ((n as f64 * train_fraction).round() as usize).clamp(2, n - 2);
    let (tr, te) = idx.split_at(k);

    let xf = x.to_f64_vec();
    let yf = y.to_f64_vec();

    // Augment with a bias column; solve (A^T A + ridge I) W = A^T Y.
    let da = d + 1;
    let mut ata = vec![0.0f64; da * da];
    let mut aty = vec![0.0f64; da * q];
    let arow = |i: usize, out: &mut Vec<f64>| {
        out.clear();
        out.extend_from_slice(&xf[i * d..(i + 1) * d]);
        out.push(1.0);
    };
    let mut buf = Vec::with_capacity(da);
    for &i in tr {
        arow(i, &mut buf);
        for a in 0..da {
            for bcol in 0..da {
                ata[a * da + bcol] += buf[a] * buf[bcol];
            }
            for j in 0..q {
                aty[a * q + j] += buf[a] * yf[i * q + j];
            }
        }
    }
    for a in 0..d {
        // Bias stays unpenalized.
        ata[a * da + a] += ridge;
    }

    let wmat = solve_multi(&mut ata, &mut aty, da, q)
        .ok_or_else(|| EvalError::Invalid("singular normal equations".into()))?;

    // Test-fold R^2 per target dim, averaged.
    let mut r2_sum = 0.0;
    for j in 0..q {
        let mean_t: f64 = te.iter().map(|&i| yf[i * q + j]).sum::<f64>() / te.len() as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for &i in te {
            arow(i, &mut buf);
            let pred: f64 = (0..da).map(|a| buf[a] * wmat[a * q + j]).sum();
            let t = yf[i * q + j];
            ss_res += (t - pred) * (t - pred);
            ss_tot += (t - mean_t) * (t - mean_t);
        }
        r2_sum += if ss_tot > 1e-12 {
            1.0 - ss_res / ss_tot
        } else {
            // Constant target: exact prediction scores 1, anything else 0.
            if ss_res <= 1e-12 {
                1.0
            } else {
                0.0
            }
        };
    }
    Ok(r2_sum / q as f64)
}

/// Gaussian elimination with partial pivoting on `a` (n-by-n) against
/// `rhs` (n-by-q). Returns the solution or None if singular.
fn solve_multi(a: &mut [f64], rhs: &mut [f64], n: usize, q: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&r1, &r2| {
            a[r1 * n + col]
                .abs()
                .partial_cmp(&a[r2 * n + col].abs())
                .unwrap()
        })?;
        if a[piv * n + col].abs() <= 1e-12 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            for j in 0..q {
                rhs.swap(col * q + j, piv * q + j);
            }
        }
        let inv = 1.0 / a[col * n + col];
        for r in (col + 1)..n {
            let f = a[r * n + col] * inv;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            for j in 0..q {
                rhs[r * q + j] -= f * rhs[col * q + j];
            }
        }
    }
    let mut out = vec![0.0f64; n * q];
    for j in 0..q {
        for r in (0..n).rev() {
            let mut s = rhs[r * q + j];
            for k in (r + 1)..n {
                s -= a[r * n + k] * out[k * q + j];
            }
            out[r * q + j] = s / a[r * n + r];
        }
    }
    Some(out)
}
