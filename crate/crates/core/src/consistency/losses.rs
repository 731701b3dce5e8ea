//! The two stage-1 objectives, built on the tape so gradients flow to
//! the encoder and heads.

use super::{ConsResult, ConsistencyError};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Additive mask that removes an entry from a row softmax.
const MASK: f64 = -1e30;
/// Floor inside logs of dot products / mean assignments.
const LOG_EPS: f64 = 1e-12;
/// Row-norm slack tolerated by the "inputs are L2-normalized" check.
const NORM_TOL: f64 = 1e-6;

/// Pooled-batch InfoNCE. `blocks[2v + a]` is augmentation copy `a` of
/// view `v`, each `[B, d]` with unit-norm rows. Every row is an anchor;
/// its one positive is the same row under view v+1 (mod V) and the other
/// copy; the denominator runs over all `2BV - 1` non-anchor rows. With
/// all similarities equal the value is exactly `ln(2BV - 1)`.
pub fn contrastive_loss<F: Scalar>(
    tape: &mut Tape<F>,
    blocks: &[Var],
    tau: f64,
) -> ConsResult<Var> {
    if blocks.len() < 2 || blocks.len() % 2 != 0 {
        return Err(ConsistencyError::Invalid(format!(
            "expected an even number (2V) of blocks, got {}",
            blocks.len()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ConsistencyError::Invalid(format!(
            "temperature must be finite and > 0, got {tau}"
        )));
    }
    let v = blocks.len() / 2;
    let (b, d) = {
        let s = tape.shape(blocks[0]);
        if s.len() != 2 {
            return Err(ConsistencyError::Invalid(format!(
                "contrastive blocks must be rank 2, got {s:?}"
            )));
        }
        (s[0], s[1])
    };
    for &blk in blocks {
        if tape.shape(blk) != [b, d] {
            return Err(ConsistencyError::Invalid(format!(
                "all contrastive blocks must share the shape [{b}, {d}], got {:?}",
                tape.shape(blk)
            )));
        }
        for r in 0..b {
            let norm: f64 = tape.value(blk).row(r).iter().map(|x| {
                let xf = x.as_f64();
                xf * xf
            }).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(ConsistencyError::Invalid(format!(
                    "contrastive rows must be unit norm, found {norm:.6}"
                )));
            }
        }
    }
    let m = 2 * b * v;
    if m < 3 {
        return Err(ConsistencyError::Invalid(format!(
            "degenerate batch: {m} pooled vectors leave no negatives"
        )));
    }

    // Pooled similarities, self-entries masked out of every softmax row.
    let z = tape.concat_rows(blocks)?;
    let zt = tape.transpose(z)?;
    let sims = tape.matmul(z, zt)?;
    let scaled = tape.scale(sims, F::from_f64(1.0 / tau))?;

    let mut self_mask = Tensor::<F>::zeros(&[m, m]);
    for k in 0..m {
        self_mask.set2(k, k, F::from_f64(MASK));
    }
    let mask_var = tape.input(self_mask);
    let logits = tape.add(scaled, mask_var)?;
    let logp = tape.log_softmax(logits)?;

    // One positive per anchor: (v, a, r) -> (v+1 mod V, 1-a, r).
    let mut pos = Tensor::<F>::zeros(&[m, m]);
    for view in 0..v {
        for copy in 0..2 {
            for r in 0..b {
                let anchor = (2 * view + copy) * b + r;
                let partner = (2 * ((view + 1) % v) + (1 - copy)) * b + r;
                pos.set2(anchor, partner, F::one());
            }
        }
    }
    let pos_var = tape.input(pos);
    let picked = tape.mul(pos_var, logp)?;
    let per_anchor = tape.row_sum(picked)?;
    let mean = tape.mean_all(per_anchor)?;
    Ok(tape.neg(mean)?)
}

/// Cross-view clustering agreement for one view pair: the mean
/// `-ln<rows>` of paired soft assignments, plus `lambda_clu` times the
/// negative entropy of the mean assignment over the pooled 2B rows.
pub fn clustering_loss<F: Scalar>(
    tape: &mut Tape<F>,
    assign_i: Var,
    assign_j: Var,
    lambda_clu: f64,
) -> ConsResult<Var> {
    if !(lambda_clu >= 0.0 && lambda_clu.is_finite()) {
        return Err(ConsistencyError::Invalid(format!(
            "entropy weight must be finite and >= 0, got {lambda_clu}"
        )));
    }
    let shape = tape.shape(assign_i).to_vec();
    if shape.len() != 2 || tape.shape(assign_j) != shape.as_slice() {
        return Err(ConsistencyError::Invalid(format!(
            "assignment blocks must be rank 2 and equal-shaped, got {:?} vs {:?}",
            shape,
            tape.shape(assign_j)
        )));
    }
    for &a in &[assign_i, assign_j] {
        let t = tape.value(a);
        for r in 0..shape[0] {
            let mut sum = 0.0;
            for x in t.row(r) {
                let xf = x.as_f64();
                if xf < -1e-9 {
                    return Err(ConsistencyError::Invalid(format!(
                        "assignment rows must be nonnegative, found {xf}"
                    )));
                }
                sum += xf;
            }
            if (sum - 1.0).abs() > NORM_TOL {
                return Err(ConsistencyError::Invalid(format!(
                    "assignment rows must sum to 1, found {sum:.6}"
                )));
            }
        }
    }

    let prod = tape.mul(assign_i, assign_j)?;
    let dots = tape.row_sum(prod)?;
    let logs = tape.ln_floor(dots, F::from_f64(LOG_EPS))?;
    let mean_log = tape.mean_all(logs)?;
    let agree = tape.neg(mean_log)?;

    let pooled = tape.concat_rows(&[assign_i, assign_j])?;
    let gbar = tape.col_mean(pooled)?;
    let ln_gbar = tape.ln_floor(gbar, F::from_f64(LOG_EPS))?;
    let prod_ent = tape.mul(gbar, ln_gbar)?;
    let neg_entropy = tape.sum_all(prod_ent)?;
    let weighted = tape.scale(neg_entropy, F::from_f64(lambda_clu))?;
    Ok(tape.add(agree, weighted)?)
}
