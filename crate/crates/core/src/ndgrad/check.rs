//! Central finite-difference verification of tape gradients.

use super::{NdError, NdResult, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Worst relative error found for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: usize,
    pub max_rel_err: f64,
    pub at_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` rebuilds the loss from scratch on the tape it is handed; the
/// `Var`s it receives correspond to `params` in order. Relative error is
/// `|ad - fd| / (|ad| + |fd| + 1e-12)` per component, and the check
/// passes when the worst component is within `tol`.
pub fn gradient_check<F, Builder>(
    mut f: Builder,
    params: &[Tensor<F>],
    h: f64,
    tol: f64,
) -> NdResult<GradCheckReport>
where
    F: Scalar,
    Builder: FnMut(&mut Tape<F>, &[Var]) -> NdResult<Var>,
{
    if params.is_empty() {
        return Err(NdError::Invalid("gradient_check without parameters".into()));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss)?;
        vars.iter().map(|&v| tape.grad_tensor(v).to_f64_vec()).collect()
    };

    let eval = |f: &mut Builder, theta: &[Tensor<F>]| -> NdResult<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = theta.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss).as_f64())
    };

    let mut entries = Vec::with_capacity(params.len());
    let mut worst = 0.0f64;
    let mut theta: Vec<Tensor<F>> = params.to_vec();
    for pi in 0..params.len() {
        let mut entry = GradCheckEntry {
            param: pi,
            max_rel_err: 0.0,
            at_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..params[pi].len() {
            let orig = theta[pi].data()[j];
            theta[pi].data_mut()[j] = orig + F::from_f64(h);
            let up = eval(&mut f, &theta)?;
            theta[pi].data_mut()[j] = orig - F::from_f64(h);
            let down = eval(&mut f, &theta)?;
            theta[pi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = analytic[pi][j];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-12);
            if rel > entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.at_index = j;
                entry.analytic = ad;
                entry.numeric = fd;
            }
        }
        worst = worst.max(entry.max_rel_err);
        entries.push(entry);
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err: worst,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn passes_on_correct_composite_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let w = Tensor::<f64>::randn(&[3, 4], 0.7, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let report = gradient_check(
            |tape, vars| {
                let xv = tape.input(x.clone());
                let h = tape.matmul(xv, vars[0])?;
                let a = tape.tanh(h)?;
                let s = tape.softmax(a)?;
                let l = tape.ln(s)?;
                tape.mean_all(l)
            },
            &[w],
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn fails_on_corrupted_backward_rule() {
        // detach makes AD treat one factor of p^2 as constant, so the
        // analytic gradient (p) disagrees with finite differences (2p).
        let p = Tensor::<f64>::new(&[2], vec![0.7, -1.3]).unwrap();
        let report = gradient_check(
            |tape, vars| {
                let d = tape.detach(vars[0]);
                let sq = tape.mul(vars[0], d)?;
                tape.sum_all(sq)
            },
            &[p],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err > 0.1);
    }

    #[test]
    fn rejects_empty_parameter_list() {
        let r = gradient_check(
            |tape, _vars| {
                let x = tape.input(Tensor::<f64>::scalar(1.0));
                tape.sum_all(x)
            },
            &[],
            1e-5,
            1e-5,
        );
        assert!(r.is_err());
    }

    /// Gaussian draw with magnitudes kept away from `gap`, for ops whose
    /// derivative has a kink at zero (relu) or at clamp bounds.
    fn randn_away_from(
        shape: &[usize],
        gap: f64,
        kinks: &[f64],
        rng: &mut ChaCha20Rng,
    ) -> Tensor<f64> {
        let mut t = Tensor::<f64>::randn(shape, 1.0, rng);
        for x in t.data_mut() {
            for &k in kinks {
                if (*x - k).abs() < gap {
                    *x = k + gap * 2.0 * (if *x >= k { 1.0 } else { -1.0 });
                }
            }
        }
        t
    }

    fn check_one(
        name: &str,
        param: Tensor<f64>,
        extra: Vec<Tensor<f64>>,
        f: impl FnMut(&mut Tape<f64>, &[Var]) -> NdResult<Var>,
    ) {
        let mut all = vec![param];
        all.extend(extra);
        let report = gradient_check(f, &all, 1e-5, 1e-5).unwrap();
        assert!(
            report.passed(),
            "{name}: max rel err {} (ad {}, fd {})",
            report.max_rel_err,
            report.entries.iter().map(|e| e.analytic).fold(0.0, f64::max),
            report.entries.iter().map(|e| e.numeric).fold(0.0, f64::max),
        );
    }

    /// Every primitive, finite-differenced over a spread of random small
    /// shapes. The random linear functional on top makes the adjoints
    /// non-uniform so transposition mistakes cannot cancel out.
    #[test]
    fn every_primitive_passes_finite_difference_sweep() {
        let mut rng = ChaCha20Rng::seed_from_u64(20240817);
        let shapes: [(usize, usize); 5] = [(1, 1), (1, 4), (3, 2), (4, 5), (2, 7)];
        for &(m, n) in &shapes {
            let probe_mn = Tensor::<f64>::randn(&[m, n], 1.0, &mut rng);
            let probe_m = Tensor::<f64>::randn(&[m], 1.0, &mut rng);
            let probe_n = Tensor::<f64>::randn(&[n], 1.0, &mut rng);

            // Unary smooth ops.
            let x = Tensor::<f64>::randn(&[m, n], 0.8, &mut rng);
            for op in ["exp", "tanh", "affine", "reshape"] {
                let pr = probe_mn.clone();
                check_one(op, x.clone(), vec![], |t, v| {
                    let y = match op {
                        "exp" => t.exp(v[0])?,
                        "tanh" => t.tanh(v[0])?,
                        "affine" => t.affine(v[0], -1.7, 0.3)?,
                        _ => t.reshape(v[0], &[n, m])?,
                    };
                    let shp = t.shape(y).to_vec();
                    let p = t.input(pr.clone().reshaped(&shp).unwrap());
                    let w = t.mul(y, p)?;
                    t.sum_all(w)
                });
            }

            // ln and ln_floor on strictly positive inputs.
            let xp = x.map(|v| v.abs() + 0.5);
            for op in ["ln", "ln_floor"] {
                let pr = probe_mn.clone();
                check_one(op, xp.clone(), vec![], |t, v| {
                    let y = if op == "ln" {
                        t.ln(v[0])?
                    } else {
                        t.ln_floor(v[0], 1e-12)?
                    };
                    let p = t.input(pr.clone());
                    let w = t.mul(y, p)?;
                    t.sum_all(w)
                });
            }

            // Kinked ops with inputs held away from their kinks.
            let xr = randn_away_from(&[m, n], 0.05, &[0.0], &mut rng);
            let pr = probe_mn.clone();
            check_one("relu", xr, vec![], |t, v| {
                let y = t.relu(v[0])?;
                let p = t.input(pr.clone());
                let w = t.mul(y, p)?;
                t.sum_all(w)
            });
            let xc = randn_away_from(&[m, n], 0.05, &[-0.6, 0.6], &mut rng);
            let pr = probe_mn.clone();
            check_one("clamp", xc, vec![], |t, v| {
                let y = t.clamp(v[0], -0.6, 0.6)?;
                let p = t.input(pr.clone());
                let w = t.mul(y, p)?;
                t.sum_all(w)
            });

            // Row-structured ops.
            for op in [
                "softmax",
                "log_softmax",
                "logsumexp",
                "l2norm",
                "row_sum",
                "col_mean",
                "transpose",
                "mean_all",
            ] {
                if op == "l2norm" && n == 1 {
                    // A one-column row normalizes to its sign: the true
                    // derivative is ~eps and central differences read 0.
                    continue;
                }
                let x = Tensor::<f64>::randn(&[m, n], 1.0, &mut rng);
                let (pmn, pm, pn) = (probe_mn.clone(), probe_m.clone(), probe_n.clone());
                check_one(op, x, vec![], |t, v| {
                    let (y, probe) = match op {
                        "softmax" => (t.softmax(v[0])?, pmn.clone()),
                        "log_softmax" => (t.log_softmax(v[0])?, pmn.clone()),
                        "logsumexp" => (t.logsumexp_rows(v[0])?, pm.clone()),
                        "l2norm" => (t.l2_normalize_rows(v[0])?, pmn.clone()),
                        "row_sum" => (t.row_sum(v[0])?, pm.clone()),
                        "col_mean" => (t.col_mean(v[0])?, pn.clone()),
                        "transpose" => {
                            (t.transpose(v[0])?, pmn.clone().reshaped(&[n, m]).unwrap())
                        }
                        _ => (t.mean_all(v[0])?, Tensor::scalar(1.3)),
                    };
                    let p = t.input(probe);
                    let w = t.mul(y, p)?;
                    t.sum_all(w)
                });
            }

            // Binary ops, both operands as params.
            let a = Tensor::<f64>::randn(&[m, n], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[m, n], 1.0, &mut rng);
            let bsafe = b.map(|v| if v.abs() < 0.3 { v.signum() * (0.3 + v.abs()) } else { v });
            for op in ["add", "sub", "mul", "div"] {
                let pr = probe_mn.clone();
                let second = if op == "div" { bsafe.clone() } else { b.clone() };
                check_one(op, a.clone(), vec![second], |t, v| {
                    let y = match op {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        "mul" => t.mul(v[0], v[1])?,
                        _ => t.div(v[0], v[1])?,
                    };
                    let p = t.input(pr.clone());
                    let w = t.mul(y, p)?;
                    t.sum_all(w)
                });
            }

            // Row-broadcast variants.
            let row = Tensor::<f64>::randn(&[n], 1.0, &mut rng);
            for op in ["add", "sub", "mul"] {
                let pr = probe_mn.clone();
                check_one(op, a.clone(), vec![row.clone()], |t, v| {
                    let y = match op {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    let p = t.input(pr.clone());
                    let w = t.mul(y, p)?;
                    t.sum_all(w)
                });
            }

            // Matmul, both operands.
            let k = 3;
            let ma = Tensor::<f64>::randn(&[m, k], 1.0, &mut rng);
            let mb = Tensor::<f64>::randn(&[k, n], 1.0, &mut rng);
            let pr = probe_mn.clone();
            check_one("matmul", ma, vec![mb], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let p = t.input(pr.clone());
                let w = t.mul(y, p)?;
                t.sum_all(w)
            });

            // Concat and slice routing.
            let c1 = Tensor::<f64>::randn(&[m, n], 1.0, &mut rng);
            let c2 = Tensor::<f64>::randn(&[m, n], 1.0, &mut rng);
            check_one("concat_slice", c1, vec![c2], |t, v| {
                let rows = t.concat_rows(&[v[0], v[1]])?;
                let cols = t.concat_cols(&[v[0], v[1]])?;
                let sr = t.slice_rows(rows, m / 2, m)?;
                let sc = t.slice_cols(cols, n / 2, n)?;
                let s1 = t.sum_all(sr)?;
                let s2 = t.mean_all(sc)?;
                t.add(s1, s2)
            });
        }
    }
}
