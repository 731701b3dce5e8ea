//! Adam with bias correction. Moment slots are matched to parameters by
//! position, so a given optimizer must always be fed the same parameter
//! list in the same order.

use serde::{Deserialize, Serialize};

use super::{NdError, NdResult, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

pub struct Adam<F: Scalar> {
    pub cfg: AdamParams,
    step: u64,
    slots: Vec<Slot<F>>,
}

struct Slot<F> {
    m: Vec<F>,
    v: Vec<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamParams) -> Self {
        Self {
            cfg,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` must line up with each
    /// other and with every previous call. Moment accumulators start at
    /// zero, so a zero gradient leaves its parameter untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[Tensor<F>]) -> NdResult<()> {
        if params.len() != grads.len() {
            return Err(NdError::Invalid(format!(
                "adam: {} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    m: vec![F::zero(); p.len()],
                    v: vec![F::zero(); p.len()],
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(NdError::Invalid(format!(
                "adam: slot count {} does not match param count {}",
                self.slots.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let lr = F::from_f64(self.cfg.lr);
        let eps = F::from_f64(self.cfg.eps);
        let one = F::one();
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            if p.shape() != g.shape() {
                return Err(NdError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for ((pv, &gv), (m, v)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                *m = b1 * *m + (one - b1) * gv;
                *v = b2 * *v + (one - b2) * gv * gv;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment state flattened for checkpointing: `(m, v)` per slot plus
    /// the step counter.
    pub fn export_state(&self) -> (u64, Vec<(Vec<f64>, Vec<f64>)>) {
        (
            self.step,
            self.slots
                .iter()
                .map(|s| {
                    (
                        s.m.iter().map(|x| x.as_f64()).collect(),
                        s.v.iter().map(|x| x.as_f64()).collect(),
                    )
                })
                .collect(),
        )
    }

    pub fn import_state(&mut self, step: u64, slots: Vec<(Vec<f64>, Vec<f64>)>) {
        self.step = step;
        self.slots = slots
            .into_iter()
            .map(|(m, v)| Slot {
                m: m.into_iter().map(F::from_f64).collect(),
                v: v.into_iter().map(F::from_f64).collect(),
            })
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p1(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut adam = Adam::new(AdamParams::default());
        let mut p = p1(3.5);
        adam.step(&mut [&mut p], &[p1(0.0)]).unwrap();
        assert_eq!(p.item(), 3.5);
    }

    #[test]
    fn single_step_matches_hand_computed_value() {
        // With g=1: mhat=1, vhat=1, so p' = 1 - lr/(1+eps).
        let mut adam = Adam::new(AdamParams::with_lr(1e-3));
        let mut p = p1(1.0);
        adam.step(&mut [&mut p], &[p1(1.0)]).unwrap();
        let want = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((p.item() - want).abs() <= 1e-9);
        assert!((p.item() - 0.999).abs() <= 1e-9);
    }

    #[test]
    fn two_steps_match_reference_recurrence() {
        // Independent oracle: the textbook recurrence evaluated directly.
        let (lr, b1, b2, eps): (f64, f64, f64, f64) = (7e-3, 0.9, 0.999, 1e-8);
        let g = 0.37;
        let mut p_ref = -0.2;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            p_ref -= lr * mhat / (vhat.sqrt() + eps);
        }

        let mut adam = Adam::new(AdamParams {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        });
        let mut p = p1(-0.2);
        adam.step(&mut [&mut p], &[p1(g)]).unwrap();
        adam.step(&mut [&mut p], &[p1(g)]).unwrap();
        assert!((p.item() - p_ref).abs() <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = Adam::new(AdamParams::default());
        let mut p = Tensor::<f64>::zeros(&[2, 2]);
        let g = Tensor::<f64>::zeros(&[2]);
        assert!(adam.step(&mut [&mut p], &[g]).is_err());
    }

    #[test]
    fn state_round_trip_preserves_trajectory() {
        let g = p1(0.5);
        let mut a1 = Adam::new(AdamParams::default());
        let mut p1a = p1(1.0);
        a1.step(&mut [&mut p1a], &[g.clone()]).unwrap();

        let mut a2 = Adam::new(AdamParams::default());
        let mut p2 = p1(1.0);
        a2.step(&mut [&mut p2], &[g.clone()]).unwrap();
        let (step, slots) = a2.export_state();
        let mut a3 = Adam::new(AdamParams::default());
        a3.import_state(step, slots);

        a1.step(&mut [&mut p1a], &[g.clone()]).unwrap();
        a3.step(&mut [&mut p2], &[g]).unwrap();
        assert_eq!(p1a.item(), p2.item());
    }
}
