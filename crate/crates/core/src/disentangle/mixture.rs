//! Mixture-of-diagonal-Gaussians marginal over the view-specific latent.
//! Weights live as logits so gradient steps can never leave the simplex.

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;

use super::gaussian::LN_2PI;
use super::{DisResult, DisentangleError};
use crate::ndgrad::{NdError, NdResult, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct MixtureOfGaussians<F> {
    /// `[1, C]`; weights are the softmax of this row.
    pub logits: Tensor<F>,
    /// `[C, d]` component means.
    pub means: Tensor<F>,
    /// `[C, d]` diagonal log standard deviations.
    pub log_stds: Tensor<F>,
}

/// Tape handles for one registered mixture.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub logits: Var,
    pub means: Var,
    pub log_stds: Var,
}

impl<F: Scalar> MixtureOfGaussians<F> {
    /// Unit-weight components at standard scale, means drawn N(0, 1).
    pub fn init<R: Rng>(components: usize, dim: usize, rng: &mut R) -> DisResult<Self> {
        if components == 0 || dim == 0 {
            return Err(DisentangleError::Invalid(format!(
                "mixture needs at least one component and one dimension, got {}x{}",
                components, dim
            )));
        }
        Ok(Self {
            logits: Tensor::zeros(&[1, components]),
            means: Tensor::randn(&[components, dim], 1.0, rng),
            log_stds: Tensor::zeros(&[components, dim]),
        })
    }

    pub fn components(&self) -> usize {
        self.logits.cols()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn register(&self, tape: &mut Tape<F>) -> MixtureVars {
        MixtureVars {
            logits: tape.param(self.logits.clone()),
            means: tape.param(self.means.clone()),
            log_stds: tape.param(self.log_stds.clone()),
        }
    }

    pub fn register_frozen(&self, tape: &mut Tape<F>) -> MixtureVars {
        MixtureVars {
            logits: tape.input(self.logits.clone()),
            means: tape.input(self.means.clone()),
            log_stds: tape.input(self.log_stds.clone()),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        vec![&self.logits, &self.means, &self.log_stds]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        vec![&mut self.logits, &mut self.means, &mut self.log_stds]
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        vec![
            format!("{prefix}.logits"),
            format!("{prefix}.means"),
            format!("{prefix}.log_stds"),
        ]
    }

    /// Normalized component weights.
    pub fn weights(&self) -> Vec<f64> {
        let row: Vec<f64> = self.logits.data().iter().map(|v| v.as_f64()).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }

    /// Row log-densities `ln r(h_r)` for `h [B, d]`, output `[B]`.
    ///
    /// Each component is evaluated by broadcasting its mean and scale row
    /// against the batch, so a single component reproduces exactly the
    /// arithmetic of the plain diagonal-Gaussian path; components are then
    /// combined with a row-wise log-sum-exp over `[B, C]`.
    pub fn log_density(&self, tape: &mut Tape<F>, vars: &MixtureVars, h: Var) -> NdResult<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(NdError::BadShape {
                op: "mixture_log_density",
                expected: "rank 2 with mixture dimension columns",
                got: shape,
            });
        }
        let (b, d) = (shape[0], shape[1]);
        let c = self.components();
        let logw = tape.log_softmax(vars.logits)?;
        let ones = tape.input(Tensor::full(&[b, 1], F::one()));
        let mut cols = Vec::with_capacity(c);
        for k in 0..c {
            let mean_k = tape.slice_rows(vars.means, k, 1)?;
            let mean_row = tape.reshape(mean_k, &[d])?;
            let ls_k = tape.slice_rows(vars.log_stds, k, 1)?;
            let ls_row = tape.reshape(ls_k, &[d])?;
            let diff = tape.sub(h, mean_row)?;
            let neg_ls = tape.neg(ls_row)?;
            let inv_sd = tape.exp(neg_ls)?;
            let z = tape.mul(diff, inv_sd)?;
            let z2 = tape.mul(z, z)?;
            let quad = tape.row_sum(z2)?;
            let half = tape.scale(quad, F::from_f64(-0.5))?;
            let half_col = tape.reshape(half, &[b, 1])?;
            let logdet = tape.row_sum(ls_k)?;
            let logdet_cell = tape.reshape(logdet, &[1, 1])?;
            let lw = tape.slice_cols(logw, k, 1)?;
            let lead = tape.sub(lw, logdet_cell)?;
            let t = tape.affine(lead, F::one(), F::from_f64(-0.5 * d as f64 * LN_2PI))?;
            let t_col = tape.matmul(ones, t)?;
            let comp = tape.add(half_col, t_col)?;
            cols.push(comp);
        }
        let grid = tape.concat_cols(&cols)?;
        tape.logsumexp_rows(grid)
    }

    /// Draws `n` rows: component by weight, then its diagonal Gaussian.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> DisResult<Tensor<F>> {
        let d = self.dim();
        let picker = WeightedIndex::new(self.weights())
            .map_err(|e| DisentangleError::Invalid(format!("mixture weights: {e}")))?;
        let noise = Tensor::<F>::randn(&[n, d], 1.0, rng);
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let k = picker.sample(rng);
            for j in 0..d {
                let sd = self.log_stds.at2(k, j).exp();
                out.set2(i, j, self.means.at2(k, j) + sd * noise.at2(i, j));
            }
        }
        Ok(out)
    }
}
