//! Variational estimate of the information shared between the consistent
//! code and a view's latent: mean log-ratio of a conditional Gaussian
//! density to a mixture marginal, driven down during stage 2 and driven
//! tight by fitting both densities to the current latents.

use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::gaussian::{diag_logdensity_rows, LOG_STD_MAX, LOG_STD_MIN};
use super::{DisResult, DisentangleError, MixtureOfGaussians, MixtureVars};
use crate::ndgrad::{Adam, AdamParams, NdResult, Tape, Tensor, Var};
use crate::nn::{grads_for, Activation, Mlp, MlpVars};
use crate::scalar::Scalar;

/// Smallest admissible mixture log-density; anything lower is treated as
/// underflow, floored, and reported once or twice on stderr.
pub const LOG_DENSITY_FLOOR: f64 = -745.0;

static FLOOR_WARNINGS: AtomicU32 = AtomicU32::new(0);

/// Gaussian conditional over the latent, parameterized from the
/// consistent code: `s -> (mean, log_std)`, log-std clamped like the
/// posterior heads.
#[derive(Clone, Debug)]
pub struct VariationalConditional<F> {
    pub net: Mlp<F>,
    d_z: usize,
}

impl<F: Scalar> VariationalConditional<F> {
    pub fn init<R: Rng>(d_in: usize, hidden: &[usize], d_z: usize, rng: &mut R) -> Self {
        let mut dims = vec![d_in];
        dims.extend_from_slice(hidden);
        dims.push(2 * d_z);
        let mut net = Mlp::init(&dims, Activation::Relu, rng);
        // Output head starts near zero (mean 0, unit scale) so an early
        // scale mismatch cannot flood the fit optimizer's second moments
        // with z^2-sized gradients.
        if let Some(last) = net.layers.last_mut() {
            for w in last.w.data_mut() {
                *w = *w * F::from_f64(0.01);
            }
        }
        Self { net, d_z }
    }

    /// All-zero single linear layer; outputs exactly the bias row.
    pub fn zeroed(d_in: usize, d_z: usize) -> Self {
        Self {
            net: Mlp::zeros(&[d_in, 2 * d_z], Activation::Relu),
            d_z,
        }
    }

    /// Rebuilds a conditional around an already-trained network
    /// (checkpoint restore); the net must end in a 2`d_z` head.
    pub(crate) fn from_parts(net: Mlp<F>, d_z: usize) -> Self {
        debug_assert_eq!(net.out_dim(), 2 * d_z);
        Self { net, d_z }
    }

    pub fn latent_dim(&self) -> usize {
        self.d_z
    }

    pub fn register(&self, tape: &mut Tape<F>) -> MlpVars {
        self.net.register(tape)
    }

    pub fn register_frozen(&self, tape: &mut Tape<F>) -> MlpVars {
        self.net.register_frozen(tape)
    }

    /// Row log-densities `ln q(h_r | s_r)`, output `[B]`.
    pub fn log_density(
        &self,
        tape: &mut Tape<F>,
        vars: &MlpVars,
        s: Var,
        h: Var,
    ) -> NdResult<Var> {
        let d = self.d_z;
        let out = self.net.forward(tape, vars, s)?;
        let mean = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, d)?;
        let log_std = tape.clamp(raw, F::from_f64(LOG_STD_MIN), F::from_f64(LOG_STD_MAX))?;
        diag_logdensity_rows(tape, h, mean, log_std)
    }

    /// Value-level conditional parameters for a batch of codes.
    pub fn conditional(&self, s: &Tensor<F>) -> NdResult<super::GaussianLatent<F>> {
        super::GaussianLatent::from_net(&self.net, s)
    }
}

/// Monte-Carlo information bound: mean over rows of
/// `ln q(h|s) - ln r(h)`, with the mixture side floored at
/// [`LOG_DENSITY_FLOOR`]. Gradients flow into whatever `q_vars`,
/// `r_vars`, `s`, and `h` were registered as.
pub fn mi_upper_bound<F: Scalar>(
    tape: &mut Tape<F>,
    s: Var,
    h: Var,
    q: &VariationalConditional<F>,
    q_vars: &MlpVars,
    r: &MixtureOfGaussians<F>,
    r_vars: &MixtureVars,
) -> NdResult<Var> {
    let logq = q.log_density(tape, q_vars, s, h)?;
    let logr_raw = r.log_density(tape, r_vars, h)?;
    let floor = F::from_f64(LOG_DENSITY_FLOOR);
    let hits = tape
        .value(logr_raw)
        .data()
        .iter()
        .filter(|v| **v < floor)
        .count();
    if hits > 0 && FLOOR_WARNINGS.fetch_add(1, Ordering::Relaxed) < 2 {
        eprintln!(
            "mixture log-density underflow: {} rows floored at {}",
            hits, LOG_DENSITY_FLOOR
        );
    }
    let logr = tape.clamp(logr_raw, floor, F::max_value())?;
    let ratio = tape.sub(logq, logr)?;
    tape.mean_all(ratio)
}

fn check_fit_shapes<F: Scalar>(
    q: &VariationalConditional<F>,
    r: &MixtureOfGaussians<F>,
    s: &Tensor<F>,
    h: &Tensor<F>,
) -> DisResult<()> {
    if s.rank() != 2 || h.rank() != 2 || s.rows() != h.rows() || s.rows() == 0 {
        return Err(DisentangleError::Invalid(format!(
            "code/latent batches misaligned: {:?} vs {:?}",
            s.shape(),
            h.shape()
        )));
    }
    if s.cols() != q.net.in_dim() || h.cols() != q.d_z || h.cols() != r.dim() {
        return Err(DisentangleError::Invalid(format!(
            "fit dimensions: s {:?}, h {:?}, conditional {}->{}, mixture dim {}",
            s.shape(),
            h.shape(),
            q.net.in_dim(),
            q.d_z,
            r.dim()
        )));
    }
    Ok(())
}

/// One ascent step on the conditional; returns the mean log-likelihood
/// before the step.
pub(crate) fn q_fit_step<F: Scalar>(
    q: &mut VariationalConditional<F>,
    opt: &mut Adam<F>,
    s: &Tensor<F>,
    h: &Tensor<F>,
) -> DisResult<f64> {
    let mut tape = Tape::new();
    let vars = q.register(&mut tape);
    let sv = tape.input(s.clone());
    let hv = tape.input(h.clone());
    let ld = q.log_density(&mut tape, &vars, sv, hv)?;
    let mean = tape.mean_all(ld)?;
    let loss = tape.neg(mean)?;
    tape.backward(loss)?;
    let grads = grads_for(&tape, &vars.all());
    opt.step(&mut q.net.params_mut(), &grads)?;
    Ok(tape.scalar_value(mean).as_f64())
}

/// One ascent step on the mixture; returns the mean log-likelihood
/// before the step.
pub(crate) fn r_fit_step<F: Scalar>(
    r: &mut MixtureOfGaussians<F>,
    opt: &mut Adam<F>,
    h: &Tensor<F>,
) -> DisResult<f64> {
    let mut tape = Tape::new();
    let vars = r.register(&mut tape);
    let hv = tape.input(h.clone());
    let ld = r.log_density(&mut tape, &vars, hv)?;
    let mean = tape.mean_all(ld)?;
    let loss = tape.neg(mean)?;
    tape.backward(loss)?;
    let grads = grads_for(&tape, &[vars.logits, vars.means, vars.log_stds]);
    opt.step(&mut r.params_mut(), &grads)?;
    Ok(tape.scalar_value(mean).as_f64())
}

/// Maximum-likelihood refresh of both variational pieces on one batch of
/// codes and latents: `steps` alternating Adam ascent steps at rate `lr`.
/// Returns the mean log-likelihoods (conditional, mixture) at the last
/// step. Fresh optimizer state each call; trainers that interleave
/// fitting with model updates keep their own optimizers instead.
pub fn fit_variational<F: Scalar>(
    q: &mut VariationalConditional<F>,
    r: &mut MixtureOfGaussians<F>,
    s: &Tensor<F>,
    h: &Tensor<F>,
    steps: usize,
    lr: f64,
) -> DisResult<(f64, f64)> {
    if steps == 0 {
        return Err(DisentangleError::Invalid("fit needs at least one step".into()));
    }
    check_fit_shapes(q, r, s, h)?;
    let mut q_opt = Adam::new(AdamParams::with_lr(lr));
    let mut r_opt = Adam::new(AdamParams::with_lr(lr));
    let mut last = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for _ in 0..steps {
        last.0 = q_fit_step(q, &mut q_opt, s, h)?;
        last.1 = r_fit_step(r, &mut r_opt, h)?;
    }
    Ok(last)
}
