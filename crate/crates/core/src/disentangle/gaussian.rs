//! Diagonal-Gaussian latent plumbing: posterior heads, reparameterized
//! sampling, the standard-normal KL, and the Gaussian reconstruction
//! objective (squared error summed over features).

use rand::Rng;

use super::{DisResult, DisentangleError};
use crate::ndgrad::{NdResult, Tape, Tensor, Var};
use crate::nn::{Mlp, MlpVars};
use crate::scalar::Scalar;

/// Bounds on posterior log-std outputs; keeps exp() and densities sane.
pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 3.0;

pub(crate) const LN_2PI: f64 = 1.8378770664093453_f64;

/// Tape handles for one batch of posterior parameters, both `[B, d_z]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mean: Var,
    pub log_std: Var,
}

/// Value-level posterior parameters, both `[B, d_z]`.
#[derive(Clone, Debug)]
pub struct GaussianLatent<F> {
    pub mean: Tensor<F>,
    pub log_std: Tensor<F>,
}

impl<F: Scalar> GaussianLatent<F> {
    /// Runs the encoder outside any tape and splits its output.
    pub fn from_net(net: &Mlp<F>, x: &Tensor<F>) -> NdResult<Self> {
        let out = net.forward_value(x)?;
        let (b, w) = (out.rows(), out.cols());
        let d = w / 2;
        let lo = F::from_f64(LOG_STD_MIN);
        let hi = F::from_f64(LOG_STD_MAX);
        let mut mean = Tensor::zeros(&[b, d]);
        let mut log_std = Tensor::zeros(&[b, d]);
        for i in 0..b {
            for j in 0..d {
                mean.set2(i, j, out.at2(i, j));
                log_std.set2(i, j, out.at2(i, j + d).max(lo).min(hi));
            }
        }
        Ok(Self { mean, log_std })
    }
}

/// Encoder forward on tape: `x [B, d_v]` through `net` (output width must
/// be even), split into mean and clamped log-std halves.
pub fn encode_specific<F: Scalar>(
    tape: &mut Tape<F>,
    net: &Mlp<F>,
    vars: &MlpVars,
    x: Var,
) -> DisResult<LatentVars> {
    let w = net.out_dim();
    if w % 2 != 0 || w == 0 {
        return Err(DisentangleError::Invalid(format!(
            "posterior head width {} is not an even split of mean and log-std",
            w
        )));
    }
    let d = w / 2;
    let out = net.forward(tape, vars, x)?;
    let mean = tape.slice_cols(out, 0, d)?;
    let raw = tape.slice_cols(out, d, d)?;
    let log_std = tape.clamp(raw, F::from_f64(LOG_STD_MIN), F::from_f64(LOG_STD_MAX))?;
    Ok(LatentVars { mean, log_std })
}

/// `mean + exp(log_std) * eps`, with `eps` supplied by the caller so the
/// noise can be frozen; gradients flow to mean and log-std only.
pub fn reparameterize<F: Scalar>(
    tape: &mut Tape<F>,
    latent: LatentVars,
    eps: Var,
) -> NdResult<Var> {
    let sd = tape.exp(latent.log_std)?;
    let noise = tape.mul(sd, eps)?;
    tape.add(latent.mean, noise)
}

/// Batch mean of `0.5 * sum_d (mu^2 + sigma^2 - 1 - 2 log sigma)`, the
/// divergence from a standard normal. Zero exactly at mu=0, sigma=1.
pub fn kl_std_normal<F: Scalar>(tape: &mut Tape<F>, latent: LatentVars) -> NdResult<Var> {
    let mu2 = tape.mul(latent.mean, latent.mean)?;
    let two_ls = tape.scale(latent.log_std, F::from_f64(2.0))?;
    let sig2 = tape.exp(two_ls)?;
    let sums = tape.add(mu2, sig2)?;
    let less_one = tape.affine(sums, F::one(), -F::one())?;
    let body = tape.sub(less_one, two_ls)?;
    let per_row = tape.row_sum(body)?;
    let mean = tape.mean_all(per_row)?;
    tape.scale(mean, F::from_f64(0.5))
}

/// Squared error summed over features, averaged over the batch; the
/// unit-variance Gaussian decoder likelihood up to constants.
pub fn reconstruction_loss<F: Scalar>(tape: &mut Tape<F>, x: Var, xhat: Var) -> NdResult<Var> {
    let diff = tape.sub(xhat, x)?;
    let sq = tape.mul(diff, diff)?;
    let per_row = tape.row_sum(sq)?;
    tape.mean_all(per_row)
}

/// Row log-densities `ln N(h_r; mean_r, diag sigma_r)`, all inputs
/// `[B, d]`, output `[B]`.
///
/// Association order is fixed as `half + ((lead - sum log_std) - d/2 ln 2pi)`
/// with lead = 0 here; the mixture path reproduces the same order with
/// lead = ln w_c, so a single matching component yields identical bits.
pub(crate) fn diag_logdensity_rows<F: Scalar>(
    tape: &mut Tape<F>,
    h: Var,
    mean: Var,
    log_std: Var,
) -> NdResult<Var> {
    let d = tape.shape(h)[1] as f64;
    let diff = tape.sub(h, mean)?;
    let neg_ls = tape.neg(log_std)?;
    let inv_sd = tape.exp(neg_ls)?;
    let z = tape.mul(diff, inv_sd)?;
    let z2 = tape.mul(z, z)?;
    let quad = tape.row_sum(z2)?;
    let half = tape.scale(quad, F::from_f64(-0.5))?;
    let logdet = tape.row_sum(log_std)?;
    let lead = tape.neg(logdet)?;
    let t = tape.affine(lead, F::one(), F::from_f64(-0.5 * d * LN_2PI))?;
    tape.add(half, t)
}

/// Standard-normal noise of the requested shape.
pub fn standard_normal<F: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<F> {
    Tensor::randn(&[rows, cols], 1.0, rng)
}
