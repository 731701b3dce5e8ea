//! Stage 2: per-view conditional VAEs that extract comprehensive latents,
//! plus a variational mutual-information upper bound that squeezes the
//! consistent signal back out of them, leaving view-specific factors.

mod bound;
mod gaussian;
mod mixture;
mod train;

pub use bound::{fit_variational, mi_upper_bound, VariationalConditional};
pub use gaussian::{
    encode_specific, kl_std_normal, reconstruction_loss, reparameterize, standard_normal,
    GaussianLatent, LatentVars,
};
pub use mixture::{MixtureOfGaussians, MixtureVars};
pub use train::{
    conditional_sample, stage2_train, CondMode, DivergenceInfo, Stage2Output, Stage2Record,
    Stage2State, Stage2Trainer, Style, ViewCvae,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::DataError;
use crate::ndgrad::NdError;

#[derive(Debug, Error)]
pub enum DisentangleError {
    #[error("{0}")]
    Invalid(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}: {source}")]
    Divergence {
        epoch: usize,
        step: usize,
        #[source]
        source: NdError,
    },
    #[error(transparent)]
    Autodiff(#[from] NdError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type DisResult<T> = Result<T, DisentangleError>;

/// Hyperparameters for the specificity stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    /// Stochastic latent width per view.
    pub d_z: usize,
    /// Hidden widths shared by the view encoders and (mirrored) decoders.
    pub hidden: Vec<usize>,
    /// Hidden widths of the conditional density network.
    pub q_hidden: Vec<usize>,
    /// Weight on the mutual-information penalty.
    pub lambda_dis: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Model learning rate (encoders and decoders).
    pub lr: f64,
    /// Learning rate for the variational pieces (conditional and mixture).
    pub fit_lr: f64,
    /// Inner ascent steps on the variational pieces before each model step.
    pub fit_steps: usize,
    /// What the decoder sees next to the latent sample.
    pub cond_mode: CondMode,
    /// Mixture component count; 0 means "use the pseudo-label class count".
    pub mixture_components: usize,
    /// Irreducible in-view noise, an additive constant on the reported
    /// information term. Kept at 0 for complete views; it shifts the
    /// bookkeeping only, never the gradients.
    pub epsilon_view: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            d_z: 10,
            hidden: vec![64],
            q_hidden: vec![64],
            lambda_dis: 0.02,
            epochs: 150,
            batch_size: 128,
            lr: 5e-4,
            fit_lr: 1e-2,
            fit_steps: 5,
            cond_mode: CondMode::PseudoLabel,
            mixture_components: 0,
            epsilon_view: 0.0,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> DisResult<()> {
        let bad = |m: String| Err(DisentangleError::Invalid(m));
        if self.d_z == 0 {
            return bad("d_z must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} too small", self.batch_size));
        }
        if !(self.lambda_dis >= 0.0 && self.lambda_dis.is_finite()) {
            return bad(format!("lambda_dis {} must be finite and >= 0", self.lambda_dis));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.fit_lr > 0.0 && self.fit_lr.is_finite())
        {
            return bad("learning rates must be positive and finite".into());
        }
        if self.fit_steps == 0 {
            return bad("fit_steps must be at least 1".into());
        }
        if !(self.epsilon_view >= 0.0 && self.epsilon_view.is_finite()) {
            return bad(format!("epsilon_view {} must be finite and >= 0", self.epsilon_view));
        }
        Ok(())
    }
}
