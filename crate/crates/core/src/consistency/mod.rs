//! Stage 1: a shared encoder trained for transformation invariance
//! (contrastive phase) and cross-view clustering agreement (clustering
//! phase), producing a consistent representation and pseudo-labels.

mod infer;
mod losses;
mod neighbors;
mod train;

pub use infer::{assign_pseudolabels, ClusterAssignment, PseudoLabels};
pub use losses::{clustering_loss, contrastive_loss};
pub use neighbors::mine_neighbors;
pub use train::{stage1_train, LossRecord, Stage1Output};
pub(crate) use train::minibatches;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{AugmentationPolicy, DataError};
use crate::ndgrad::NdError;
use crate::nn::{Activation, Mlp};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("{0}")]
    Invalid(String),
    #[error("training diverged (non-finite loss) in {phase} phase, epoch {epoch}: {source}")]
    Divergence {
        phase: &'static str,
        epoch: usize,
        #[source]
        source: NdError,
    },
    #[error(transparent)]
    Autodiff(#[from] NdError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type ConsResult<T> = Result<T, ConsistencyError>;

/// Shared encoder plus its two heads and the loss hyperparameters.
#[derive(Clone, Debug)]
pub struct ConsistentEncoderState<F: Scalar> {
    /// d_v -> hidden... -> d_e, shared by every view.
    pub encoder: Mlp<F>,
    /// d_e -> d_proj; outputs are L2-normalized before similarity.
    pub contrastive_head: Mlp<F>,
    /// d_e -> C logits; softmax applied wherever assignments are read.
    pub clustering_head: Mlp<F>,
    pub tau: f64,
    pub lambda_clu: f64,
    pub clusters: usize,
}

impl<F: Scalar> ConsistentEncoderState<F> {
    pub fn init<R: Rng>(cfg: &Stage1Config, d_v: usize, rng: &mut R) -> ConsResult<Self> {
        cfg.validate()?;
        let mut enc_dims = vec![d_v];
        enc_dims.extend_from_slice(&cfg.hidden);
        enc_dims.push(cfg.d_e);
        Ok(Self {
            encoder: Mlp::init(&enc_dims, Activation::Relu, rng),
            contrastive_head: Mlp::init(&[cfg.d_e, cfg.d_e, cfg.d_proj], Activation::Relu, rng),
            clustering_head: Mlp::init(&[cfg.d_e, cfg.clusters], Activation::Relu, rng),
            tau: cfg.tau,
            lambda_clu: cfg.lambda_clu,
            clusters: cfg.clusters,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.out_dim()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub clusters: usize,
    pub hidden: Vec<usize>,
    pub d_e: usize,
    pub d_proj: usize,
    pub epochs_pretrain: usize,
    pub epochs_cluster: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub lambda_clu: f64,
    pub lr: f64,
    pub seed: u64,
    pub augment: AugmentationPolicy,
    /// Keep optimizing the contrastive objective during the clustering
    /// phase (summed losses) instead of switching entirely.
    pub phase_b_joint: bool,
    /// Add nearest-neighbor pairs (mined from phase-A embeddings) as
    /// extra positive pairs in the clustering phase.
    pub use_knn: bool,
    pub knn_k: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            clusters: 4,
            hidden: vec![128, 64],
            d_e: 32,
            d_proj: 16,
            epochs_pretrain: 40,
            epochs_cluster: 20,
            batch_size: 128,
            tau: 0.5,
            lambda_clu: 2.0,
            lr: 1e-3,
            seed: 0,
            augment: AugmentationPolicy::default(),
            phase_b_joint: false,
            use_knn: false,
            knn_k: 5,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> ConsResult<()> {
        if self.clusters < 2 {
            return Err(ConsistencyError::Invalid(format!(
                "need at least 2 clusters, got {}",
                self.clusters
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ConsistencyError::Invalid(format!(
                "temperature must be finite and > 0, got {}",
                self.tau
            )));
        }
        if !(self.lambda_clu >= 0.0 && self.lambda_clu.is_finite()) {
            return Err(ConsistencyError::Invalid(format!(
                "entropy weight must be finite and >= 0, got {}",
                self.lambda_clu
            )));
        }
        if self.batch_size < 2 {
            return Err(ConsistencyError::Invalid(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.d_e == 0 || self.d_proj == 0 {
            return Err(ConsistencyError::Invalid(
                "embedding dims must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConsistencyError::Invalid(format!(
                "lr must be finite and > 0, got {}",
                self.lr
            )));
        }
        if self.use_knn && self.knn_k == 0 {
            return Err(ConsistencyError::Invalid(
                "knn_k must be positive when neighbor mining is on".into(),
            ));
        }
        self.augment.validate()?;
        Ok(())
    }
}
