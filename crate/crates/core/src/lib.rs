//! Two-stage multi-view representation learning.
//!
//! Stage one trains a shared consistent encoder with a contrastive
//! objective followed by a clustering-consistency objective, producing a
//! view-invariant embedding `S` and pseudo-labels. Stage two freezes that
//! encoder and trains one conditional VAE per view whose latent is pushed
//! away from `S` by a variational mutual-information penalty, producing
//! view-specific embeddings `P^(v)`. The final representation is the
//! concatenation `[S; P^(1); ...; P^(V)]`.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); `f64` is
//! the default precision and the one used by all frozen test values.

pub mod scalar;

pub mod consistency;
pub mod datasets;
pub mod disentangle;
pub mod evaluate;
pub mod ndgrad;
pub mod nn;
pub mod pipeline;

pub use scalar::Scalar;

/// Default-precision aliases. The pipeline runs f64 unless configured
/// otherwise; f32 twins exist for speed experiments.
pub type Tensor64 = ndgrad::Tensor<f64>;
pub type Tape64 = ndgrad::Tape<f64>;
pub type Tensor32 = ndgrad::Tensor<f32>;
pub type Tape32 = ndgrad::Tape<f32>;
