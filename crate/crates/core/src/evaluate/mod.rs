//! Clustering and representation-quality metrics. Everything here
//! computes in f64 internally regardless of the model precision.

mod hungarian;
mod kmeans;
mod metrics;
mod pca;
mod probe;

pub use hungarian::hungarian_acc;
pub use kmeans::{kmeans, KMeansConfig, KMeansResult};
pub use metrics::{adjusted_rand_index, normalized_mutual_information};
pub use pca::{pca_project, PcaProjection};
pub use probe::{linear_probe, linear_regression_r2, stratified_split, ProbeConfig, ProbeReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One run's scores plus the metadata needed to trace it back to its
/// configuration. All clustering scores are computed against the true
/// labels after Hungarian matching where applicable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub acc_clu: f64,
    pub nmi: f64,
    pub ari: f64,
    pub acc_cls: f64,
    pub f_score: f64,
    pub seed: u64,
    pub config_hash: String,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    /// Metric columns in their fixed reporting order.
    pub const METRIC_NAMES: [&'static str; 5] = ["acc_clu", "nmi", "ari", "acc_cls", "f_score"];

    pub fn metric_values(&self) -> [f64; 5] {
        [self.acc_clu, self.nmi, self.ari, self.acc_cls, self.f_score]
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Invalid(String),
    #[error("label vectors differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("k = {k} is invalid for {n} points")]
    BadK { k: usize, n: usize },
    #[error("need at least two classes")]
    SingleClass,
    #[error("class {class} has {count} samples; stratified split needs every class in both folds")]
    Stratification { class: usize, count: usize },
}

impl From<crate::ndgrad::NdError> for EvalError {
    fn from(e: crate::ndgrad::NdError) -> Self {
        EvalError::Invalid(format!("autodiff failure inside a metric: {e}"))
    }
}

pub type EvalResult<T> = Result<T, EvalError>;

/// Per-dimension z-scoring; constant dimensions are left at zero.
pub fn standardize<F: crate::scalar::Scalar>(
    x: &crate::ndgrad::Tensor<F>,
) -> crate::ndgrad::Tensor<F> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = crate::ndgrad::Tensor::<F>::zeros(&[n, d]);
    if n == 0 {
        return out;
    }
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            mean += x.at2(i, j).as_f64();
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let c = x.at2(i, j).as_f64() - mean;
            var += c * c;
        }
        var /= n as f64;
        let sd = var.sqrt();
        if sd > 1e-12 {
            for i in 0..n {
                let z = (x.at2(i, j).as_f64() - mean) / sd;
                out.set2(i, j, F::from_f64(z));
            }
        }
    }
    out
}
