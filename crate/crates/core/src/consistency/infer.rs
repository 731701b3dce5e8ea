//! Frozen-parameter inference: embeddings, soft assignments, and the
//! fused consistent representation.

use super::{ConsResult, ConsistencyError, ConsistentEncoderState};
use crate::datasets::MultiViewBatch;
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

/// Soft cluster assignment with its hard argmax (lowest index wins ties).
#[derive(Clone, Debug)]
pub struct ClusterAssignment<F: Scalar> {
    /// `[n, C]` rows on the probability simplex.
    pub probs: Tensor<F>,
    pub hard: Vec<usize>,
}

impl<F: Scalar> ClusterAssignment<F> {
    pub fn from_probs(probs: Tensor<F>) -> Self {
        let hard = (0..probs.rows())
            .map(|r| {
                let row = probs.row(r);
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        Self { probs, hard }
    }
}

/// Everything stage 2 consumes from stage 1.
#[derive(Clone, Debug)]
pub struct PseudoLabels<F: Scalar> {
    /// Assignment from the view-averaged probabilities.
    pub consensus: ClusterAssignment<F>,
    pub per_view: Vec<ClusterAssignment<F>>,
    /// Per-view embeddings `[n, d_e]`.
    pub s_per_view: Vec<Tensor<F>>,
    /// Mean over views: the fused consistent representation `[n, d_e]`.
    pub s_fused: Tensor<F>,
}

fn softmax_rows<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let (n, c) = (logits.rows(), logits.cols());
    let mut out = Tensor::<F>::zeros(&[n, c]);
    for r in 0..n {
        let row = logits.row(r);
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|&v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out.set2(r, j, F::from_f64(e / sum));
        }
    }
    out
}

/// One deterministic pass of the frozen encoder and clustering head over
/// the whole dataset.
pub fn assign_pseudolabels<F: Scalar>(
    state: &ConsistentEncoderState<F>,
    data: &MultiViewBatch<F>,
) -> ConsResult<PseudoLabels<F>> {
    data.validate()?;
    let n = data.len();
    let d_e = state.embedding_dim();
    let c = state.clusters;

    let mut s_per_view = Vec::with_capacity(data.n_views());
    let mut per_view = Vec::with_capacity(data.n_views());
    let mut s_sum = vec![0.0f64; n * d_e];
    let mut p_sum = vec![0.0f64; n * c];

    for x in &data.views {
        if x.cols() != state.encoder.in_dim() {
            return Err(ConsistencyError::Invalid(format!(
                "view has {} features, encoder expects {}",
                x.cols(),
                state.encoder.in_dim()
            )));
        }
        let s = state.encoder.forward_value(x)?;
        let logits = state.clustering_head.forward_value(&s)?;
        let probs = softmax_rows(&logits);
        for (acc, v) in s_sum.iter_mut().zip(s.data()) {
            *acc += v.as_f64();
        }
        for (acc, v) in p_sum.iter_mut().zip(probs.data()) {
            *acc += v.as_f64();
        }
        s_per_view.push(s);
        per_view.push(ClusterAssignment::from_probs(probs));
    }

    let inv = 1.0 / data.n_views() as f64;
    s_sum.iter_mut().for_each(|v| *v *= inv);
    p_sum.iter_mut().for_each(|v| *v *= inv);

    let s_fused = Tensor::from_f64_slice(&[n, d_e], &s_sum).expect("fused shape");
    let consensus =
        ClusterAssignment::from_probs(Tensor::from_f64_slice(&[n, c], &p_sum).expect("probs"));
    Ok(PseudoLabels {
        consensus,
        per_view,
        s_per_view,
        s_fused,
    })
}
