//! Data sources: a synthetic multi-view generator with known ground-truth
//! factors, an IDX digit loader with an edge-filtered second view, and the
//! stochastic augmentation operator used by contrastive training.

mod augment;
mod edges;
mod idx;
mod jsonl;
mod synthetic;

pub use augment::{augment, AugmentationPolicy, Occlusion};
pub use edges::{edge_mnist, edge_view, ImageSet};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IdxData};
pub use jsonl::{export_jsonl, import_jsonl};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Invalid(String),
    #[error("bad idx magic 0x{got:08x}")]
    BadMagic { got: u32 },
    #[error("idx payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset file parse: {0}")]
    Parse(String),
}

pub type DataResult<T> = Result<T, DataError>;

/// Self-describing header carried by exported datasets.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub kind: String,
    pub version: u32,
    pub n: usize,
    pub views: usize,
    pub classes: usize,
    /// Observed dim of each view.
    pub dims: Vec<usize>,
    pub seed: u64,
}

/// A set of aligned views: row k of every view (and of every ground-truth
/// block, when present) describes the same underlying instance.
#[derive(Clone, Debug)]
pub struct MultiViewBatch<F: Scalar> {
    /// V matrices, each `[n, d_v]`.
    pub views: Vec<Tensor<F>>,
    pub labels: Option<Vec<usize>>,
    /// `[n, d_s]` ground-truth shared factors (synthetic data only).
    pub gt_consistent: Option<Tensor<F>>,
    /// V matrices `[n, d_p]` of ground-truth view-specific factors.
    pub gt_specific: Option<Vec<Tensor<F>>>,
    pub meta: Option<DatasetMeta>,
}

impl<F: Scalar> MultiViewBatch<F> {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    /// Instance count (rows of the first view).
    pub fn len(&self) -> usize {
        self.views.first().map_or(0, |v| v.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the alignment contract: at least two views, every block
    /// carries the same row count.
    pub fn validate(&self) -> DataResult<()> {
        if self.views.len() < 2 {
            return Err(DataError::Invalid(format!(
                "need at least 2 views, got {}",
                self.views.len()
            )));
        }
        let n = self.len();
        for (i, v) in self.views.iter().enumerate() {
            if v.rows() != n {
                return Err(DataError::DimMismatch(format!(
                    "view {i} has {} rows, expected {n}",
                    v.rows()
                )));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(DataError::DimMismatch(format!(
                    "{} labels for {n} instances",
                    l.len()
                )));
            }
        }
        if let Some(s) = &self.gt_consistent {
            if s.rows() != n {
                return Err(DataError::DimMismatch(format!(
                    "gt_consistent has {} rows, expected {n}",
                    s.rows()
                )));
            }
        }
        if let Some(ps) = &self.gt_specific {
            if ps.len() != self.views.len() {
                return Err(DataError::DimMismatch(format!(
                    "{} gt_specific blocks for {} views",
                    ps.len(),
                    self.views.len()
                )));
            }
            for (i, p) in ps.iter().enumerate() {
                if p.rows() != n {
                    return Err(DataError::DimMismatch(format!(
                        "gt_specific {i} has {} rows, expected {n}",
                        p.rows()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Row-subset across every aligned block, preserving alignment.
    pub fn take_rows(&self, idx: &[usize]) -> Self {
        Self {
            views: self.views.iter().map(|v| v.take_rows(idx)).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            gt_consistent: self.gt_consistent.as_ref().map(|s| s.take_rows(idx)),
            gt_specific: self
                .gt_specific
                .as_ref()
                .map(|ps| ps.iter().map(|p| p.take_rows(idx)).collect()),
            meta: self.meta.clone(),
        }
    }
}
