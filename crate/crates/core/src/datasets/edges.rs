//! Edge-filtered second view for image data.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::idx::{load_idx, IdxData};
use super::{DataError, DataResult, DatasetMeta, MultiViewBatch};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

/// Single-channel images stored flattened, one per row.
#[derive(Clone, Debug)]
pub struct ImageSet<F: Scalar> {
    /// `[n, rows*cols]` pixel matrix.
    pub images: Tensor<F>,
    pub rows: usize,
    pub cols: usize,
}

// 3x3 Sobel pair, written as explicit pixel differences so a constant
// window cancels to exactly zero (no accumulation-order residue).
//   gx = (tr - tl) + 2(mr - ml) + (br - bl)
//   gy = (bl - tl) + 2(bm - tm) + (br - tr)

/// Gradient-magnitude view: 3x3 Sobel pair on the interior (borders stay
/// zero), rescaled to [0,1] per image. A constant image maps to all zeros.
pub fn edge_view<F: Scalar>(set: &ImageSet<F>) -> DataResult<ImageSet<F>> {
    let (r, c) = (set.rows, set.cols);
    if set.images.cols() != r * c {
        return Err(DataError::DimMismatch(format!(
            "image matrix has {} cols, dims say {r}x{c}",
            set.images.cols()
        )));
    }
    let n = set.images.rows();
    let mut out = vec![0.0f64; n * r * c];
    for img in 0..n {
        let px = set.images.row(img);
        let at = |i: usize, j: usize| px[i * c + j].as_f64();
        let o = &mut out[img * r * c..(img + 1) * r * c];
        let mut max = 0.0f64;
        if r >= 3 && c >= 3 {
            for i in 1..r - 1 {
                for j in 1..c - 1 {
                    let (tl, tm, tr) = (at(i - 1, j - 1), at(i - 1, j), at(i - 1, j + 1));
                    let (ml, mr) = (at(i, j - 1), at(i, j + 1));
                    let (bl, bm, br) = (at(i + 1, j - 1), at(i + 1, j), at(i + 1, j + 1));
                    let gx = (tr - tl) + 2.0 * (mr - ml) + (br - bl);
                    let gy = (bl - tl) + 2.0 * (bm - tm) + (br - tr);
                    let mag = (gx * gx + gy * gy).sqrt();
                    o[i * c + j] = mag;
                    max = max.max(mag);
                }
            }
        }
        if max > 0.0 {
            let inv = 1.0 / max;
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
    }
    Ok(ImageSet {
        images: Tensor::from_f64_slice(&[n, r * c], &out).expect("edge shape"),
        rows: r,
        cols: c,
    })
}

/// Builds the two-view digit dataset: view 0 = flattened pixels, view 1 =
/// flattened edge map. `subset` instances are kept (seeded choice);
/// `subset = 0` keeps everything.
pub fn edge_mnist<F: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    subset: usize,
    seed: u64,
) -> DataResult<MultiViewBatch<F>> {
    let set = match load_idx::<F>(images_path)? {
        IdxData::Images(s) => s,
        IdxData::Labels(_) => {
            return Err(DataError::DimMismatch(format!(
                "{} is a label file, expected images",
                images_path.display()
            )))
        }
    };
    let labels = match load_idx::<F>(labels_path)? {
        IdxData::Labels(l) => l,
        IdxData::Images(_) => {
            return Err(DataError::DimMismatch(format!(
                "{} is an image file, expected labels",
                labels_path.display()
            )))
        }
    };
    if labels.len() != set.images.rows() {
        return Err(DataError::DimMismatch(format!(
            "{} images vs {} labels",
            set.images.rows(),
            labels.len()
        )));
    }

    let n_total = labels.len();
    let keep = if subset == 0 { n_total } else { subset.min(n_total) };
    let mut idx: Vec<usize> = (0..n_total).collect();
    if keep < n_total {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(keep);
        idx.sort_unstable();
    }

    let pixels = set.images.take_rows(&idx);
    let kept_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let kept = ImageSet {
        images: pixels,
        rows: set.rows,
        cols: set.cols,
    };
    let edges = edge_view(&kept)?;
    let classes = kept_labels.iter().copied().max().map_or(0, |m| m + 1);
    let d = set.rows * set.cols;

    let batch = MultiViewBatch {
        views: vec![kept.images, edges.images],
        labels: Some(kept_labels),
        gt_consistent: None,
        gt_specific: None,
        meta: Some(DatasetMeta {
            kind: "edge_mnist".into(),
            version: 1,
            n: keep,
            views: 2,
            classes,
            dims: vec![d, d],
            seed,
        }),
    };
    batch.validate()?;
    Ok(batch)
}
