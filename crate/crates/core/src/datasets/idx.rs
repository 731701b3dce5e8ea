//! IDX file ingestion (the MNIST container format): big-endian magic,
//! dimension header, u8 payload.

use std::path::Path;

use super::edges::ImageSet;
use super::{DataError, DataResult};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

pub enum IdxData<F: Scalar> {
    Images(ImageSet<F>),
    Labels(Vec<usize>),
}

fn be32(bytes: &[u8], at: usize) -> DataResult<u32> {
    let end = at + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            expected: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[at],
        bytes[at + 1],
        bytes[at + 2],
        bytes[at + 3],
    ]))
}

/// Parses an image file (magic 0x00000803, dims n x rows x cols, u8
/// pixels). Pixels come out scaled to [0,1].
pub fn parse_idx_images<F: Scalar>(bytes: &[u8]) -> DataResult<ImageSet<F>> {
    let magic = be32(bytes, 0)?;
    if magic != MAGIC_IMAGES {
        return Err(DataError::BadMagic { got: magic });
    }
    let n = be32(bytes, 4)? as usize;
    let rows = be32(bytes, 8)? as usize;
    let cols = be32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(DataError::DimMismatch(format!(
            "image dims {rows}x{cols} must be positive"
        )));
    }
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::DimMismatch(format!(
            "{} trailing bytes after {n} images of {rows}x{cols}",
            bytes.len() - expected
        )));
    }
    let data: Vec<F> = bytes[16..]
        .iter()
        .map(|&b| F::from_f64(b as f64 / 255.0))
        .collect();
    Ok(ImageSet {
        images: Tensor::new(&[n, rows * cols], data).expect("image shape"),
        rows,
        cols,
    })
}

/// Parses a label file (magic 0x00000801, n u8 labels).
pub fn parse_idx_labels(bytes: &[u8]) -> DataResult<Vec<usize>> {
    let magic = be32(bytes, 0)?;
    if magic != MAGIC_LABELS {
        return Err(DataError::BadMagic { got: magic });
    }
    let n = be32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::DimMismatch(format!(
            "{} trailing bytes after {n} labels",
            bytes.len() - expected
        )));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads either IDX kind from disk, dispatching on the magic number.
pub fn load_idx<F: Scalar>(path: &Path) -> DataResult<IdxData<F>> {
    let bytes = std::fs::read(path)?;
    match be32(&bytes, 0)? {
        MAGIC_IMAGES => Ok(IdxData::Images(parse_idx_images(&bytes)?)),
        MAGIC_LABELS => Ok(IdxData::Labels(parse_idx_labels(&bytes)?)),
        got => Err(DataError::BadMagic { got }),
    }
}

#[cfg(test)]
pub(super) fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
pub(super) fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_well_formed_image_file() {
        let pixels: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 10) as u8).collect();
        let bytes = encode_idx_images(2, 3, 3, &pixels);
        let set = parse_idx_images::<f64>(&bytes).unwrap();
        assert_eq!(set.images.shape(), &[2, 9]);
        assert_eq!(set.rows, 3);
        assert_eq!(set.cols, 3);
        assert!((set.images.data()[1] - 10.0 / 255.0).abs() <= 1e-12);
        assert!(set.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn accepts_well_formed_label_file() {
        let bytes = encode_idx_labels(&[3, 1, 4, 1, 5]);
        let labels = parse_idx_labels(&bytes).unwrap();
        assert_eq!(labels, vec![3, 1, 4, 1, 5]);
    }

    #[test]
    fn truncated_payload_is_a_distinct_error() {
        let pixels = vec![0u8; 2 * 3 * 3];
        let mut bytes = encode_idx_images(2, 3, 3, &pixels);
        bytes.truncate(bytes.len() - 5);
        match parse_idx_images::<f64>(&bytes) {
            Err(DataError::Truncated { expected: 34, got: 29 }) => {}
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_a_distinct_error() {
        let mut bytes = encode_idx_labels(&[1, 2]);
        bytes[2] = 0x09;
        match parse_idx_labels(&bytes) {
            Err(DataError::BadMagic { .. }) => {}
            other => panic!("expected bad magic, got {other:?}"),
        }
        // Image parser rejects a label file by magic, not by length.
        let label_bytes = encode_idx_labels(&[1, 2]);
        assert!(matches!(
            parse_idx_images::<f64>(&label_bytes),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_a_dim_mismatch() {
        let mut bytes = encode_idx_labels(&[1, 2, 3]);
        bytes.push(9);
        match parse_idx_labels(&bytes) {
            Err(DataError::DimMismatch(_)) => {}
            other => panic!("expected dim mismatch, got {other:?}"),
        }
    }

    #[test]
    fn load_dispatches_on_magic() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        let lbl_path = dir.path().join("lbls.idx");
        std::fs::write(&img_path, encode_idx_images(1, 2, 2, &[0, 64, 128, 255])).unwrap();
        std::fs::write(&lbl_path, encode_idx_labels(&[7])).unwrap();
        assert!(matches!(
            load_idx::<f64>(&img_path).unwrap(),
            IdxData::Images(_)
        ));
        assert!(matches!(
            load_idx::<f64>(&lbl_path).unwrap(),
            IdxData::Labels(_)
        ));
    }
}
