//! Self-describing JSON-lines serialization for multi-view datasets:
//! a header object on the first line, one instance per line after.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, DataResult, DatasetMeta, MultiViewBatch};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

#[derive(Serialize, Deserialize)]
struct InstanceRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    views: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    consistent: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    specific: Option<Vec<Vec<f64>>>,
}

/// Writes `batch` to `path`. The batch must carry its header metadata.
pub fn export_jsonl<F: Scalar>(batch: &MultiViewBatch<F>, path: &Path) -> DataResult<()> {
    batch.validate()?;
    let meta = batch
        .meta
        .as_ref()
        .ok_or_else(|| DataError::Invalid("batch has no header metadata to export".into()))?;
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, meta).map_err(|e| DataError::Parse(e.to_string()))?;
    w.write_all(b"\n")?;

    let n = batch.len();
    for i in 0..n {
        let row = InstanceRow {
            label: batch.labels.as_ref().map(|l| l[i]),
            views: batch
                .views
                .iter()
                .map(|v| v.row(i).iter().map(|x| x.as_f64()).collect())
                .collect(),
            consistent: batch
                .gt_consistent
                .as_ref()
                .map(|s| s.row(i).iter().map(|x| x.as_f64()).collect()),
            specific: batch.gt_specific.as_ref().map(|ps| {
                ps.iter()
                    .map(|p| p.row(i).iter().map(|x| x.as_f64()).collect())
                    .collect()
            }),
        };
        serde_json::to_writer(&mut w, &row).map_err(|e| DataError::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`export_jsonl`], checking the header's
/// counts against the body.
pub fn import_jsonl<F: Scalar>(path: &Path) -> DataResult<MultiViewBatch<F>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Parse("empty file".into()))??;
    let meta: DatasetMeta =
        serde_json::from_str(&header).map_err(|e| DataError::Parse(format!("header: {e}")))?;
    if meta.views < 2 {
        return Err(DataError::Parse(format!(
            "header declares {} views, need at least 2",
            meta.views
        )));
    }

    let mut views: Vec<Vec<f64>> = vec![Vec::new(); meta.views];
    let mut labels: Vec<usize> = Vec::new();
    let mut consistent: Vec<f64> = Vec::new();
    let mut specific: Vec<Vec<f64>> = vec![Vec::new(); meta.views];
    let mut any_label = false;
    let mut any_consistent = false;
    let mut any_specific = false;
    let mut n = 0usize;

    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: InstanceRow = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse(format!("line {}: {e}", lineno + 2)))?;
        if row.views.len() != meta.views {
            return Err(DataError::DimMismatch(format!(
                "line {}: {} views, header says {}",
                lineno + 2,
                row.views.len(),
                meta.views
            )));
        }
        for (v, vals) in row.views.iter().enumerate() {
            if vals.len() != meta.dims[v] {
                return Err(DataError::DimMismatch(format!(
                    "line {}: view {v} has {} dims, header says {}",
                    lineno + 2,
                    vals.len(),
                    meta.dims[v]
                )));
            }
            views[v].extend_from_slice(vals);
        }
        if let Some(l) = row.label {
            labels.push(l);
            any_label = true;
        }
        if let Some(s) = &row.consistent {
            consistent.extend_from_slice(s);
            any_consistent = true;
        }
        if let Some(ps) = &row.specific {
            if ps.len() != meta.views {
                return Err(DataError::DimMismatch(format!(
                    "line {}: {} specific blocks, header says {}",
                    lineno + 2,
                    ps.len(),
                    meta.views
                )));
            }
            for (v, vals) in ps.iter().enumerate() {
                specific[v].extend_from_slice(vals);
            }
            any_specific = true;
        }
        n += 1;
    }

    if n != meta.n {
        return Err(DataError::DimMismatch(format!(
            "header declares {} instances, file holds {n}",
            meta.n
        )));
    }
    if any_label && labels.len() != n {
        return Err(DataError::Parse("labels present on only some rows".into()));
    }
    if any_consistent && consistent.len() % n != 0 {
        return Err(DataError::Parse(
            "consistent factors present on only some rows".into(),
        ));
    }

    let batch = MultiViewBatch {
        views: views
            .into_iter()
            .enumerate()
            .map(|(v, data)| {
                Tensor::from_f64_slice(&[n, meta.dims[v]], &data)
                    .map_err(|e| DataError::Parse(e.to_string()))
            })
            .collect::<DataResult<Vec<_>>>()?,
        labels: any_label.then_some(labels),
        gt_consistent: if any_consistent {
            let d = consistent.len() / n;
            Some(
                Tensor::from_f64_slice(&[n, d], &consistent)
                    .map_err(|e| DataError::Parse(e.to_string()))?,
            )
        } else {
            None
        },
        gt_specific: if any_specific {
            Some(
                specific
                    .into_iter()
                    .map(|data| {
                        let d = data.len() / n;
                        Tensor::from_f64_slice(&[n, d], &data)
                            .map_err(|e| DataError::Parse(e.to_string()))
                    })
                    .collect::<DataResult<Vec<_>>>()?,
            )
        } else {
            None
        },
        meta: Some(meta),
    };
    batch.validate()?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::super::{gen_synthetic, SyntheticSpec};
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let spec = SyntheticSpec {
            n: 40,
            ..Default::default()
        };
        let batch = gen_synthetic::<f64>(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        export_jsonl(&batch, &path).unwrap();
        let back = import_jsonl::<f64>(&path).unwrap();

        assert_eq!(batch.meta, back.meta);
        assert_eq!(batch.labels, back.labels);
        for (a, b) in batch.views.iter().zip(&back.views) {
            assert_eq!(a.shape(), b.shape());
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-15);
            }
        }
        assert_eq!(
            batch.gt_specific.as_ref().unwrap().len(),
            back.gt_specific.as_ref().unwrap().len()
        );
    }

    #[test]
    fn header_count_mismatch_rejected() {
        let spec = SyntheticSpec {
            n: 10,
            ..Default::default()
        };
        let batch = gen_synthetic::<f64>(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        export_jsonl(&batch, &path).unwrap();
        // Drop the last instance line.
        let text = std::fs::read_to_string(&path).unwrap();
        let kept: Vec<&str> = text.lines().take(10).collect();
        std::fs::write(&path, kept.join("\n")).unwrap();
        assert!(matches!(
            import_jsonl::<f64>(&path),
            Err(DataError::DimMismatch(_))
        ));
    }

    #[test]
    fn garbage_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            import_jsonl::<f64>(&path),
            Err(DataError::Parse(_))
        ));
    }
}
