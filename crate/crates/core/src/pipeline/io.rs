//! Flat-file artifacts a run leaves behind: loss curves and the final
//! representation as CSV, per-run metrics as JSON lines, and the
//! mean/std summary table.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::PipeResult;
use crate::consistency::LossRecord;
use crate::disentangle::Stage2Record;
use crate::evaluate::{mean_std, MetricsRecord};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

fn opt_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.17e}"))
}

pub(crate) fn write_stage1_losses(path: &Path, curves: &[LossRecord]) -> PipeResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "phase,epoch,l_ins,l_clu,entropy")?;
    for r in curves {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.phase,
            r.epoch,
            opt_cell(r.l_ins),
            opt_cell(r.l_clu),
            opt_cell(r.entropy)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_stage2_losses(path: &Path, records: &[Stage2Record]) -> PipeResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let views = records.first().map_or(0, |r| r.view_recon.len());
    let mut header = String::from("epoch,step");
    for v in 0..views {
        for col in ["recon", "cvae", "dis", "spc"] {
            header.push_str(&format!(",{col}{v}"));
        }
    }
    writeln!(w, "{header}")?;
    for r in records {
        let mut line = format!("{},{}", r.epoch, r.step);
        for v in 0..views {
            line.push_str(&format!(
                ",{:.17e},{:.17e},{:.17e},{:.17e}",
                r.view_recon[v], r.view_cvae[v], r.view_dis[v], r.view_spc[v]
            ));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Representation dump: one row per instance, feature columns then the
/// true label. `eval` and `project` read this format back.
pub fn write_representation_csv<F: Scalar>(
    path: &Path,
    x: &Tensor<F>,
    labels: &[usize],
) -> PipeResult<()> {
    let (n, d) = (x.rows(), x.cols());
    if labels.len() != n {
        return Err(super::PipelineError::Invalid(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    writeln!(w, "{},label", header.join(","))?;
    for i in 0..n {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{:.17e}", v.as_f64())).collect();
        writeln!(w, "{},{}", row.join(","), labels[i])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_representation_csv(path: &Path) -> PipeResult<(Tensor<f64>, Vec<usize>)> {
    let bad = |msg: String| super::PipelineError::Invalid(format!("{}: {msg}", path.display()));
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))??;
    let cols = header.split(',').count();
    if cols < 2 || !header.ends_with("label") {
        return Err(bad("expected feature columns followed by a label column".into()));
    }
    let d = cols - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(bad(format!("row {i} has {} cells, wanted {cols}", cells.len())));
        }
        for c in &cells[..d] {
            data.push(
                c.parse::<f64>()
                    .map_err(|e| bad(format!("row {i}: {e}")))?,
            );
        }
        labels.push(
            cells[d]
                .parse::<usize>()
                .map_err(|e| bad(format!("row {i} label: {e}")))?,
        );
    }
    if labels.is_empty() {
        return Err(bad("no data rows".into()));
    }
    let n = labels.len();
    let x = Tensor::new(&[n, d], data).map_err(|e| bad(e.to_string()))?;
    Ok((x, labels))
}

pub(crate) fn append_metrics_jsonl(path: &Path, rec: &MetricsRecord) -> PipeResult<()> {
    let mut w = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(rec)
        .map_err(|e| super::PipelineError::Invalid(format!("metrics record: {e}")))?;
    writeln!(w, "{line}")?;
    Ok(())
}

/// One row of mean and standard deviation per metric over the seed list.
pub(crate) fn write_summary_csv(path: &Path, records: &[MetricsRecord]) -> PipeResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = vec!["runs".to_string()];
    for name in MetricsRecord::METRIC_NAMES {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    writeln!(w, "{}", header.join(","))?;
    let mut row = vec![records.len().to_string()];
    for k in 0..MetricsRecord::METRIC_NAMES.len() {
        let vals: Vec<f64> = records.iter().map(|r| r.metric_values()[k]).collect();
        let (m, s) = mean_std(&vals);
        row.push(format!("{m:.6}"));
        row.push(format!("{s:.6}"));
    }
    writeln!(w, "{}", row.join(","))?;
    w.flush()?;
    Ok(())
}
