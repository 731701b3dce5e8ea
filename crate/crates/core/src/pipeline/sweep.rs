//! One-dimensional hyperparameter sweeps: a grid of values for a single
//! knob, one pipeline run per grid point at a fixed seed so the curve
//! reflects the knob and not seed noise.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use super::config::RunConfig;
use super::run::run_pipeline;
use super::{PipeResult, PipelineError, Precision};
use crate::evaluate::MetricsRecord;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Weight of the disentanglement penalty in stage 2.
    LambdaDis,
    /// Width of each view-specific latent code.
    DZ,
    /// Minibatch size for both training stages.
    Batch,
    /// Epoch budget: stage-1 pretraining and stage-2 epochs together.
    Epochs,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LambdaDis => "lambda_dis",
            SweepParam::DZ => "d_z",
            SweepParam::Batch => "batch",
            SweepParam::Epochs => "epochs",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lambda_dis" => Ok(SweepParam::LambdaDis),
            "d_z" => Ok(SweepParam::DZ),
            "batch" => Ok(SweepParam::Batch),
            "epochs" => Ok(SweepParam::Epochs),
            other => Err(format!(
                "unknown sweep parameter {other:?}, expected one of lambda_dis, d_z, batch, epochs"
            )),
        }
    }
}

pub struct SweepPoint {
    pub value: f64,
    pub record: MetricsRecord,
}

fn as_count(param: SweepParam, value: f64, min: usize) -> PipeResult<usize> {
    if !value.is_finite() || value.fract() != 0.0 || value < min as f64 {
        return Err(PipelineError::Invalid(format!(
            "{} must be an integer >= {min}, got {value}",
            param.name()
        )));
    }
    Ok(value as usize)
}

/// Applies one grid value to a copy of the config.
pub fn sweep_variant(cfg: &RunConfig, param: SweepParam, value: f64) -> PipeResult<RunConfig> {
    let mut v = cfg.clone();
    match param {
        SweepParam::LambdaDis => {
            if !v.stage2.enabled {
                return Err(PipelineError::Invalid(
                    "lambda_dis sweep needs stage 2 enabled".into(),
                ));
            }
            if !value.is_finite() || value < 0.0 {
                return Err(PipelineError::Invalid(format!(
                    "lambda_dis must be finite and >= 0, got {value}"
                )));
            }
            v.stage2.cfg.lambda_dis = value;
        }
        SweepParam::DZ => {
            if !v.stage2.enabled {
                return Err(PipelineError::Invalid(
                    "d_z sweep needs stage 2 enabled".into(),
                ));
            }
            v.stage2.cfg.d_z = as_count(param, value, 1)?;
        }
        SweepParam::Batch => {
            let b = as_count(param, value, 2)?;
            v.stage1.batch_size = b;
            v.stage2.cfg.batch_size = b;
        }
        SweepParam::Epochs => {
            let e = as_count(param, value, 1)?;
            v.stage1.epochs_pretrain = e;
            v.stage2.cfg.epochs = e;
        }
    }
    v.validate()?;
    Ok(v)
}

/// Runs the grid at the first configured seed and, when an output
/// directory is given, writes `sweep_<param>.csv` in grid order.
pub fn run_sweep<F: Scalar>(
    cfg: &RunConfig,
    param: SweepParam,
    grid: &[f64],
    out_dir: Option<&Path>,
) -> PipeResult<Vec<SweepPoint>> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(PipelineError::Invalid("sweep grid is empty".into()));
    }
    let seed = cfg.seeds[0];
    let mut points = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut variant = sweep_variant(cfg, param, value)?;
        variant.seeds = vec![seed];
        eprintln!("sweep {} = {}", param.name(), value);
        let records = run_pipeline::<F>(&variant, None)?;
        points.push(SweepPoint { value, record: records.into_iter().next().unwrap() });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_sweep_csv(&dir.join(format!("sweep_{}.csv", param.name())), param, &points)?;
    }
    Ok(points)
}

pub fn run_sweep_dispatch(
    cfg: &RunConfig,
    param: SweepParam,
    grid: &[f64],
    out_dir: Option<&Path>,
) -> PipeResult<Vec<SweepPoint>> {
    match cfg.precision {
        Precision::F32 => run_sweep::<f32>(cfg, param, grid, out_dir),
        Precision::F64 => run_sweep::<f64>(cfg, param, grid, out_dir),
    }
}

fn write_sweep_csv(path: &Path, param: SweepParam, points: &[SweepPoint]) -> PipeResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "param,value,acc_clu,nmi,ari,acc_cls,f_score")?;
    for p in points {
        let m = p.record.metric_values();
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            param.name(),
            p.value,
            m[0],
            m[1],
            m[2],
            m[3],
            m[4]
        )?;
    }
    w.flush()?;
    Ok(())
}
