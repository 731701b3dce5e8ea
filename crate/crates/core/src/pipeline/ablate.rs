//! Component ablation: every on/off combination of the instance
//! (contrastive), clustering and specificity objectives, scored on the
//! same data and reported in a fixed table order.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::config::RunConfig;
use super::run::run_pipeline;
use super::{PipeResult, PipelineError, Precision};
use crate::evaluate::{mean_std, MetricsRecord};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub l_ins: bool,
    pub l_clu: bool,
    pub l_spc: bool,
}

impl AblationFlags {
    pub fn label(self) -> &'static str {
        match (self.l_ins, self.l_clu, self.l_spc) {
            (true, true, true) => "full",
            (true, true, false) => "no-l_spc",
            (false, true, true) => "no-l_ins",
            (true, false, true) => "no-l_clu",
            (true, false, false) => "l_ins-only",
            (false, true, false) => "l_clu-only",
            (false, false, true) => "l_spc-only",
            (false, false, false) => "none",
        }
    }
}

/// Row order of the emitted table: the full model, then each objective
/// removed, then each alone.
pub const ABLATION_ROWS: [AblationFlags; 7] = [
    AblationFlags { l_ins: true, l_clu: true, l_spc: true },
    AblationFlags { l_ins: true, l_clu: true, l_spc: false },
    AblationFlags { l_ins: false, l_clu: true, l_spc: true },
    AblationFlags { l_ins: true, l_clu: false, l_spc: true },
    AblationFlags { l_ins: true, l_clu: false, l_spc: false },
    AblationFlags { l_ins: false, l_clu: true, l_spc: false },
    AblationFlags { l_ins: false, l_clu: false, l_spc: true },
];

pub struct AblationRow {
    pub flags: AblationFlags,
    pub records: Vec<MetricsRecord>,
}

impl AblationRow {
    /// Per-metric means over the row's seeds.
    pub fn means(&self) -> [f64; 5] {
        let mut out = [0.0; 5];
        for (k, slot) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = self.records.iter().map(|r| r.metric_values()[k]).collect();
            *slot = mean_std(&vals).0;
        }
        out
    }

    pub fn acc_clu(&self) -> f64 {
        self.means()[0]
    }
}

/// Maps an on/off row onto a runnable config: dropping the contrastive
/// objective removes the pretraining phase, dropping the clustering
/// objective removes the clustering phase, dropping specificity removes
/// stage 2. A row with nothing enabled has no trainable objective.
pub fn ablation_variant(cfg: &RunConfig, flags: AblationFlags) -> PipeResult<RunConfig> {
    if !flags.l_ins && !flags.l_clu && !flags.l_spc {
        return Err(PipelineError::Invalid(
            "ablation row with every objective disabled has nothing to train".into(),
        ));
    }
    let mut v = cfg.clone();
    if !flags.l_ins {
        v.stage1.epochs_pretrain = 0;
        v.stage1.phase_b_joint = false;
    }
    if !flags.l_clu {
        v.stage1.epochs_cluster = 0;
    }
    if !flags.l_spc {
        v.stage2.enabled = false;
    }
    Ok(v)
}

/// Runs the seven-variant grid over the config's seed list and, when an
/// output directory is given, writes `ablation.csv` in table order.
pub fn run_ablation<F: Scalar>(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> PipeResult<Vec<AblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for flags in ABLATION_ROWS {
        let variant = ablation_variant(cfg, flags)?;
        eprintln!("ablation row {}", flags.label());
        let records = run_pipeline::<F>(&variant, None)?;
        rows.push(AblationRow { flags, records });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_ablation_csv(&dir.join("ablation.csv"), &rows)?;
    }
    Ok(rows)
}

pub fn run_ablation_dispatch(cfg: &RunConfig, out_dir: Option<&Path>) -> PipeResult<Vec<AblationRow>> {
    match cfg.precision {
        Precision::F32 => run_ablation::<f32>(cfg, out_dir),
        Precision::F64 => run_ablation::<f64>(cfg, out_dir),
    }
}

fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> PipeResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "variant,l_ins,l_clu,l_spc,acc_clu,nmi,ari,acc_cls,f_score")?;
    for row in rows {
        let m = row.means();
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.flags.label(),
            row.flags.l_ins as u8,
            row.flags.l_clu as u8,
            row.flags.l_spc as u8,
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::run::tiny_config;

    #[test]
    fn variants_map_flags_onto_training_phases() {
        let cfg = tiny_config();
        let v = ablation_variant(
            &cfg,
            AblationFlags { l_ins: false, l_clu: true, l_spc: false },
        )
        .unwrap();
        assert_eq!(v.stage1.epochs_pretrain, 0);
        assert_eq!(v.stage1.epochs_cluster, cfg.stage1.epochs_cluster);
        assert!(!v.stage2.enabled);
        let v = ablation_variant(
            &cfg,
            AblationFlags { l_ins: true, l_clu: false, l_spc: true },
        )
        .unwrap();
        assert_eq!(v.stage1.epochs_cluster, 0);
        assert!(v.stage2.enabled);
    }

    #[test]
    fn the_all_off_row_is_rejected() {
        let cfg = tiny_config();
        let err = ablation_variant(
            &cfg,
            AblationFlags { l_ins: false, l_clu: false, l_spc: false },
        );
        assert!(err.is_err());
    }

    #[test]
    fn table_has_seven_rows_in_fixed_order_with_full_first() {
        let labels: Vec<&str> = ABLATION_ROWS.iter().map(|f| f.label()).collect();
        assert_eq!(
            labels,
            vec![
                "full",
                "no-l_spc",
                "no-l_ins",
                "no-l_clu",
                "l_ins-only",
                "l_clu-only",
                "l_spc-only"
            ]
        );
    }

    #[test]
    fn grid_runs_and_emits_the_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let rows = run_ablation::<f64>(&cfg, Some(dir.path())).unwrap();
        assert_eq!(rows.len(), 7);
        for row in &rows {
            assert_eq!(row.records.len(), 1);
            let m = row.means();
            assert!(m[0] >= 0.0 && m[0] <= 1.0, "{:?}", row.flags);
        }
        let text = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[1].starts_with("full,1,1,1,"));
        assert!(lines[7].starts_with("l_spc-only,0,0,1,"));
    }
}
