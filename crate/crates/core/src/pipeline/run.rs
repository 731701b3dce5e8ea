//! The per-seed protocol: train the consistent encoder, read off
//! pseudo-labels, train the view-specific stage against them, assemble
//! the final representation, and score it.

use std::path::Path;
use std::time::Instant;

use super::checkpoint::{save_stage1_state, save_stage2_state};
use super::config::{DatasetConfig, Precision, RunConfig};
use super::io::{
    append_metrics_jsonl, write_representation_csv, write_stage1_losses, write_stage2_losses,
    write_summary_csv,
};
use super::{derive_seed, stage_err, PipeResult, PipelineError};
use crate::consistency::{assign_pseudolabels, stage1_train, PseudoLabels, Stage1Output};
use crate::datasets::{edge_mnist, gen_synthetic, MultiViewBatch};
use crate::disentangle::{stage2_train, Stage2Output};
use crate::evaluate::{
    adjusted_rand_index, hungarian_acc, kmeans, linear_probe, normalized_mutual_information,
    standardize, KMeansConfig, MetricsRecord, ProbeConfig,
};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

/// Everything one seed produces, kept in memory for callers that want
/// more than the score card (ablation probes, tests, exports).
pub struct SeedArtifacts<F: Scalar> {
    pub record: MetricsRecord,
    pub stage1: Stage1Output<F>,
    pub pseudo: PseudoLabels<F>,
    pub stage2: Option<Stage2Output<F>>,
    /// `[n, d_e + V*d_z]` (or `[n, d_e]` without stage 2), unstandardized.
    pub representation: Tensor<F>,
    pub labels: Vec<usize>,
}

pub fn load_dataset<F: Scalar>(ds: &DatasetConfig) -> PipeResult<MultiViewBatch<F>> {
    match ds {
        DatasetConfig::Synthetic(spec) => Ok(gen_synthetic(spec)?),
        DatasetConfig::EdgeMnist(m) => Ok(edge_mnist(
            &m.dir.join(&m.images),
            &m.dir.join(&m.labels),
            m.subset,
            m.seed,
        )?),
    }
}

/// Runs the full two-stage protocol for one seed over already-loaded
/// data. `out_dir`, when given, receives checkpoints, loss CSVs, the
/// representation dump and this seed's metrics line.
pub fn run_seed<F: Scalar>(
    cfg: &RunConfig,
    data: &MultiViewBatch<F>,
    seed: u64,
    out_dir: Option<&Path>,
) -> PipeResult<SeedArtifacts<F>> {
    let start = Instant::now();
    let hash = cfg.config_hash()?;
    let labels = data
        .labels
        .clone()
        .ok_or_else(|| PipelineError::Invalid("dataset carries no labels to score against".into()))?;

    let mut s1cfg = cfg.stage1.clone();
    s1cfg.seed = derive_seed(seed, "stage1");
    let stage1 = stage1_train(data, &s1cfg).map_err(stage_err("stage1", seed))?;
    let pseudo = assign_pseudolabels(&stage1.state, data).map_err(stage_err("stage1", seed))?;

    let stage2 = if cfg.stage2.enabled {
        let mut s2cfg = cfg.stage2.cfg.clone();
        s2cfg.seed = derive_seed(seed, "stage2");
        Some(
            stage2_train(data, &pseudo.consensus, &pseudo.s_fused, &s2cfg)
                .map_err(stage_err("stage2", seed))?,
        )
    } else {
        None
    };

    // Final representation: consistent code next to every view-specific
    // readout, in view order.
    let mut blocks: Vec<Tensor<F>> = vec![pseudo.s_fused.clone()];
    if let Some(s2) = &stage2 {
        for (v, x) in data.views.iter().enumerate() {
            blocks.push(
                s2.state
                    .specific_representation(v, x)
                    .map_err(stage_err("stage2", seed))?,
            );
        }
    }
    let refs: Vec<&Tensor<F>> = blocks.iter().collect();
    let representation = Tensor::hstack(&refs).map_err(stage_err("assemble", seed))?;
    let d_e = stage1.state.embedding_dim();
    let want = d_e
        + stage2
            .as_ref()
            .map_or(0, |s2| data.n_views() * s2.state.d_z);
    if representation.cols() != want {
        return Err(PipelineError::Invalid(format!(
            "assembled representation is {} wide, expected {want}",
            representation.cols()
        )));
    }

    let z = standardize(&representation);
    let km = kmeans(
        &z,
        cfg.dataset.classes(),
        &KMeansConfig {
            restarts: cfg.eval.kmeans_restarts,
            ..Default::default()
        },
        derive_seed(seed, "kmeans"),
    )
    .map_err(stage_err("eval", seed))?;
    let acc_clu = hungarian_acc(&km.assignments, &labels).map_err(stage_err("eval", seed))?;
    let nmi =
        normalized_mutual_information(&km.assignments, &labels).map_err(stage_err("eval", seed))?;
    let ari = adjusted_rand_index(&km.assignments, &labels).map_err(stage_err("eval", seed))?;
    let probe = linear_probe(
        &z,
        &labels,
        &ProbeConfig {
            train_fraction: cfg.eval.probe_train_fraction,
            max_iters: cfg.eval.probe_iters,
            lr: cfg.eval.probe_lr,
            l2: cfg.eval.probe_l2,
            seed: derive_seed(seed, "probe"),
        },
    )
    .map_err(stage_err("eval", seed))?;

    let record = MetricsRecord {
        acc_clu,
        nmi,
        ari,
        acc_cls: probe.accuracy,
        f_score: probe.macro_f1,
        seed,
        config_hash: format!("{hash:016x}"),
        wall_time_s: start.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_stage1_losses(&dir.join("stage1_losses.csv"), &stage1.curves)?;
        save_stage1_state(&dir.join("stage1.mvck"), &stage1.state, hash)?;
        if let Some(s2) = &stage2 {
            write_stage2_losses(&dir.join("stage2_losses.csv"), &s2.records)?;
            let epochs = s2.records.last().map_or(0, |r| r.epoch + 1);
            save_stage2_state(&dir.join("stage2.mvck"), &s2.state, epochs, hash)?;
        }
        write_representation_csv(&dir.join("representation.csv"), &representation, &labels)?;
        append_metrics_jsonl(&dir.join("metrics.jsonl"), &record)?;
    }

    Ok(SeedArtifacts {
        record,
        stage1,
        pseudo,
        stage2,
        representation,
        labels,
    })
}

/// Runs every seed in the config. With an output root, artifacts land
/// under `<root>/<config-hash>/<seed>/` plus an aggregated metrics file
/// and a mean/std summary at the hash level.
pub fn run_pipeline<F: Scalar>(
    cfg: &RunConfig,
    out_root: Option<&Path>,
) -> PipeResult<Vec<MetricsRecord>> {
    cfg.validate()?;
    let hash_dir = match out_root {
        Some(root) => {
            let dir = root.join(cfg.config_hash_hex()?);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("config.toml"), cfg.canonical_toml()?)?;
            Some(dir)
        }
        None => None,
    };
    let data = load_dataset::<F>(&cfg.dataset)?;
    let mut records = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let seed_dir = hash_dir.as_ref().map(|d| d.join(seed.to_string()));
        let art = run_seed(cfg, &data, seed, seed_dir.as_deref())?;
        eprintln!(
            "seed {seed}: acc_clu {:.4} nmi {:.4} ari {:.4} acc_cls {:.4} ({:.1}s)",
            art.record.acc_clu, art.record.nmi, art.record.ari, art.record.acc_cls,
            art.record.wall_time_s
        );
        if let Some(dir) = &hash_dir {
            append_metrics_jsonl(&dir.join("metrics.jsonl"), &art.record)?;
        }
        records.push(art.record);
    }
    if let Some(dir) = &hash_dir {
        write_summary_csv(&dir.join("summary.csv"), &records)?;
    }
    Ok(records)
}

/// Precision-dispatched front door used by the command-line driver.
pub fn run_pipeline_dispatch(
    cfg: &RunConfig,
    out_root: Option<&Path>,
) -> PipeResult<Vec<MetricsRecord>> {
    match cfg.precision {
        Precision::F32 => run_pipeline::<f32>(cfg, out_root),
        Precision::F64 => run_pipeline::<f64>(cfg, out_root),
    }
}

#[cfg(test)]
pub(crate) fn tiny_config() -> RunConfig {
    use crate::consistency::Stage1Config;
    use crate::datasets::SyntheticSpec;

    let mut cfg = RunConfig::default();
    cfg.seeds = vec![0];
    cfg.dataset = DatasetConfig::Synthetic(SyntheticSpec {
        classes: 3,
        n: 120,
        d_s: 3,
        d_p: 2,
        d_v: 8,
        seed: 1,
        ..Default::default()
    });
    cfg.stage1 = Stage1Config {
        clusters: 3,
        hidden: vec![16],
        d_e: 8,
        d_proj: 8,
        epochs_pretrain: 2,
        epochs_cluster: 2,
        batch_size: 40,
        ..Default::default()
    };
    cfg.stage2.cfg.d_z = 2;
    cfg.stage2.cfg.hidden = vec![12];
    cfg.stage2.cfg.q_hidden = vec![8];
    cfg.stage2.cfg.epochs = 2;
    cfg.stage2.cfg.batch_size = 40;
    cfg.stage2.cfg.fit_steps = 1;
    cfg.eval.kmeans_restarts = 2;
    cfg.eval.probe_iters = 60;
    cfg
}
