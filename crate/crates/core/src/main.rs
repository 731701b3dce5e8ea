//! Command-line driver: training runs, the ablation and sweep suites,
//! and offline tools over dumped artifacts (metric evaluation,
//! class-conditional generation, 2-d projection).

use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use mvd::datasets::{export_jsonl, DatasetMeta, MultiViewBatch};
use mvd::disentangle::{conditional_sample, Style};
use mvd::evaluate::{
    adjusted_rand_index, hungarian_acc, kmeans, linear_probe, normalized_mutual_information,
    pca_project, standardize, KMeansConfig, ProbeConfig,
};
use mvd::ndgrad::Tensor;
use mvd::pipeline::{
    load_stage2_state, read_representation_csv, run_ablation_dispatch, run_pipeline_dispatch,
    run_sweep_dispatch, RunConfig, SweepParam,
};

#[derive(Parser)]
#[command(name = "mvd", version, about = "two-stage multi-view representation learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate the full two-stage pipeline for one seed.
    Run {
        /// Run configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Training seed; replaces the config's seed list.
        #[arg(long)]
        seed: u64,
        /// Output root; artifacts land under <out>/<config-hash>/<seed>/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the objective on/off grid and write ablation.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one hyperparameter over a grid at a fixed seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: lambda_dis, d_z, batch, epochs.
        #[arg(long)]
        param: String,
        /// Comma-separated grid values, e.g. 0,0.01,0.05.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dumped representation file: k-means metrics plus a linear probe.
    Eval {
        /// representation.csv written by `run`.
        #[arg(long)]
        representation: PathBuf,
        /// Cluster count; defaults to the number of distinct labels.
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decode class-conditional samples from a stage-2 checkpoint.
    Generate {
        /// stage2.mvck checkpoint written by `run`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Samples per class.
        #[arg(long, default_value_t = 16)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Project a dumped representation onto its top two principal components.
    Project {
        #[arg(long)]
        representation: PathBuf,
        /// Output CSV of 2-d coordinates.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run { config, seed, out } => cmd_run(&config, seed, &out),
        Cmd::Ablate { config, out } => cmd_ablate(&config, &out),
        Cmd::Sweep { config, param, grid, out } => cmd_sweep(&config, &param, &grid, &out),
        Cmd::Eval { representation, clusters, seed } => cmd_eval(&representation, clusters, seed),
        Cmd::Generate { checkpoint, per_class, seed, out } => {
            cmd_generate(&checkpoint, per_class, seed, &out)
        }
        Cmd::Project { representation, out } => cmd_project(&representation, &out),
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn cmd_run(config: &PathBuf, seed: u64, out: &PathBuf) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.seeds = vec![seed];
    let records = run_pipeline_dispatch(&cfg, Some(out))?;
    let line = serde_json::to_string(&records[0])?;
    println!("{line}");
    Ok(())
}

fn cmd_ablate(config: &PathBuf, out: &PathBuf) -> Result<()> {
    let cfg = load_config(config)?;
    let rows = run_ablation_dispatch(&cfg, Some(out))?;
    println!("{:<12} {:>8} {:>8} {:>8} {:>8} {:>8}", "variant", "acc_clu", "nmi", "ari", "acc_cls", "f_score");
    for row in &rows {
        let m = row.means();
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            row.flags.label(),
            m[0],
            m[1],
            m[2],
            m[3],
            m[4]
        );
    }
    Ok(())
}

fn cmd_sweep(config: &PathBuf, param: &str, grid: &str, out: &PathBuf) -> Result<()> {
    let cfg = load_config(config)?;
    let param: SweepParam = param.parse().map_err(anyhow::Error::msg)?;
    let grid: Vec<f64> = grid
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad grid value {s:?}"))
        })
        .collect::<Result<_>>()?;
    let points = run_sweep_dispatch(&cfg, param, &grid, Some(out))?;
    println!("{:<12} {:>10} {:>8} {:>8}", "param", "value", "acc_clu", "nmi");
    for p in &points {
        println!(
            "{:<12} {:>10} {:>8.4} {:>8.4}",
            param.name(),
            p.value,
            p.record.acc_clu,
            p.record.nmi
        );
    }
    Ok(())
}

fn cmd_eval(representation: &PathBuf, clusters: Option<usize>, seed: u64) -> Result<()> {
    let (x, labels) = read_representation_csv(representation)?;
    let z = standardize(&x);
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    let k = clusters.unwrap_or(distinct.len());
    let km = kmeans(&z, k, &KMeansConfig::default(), seed)?;
    let probe = linear_probe(&z, &labels, &ProbeConfig { seed, ..ProbeConfig::default() })?;
    let report = json!({
        "n": labels.len(),
        "clusters": k,
        "acc_clu": hungarian_acc(&km.assignments, &labels)?,
        "nmi": normalized_mutual_information(&km.assignments, &labels)?,
        "ari": adjusted_rand_index(&km.assignments, &labels)?,
        "acc_cls": probe.accuracy,
        "f_score": probe.macro_f1,
    });
    println!("{report}");
    Ok(())
}

fn cmd_generate(checkpoint: &PathBuf, per_class: usize, seed: u64, out: &PathBuf) -> Result<()> {
    if per_class == 0 {
        bail!("--per-class must be at least 1");
    }
    let (state, _hash) = load_stage2_state::<f64>(checkpoint)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let classes = state.classes;
    let n = classes * per_class;

    // Row k of every view carries the same class condition; styles are
    // drawn independently per view, which is exactly what view-specific
    // latents are for.
    let mut views = Vec::with_capacity(state.n_views());
    for v in 0..state.n_views() {
        let blocks: Vec<Tensor<f64>> = (0..classes)
            .map(|c| conditional_sample(&state, v, c, Style::Random { n: per_class }, &mut rng))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&Tensor<f64>> = blocks.iter().collect();
        views.push(Tensor::vstack(&refs)?);
    }
    let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat(c).take(per_class)).collect();
    let dims = views.iter().map(|v| v.cols()).collect();
    let batch = MultiViewBatch {
        views,
        labels: Some(labels),
        gt_consistent: None,
        gt_specific: None,
        meta: Some(DatasetMeta {
            kind: "generated".into(),
            version: 1,
            n,
            views: state.n_views(),
            classes,
            dims,
            seed,
        }),
    };
    export_jsonl(&batch, out)?;
    println!("wrote {n} instances x {} views to {}", batch.n_views(), out.display());
    Ok(())
}

fn cmd_project(representation: &PathBuf, out: &PathBuf) -> Result<()> {
    use std::io::Write;

    let (x, labels) = read_representation_csv(representation)?;
    let proj = pca_project(&x)?;
    if proj.degenerate {
        eprintln!("warning: representation has (near-)zero variance, coordinates are all zero");
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(w, "pc1,pc2,label")?;
    for i in 0..proj.coords.rows() {
        let row = proj.coords.row(i);
        writeln!(w, "{:.6},{:.6},{}", row[0], row[1], labels[i])?;
    }
    w.flush()?;
    println!(
        "{}",
        json!({ "explained": proj.explained, "rows": proj.coords.rows(), "out": out.display().to_string() })
    );
    Ok(())
}
