//! End-to-end orchestration: configuration, the two-stage training
//! protocol per seed, metric reporting, checkpoints, and the ablation
//! and sweep suites.

mod ablate;
mod checkpoint;
mod config;
mod io;
mod run;
mod sweep;

pub use ablate::{
    ablation_variant, run_ablation, run_ablation_dispatch, AblationFlags, AblationRow,
    ABLATION_ROWS,
};
pub use checkpoint::{
    load_stage1_state, load_stage2_state, load_stage2_trainer, save_stage1_state,
    save_stage2_state, save_stage2_trainer, Checkpoint, NamedTensor, RngState,
    CHECKPOINT_VERSION,
};
pub use config::{DatasetConfig, EdgeMnistConfig, EvalConfig, Precision, RunConfig, Stage2Block};
pub use io::{read_representation_csv, write_representation_csv};
pub use run::{load_dataset, run_pipeline, run_pipeline_dispatch, run_seed, SeedArtifacts};
pub use sweep::{run_sweep, run_sweep_dispatch, sweep_variant, SweepParam, SweepPoint};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Invalid(String),
    #[error("config: {0}")]
    Config(String),
    #[error("seed {seed} aborted in the {stage} stage: {source}")]
    Stage {
        stage: &'static str,
        seed: u64,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Eval(#[from] crate::evaluate::EvalError),
    #[error(transparent)]
    Data(#[from] crate::datasets::DataError),
}

pub type PipeResult<T> = Result<T, PipelineError>;

pub(crate) fn stage_err<E>(stage: &'static str, seed: u64) -> impl FnOnce(E) -> PipelineError
where
    E: std::error::Error + Send + Sync + 'static,
{
    move |source| PipelineError::Stage {
        stage,
        seed,
        source: Box::new(source),
    }
}

/// FNV-1a over a byte stream; the 64-bit variant.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Decorrelates the per-stage RNG streams spawned from one run seed:
/// each consumer hashes its own tag with the seed.
pub(crate) fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut bytes = Vec::with_capacity(tag.len() + 8);
    bytes.extend_from_slice(tag.as_bytes());
    bytes.extend_from_slice(&seed.to_le_bytes());
    fnv1a64(&bytes)
}
