//! Run configuration: one self-describing TOML tree per run, hashed
//! after every default is materialized so the hash names the exact
//! experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{fnv1a64, PipeResult, PipelineError};
use crate::consistency::Stage1Config;
use crate::datasets::SyntheticSpec;
use crate::disentangle::Stage2Config;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeMnistConfig {
    /// Directory holding the IDX image and label files.
    pub dir: PathBuf,
    pub images: String,
    pub labels: String,
    /// Instances kept (seeded subsample); 0 keeps everything.
    pub subset: usize,
    pub seed: u64,
}

impl Default for EdgeMnistConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("."),
            images: "train-images-idx3-ubyte".into(),
            labels: "train-labels-idx1-ubyte".into(),
            subset: 10_000,
            seed: 0,
        }
    }
}

/// Where the views come from. The dataset seed is part of the config:
/// run seeds vary the training randomness, never the data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    EdgeMnist(EdgeMnistConfig),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetConfig {
    /// Class count the config promises, used to size clustering targets.
    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic(s) => s.classes,
            DatasetConfig::EdgeMnist(_) => 10,
        }
    }
}

/// Stage-2 settings plus the switch that drops the stage entirely (the
/// pipeline then scores the consistent representation alone).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Block {
    pub enabled: bool,
    #[serde(flatten)]
    pub cfg: Stage2Config,
}

impl Default for Stage2Block {
    fn default() -> Self {
        Self {
            enabled: true,
            cfg: Stage2Config::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub kmeans_restarts: usize,
    pub probe_train_fraction: f64,
    pub probe_iters: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kmeans_restarts: 10,
            probe_train_fraction: 0.7,
            probe_iters: 500,
            probe_lr: 0.1,
            probe_l2: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub precision: Precision,
    /// Run seeds; each gets an independent training run over the same data.
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Block,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F64,
            seeds: (0..10).collect(),
            dataset: DatasetConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Block::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> PipeResult<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> PipeResult<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            PipelineError::Config(msg) => {
                PipelineError::Config(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }

    pub fn validate(&self) -> PipeResult<()> {
        if self.seeds.is_empty() {
            return Err(PipelineError::Invalid("seed list is empty".into()));
        }
        if let DatasetConfig::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        self.stage1
            .validate()
            .map_err(|e| PipelineError::Config(format!("stage1: {e}")))?;
        if self.stage2.enabled {
            self.stage2
                .cfg
                .validate()
                .map_err(|e| PipelineError::Config(format!("stage2: {e}")))?;
        }
        let ev = &self.eval;
        if ev.kmeans_restarts == 0 {
            return Err(PipelineError::Invalid("kmeans_restarts must be >= 1".into()));
        }
        if !(ev.probe_train_fraction > 0.0 && ev.probe_train_fraction < 1.0) {
            return Err(PipelineError::Invalid(format!(
                "probe_train_fraction must be in (0,1), got {}",
                ev.probe_train_fraction
            )));
        }
        if self.stage1.clusters != self.dataset.classes() {
            return Err(PipelineError::Invalid(format!(
                "stage1.clusters = {} but the dataset declares {} classes",
                self.stage1.clusters,
                self.dataset.classes()
            )));
        }
        Ok(())
    }

    /// Canonical text form: every default materialized, fields in
    /// declaration order. This is what gets hashed and archived.
    pub fn canonical_toml(&self) -> PipeResult<String> {
        toml::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn config_hash(&self) -> PipeResult<u64> {
        Ok(fnv1a64(self.canonical_toml()?.as_bytes()))
    }

    pub fn config_hash_hex(&self) -> PipeResult<String> {
        Ok(format!("{:016x}", self.config_hash()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_toml() {
        let cfg = RunConfig::default();
        let text = cfg.canonical_toml().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.canonical_toml().unwrap(), text);
        assert_eq!(back.config_hash().unwrap(), cfg.config_hash().unwrap());
    }

    #[test]
    fn sparse_file_materializes_every_default_before_hashing() {
        // A config that only names the dataset must hash identically to
        // the fully spelled-out default tree.
        let sparse = RunConfig::from_toml_str("[dataset]\nkind = \"synthetic\"\n").unwrap();
        assert_eq!(
            sparse.config_hash().unwrap(),
            RunConfig::default().config_hash().unwrap()
        );
        let text = sparse.canonical_toml().unwrap();
        for key in ["precision", "lambda_dis", "kmeans_restarts", "tau", "seeds"] {
            assert!(text.contains(key), "canonical form is missing {key}");
        }
    }

    #[test]
    fn any_field_change_moves_the_hash() {
        let base = RunConfig::default().config_hash().unwrap();
        let mut cfg = RunConfig::default();
        cfg.stage2.cfg.lambda_dis = 0.05;
        assert_ne!(cfg.config_hash().unwrap(), base);
        let mut cfg = RunConfig::default();
        cfg.seeds = vec![0, 1, 2];
        assert_ne!(cfg.config_hash().unwrap(), base);
    }

    #[test]
    fn malformed_and_inconsistent_configs_are_rejected() {
        assert!(RunConfig::from_toml_str("precision = \"f16\"").is_err());
        assert!(RunConfig::from_toml_str("seeds = []").is_err());
        // Cluster count must follow the dataset's class count.
        let text = "[dataset]\nkind = \"synthetic\"\nclasses = 6\n";
        assert!(RunConfig::from_toml_str(text).is_err());
        let text =
            "[dataset]\nkind = \"synthetic\"\nclasses = 6\n\n[stage1]\nclusters = 6\n";
        assert!(RunConfig::from_toml_str(text).is_ok());
    }

    #[test]
    fn edge_mnist_block_parses_with_defaults() {
        let text = "[dataset]\nkind = \"edge-mnist\"\ndir = \"/tmp/idx\"\n\n[stage1]\nclusters = 10\n";
        let cfg = RunConfig::from_toml_str(text).unwrap();
        match &cfg.dataset {
            DatasetConfig::EdgeMnist(m) => {
                assert_eq!(m.dir, PathBuf::from("/tmp/idx"));
                assert_eq!(m.subset, 10_000);
            }
            other => panic!("wrong dataset {other:?}"),
        }
    }
}
