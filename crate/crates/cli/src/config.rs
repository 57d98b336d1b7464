//! Run configuration: built-in defaults, per-dataset defaults, an optional
//! JSON file, then command-line flags, each layer overriding the previous.

use std::path::{Path, PathBuf};

use graphbert::clustering::KMeansConfig;
use graphbert::model::ModelConfig;
use graphbert::objectives::TrainConfig;
use graphbert::preprocess::{CacheConfig, IntimacyMethod, DEFAULT_ALPHA};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSchedule {
    pub reconstruct_epochs: usize,
    pub recover_epochs: usize,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self {
            reconstruct_epochs: 200,
            recover_epochs: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// JSON split file; `None` uses `<dataset>.split.json` when present,
    /// else a seeded per-class split.
    pub file: Option<PathBuf>,
    pub train_per_class: usize,
    pub validation: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            file: None,
            train_per_class: 20,
            validation: 500,
            test: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ClusterConfig {
    /// Cluster count; `None` takes the number of classes.
    pub clusters: Option<usize>,
    pub kmeans: KMeansConfig,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: String,
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub k: usize,
    pub alpha: f64,
    pub intimacy_method: IntimacyMethod,
    /// Model initialization seed.
    pub seed: u64,
    pub deterministic: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainSchedule,
    pub split: SplitConfig,
    pub cluster: ClusterConfig,
    pub from_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_dataset("cora")
    }
}

impl RunConfig {
    pub fn for_dataset(name: &str) -> Self {
        Self {
            dataset: name.to_string(),
            data_dir: PathBuf::from("data"),
            cache_dir: PathBuf::from("cache"),
            k: match name {
                "citeseer" => 5,
                "pubmed" => 30,
                _ => 7,
            },
            alpha: DEFAULT_ALPHA,
            intimacy_method: IntimacyMethod::Auto,
            seed: 0,
            deterministic: true,
            model: ModelConfig::default(),
            train: TrainConfig::for_dataset(name),
            pretrain: PretrainSchedule::default(),
            split: SplitConfig::default(),
            cluster: ClusterConfig::default(),
            from_checkpoint: None,
        }
    }

    /// Defaults for the dataset named in `file` (or `dataset`), overlaid
    /// with the file's values.
    pub fn layered(dataset: Option<&str>, file: Option<&Path>) -> Result<Self> {
        let overlay = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let name = dataset
            .map(str::to_string)
            .or_else(|| overlay.get("dataset").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_else(|| "cora".into());
        let mut base = serde_json::to_value(Self::for_dataset(&name))?;
        merge(&mut base, overlay);
        base["dataset"] = Value::String(name);
        serde_json::from_value(base).map_err(|e| CliError::Config(format!("invalid configuration: {e}")))
    }

    pub fn cache_config(&self) -> CacheConfig {
        CacheConfig {
            k: self.k,
            alpha: self.alpha,
            method: self.intimacy_method,
            ..CacheConfig::default()
        }
    }

    /// Cache location for `(dataset, k, α)`.
    pub fn cache_path(&self) -> PathBuf {
        self.cache_dir
            .join(&self.dataset)
            .join(format!("k{}_alpha{}", self.k, self.alpha))
    }

    /// Short stable digest of the serialized configuration.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(bytes)[..4])
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}
