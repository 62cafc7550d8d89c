//! Run configuration. One JSON file fully determines a run; unknown keys are
//! rejected and every omitted field takes the default noted beside it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nse_core::engine::EvolutionConfig;
use nse_core::oracle::BenchmarkConfig;
use nse_core::space::{shuffle_pool, LayerDecl, LayerRole, SearchSpacePool};
use nse_core::supernet::{
    toy_layer_decls, CostModel, DatasetConfig, NetworkSpec, RecalibrationConfig, TrainingConfig,
};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream. `NSE_SEED` overrides it.
    #[serde(default)]
    pub master_seed: u64,
    /// Seed of the per-layer pool shuffle; defaults to `master_seed`.
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
    /// Where `run` writes artifacts; relative paths resolve against the config file.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Evaluation threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    pub pool: PoolSpec,
    #[serde(default)]
    pub evolution: EvolutionConfig,
    pub evaluator: EvaluatorConfig,
    /// Further rounds on an extended pool after the first search ends.
    #[serde(default)]
    pub continuation: Option<Continuation>,
}

fn default_output() -> PathBuf {
    PathBuf::from("nse-run")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoolSpec {
    /// Every layer and operation written out.
    Explicit { layers: Vec<LayerDecl> },
    /// `ops_per_layer` operations drawn from the built-in toy family for each role.
    Generated { roles: Vec<LayerRole>, ops_per_layer: usize },
}

impl PoolSpec {
    pub fn decls(&self) -> Vec<LayerDecl> {
        match self {
            PoolSpec::Explicit { layers } => layers.clone(),
            PoolSpec::Generated { roles, ops_per_layer } => toy_layer_decls(roles, *ops_per_layer),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Continuation {
    pub pool: PoolSpec,
    pub rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum EvaluatorConfig {
    Oracle {
        #[serde(default)]
        benchmark: BenchmarkConfig,
    },
    Supernet {
        #[serde(default)]
        network: NetworkSpec,
        #[serde(default)]
        dataset: DatasetConfig,
        #[serde(default)]
        training: TrainingConfig,
        #[serde(default)]
        recalibration: RecalibrationConfig,
        /// Cost model used when `cost_table` is absent.
        #[serde(default = "default_cost_model")]
        cost_model: CostModel,
        /// JSON cost table overriding the model.
        #[serde(default)]
        cost_table: Option<PathBuf>,
    },
}

fn default_cost_model() -> CostModel {
    CostModel::Flops
}

impl RunConfig {
    /// Reads, applies `NSE_SEED`, and validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Ok(seed) = std::env::var("NSE_SEED") {
            cfg.master_seed = seed
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("NSE_SEED is not an unsigned integer: {seed:?}")))?;
        }
        if cfg.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.evolution.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.pool()?;
        if let Some(c) = &self.continuation {
            if c.pool.decls().len() != self.pool.decls().len() {
                return Err(CliError::Config("continuation pool must have the same number of layers".into()));
            }
        }
        match &self.evaluator {
            EvaluatorConfig::Oracle { benchmark } => benchmark.validate().map_err(|e| CliError::Config(e.to_string())),
            EvaluatorConfig::Supernet { dataset, network, training, .. } => {
                if dataset.input_dim != network.input_dim || dataset.classes != network.classes {
                    return Err(CliError::Config("dataset and network disagree on input_dim or classes".into()));
                }
                if training.batch_size == 0 {
                    return Err(CliError::Config("batch_size must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed.unwrap_or(self.master_seed)
    }

    pub fn pool(&self) -> Result<SearchSpacePool, CliError> {
        shuffle_pool(&self.pool.decls(), self.shuffle_seed()).map_err(|e| CliError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON of the resolved config, output directory excluded.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
