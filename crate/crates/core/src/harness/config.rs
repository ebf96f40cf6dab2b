//! Run configuration: a single JSON file plus programmatic overrides. The
//! only environment variable honored is `MMFSOD_DATA_ROOT`, against which
//! relative data paths resolve.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::BackendKind;
use crate::episodes::{SamplingStrategy, Separability, SyntheticCatalogSpec, TextVariant};
use crate::error::{CoreError, Result};
use crate::model::ModelConfig;

pub const DATA_ROOT_ENV: &str = "MMFSOD_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain momentum-free gradient descent; deterministic and oracle-friendly.
    Sgd,
    Adam,
}

fn default_d() -> usize {
    256
}
fn default_heads() -> usize {
    4
}
fn default_n() -> usize {
    3
}
fn default_k() -> usize {
    5
}
fn default_strategy() -> SamplingStrategy {
    SamplingStrategy::BalancedInstances
}
fn default_variant() -> TextVariant {
    TextVariant::Manual
}
fn default_backend() -> BackendKind {
    BackendKind::Synthetic
}
fn default_lambda() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_steps() -> usize {
    500
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn default_rect_layers() -> usize {
    2
}
fn default_rect_heads() -> usize {
    4
}
fn default_rect_ffn_mult() -> usize {
    2
}
fn default_eval_episodes() -> usize {
    8
}
fn default_min_count() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub d: usize,
    pub heads: usize,
    pub n: usize,
    pub k: usize,
    pub strategy: SamplingStrategy,
    pub text_variant: TextVariant,
    pub backend: BackendKind,
    pub lambda: f64,
    pub learning_rate: f64,
    /// Episodes per optimizer step; `None` applies the 1-shot rule
    /// (4 for k = 1, otherwise 1).
    pub batch_size: Option<usize>,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub rect_layers: usize,
    pub rect_heads: usize,
    pub rect_ffn_mult: usize,
    pub normalize_rect: bool,
    /// Query instances per episode; `None` means 2 * n * k.
    pub query_instances: Option<usize>,
    pub eval_episodes: usize,
    pub min_count: usize,
    pub no_language: bool,
    pub no_rectify: bool,
    pub decoupled_attention: bool,
    pub corpus_path: Option<PathBuf>,
    pub catalog_path: Option<PathBuf>,
    /// Synthetic data recipe used when no catalog path is given.
    pub synthetic: Option<SyntheticCatalogSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            d: default_d(),
            heads: default_heads(),
            n: default_n(),
            k: default_k(),
            strategy: default_strategy(),
            text_variant: default_variant(),
            backend: default_backend(),
            lambda: default_lambda(),
            learning_rate: default_lr(),
            batch_size: None,
            steps: default_steps(),
            optimizer: default_optimizer(),
            rect_layers: default_rect_layers(),
            rect_heads: default_rect_heads(),
            rect_ffn_mult: default_rect_ffn_mult(),
            normalize_rect: false,
            query_instances: None,
            eval_episodes: default_eval_episodes(),
            min_count: default_min_count(),
            no_language: false,
            no_rectify: false,
            decoupled_attention: false,
            corpus_path: None,
            catalog_path: None,
            synthetic: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(raw: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_json(&raw)
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("d", self.d),
            ("heads", self.heads),
            ("n", self.n),
            ("k", self.k),
            ("rect_layers", self.rect_layers),
            ("rect_heads", self.rect_heads),
            ("rect_ffn_mult", self.rect_ffn_mult),
            ("min_count", self.min_count),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(CoreError::Config(format!("{name} must be positive")));
            }
        }
        if self.d % 2 != 0 {
            return Err(CoreError::Config("d must be even".into()));
        }
        if self.d % self.heads != 0 {
            return Err(CoreError::Config("heads must divide d".into()));
        }
        if self.d % self.rect_heads != 0 {
            return Err(CoreError::Config("rect_heads must divide d".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::Config("learning_rate must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CoreError::Config("lambda must be non-negative".into()));
        }
        if self.batch_size == Some(0) {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        if let Some(s) = &self.synthetic {
            if s.dim != self.d {
                return Err(CoreError::Config(format!(
                    "synthetic catalog dim {} must equal d {}",
                    s.dim, self.d
                )));
            }
        }
        Ok(())
    }

    /// 4 episodes per step for 1-shot, 1 otherwise, unless set explicitly.
    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.k == 1 { 4 } else { 1 })
    }

    pub fn effective_query_instances(&self) -> usize {
        self.query_instances.unwrap_or(2 * self.n * self.k)
    }

    /// Synthetic recipe to use when no catalog is given.
    pub fn effective_synthetic(&self) -> SyntheticCatalogSpec {
        self.synthetic.clone().unwrap_or_else(|| {
            SyntheticCatalogSpec::new(
                self.n.max(2),
                4 * self.k.max(2),
                self.d,
                Separability::VisionSeparable,
                self.seed,
            )
        })
    }

    /// Resolves a data path against `MMFSOD_DATA_ROOT` when relative.
    pub fn resolve_path(path: &Path) -> PathBuf {
        if path.is_absolute() {
            return path.to_path_buf();
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(path),
            None => path.to_path_buf(),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            n_slots: self.n,
            vocab_size,
            rect_layers: self.rect_layers,
            rect_heads: self.rect_heads,
            rect_ffn_mult: self.rect_ffn_mult,
            no_language: self.no_language,
            no_rectify: self.no_rectify,
            decoupled_attention: self.decoupled_attention,
            lambda: self.lambda,
            normalize_rect: self.normalize_rect,
        }
    }
}
