//! TOML run configuration.

use std::path::{Path, PathBuf};

use lionrank::model::CrossEncoderConfig;
use lionrank::optim::{AdamWConfig, LionConfig, OptimizerKind, ScheduleKind};
use lionrank::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const DEFAULT_LR: f64 = 2e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub optimizer: OptimizerSections,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            name: "tiny".into(),
            d_model: 32,
            n_layers: 1,
            n_heads: 4,
            d_ff: 64,
            max_len: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Relative paths resolve against the config file's directory.
    pub triplets: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub warmup_ratio: f64,
    pub shuffle: bool,
    /// Optimizers to run. Defaults to every `[optimizer.*]` section present,
    /// or Lion alone when there are none.
    pub optimizers: Option<Vec<OptimizerKind>>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            schedule: t.schedule,
            warmup_ratio: t.warmup_ratio,
            shuffle: t.shuffle,
            optimizers: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSections {
    pub lion: Option<LionSection>,
    pub adamw: Option<AdamWSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LionSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub decay_exclude: Vec<String>,
}

impl Default for LionSection {
    fn default() -> Self {
        let c = LionConfig::default();
        Self {
            lr: DEFAULT_LR,
            beta1: c.beta1,
            beta2: c.beta2,
            weight_decay: c.weight_decay,
            decay_exclude: c.decay_exclude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_exclude: Vec<String>,
}

impl Default for AdamWSection {
    fn default() -> Self {
        let c = AdamWConfig::default();
        Self {
            lr: DEFAULT_LR,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
            decay_exclude: c.decay_exclude,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.data.triplets.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.data.triplets = base.join(&cfg.data.triplets);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(k) = o.optimizer {
            self.train.optimizers = Some(vec![k]);
        }
        if let Some(lr) = o.lr {
            self.optimizer.lion.get_or_insert_with(Default::default).lr = lr;
            self.optimizer.adamw.get_or_insert_with(Default::default).lr = lr;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
    }

    pub fn optimizers(&self) -> Vec<OptimizerKind> {
        if let Some(list) = &self.train.optimizers {
            return list.clone();
        }
        let mut out = Vec::new();
        if self.optimizer.lion.is_some() {
            out.push(OptimizerKind::Lion);
        }
        if self.optimizer.adamw.is_some() {
            out.push(OptimizerKind::AdamW);
        }
        if out.is_empty() {
            out.push(OptimizerKind::Lion);
        }
        out
    }

    /// The model is initialised from the training seed.
    pub fn model_config(&self, vocab_size: usize) -> CrossEncoderConfig {
        let m = &self.model;
        CrossEncoderConfig {
            vocab_size,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_len: m.max_len,
            seed: self.train.seed,
        }
    }

    pub fn train_config(&self, kind: OptimizerKind) -> TrainConfig {
        let lion = self.optimizer.lion.clone().unwrap_or_default();
        let adamw = self.optimizer.adamw.clone().unwrap_or_default();
        let t = &self.train;
        TrainConfig {
            run_name: self.model.name.clone(),
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            optimizer: kind,
            base_lr: match kind {
                OptimizerKind::Lion => lion.lr,
                OptimizerKind::AdamW => adamw.lr,
            },
            schedule: t.schedule,
            warmup_ratio: t.warmup_ratio,
            shuffle: t.shuffle,
            lion: LionConfig {
                beta1: lion.beta1,
                beta2: lion.beta2,
                weight_decay: lion.weight_decay,
                decay_exclude: lion.decay_exclude,
            },
            adamw: AdamWConfig {
                beta1: adamw.beta1,
                beta2: adamw.beta2,
                eps: adamw.eps,
                weight_decay: adamw.weight_decay,
                decay_exclude: adamw.decay_exclude,
            },
        }
    }
}

/// A ready-to-train config for a synthetic corpus in the same directory.
pub fn synthetic_config_toml(seed: u64) -> String {
    let cfg = RunConfig {
        model: ModelSection::default(),
        data: DataSection {
            triplets: "triplets.tsv".into(),
        },
        train: TrainSection {
            seed,
            ..TrainSection::default()
        },
        optimizer: OptimizerSections {
            lion: Some(LionSection::default()),
            adamw: Some(AdamWSection::default()),
        },
    };
    toml::to_string(&cfg).expect("config serialises")
}
