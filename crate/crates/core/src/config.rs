//! Training configuration: a flat key/value TOML document whose missing keys
//! fall back to the published per-task settings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ner,
    Thread,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ner => "ner",
            Task::Thread => "thread",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ner" => Ok(Task::Ner),
            "thread" => Ok(Task::Thread),
            other => Err(Error::config("task", format!("expected `ner` or `thread`, got `{other}`"))),
        }
    }
}

/// Output layer on top of the memory representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    /// Linear-chain CRF (the full model).
    Crf,
    /// Independent per-step softmax (memory-network baseline).
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the tagging loss in the joint objective.
    pub alpha: f64,
    pub keep_rate: f64,
    /// Epochs during which CRF transitions are held at zero.
    pub curriculum_epochs: usize,
    pub hops: usize,
    /// Width of the memory GRUs and of every memory row.
    pub hidden: usize,
    /// Width of the word-level title/text encoders (thread task).
    pub encoder_hidden: usize,
    pub embedding_dim: usize,
    pub struct_dim: usize,
    pub punct_dim: usize,
    pub seed: u64,
    /// Early-stopping patience in epochs; 0 disables stopping early (the best
    /// dev checkpoint is still returned).
    pub patience: usize,
    /// Maximum number of memory rows a step may attend over; 0 = unbounded.
    pub memory_window: usize,
    pub tie_memories: bool,
    pub dummy_slot: bool,
    pub lexical_features: bool,
    pub link_supervision: bool,
    pub decoder: Decoder,
    /// Forces the memory read to zero (ablation).
    pub ablate_read: bool,
    /// Keep pretrained embeddings fixed during training.
    pub fixed_embeddings: bool,
    pub threads: usize,
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Thread => Self {
                task,
                epochs: 50,
                batch_size: 32,
                lr: 0.001,
                alpha: 0.5,
                keep_rate: 0.7,
                curriculum_epochs: 20,
                hops: 1,
                hidden: 50,
                encoder_hidden: 20,
                embedding_dim: 20,
                struct_dim: 50,
                punct_dim: 100,
                seed: 1,
                patience: 0,
                memory_window: 0,
                tie_memories: true,
                dummy_slot: true,
                lexical_features: false,
                link_supervision: true,
                decoder: Decoder::Crf,
                ablate_read: false,
                fixed_embeddings: false,
                threads: 1,
            },
            Task::Ner => Self {
                task,
                epochs: 100,
                batch_size: 32,
                lr: 0.001,
                alpha: 1.0,
                keep_rate: 0.8,
                curriculum_epochs: 0,
                hops: 1,
                hidden: 50,
                encoder_hidden: 20,
                embedding_dim: 50,
                struct_dim: 50,
                punct_dim: 100,
                seed: 1,
                patience: 0,
                memory_window: 0,
                tie_memories: false,
                dummy_slot: false,
                lexical_features: true,
                link_supervision: false,
                decoder: Decoder::Crf,
                ablate_read: false,
                fixed_embeddings: true,
                threads: 1,
            },
        }
    }

    /// Parses a flat TOML document. `task` may be given in the document or by
    /// the caller; every other key defaults to the task's published setting.
    pub fn from_toml_str(text: &str, task: Option<Task>) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        let file_task = match table.get("task") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::config("task", "must be a string"))?
                    .parse::<Task>()?,
            ),
            None => None,
        };
        let task = match (task, file_task) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::config("task", format!("config says `{b}` but `{a}` was requested")));
            }
            (Some(t), _) | (None, Some(t)) => t,
            (None, None) => return Err(Error::config("task", "missing; set it in the config or pass --task")),
        };
        let defaults = toml::Table::try_from(Self::for_task(task))
            .map_err(|e| Error::config("config", e.to_string()))?;
        let mut merged = defaults;
        for (k, v) in table {
            if !merged.contains_key(&k) {
                return Err(Error::config(k, "unknown field"));
            }
            merged.insert(k, v);
        }
        let cfg: TrainConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, task: Option<Task>) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?, task)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("hops", self.hops),
            ("hidden", self.hidden),
            ("encoder_hidden", self.encoder_hidden),
            ("embedding_dim", self.embedding_dim),
            ("struct_dim", self.struct_dim),
            ("punct_dim", self.punct_dim),
            ("threads", self.threads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return Err(Error::config(
                "keep_rate",
                format!("must lie in (0, 1], got {}", self.keep_rate),
            ));
        }
        if self.curriculum_epochs > 0 && self.decoder == Decoder::Softmax {
            return Err(Error::config(
                "curriculum_epochs",
                "only meaningful with the crf decoder",
            ));
        }
        Ok(())
    }

    pub fn window(&self) -> Option<usize> {
        (self.memory_window > 0).then_some(self.memory_window)
    }

    /// Weight on the tagging loss; 1 when links are not supervised.
    pub fn tagging_weight(&self) -> f64 {
        if self.link_supervision {
            self.alpha
        } else {
            1.0
        }
    }
}

/// Curriculum gate: transitions are frozen for epochs `1..=e`.
pub fn curriculum_gate(epoch: usize, curriculum_epochs: usize) -> bool {
    epoch <= curriculum_epochs
}
