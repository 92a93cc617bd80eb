// SPDX-License-Identifier: Apache-2.0

//! Run configuration in a `key = value` text format.
//!
//! Every key has a default. Files and command-line overrides go through the
//! same [`RunConfig::set`], which rejects unknown keys and values of the
//! wrong type.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{CategoryCounts, Tokenizer};
use crate::error::{LitError, Result};
use crate::steer::{Schedule, SteerSpec};
use crate::trainer::{Precision, TargetTrainConfig, TrainConfig};
use crate::transformer::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,

    pub goals: usize,
    pub personas: usize,
    pub extractive: usize,

    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub max_context: usize,

    pub target_steps: usize,
    pub target_batch: usize,
    pub target_lr: f64,
    pub target_dialogs: usize,

    pub k: usize,
    pub ell: usize,
    pub rank: usize,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub fraction: f64,
    pub precision: Precision,

    pub control_text: String,
    pub schedule: Schedule,
    pub per_layer_updates: bool,
    pub steer_steps: usize,
    pub steer_rank: usize,
    pub steer_alpha: f64,
    pub steer_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let counts = CategoryCounts::proportional(512);
        Self {
            seed: 0,
            data_dir: "data".into(),
            out_dir: "runs".into(),
            goals: counts.goals,
            personas: counts.personas,
            extractive: counts.extractive,
            n_layers: 4,
            hidden: 64,
            n_heads: 4,
            max_context: 128,
            target_steps: 3000,
            target_batch: 16,
            target_lr: 3e-3,
            target_dialogs: 20_000,
            k: 3,
            ell: 0,
            rank: 8,
            alpha: 16.0,
            lr: 1e-3,
            batch_size: 32,
            epochs: 8,
            fraction: 1.0,
            precision: Precision::F32,
            control_text: "please speak like a pirate .".into(),
            schedule: Schedule::Sequential,
            per_layer_updates: false,
            steer_steps: 200,
            steer_rank: 8,
            steer_alpha: 16.0,
            steer_lr: 1e-3,
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| LitError::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| LitError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| LitError::MissingArtifact {
            path: path.to_path_buf(),
            hint: "write a key = value config file".into(),
        })?;
        Self::parse(&text)
    }

    /// Overrides one key. The value is parsed according to the key's type.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut obj = match serde_json::to_value(&*self)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let slot = obj
            .get_mut(key)
            .ok_or_else(|| LitError::Config(format!("unknown key {key:?}")))?;
        *slot = match slot {
            Value::String(_) => Value::String(value.to_string()),
            Value::Bool(_) => Value::Bool(
                value
                    .parse()
                    .map_err(|_| LitError::Config(format!("{key}: expected true or false, got {value:?}")))?,
            ),
            _ => serde_json::from_str(value)
                .map_err(|_| LitError::Config(format!("{key}: cannot parse {value:?}")))?,
        };
        *self = serde_json::from_value(Value::Object(obj))
            .map_err(|e| LitError::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// `key = value` text that parses back to `self`.
    pub fn render(&self) -> String {
        let Value::Object(obj) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config serializes to an object")
        };
        obj.iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k} = {s}\n"),
                other => format!("{k} = {other}\n"),
            })
            .collect()
    }

    pub fn counts(&self) -> CategoryCounts {
        CategoryCounts {
            goals: self.goals,
            personas: self.personas,
            extractive: self.extractive,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig::new(
            self.n_layers,
            self.hidden,
            self.n_heads,
            Tokenizer::world().vocab_size(),
            self.max_context,
        )
    }

    pub fn target_train(&self) -> TargetTrainConfig {
        let mut t = TargetTrainConfig::new(self.model());
        t.max_steps = self.target_steps;
        t.batch_size = self.target_batch;
        t.lr = self.target_lr;
        t.train_dialogs = self.target_dialogs;
        t.seed = self.seed;
        t
    }

    pub fn train(&self) -> TrainConfig {
        let mut t = TrainConfig::for_model(&self.model());
        t.k = self.k;
        t.ell = self.ell;
        t.rank = self.rank;
        t.alpha = self.alpha;
        t.lr = self.lr;
        t.batch_size = self.batch_size;
        t.epochs = self.epochs;
        t.fraction = self.fraction;
        t.precision = self.precision;
        t.seed = self.seed;
        t
    }

    /// Steering spec without QA pairs; those are derived from the decoder.
    pub fn steer(&self) -> SteerSpec {
        let mut s = SteerSpec::new(&self.control_text, Vec::new(), self.k);
        s.ell = self.ell;
        s.schedule = self.schedule;
        s.per_layer_updates = self.per_layer_updates;
        s.steps = self.steer_steps;
        s.rank = self.steer_rank;
        s.alpha = self.steer_alpha;
        s.lr = self.steer_lr;
        s.seed = self.seed;
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let mut c = RunConfig::default();
        c.set("schedule", "layer-k").unwrap();
        c.set("control_text", "you are a robot now .").unwrap();
        c.set("fraction", "0.25").unwrap();
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("hiden", "64"), Err(LitError::Config(_))));
        assert!(c.set("hidden", "sixty").is_err());
        assert!(c.set("schedule", "both").is_err());
        assert!(c.set("per_layer_updates", "yes").is_err());
        assert!(matches!(
            RunConfig::parse("seed = 1\nnope = 2\n"),
            Err(LitError::Parse { line: 2, .. })
        ));
        assert!(RunConfig::parse("seed 1").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# defaults\n\nepochs = 2  # short\n").unwrap();
        assert_eq!(c.epochs, 2);
    }
}
