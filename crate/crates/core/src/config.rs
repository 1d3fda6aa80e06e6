//! Run configuration: one TOML document with `data`, `model`, `loss`,
//! `train`, `inference` and `eval` tables, plus dotted `key=value`
//! overrides from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::inference::InferenceConfig;
use crate::matching::LossConfig;
use crate::metrics::RoiSpec;
use crate::model::ModelConfig;
use crate::world::{DatasetConfig, ScenarioConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub world: ScenarioConfig,
    pub train_scenarios: usize,
    pub eval_scenarios: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            world: ScenarioConfig::default(),
            train_scenarios: 200,
            eval_scenarios: 50,
            train_seed: 0,
            eval_seed: 1,
        }
    }
}

impl DataConfig {
    pub fn train_split(&self) -> DatasetConfig {
        DatasetConfig {
            world: self.world.clone(),
            num_scenarios: self.train_scenarios,
            master_seed: self.train_seed,
        }
    }

    pub fn eval_split(&self) -> DatasetConfig {
        DatasetConfig {
            world: self.world.clone(),
            num_scenarios: self.eval_scenarios,
            master_seed: self.eval_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub epochs: usize,
    /// Samples whose gradients are averaged into one step.
    pub batch_size: usize,
    pub seed: u64,
    /// Linear warm-up steps before the cosine decay.
    pub warmup_steps: usize,
    /// Evaluate (and keep the best checkpoint) every this many epochs; 0
    /// evaluates only at the end.
    pub eval_every: usize,
    /// Cap on eval samples used during training; 0 uses all.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.01,
            clip: 35.0,
            epochs: 24,
            batch_size: 1,
            seed: 0,
            warmup_steps: 0,
            eval_every: 0,
            eval_samples: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rois: Vec<RoiSpec>,
    /// Extra decode thresholds reported alongside the configured one.
    pub threshold_sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rois: vec![RoiSpec::near(), RoiSpec::far()],
            threshold_sweep: vec![0.3, 0.4, 0.5, 0.6, 0.7],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Small preset that trains in minutes on one CPU core: a 32 x 32
    /// grid at 1 m per cell with a narrow model.
    pub fn toy() -> Self {
        let mut c = Self::default();
        let w = &mut c.data.world;
        w.grid = crate::world::GridSpec {
            height: 32,
            width: 32,
            resolution: 1.0,
        };
        w.agents = [2, 4];
        w.speed = [1.0, 5.0];
        w.spawn_half_extent = 10.0;
        w.min_gap = 5.0;
        c.model = ModelConfig {
            channels: 16,
            encoder_blocks: 2,
            heads: 4,
            points: 4,
            fada_layers: 2,
            decoder_layers: 3,
            decoder_heads: 4,
            num_queries: 12,
            ..ModelConfig::default()
        };
        c.loss.mask_l1 = 0.0;
        c.loss.mask_bce = 1.0;
        c.train.epochs = 12;
        c.train.lr = 1e-3;
        c.train.warmup_steps = 50;
        // focal-trained scores rarely exceed 0.5
        c.inference.score_threshold = 0.3;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Loads `path` (or the defaults) and applies `key=value` overrides in
    /// order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for o in overrides {
            cfg = cfg.with_override(o)?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Stable digest of the resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }

    /// `a.b.c=value`. The key must already exist; values parse as TOML and
    /// fall back to bare strings.
    pub fn with_override(&self, spec: &str) -> Result<Self> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        let key = key.trim();
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        let parts: Vec<&str> = key.split('.').collect();
        set_path(&mut doc, &parts, parse_value(raw.trim()), key)?;
        let text = toml::to_string(&doc).expect("table serialises");
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("override {key}: {m}")),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.world.validate()?;
        self.model.validate()?;
        self.inference.validate()?;
        if self.model.t_out != self.data.world.t_out {
            return Err(Error::Config(format!(
                "model.t_out {} differs from data.world.t_out {}",
                self.model.t_out, self.data.world.t_out
            )));
        }
        let t = &self.train;
        if !(t.lr > 0.0) || t.weight_decay < 0.0 || !(t.clip > 0.0) || t.batch_size == 0 {
            return Err(Error::Config("train.lr, clip and batch_size must be positive".into()));
        }
        if self.data.train_scenarios == 0 || self.data.eval_scenarios == 0 {
            return Err(Error::Config("data.train_scenarios and eval_scenarios must be positive".into()));
        }
        if self.eval.rois.is_empty() {
            return Err(Error::Config("eval.rois must not be empty".into()));
        }
        for r in &self.eval.rois {
            RoiSpec::new(&r.name, r.half_extent)?;
        }
        for &d in &self.eval.threshold_sweep {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::Config(format!("eval.threshold_sweep entry {d} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

fn set_path(node: &mut toml::Table, parts: &[&str], value: toml::Value, key: &str) -> Result<()> {
    let Some(slot) = node.get_mut(parts[0]) else {
        return Err(Error::Config(format!("unknown config key {key}")));
    };
    if parts.len() == 1 {
        *slot = value;
        return Ok(());
    }
    let table = slot
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("config key {key}: {} is not a table", parts[0])))?;
    set_path(table, &parts[1..], value, key)
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
