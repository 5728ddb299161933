//! Training configuration and its plain-text `key = value` form.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compression::CompressionConfig;
use crate::encoder::Readout;
use crate::error::{Error, Result};
use crate::transfer::{Alphas, PredictionLoss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub embedding_dim: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub layers: usize,
    pub readout: Readout,
    pub compression: CompressionConfig,
    pub alphas: Alphas,
    pub prediction_loss: PredictionLoss,
    /// (positive, negative) pairs drawn per user, per domain, per step.
    pub samples_per_user: usize,
    pub init_std: f64,
    /// Optional weight decay applied inside the optimizer step.
    pub weight_decay: f64,
    /// Epochs without validation NDCG@100 improvement before stopping; 0 disables.
    pub patience: usize,
    /// KG hops kept around item-linked entities.
    pub kg_radius: usize,
    /// Use the knowledge graph bridge; without it items get learnable ID embeddings.
    pub use_kg: bool,
    /// Train on the target domain alone (no source encoder, no compression).
    pub target_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embedding_dim: 32,
            batch_size: 4096,
            max_epochs: 100,
            learning_rate: 1e-3,
            layers: 2,
            readout: Readout::Last,
            compression: CompressionConfig::default(),
            alphas: Alphas::default(),
            prediction_loss: PredictionLoss::Bpr,
            samples_per_user: 1,
            init_std: 0.1,
            weight_decay: 0.0,
            patience: 10,
            kg_radius: 1,
            use_kg: true,
            target_only: false,
            seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "embedding_dim",
    "batch_size",
    "max_epochs",
    "learning_rate",
    "layers",
    "readout",
    "gate_temperature",
    "contrast_temperature",
    "gate_hidden",
    "sigma_floor",
    "m_floor",
    "norm_floor",
    "alpha1",
    "alpha2",
    "alpha3",
    "prediction_loss",
    "samples_per_user",
    "init_std",
    "weight_decay",
    "patience",
    "kg_radius",
    "use_kg",
    "target_only",
    "seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let c = &mut self.compression;
        match key {
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "readout" => self.readout = value.parse()?,
            "gate_temperature" => c.gate_temperature = parse(key, value)?,
            "contrast_temperature" => c.contrast_temperature = parse(key, value)?,
            "gate_hidden" => c.hidden = parse(key, value)?,
            "sigma_floor" => c.sigma_floor = parse(key, value)?,
            "m_floor" => c.m_floor = parse(key, value)?,
            "norm_floor" => c.norm_floor = parse(key, value)?,
            "alpha1" => self.alphas.source_pred = parse(key, value)?,
            "alpha2" => self.alphas.kl = parse(key, value)?,
            "alpha3" => self.alphas.contrast = parse(key, value)?,
            "prediction_loss" => self.prediction_loss = value.parse()?,
            "samples_per_user" => self.samples_per_user = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "kg_radius" => self.kg_radius = parse(key, value)?,
            "use_kg" => self.use_kg = parse(key, value)?,
            "target_only" => self.target_only = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let c = &self.compression;
        Some(match key {
            "embedding_dim" => self.embedding_dim.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "layers" => self.layers.to_string(),
            "readout" => self.readout.to_string(),
            "gate_temperature" => c.gate_temperature.to_string(),
            "contrast_temperature" => c.contrast_temperature.to_string(),
            "gate_hidden" => c.hidden.to_string(),
            "sigma_floor" => c.sigma_floor.to_string(),
            "m_floor" => c.m_floor.to_string(),
            "norm_floor" => c.norm_floor.to_string(),
            "alpha1" => self.alphas.source_pred.to_string(),
            "alpha2" => self.alphas.kl.to_string(),
            "alpha3" => self.alphas.contrast.to_string(),
            "prediction_loss" => self.prediction_loss.to_string(),
            "samples_per_user" => self.samples_per_user.to_string(),
            "init_std" => self.init_std.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "patience" => self.patience.to_string(),
            "kg_radius" => self.kg_radius.to_string(),
            "use_kg" => self.use_kg.to_string(),
            "target_only" => self.target_only.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("batch_size", self.batch_size),
            ("samples_per_user", self.samples_per_user),
            ("gate_hidden", self.compression.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let c = &self.compression;
        let positive_f = [
            ("learning_rate", self.learning_rate),
            ("gate_temperature", c.gate_temperature),
            ("contrast_temperature", c.contrast_temperature),
            ("sigma_floor", c.sigma_floor),
            ("m_floor", c.m_floor),
            ("norm_floor", c.norm_floor),
        ];
        for (name, v) in positive_f {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.init_std >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("init_std and weight_decay must be >= 0".into()));
        }
        self.alphas.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.embedding_dim, 32);
        assert_eq!(c.batch_size, 4096);
        assert_eq!(c.max_epochs, 100);
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.alphas, Alphas::new(0.01, 1.0, 1.0).unwrap());
        c.validate().unwrap();
    }

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::default();
        c.apply_text("# comment\nalpha2 = 0.5\n\nreadout = mean  # trailing\nuse_kg=false\n")
            .unwrap();
        assert_eq!(c.alphas.kl, 0.5);
        assert_eq!(c.readout, Readout::Mean);
        assert!(!c.use_kg);
        let mut back = TrainConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = TrainConfig::default();
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("layers 3").is_err());
        assert!(c.apply_text("layers = three").is_err());
        c.alphas.kl = -1.0;
        assert!(c.validate().is_err());
    }
}
