use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::QUERY_SCALES;
use crate::error::{PftError, Result};
use crate::heads::Aggregation;
use crate::losses::LossConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr * (1 - step / iterations)`
    #[default]
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub disable_cross_scale: bool,
    pub disable_attn_loss: bool,
    /// Keep only this query scale (implies no cross-scale attention).
    pub single_scale_only: Option<usize>,
    pub prediction_average: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub classes: usize,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Distinct training scenes, cycled.
    pub train_size: usize,
    pub val_size: usize,
    /// Validation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Validation images used for the attention/mask correlation.
    pub pearson_samples: usize,
    /// Random horizontal flips of training images.
    pub hflip: bool,
    pub loss: LossConfig,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            channels: 32,
            layers: 2,
            heads: 4,
            height: 64,
            width: 64,
            iterations: 2000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-2,
            lr_schedule: LrSchedule::LinearDecay,
            seed: 7,
            train_size: 4096,
            val_size: 128,
            eval_every: 500,
            pearson_samples: 32,
            hflip: true,
            loss: LossConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(PftError::Config("iterations must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PftError::Config("lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(PftError::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size < 1 || self.train_size < 1 || self.val_size < 1 {
            return Err(PftError::Config("batch, train and val sizes must be at least 1".into()));
        }
        if let Some(s) = self.ablation.single_scale_only {
            if !QUERY_SCALES.contains(&s) {
                return Err(PftError::Config(format!("single_scale_only must be one of {QUERY_SCALES:?}")));
            }
        }
        crate::pyramid::check_input_size(self.height, self.width)?;
        self.loss.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let scales = match self.ablation.single_scale_only {
            Some(s) => vec![s],
            None => QUERY_SCALES.to_vec(),
        };
        ModelConfig {
            classes: self.classes,
            channels: self.channels,
            layers: self.layers,
            heads: self.heads,
            cross_scale: !self.ablation.disable_cross_scale && scales.len() > 1,
            scales,
            aggregation: if self.ablation.prediction_average {
                Aggregation::PredictionAverage
            } else {
                Aggregation::LogitAverage
            },
        }
    }

    /// Loss weights with ablations applied.
    pub fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss.clone();
        if self.ablation.disable_attn_loss {
            loss.attn = 0.0;
        }
        loss
    }

    /// Base seed of this run's data streams; runs with different seeds use
    /// disjoint scene seeds.
    pub fn data_seed(&self) -> u64 {
        self.seed.wrapping_mul(10_000_000)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// Sets a dotted key (`loss.attn`, `ablation.single_scale_only`) from a
    /// JSON literal; bare words are taken as strings.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let parsed: serde_json::Value =
            serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| PftError::Config(format!("'{key}' does not name a config field")))?;
            if !obj.contains_key(*part) {
                return Err(PftError::Config(format!("unknown config key '{key}'")));
            }
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), parsed.clone());
                break;
            }
            node = obj.get_mut(*part).expect("checked above");
        }
        *self = serde_json::from_value(root).map_err(|e| PftError::Config(format!("{key}={value}: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nested_and_top_level() {
        let mut c = TrainConfig::default();
        c.apply_override("iterations", "10").unwrap();
        c.apply_override("loss.attn", "0.0").unwrap();
        c.apply_override("ablation.single_scale_only", "32").unwrap();
        assert_eq!(c.iterations, 10);
        assert_eq!(c.loss.attn, 0.0);
        let m = c.model_config();
        assert_eq!(m.scales, vec![32]);
        assert!(!m.cross_scale);
        assert!(c.apply_override("nope", "1").is_err());
        assert!(c.apply_override("iterations", "\"x\"").is_err());
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.iterations = 0;
        assert!(c.validate().is_err());
        c.iterations = 1;
        c.lr = 0.0;
        assert!(c.validate().is_err());
        c.lr = 1e-3;
        c.ablation.single_scale_only = Some(4);
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }
}
