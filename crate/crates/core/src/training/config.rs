use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::TransformerTopConfig;

use super::TrainError;

/// Flat TOML training configuration. Missing keys take the defaults below;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_videos: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub steps: u64,
    pub seed: u64,
    pub num_layers: usize,
    pub joint_dim: usize,
    pub vision_model_dim: usize,
    pub vision_num_heads: usize,
    pub vision_mlp_dim: usize,
    pub vision_seq_len_max: usize,
    pub text_model_dim: usize,
    pub text_num_heads: usize,
    pub text_mlp_dim: usize,
    pub text_seq_len_max: usize,
    pub pool_radius: usize,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_videos: 4,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            steps: 100,
            seed: 0,
            num_layers: 1,
            joint_dim: 16,
            vision_model_dim: 16,
            vision_num_heads: 2,
            vision_mlp_dim: 32,
            vision_seq_len_max: 64,
            text_model_dim: 16,
            text_num_heads: 2,
            text_mlp_dim: 32,
            text_seq_len_max: 64,
            pool_radius: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn vision_config(&self) -> TransformerTopConfig {
        TransformerTopConfig {
            model_dim: self.vision_model_dim,
            num_heads: self.vision_num_heads,
            mlp_dim: self.vision_mlp_dim,
            num_layers: self.num_layers,
            joint_dim: self.joint_dim,
            seq_len_max: self.vision_seq_len_max,
            causal: false,
        }
    }

    pub fn text_config(&self) -> TransformerTopConfig {
        TransformerTopConfig {
            model_dim: self.text_model_dim,
            num_heads: self.text_num_heads,
            mlp_dim: self.text_mlp_dim,
            num_layers: self.num_layers,
            joint_dim: self.joint_dim,
            seq_len_max: self.text_seq_len_max,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_videos == 0 {
            return fail("batch_videos must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps_opt > 0.0) {
            return fail(format!("eps_opt must be positive, got {}", self.eps_opt));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip_norm >= 0.0) {
            return fail("weight_decay and grad_clip_norm must be >= 0".into());
        }
        for (tower, c) in [("vision", self.vision_config()), ("text", self.text_config())] {
            c.validate().map_err(|e| TrainError::Config(format!("{tower}: {e}")))?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let config: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            TrainError::Config(m) => TrainError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_takes_defaults() {
        let c = TrainConfig::from_toml("steps = 5\nlearning_rate = 0.01\n").unwrap();
        assert_eq!(c.steps, 5);
        assert_eq!(c.batch_videos, TrainConfig::default().batch_videos);
        assert!(!c.vision_config().causal);
        assert!(c.text_config().causal);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(TrainConfig::from_toml("stepz = 5\n"), Err(TrainError::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "batch_videos = 0",
            "learning_rate = 0.0",
            "beta2 = 1.0",
            "vision_num_heads = 3",
            "joint_dim = 0",
        ] {
            assert!(TrainConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig {
            seed: 9,
            grad_clip_norm: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
