use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SUPPORTED_SIZES;
use crate::error::{Error, Result};
use crate::fvr::FvrConfig;
use crate::gan::{check_simplex, GanLossKind};
use crate::geometry::BackendKind;
use crate::losses::LossWeights;
use crate::motion::MotionConfig;

/// Every training hyperparameter as flat keys, so a config file is a list of
/// `key = value` lines. Missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub image_size: usize,
    pub lambda_rgb: f64,
    pub lambda_depth: f64,
    pub lambda_normal: f64,
    pub weight_perceptual: f64,
    pub weight_adversarial: f64,
    pub weight_equivariance: f64,
    pub seed: u64,
    pub geometry_backend: BackendKind,
    /// Weights archive for the external geometry backend.
    pub geometry_weights: Option<PathBuf>,
    pub gan_loss: GanLossKind,
    pub num_keypoints: usize,
    pub keypoint_temperature: f64,
    pub estimate_jacobian: bool,
    pub jacobian_eps: f64,
    pub block_expansion: usize,
    pub num_blocks: usize,
    pub max_features: usize,
    /// Channels of the appearance encoder.
    pub encoder_channels: usize,
    pub depth_samples: usize,
    pub color_channels: usize,
    pub mlp_width: usize,
    pub field_channels: usize,
    pub spade_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = MotionConfig::default();
        let f = FvrConfig::default();
        let w = LossWeights::default();
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.9,
            batch_size: 4,
            total_steps: 20_000,
            image_size: 64,
            lambda_rgb: 0.5,
            lambda_depth: 0.25,
            lambda_normal: 0.25,
            weight_perceptual: w.perceptual,
            weight_adversarial: w.adversarial,
            weight_equivariance: w.equivariance,
            seed: 0,
            geometry_backend: BackendKind::Baseline,
            geometry_weights: None,
            gan_loss: GanLossKind::Log,
            num_keypoints: m.num_keypoints,
            keypoint_temperature: m.temperature,
            estimate_jacobian: m.estimate_jacobian,
            jacobian_eps: m.jacobian_eps,
            block_expansion: m.block_expansion,
            num_blocks: m.num_blocks,
            max_features: m.max_features,
            encoder_channels: 16,
            depth_samples: f.depth_samples,
            color_channels: f.color_channels,
            mlp_width: f.mlp_width,
            field_channels: f.hidden_channels,
            spade_hidden: f.spade_hidden,
        }
    }
}

impl TrainConfig {
    /// Narrow networks for tests and quick demos; the schedule and
    /// optimizer settings are unchanged.
    pub fn small() -> Self {
        Self {
            batch_size: 2,
            total_steps: 20,
            num_keypoints: 5,
            block_expansion: 8,
            max_features: 32,
            encoder_channels: 8,
            depth_samples: 4,
            color_channels: 4,
            mlp_width: 16,
            field_channels: 8,
            spade_hidden: 4,
            ..Self::default()
        }
    }

    pub fn lambda(&self) -> [f64; 3] {
        [self.lambda_rgb, self.lambda_depth, self.lambda_normal]
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            perceptual: self.weight_perceptual,
            adversarial: self.weight_adversarial,
            equivariance: self.weight_equivariance,
        }
    }

    pub fn motion(&self) -> MotionConfig {
        MotionConfig {
            num_keypoints: self.num_keypoints,
            temperature: self.keypoint_temperature,
            jacobian_eps: self.jacobian_eps,
            estimate_jacobian: self.estimate_jacobian,
            block_expansion: self.block_expansion,
            num_blocks: self.num_blocks,
            max_features: self.max_features,
            ..MotionConfig::default()
        }
    }

    pub fn fvr(&self) -> FvrConfig {
        FvrConfig {
            depth_samples: self.depth_samples,
            color_channels: self.color_channels,
            mlp_width: self.mlp_width,
            hidden_channels: self.field_channels,
            spade_hidden: self.spade_hidden,
        }
    }

    /// Resolution of keypoint detection, motion and rendering.
    pub fn grid_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        check_simplex(&self.lambda())?;
        self.loss_weights().validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        // TOML integers are signed, and the config must echo exactly.
        for (name, v) in [("seed", self.seed), ("total_steps", self.total_steps)] {
            if v > i64::MAX as u64 {
                return bad(format!("{name} must not exceed {}, got {v}", i64::MAX));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !SUPPORTED_SIZES.contains(&self.image_size) {
            return bad(format!("image_size {} not in {SUPPORTED_SIZES:?}", self.image_size));
        }
        let positive = [
            ("num_keypoints", self.num_keypoints),
            ("block_expansion", self.block_expansion),
            ("num_blocks", self.num_blocks),
            ("max_features", self.max_features),
            ("encoder_channels", self.encoder_channels),
            ("depth_samples", self.depth_samples),
            ("color_channels", self.color_channels),
            ("mlp_width", self.mlp_width),
            ("field_channels", self.field_channels),
            ("spade_hidden", self.spade_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        // the hourglass halves the grid once per block
        if !self.grid_size().is_multiple_of(1 << self.num_blocks) {
            return bad(format!(
                "grid {} is not divisible by 2^num_blocks = {}",
                self.grid_size(),
                1 << self.num_blocks
            ));
        }
        if !(self.keypoint_temperature > 0.0) || !(self.jacobian_eps >= 0.0) {
            return bad("keypoint_temperature must be positive and jacobian_eps nonnegative".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("seed = 7\nlambda_rgb = 1.0\nlambda_depth = 0.0\nlambda_normal = 0.0").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.batch_size, 4);
        partial.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let c = TrainConfig {
            lambda_rgb: 0.4,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("simplex"));
        assert!(TrainConfig::from_toml("no_such_key = 1").is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            image_size: 48,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
