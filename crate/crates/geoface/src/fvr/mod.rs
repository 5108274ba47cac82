//! Face volume rendering.
//!
//! Warped source features are lifted into a density field and a color field,
//! a per-pixel MLP turns both into samples along one frontal orthographic ray
//! per pixel, and the samples are alpha-composited front to back. A shallow
//! decoder with spatially adaptive normalization turns the rendered features
//! into an RGB frame.

pub mod decoder;
pub mod fields;
pub mod render;
pub mod selftest;

use serde::{Deserialize, Serialize};

pub use decoder::{decode, Decoder};
pub use fields::{extract_color, extract_shape, ray_sample, FieldExtractor, RayMlp};
pub use selftest::{render_selftest, SelfTestReport};
pub use render::{transmittance, volume_render, RaySamples, RenderedFeatures};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FvrConfig {
    /// Samples per ray.
    pub depth_samples: usize,
    /// Channels of the color field and of the rendered features.
    pub color_channels: usize,
    pub mlp_width: usize,
    /// Channels of the extractors' hidden layer.
    pub hidden_channels: usize,
    /// Hidden channels of the normalization modulators in the decoder.
    pub spade_hidden: usize,
}

impl Default for FvrConfig {
    fn default() -> Self {
        Self {
            depth_samples: 16,
            color_channels: 8,
            mlp_width: 64,
            hidden_channels: 16,
            spade_hidden: 8,
        }
    }
}
