//! Keypoint-driven first-order motion.
//!
//! Keypoints with local 2×2 Jacobians are detected on source and driving
//! frames. Each keypoint induces an affine backward flow around it
//! ([`sparse`]); a mask network blends those flows with the identity
//! (background) flow and predicts an occlusion map ([`dense`]); the blended
//! flow warps source features ([`warp`]).

pub mod dense;
pub mod deform;
pub mod keypoints;
pub mod sparse;
pub mod warp;

use serde::{Deserialize, Serialize};

pub use dense::{compose_dense_flow, DenseMotion, DenseMotionNet, DenseMotionVars};
pub use deform::{equivariance_loss, Deformation, DeformationConfig};
pub use keypoints::{detect_keypoints, KeypointDetector, KeypointSet, KeypointVars};
pub use sparse::{invert_jacobian, sparse_motion, JacobianInverse, SparseMotions};
pub use warp::{identity_grid, warp_features, FeatureMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionConfig {
    pub num_keypoints: usize,
    /// Softmax temperature of the keypoint heatmaps.
    pub temperature: f64,
    /// Regularization threshold when inverting driving Jacobians.
    pub jacobian_eps: f64,
    /// When false every Jacobian is fixed to the identity.
    pub estimate_jacobian: bool,
    /// Variance of the Gaussian keypoint heatmaps fed to the mask network.
    pub heatmap_variance: f64,
    pub block_expansion: usize,
    pub num_blocks: usize,
    pub max_features: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            num_keypoints: 15,
            temperature: 0.1,
            jacobian_eps: 1e-4,
            estimate_jacobian: true,
            heatmap_variance: 0.01,
            block_expansion: 16,
            num_blocks: 2,
            max_features: 64,
        }
    }
}
