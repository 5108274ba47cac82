use crate::autograd::{Graph, Var};
use crate::fvr::{Decoder, FieldExtractor, RayMlp};
use crate::motion::dense::DenseMotionVars;
use crate::motion::{DenseMotionNet, KeypointDetector, KeypointVars};
use crate::nn::{component_rng, Bound, Conv2d, ParamStore};
use crate::tensor::Real;

use super::TrainConfig;

/// Module prefixes of the generator parameters, in checkpoint order.
pub const GENERATOR_MODULES: [&str; 5] = ["gen.encoder", "gen.keypoints", "gen.dense_motion", "gen.fvr", "gen.decoder"];

/// Keypoint detector, dense motion, appearance encoder, volume renderer and
/// decoder. All parameters live in one store under `gen.*`.
#[derive(Clone, Debug)]
pub struct Generator {
    encoder: [Conv2d; 2],
    pub keypoints: KeypointDetector,
    pub dense_motion: DenseMotionNet,
    shape: FieldExtractor,
    color: FieldExtractor,
    mlp: RayMlp,
    decoder: Decoder,
    pub grid_size: usize,
}

/// Graph handles of one generator evaluation.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    /// `[N, 3, S, S]` in `[0, 1]`.
    pub prediction: Var,
    pub motion: DenseMotionVars,
    /// Occluded, warped source features `[N, E, G, G]`.
    pub warped: Var,
    /// Ray densities `[N, D, G, G]`.
    pub density: Var,
    /// Rendered features `[N, C, G, G]`.
    pub rendered: Var,
}

impl Generator {
    /// Each submodule draws its initialization from its own named stream.
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig) -> Self {
        let seed = cfg.seed;
        let e = cfg.encoder_channels;
        let motion = cfg.motion();
        let fvr = cfg.fvr();

        let mut rng = component_rng(seed, "gen.encoder");
        let encoder = [
            Conv2d::new(store, "gen.encoder.conv0", 3, e, 3, 1, true, &mut rng),
            Conv2d::new(store, "gen.encoder.conv1", e, e, 3, 1, true, &mut rng),
        ];
        let keypoints = KeypointDetector::new(store, "gen.keypoints", &motion, &mut component_rng(seed, "gen.keypoints"));
        let dense_motion =
            DenseMotionNet::new(store, "gen.dense_motion", &motion, &mut component_rng(seed, "gen.dense_motion"));
        let mut rng = component_rng(seed, "gen.fvr");
        let shape = FieldExtractor::new(store, "gen.fvr.shape", e, fvr.hidden_channels, fvr.depth_samples, &mut rng);
        let color = FieldExtractor::new(store, "gen.fvr.color", e, fvr.hidden_channels, fvr.color_channels, &mut rng);
        let mlp = RayMlp::new(store, "gen.fvr.mlp", &fvr, &mut rng);
        let decoder = Decoder::new(store, "gen.decoder", e, 2, &fvr, &mut component_rng(seed, "gen.decoder"));
        Self {
            encoder,
            keypoints,
            dense_motion,
            shape,
            color,
            mlp,
            decoder,
            grid_size: cfg.grid_size(),
        }
    }

    /// Keypoints of `[N, 3, S, S]` images.
    pub fn detect<T: Real>(&self, g: &Graph<T>, p: &Bound, images: Var) -> KeypointVars {
        self.keypoints.forward(g, p, images, self.grid_size)
    }

    /// Appearance features at a quarter of the input resolution.
    pub fn encode<T: Real>(&self, g: &Graph<T>, p: &Bound, images: Var) -> Var {
        let mut x = images;
        for conv in &self.encoder {
            x = g.avg_pool2(g.relu(conv.forward(g, p, x)));
        }
        x
    }

    /// Renders `source` with the motion from `kp_source` to `kp_driving`.
    pub fn generate<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        source: Var,
        kp_source: &KeypointVars,
        kp_driving: &KeypointVars,
    ) -> GeneratorOutput {
        let features = self.encode(g, p, source);
        let small = g.downsample_to(source, self.grid_size);
        let motion = self.dense_motion.forward(g, p, small, kp_source, kp_driving);
        let warped = g.warp_features(features, motion.flow, motion.occlusion);
        let density_feats = self.shape.forward(g, p, warped);
        let color_feats = self.color.forward(g, p, warped);
        let (density, color) = self.mlp.forward(g, p, density_feats, color_feats);
        let rendered = g.volume_render(density, color);
        let prediction = self.decoder.forward(g, p, warped, rendered);
        GeneratorOutput {
            prediction,
            motion,
            warped,
            density,
            rendered,
        }
    }
}
