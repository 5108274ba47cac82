//! Mask-blended dense motion with occlusion.

use rand::Rng;

use super::keypoints::{KeypointSet, KeypointVars};
use super::sparse::{sparse_motion_var, SparseMotions};
use super::warp::{identity_grid, FeatureMap};
use super::MotionConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Hourglass, ParamStore};
use crate::tensor::{Real, Tensor};

/// Dense motion of a single frame pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMotion<T> {
    /// `[K+1, H, W]`, index 0 is the background.
    pub masks: Tensor<T>,
    /// `[H, W, 2]` backward flow.
    pub flow: Tensor<T>,
    /// `[H, W]` in `[0, 1]`.
    pub occlusion: Tensor<T>,
}

impl<T: Real> DenseMotion<T> {
    pub fn new(masks: Tensor<T>, flow: Tensor<T>, occlusion: Tensor<T>) -> Result<Self> {
        let (h, w) = match flow.shape() {
            [h, w, 2] => (*h, *w),
            s => return Err(Error::Shape(format!("flow must be H×W×2, got {s:?}"))),
        };
        if masks.rank() != 3 || masks.shape()[1..] != [h, w] || occlusion.shape() != [h, w] {
            return Err(Error::Shape(format!(
                "masks {:?} / occlusion {:?} do not match flow {h}x{w}",
                masks.shape(),
                occlusion.shape()
            )));
        }
        Ok(Self { masks, flow, occlusion })
    }

    /// Identity flow, background-only masks and no occlusion.
    pub fn identity(num_kp: usize, h: usize, w: usize) -> Self {
        let masks = Tensor::from_fn([num_kp + 1, h, w], |i| if i < h * w { T::one() } else { T::zero() });
        Self {
            masks,
            flow: identity_grid(h, w),
            occlusion: Tensor::ones([h, w]),
        }
    }

    /// Sample `index` of batched graph outputs.
    pub fn from_vars(g: &Graph<T>, vars: &DenseMotionVars, index: usize) -> Self {
        let pick = |v: Var| {
            let t = g.value(v);
            let per = t.len() / t.shape()[0];
            let shape = t.shape()[1..].to_vec();
            Tensor::new(shape, t.data()[index * per..(index + 1) * per].to_vec())
        };
        let occlusion = pick(vars.occlusion);
        let (h, w) = (occlusion.shape()[1], occlusion.shape()[2]);
        Self {
            masks: pick(vars.masks),
            flow: pick(vars.flow),
            occlusion: occlusion.reshape([h, w]),
        }
    }
}

/// `M_0·z + Σ_k M_k·τ_k(z)` per pixel.
pub fn compose_dense_flow<T: Real>(masks: &Tensor<T>, sparse: &SparseMotions<T>) -> Result<Tensor<T>> {
    let all = sparse.with_background();
    let (k1, h, w) = (all.shape()[0], all.shape()[1], all.shape()[2]);
    if masks.shape() != [k1, h, w] {
        return Err(Error::Shape(format!(
            "masks {:?} do not match {k1} flows of {h}x{w}",
            masks.shape()
        )));
    }
    let (m, f) = (masks.data(), all.data());
    let mut out = vec![T::zero(); h * w * 2];
    for k in 0..k1 {
        for p in 0..h * w {
            let mk = m[k * h * w + p];
            out[2 * p] += mk * f[(k * h * w + p) * 2];
            out[2 * p + 1] += mk * f[(k * h * w + p) * 2 + 1];
        }
    }
    Ok(Tensor::new([h, w, 2], out))
}

/// Batched dense motion on a graph.
#[derive(Clone, Copy, Debug)]
pub struct DenseMotionVars {
    /// `[N, K+1, H, W]`
    pub masks: Var,
    /// `[N, H, W, 2]`
    pub flow: Var,
    /// `[N, 1, H, W]`
    pub occlusion: Var,
    /// `[N, K+1, H, W, 2]`, background first.
    pub sparse: Var,
}

/// Predicts blending masks and occlusion from keypoint heatmap differences and
/// sparsely deformed copies of the downscaled source.
#[derive(Clone, Debug)]
pub struct DenseMotionNet {
    hourglass: Hourglass,
    mask_head: Conv2d,
    occlusion_head: Conv2d,
    num_kp: usize,
    variance: f64,
    jacobian_eps: f64,
}

impl DenseMotionNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &MotionConfig, rng: &mut impl Rng) -> Self {
        let k1 = cfg.num_keypoints + 1;
        let hourglass = Hourglass::new(
            store,
            &format!("{name}.hourglass"),
            k1 * 4,
            cfg.block_expansion,
            cfg.num_blocks,
            cfg.max_features,
            rng,
        );
        let c = hourglass.out_channels;
        Self {
            mask_head: Conv2d::new(store, &format!("{name}.mask"), c, k1, 3, 1, true, rng),
            occlusion_head: Conv2d::new(store, &format!("{name}.occlusion"), c, 1, 3, 1, true, rng),
            hourglass,
            num_kp: cfg.num_keypoints,
            variance: cfg.heatmap_variance,
            jacobian_eps: cfg.jacobian_eps,
        }
    }

    /// `[N, K, H, W]` isotropic Gaussians around each keypoint.
    pub fn heatmaps<T: Real>(&self, g: &Graph<T>, positions: Var, h: usize, w: usize) -> Var {
        let s = g.shape(positions);
        let (n, k) = (s[0], s[1]);
        let grid = g.constant(identity_grid::<T>(h, w).reshape([1, 1, h, w, 2]));
        let d = g.sub(grid, g.reshape(positions, &[n, k, 1, 1, 2]));
        let r2 = g.sum_axis(g.square(d), 4, false);
        g.exp(g.scale(r2, -0.5 / self.variance))
    }

    /// `source: [N, 3, H, W]` already at motion-grid resolution.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        source: Var,
        kp_s: &KeypointVars,
        kp_d: &KeypointVars,
    ) -> DenseMotionVars {
        let (n, c, h, w) = {
            let s = g.shape(source);
            (s[0], s[1], s[2], s[3])
        };
        let k1 = self.num_kp + 1;
        let sparse = sparse_motion_var(g, kp_s, kp_d, h, w, self.jacobian_eps);

        let heat = g.sub(self.heatmaps(g, kp_d.positions, h, w), self.heatmaps(g, kp_s.positions, h, w));
        let zero = g.constant(Tensor::zeros([n, 1, h, w]));
        let heat = g.reshape(g.concat(&[zero, heat], 1), &[n, k1, 1, h, w]);

        let src = g.broadcast_to(g.reshape(source, &[n, 1, c, h, w]), &[n, k1, c, h, w]);
        let deformed = g.grid_sample(
            g.reshape(src, &[n * k1, c, h, w]),
            g.reshape(sparse, &[n * k1, h, w, 2]),
        );
        let deformed = g.reshape(deformed, &[n, k1, c, h, w]);
        let input = g.reshape(g.concat(&[heat, deformed], 2), &[n, k1 * (c + 1), h, w]);

        let feat = self.hourglass.forward(g, p, input);
        let masks = g.softmax(self.mask_head.forward(g, p, feat), 1);
        let occlusion = g.sigmoid(self.occlusion_head.forward(g, p, feat));
        let flow = blend_flows(g, masks, sparse);
        DenseMotionVars {
            masks,
            flow,
            occlusion,
            sparse,
        }
    }
}

/// `masks: [N, K+1, H, W]`, `flows: [N, K+1, H, W, 2]` → `[N, H, W, 2]`.
pub fn blend_flows<T: Real>(g: &Graph<T>, masks: Var, flows: Var) -> Var {
    let s = g.shape(masks);
    let m = g.reshape(masks, &[s[0], s[1], s[2], s[3], 1]);
    g.sum_axis(g.mul(m, flows), 1, false)
}

/// Single-pair dense motion from a `[3, H, W]` downscaled source.
pub fn predict_dense_motion(
    source: &FeatureMap<f32>,
    kp_s: &KeypointSet,
    kp_d: &KeypointSet,
    net: &DenseMotionNet,
    params: &ParamStore,
) -> Result<DenseMotion<f32>> {
    let (c, h, w) = source.dims();
    if kp_s.len() != net.num_kp || kp_d.len() != net.num_kp {
        return Err(Error::Shape(format!(
            "network expects {} keypoints, got {} / {}",
            net.num_kp,
            kp_s.len(),
            kp_d.len()
        )));
    }
    if c != 3 {
        return Err(Error::Shape(format!("source must have 3 channels, got {c}")));
    }
    let g = Graph::<f32>::new();
    let p = params.bind(&g, false);
    let src = g.constant(source.values.clone().reshape([1, c, h, w]));
    let s = KeypointVars::constant(&g, std::slice::from_ref(kp_s));
    let d = KeypointVars::constant(&g, std::slice::from_ref(kp_d));
    let vars = net.forward(&g, &p, src, &s, &d);
    Ok(DenseMotion::from_vars(&g, &vars, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::sparse::sparse_motion;
    use crate::nn::component_rng;
    use proptest::prelude::*;

    fn kp(points: &[[f64; 2]]) -> KeypointSet {
        KeypointSet::with_identity_jacobians(points.to_vec())
    }

    #[test]
    fn one_hot_masks_select_a_single_flow() {
        let s = kp(&[[0.1, -0.2], [0.3, 0.4]]);
        let d = kp(&[[0.0, 0.0], [-0.5, 0.2]]);
        let sm = sparse_motion(&s, &d, 4, 6, 1e-4).unwrap();
        let all = sm.with_background();
        for k in 0..3 {
            let masks = Tensor::from_fn([3, 4, 6], |i| if i / 24 == k { 1.0 } else { 0.0 });
            let flow = compose_dense_flow(&masks, &sm).unwrap();
            let expect = all.narrow0(k, 1).reshape([4, 6, 2]);
            assert_eq!(flow, expect);
        }
    }

    proptest! {
        #[test]
        fn blended_flow_is_a_per_pixel_convex_combination(
            logits in proptest::collection::vec(-3.0f64..3.0, 3 * 3 * 3),
            pts in proptest::collection::vec(-1.0f64..1.0, 8),
        ) {
            let s = kp(&[[pts[0], pts[1]], [pts[2], pts[3]]]);
            let d = kp(&[[pts[4], pts[5]], [pts[6], pts[7]]]);
            let sm = sparse_motion(&s, &d, 3, 3, 1e-4).unwrap();
            let g = Graph::<f64>::new();
            let masks = g.value(g.softmax(g.constant(Tensor::new([3, 3, 3], logits)), 0));
            let flow = compose_dense_flow(&masks, &sm).unwrap();
            let all = sm.with_background();
            for p in 0..9 {
                let sum: f64 = (0..3).map(|k| masks.data()[k * 9 + p]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                for c in 0..2 {
                    let vals: Vec<f64> = (0..3).map(|k| all.data()[(k * 9 + p) * 2 + c]).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let v = flow.data()[p * 2 + c];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn network_outputs_satisfy_the_simplex_and_occlusion_ranges() {
        let cfg = MotionConfig {
            num_keypoints: 3,
            ..MotionConfig::default()
        };
        let mut store = ParamStore::new();
        let net = DenseMotionNet::new(&mut store, "dense", &cfg, &mut component_rng(3, "dense"));
        let src = FeatureMap::new(Tensor::from_fn([3, 8, 8], |i| (i as f32 * 0.3).sin() * 0.5 + 0.5)).unwrap();
        let s = kp(&[[0.1, 0.1], [-0.4, 0.3], [0.5, -0.5]]);
        let d = kp(&[[0.2, 0.0], [-0.3, 0.3], [0.4, -0.6]]);
        let dm = predict_dense_motion(&src, &s, &d, &net, &store).unwrap();
        for p in 0..64 {
            let sum: f32 = (0..4).map(|k| dm.masks.data()[k * 64 + p]).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
        assert!(dm.masks.data().iter().all(|&m| m >= 0.0));
        assert!(dm.occlusion.data().iter().all(|&o| (0.0..=1.0).contains(&o)));
        let sm = sparse_motion(&s, &d, 8, 8, 1e-4).unwrap();
        let expect = compose_dense_flow(&dm.masks.cast::<f64>(), &sm).unwrap();
        assert!(dm.flow.cast::<f64>().max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn identical_keypoints_give_identity_flow_for_any_masks() {
        let cfg = MotionConfig {
            num_keypoints: 2,
            ..MotionConfig::default()
        };
        let mut store = ParamStore::new();
        let net = DenseMotionNet::new(&mut store, "dense", &cfg, &mut component_rng(4, "dense"));
        let src = FeatureMap::new(Tensor::full([3, 8, 8], 0.5f32)).unwrap();
        let s = kp(&[[0.3, -0.1], [-0.6, 0.2]]);
        let dm = predict_dense_motion(&src, &s, &s, &net, &store).unwrap();
        assert!(dm.flow.max_abs_diff(&identity_grid(8, 8)) < 1e-6);
    }
}
