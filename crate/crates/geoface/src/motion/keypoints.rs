use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MotionConfig;
use crate::autograd::{Graph, Var};
use crate::dataio::Image;
use crate::error::{Error, Result};
use crate::motion::warp::identity_grid;
use crate::nn::{Bound, Conv2d, Hourglass, ParamStore};
use crate::tensor::{Real, Tensor};

pub type Mat2 = [[f64; 2]; 2];

pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

/// Landmarks in normalized `(x, y)` coordinates with their local Jacobians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub positions: Vec<[f64; 2]>,
    pub jacobians: Vec<Mat2>,
}

impl KeypointSet {
    pub fn new(positions: Vec<[f64; 2]>, jacobians: Vec<Mat2>) -> Result<Self> {
        if positions.len() != jacobians.len() {
            return Err(Error::Shape(format!(
                "{} positions but {} jacobians",
                positions.len(),
                jacobians.len()
            )));
        }
        let finite = positions.iter().flatten().all(|v| v.is_finite())
            && jacobians.iter().flatten().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numerical("non-finite keypoint".into()));
        }
        Ok(Self { positions, jacobians })
    }

    pub fn with_identity_jacobians(positions: Vec<[f64; 2]>) -> Self {
        let jacobians = vec![IDENTITY; positions.len()];
        Self { positions, jacobians }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `([K, 2], [K, 2, 2])` tensors.
    pub fn to_tensors<T: Real>(&self) -> (Tensor<T>, Tensor<T>) {
        let k = self.len();
        let pos = self.positions.iter().flatten().map(|&v| T::lit(v)).collect();
        let jac = self.jacobians.iter().flatten().flatten().map(|&v| T::lit(v)).collect();
        (Tensor::new([k, 2], pos), Tensor::new([k, 2, 2], jac))
    }

    /// Sample `index` of batched `[N, K, 2]` / `[N, K, 2, 2]` tensors.
    pub fn from_batch<T: Real>(pos: &Tensor<T>, jac: &Tensor<T>, index: usize) -> Self {
        let k = pos.shape()[1];
        let p = &pos.data()[index * k * 2..(index + 1) * k * 2];
        let j = &jac.data()[index * k * 4..(index + 1) * k * 4];
        Self {
            positions: p.chunks_exact(2).map(|c| [c[0].as_f64(), c[1].as_f64()]).collect(),
            jacobians: j
                .chunks_exact(4)
                .map(|c| [[c[0].as_f64(), c[1].as_f64()], [c[2].as_f64(), c[3].as_f64()]])
                .collect(),
        }
    }
}

/// Batched keypoints on a graph: positions `[N, K, 2]`, Jacobians `[N, K, 2, 2]`.
#[derive(Clone, Copy, Debug)]
pub struct KeypointVars {
    pub positions: Var,
    pub jacobians: Var,
}

impl KeypointVars {
    pub fn constant<T: Real>(g: &Graph<T>, sets: &[KeypointSet]) -> Self {
        let (pos, jac): (Vec<_>, Vec<_>) = sets.iter().map(|s| s.to_tensors::<T>()).unzip();
        Self {
            positions: g.constant(Tensor::stack(&pos)),
            jacobians: g.constant(Tensor::stack(&jac)),
        }
    }

    pub fn to_sets<T: Real>(&self, g: &Graph<T>) -> Vec<KeypointSet> {
        let pos = g.value(self.positions);
        let jac = g.value(self.jacobians);
        (0..pos.shape()[0])
            .map(|i| KeypointSet::from_batch(&pos, &jac, i))
            .collect()
    }

    pub fn detach<T: Real>(&self, g: &Graph<T>) -> Self {
        Self {
            positions: g.detach(self.positions),
            jacobians: g.detach(self.jacobians),
        }
    }
}

/// Hourglass heatmap regressor: soft-argmax positions and heatmap-weighted
/// Jacobians, evaluated at the motion grid resolution.
#[derive(Clone, Debug)]
pub struct KeypointDetector {
    hourglass: Hourglass,
    heat_head: Conv2d,
    jacobian_head: Option<Conv2d>,
    num_kp: usize,
    temperature: f64,
}

impl KeypointDetector {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &MotionConfig, rng: &mut impl Rng) -> Self {
        let hourglass = Hourglass::new(
            store,
            &format!("{name}.hourglass"),
            3,
            cfg.block_expansion,
            cfg.num_blocks,
            cfg.max_features,
            rng,
        );
        let k = cfg.num_keypoints;
        let heat_head = Conv2d::new(store, &format!("{name}.heat"), hourglass.out_channels, k, 3, 1, true, rng);
        let jacobian_head = cfg.estimate_jacobian.then(|| {
            let conv = Conv2d::new(
                store,
                &format!("{name}.jacobian"),
                hourglass.out_channels,
                4 * k,
                3,
                1,
                true,
                rng,
            );
            // start from identity Jacobians everywhere
            store.get_mut(conv.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
            let bias = conv.bias.expect("jacobian head has a bias");
            for (i, v) in store.get_mut(bias).data_mut().iter_mut().enumerate() {
                *v = if i % 4 == 0 || i % 4 == 3 { 1.0 } else { 0.0 };
            }
            conv
        });
        Self {
            hourglass,
            heat_head,
            jacobian_head,
            num_kp: k,
            temperature: cfg.temperature,
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.num_kp
    }

    /// `image: [N, 3, S, S]`; detection runs on the image pooled to `grid_size`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, image: Var, grid_size: usize) -> KeypointVars {
        let n = g.shape(image)[0];
        let (k, hw) = (self.num_kp, grid_size * grid_size);
        let x = g.downsample_to(image, grid_size);
        let feat = self.hourglass.forward(g, p, x);
        let logits = self.heat_head.forward(g, p, feat);
        let logits = g.scale(g.reshape(logits, &[n, k, hw]), 1.0 / self.temperature);
        let heat = g.softmax(logits, 2);
        let grid = g.constant(identity_grid::<T>(grid_size, grid_size).reshape([1, 1, hw, 2]));
        let positions = g.sum_axis(g.mul(g.reshape(heat, &[n, k, hw, 1]), grid), 2, false);
        let jacobians = match &self.jacobian_head {
            Some(head) => {
                let jmap = g.reshape(head.forward(g, p, feat), &[n, k, 4, hw]);
                let weighted = g.mul(jmap, g.reshape(heat, &[n, k, 1, hw]));
                g.reshape(g.sum_axis(weighted, 3, false), &[n, k, 2, 2])
            }
            None => {
                let eye = Tensor::from_fn([n, k, 2, 2], |i| match i % 4 {
                    0 | 3 => T::one(),
                    _ => T::zero(),
                });
                g.constant(eye)
            }
        };
        KeypointVars { positions, jacobians }
    }
}

/// Runs the detector on a single image.
pub fn detect_keypoints(
    image: &Image,
    detector: &KeypointDetector,
    params: &ParamStore,
    grid_size: usize,
) -> Result<KeypointSet> {
    let g = Graph::<f32>::new();
    let p = params.bind(&g, false);
    let x = g.constant(image.to_chw().reshape([1, 3, image.height(), image.width()]));
    let kp = detector.forward(&g, &p, x, grid_size);
    if !g.value(kp.positions).all_finite() || !g.value(kp.jacobians).all_finite() {
        return Err(Error::Numerical("keypoint detector produced non-finite output".into()));
    }
    Ok(kp.to_sets(&g).remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::component_rng;

    fn detector(cfg: &MotionConfig) -> (KeypointDetector, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = component_rng(1, "kp");
        let det = KeypointDetector::new(&mut store, "kp", cfg, &mut rng);
        (det, store)
    }

    #[test]
    fn positions_stay_in_the_unit_square_and_are_deterministic() {
        let cfg = MotionConfig::default();
        let (det, store) = detector(&cfg);
        let img = Image::from_fn(32, 32, |y, x| [((x * y) % 7) as f32 / 7.0, 0.5, (y % 3) as f32 / 3.0]);
        let a = detect_keypoints(&img, &det, &store, 8).unwrap();
        let b = detect_keypoints(&img, &det, &store, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert!(a.positions.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        // jacobian head starts at the identity
        for j in &a.jacobians {
            assert!((j[0][0] - 1.0).abs() < 1e-6 && j[0][1].abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_jacobians_are_identity() {
        let cfg = MotionConfig {
            estimate_jacobian: false,
            ..MotionConfig::default()
        };
        let (det, store) = detector(&cfg);
        let kp = detect_keypoints(&Image::constant(16, 16, [0.2; 3]), &det, &store, 4).unwrap();
        assert!(kp.jacobians.iter().all(|j| *j == IDENTITY));
    }
}
