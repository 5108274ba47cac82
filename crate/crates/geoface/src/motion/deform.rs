//! Random thin-plate-spline deformations and the keypoint equivariance loss.
//!
//! A [`Deformation`] is stored as the backward map `W` used to resample the
//! image: `warped(z) = image(W(z))`. Keypoints of the warped image therefore
//! map back onto keypoints of the original through `W` itself, so the loss
//! never needs an inverse transform.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::keypoints::{KeypointDetector, KeypointVars, Mat2};
use super::warp::identity_grid;
use crate::autograd::{Graph, Var};
use crate::dataio::Image;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationConfig {
    /// Control points per side of the spline grid.
    pub control_points: usize,
    /// Relative scale jitter, `±max_scale`.
    pub max_scale: f64,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    /// Standard deviation of the spline weights.
    pub tps_sigma: f64,
    /// Samples whose local Jacobian determinant drops below this are redrawn.
    pub min_det: f64,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self {
            control_points: 5,
            max_scale: 0.15,
            max_rotation_deg: 15.0,
            max_translation: 0.05,
            tps_sigma: 0.005,
            min_det: 0.2,
        }
    }
}

/// `W(z) = A·z + b + Σ_i w_i·φ(|z − c_i|)` with `φ(r) = r² ln r`.
#[derive(Clone, Debug, PartialEq)]
pub struct Deformation {
    pub affine: Mat2,
    pub offset: [f64; 2],
    pub centers: Vec<[f64; 2]>,
    pub weights: Vec<[f64; 2]>,
}

impl Deformation {
    pub fn identity() -> Self {
        Self {
            affine: [[1.0, 0.0], [0.0, 1.0]],
            offset: [0.0, 0.0],
            centers: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Moves image content by `+t`.
    pub fn translation(t: [f64; 2]) -> Self {
        Self {
            offset: [-t[0], -t[1]],
            ..Self::identity()
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn random(rng: &mut impl Rng, cfg: &DeformationConfig) -> Self {
        for _ in 0..64 {
            let d = Self::sample(rng, cfg);
            if d.min_det_on_grid(9) > cfg.min_det {
                return d;
            }
        }
        log::warn!("no well-conditioned deformation drawn; using identity");
        Self::identity()
    }

    fn sample(rng: &mut impl Rng, cfg: &DeformationConfig) -> Self {
        let scale = 1.0 + rng.gen_range(-cfg.max_scale..=cfg.max_scale);
        let theta = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians();
        let (s, c) = theta.sin_cos();
        let affine = [[scale * c, -scale * s], [scale * s, scale * c]];
        let offset = [
            rng.gen_range(-cfg.max_translation..=cfg.max_translation),
            rng.gen_range(-cfg.max_translation..=cfg.max_translation),
        ];
        let grid: Tensor<f64> = identity_grid(cfg.control_points, cfg.control_points);
        let centers: Vec<[f64; 2]> = grid.data().chunks_exact(2).map(|p| [p[0], p[1]]).collect();
        let normal = Normal::new(0.0, cfg.tps_sigma).expect("valid sigma");
        let weights = centers.iter().map(|_| [normal.sample(rng), normal.sample(rng)]).collect();
        Self {
            affine,
            offset,
            centers,
            weights,
        }
    }

    pub fn apply(&self, z: [f64; 2]) -> [f64; 2] {
        let a = &self.affine;
        let mut out = [
            a[0][0] * z[0] + a[0][1] * z[1] + self.offset[0],
            a[1][0] * z[0] + a[1][1] * z[1] + self.offset[1],
        ];
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let r2 = (z[0] - c[0]).powi(2) + (z[1] - c[1]).powi(2);
            if r2 > 0.0 {
                let phi = 0.5 * r2 * r2.ln();
                out[0] += w[0] * phi;
                out[1] += w[1] * phi;
            }
        }
        out
    }

    /// `∂W/∂z` at `z`, rows are output coordinates.
    pub fn jacobian(&self, z: [f64; 2]) -> Mat2 {
        let mut j = self.affine;
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let d = [z[0] - c[0], z[1] - c[1]];
            let r2 = d[0] * d[0] + d[1] * d[1];
            if r2 > 0.0 {
                // ∇(r² ln r) = (2 ln r + 1)(z − c)
                let f = r2.ln() + 1.0;
                for (row, wr) in j.iter_mut().zip(w) {
                    row[0] += wr * f * d[0];
                    row[1] += wr * f * d[1];
                }
            }
        }
        j
    }

    fn min_det_on_grid(&self, n: usize) -> f64 {
        let grid: Tensor<f64> = identity_grid(n, n);
        grid.data()
            .chunks_exact(2)
            .map(|p| {
                let j = self.jacobian([p[0], p[1]]);
                j[0][0] * j[1][1] - j[0][1] * j[1][0]
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// `[H, W, 2]` sampling grid `W(z)` over the pixel centers.
    pub fn sampling_grid<T: Real>(&self, h: usize, w: usize) -> Tensor<T> {
        let base: Tensor<f64> = identity_grid(h, w);
        let mut data = Vec::with_capacity(base.len());
        for p in base.data().chunks_exact(2) {
            let q = self.apply([p[0], p[1]]);
            data.push(T::lit(q[0]));
            data.push(T::lit(q[1]));
        }
        Tensor::new([h, w, 2], data)
    }
}

impl<T: Real> Graph<T> {
    /// Resamples each image `[N, C, H, W]` with its own deformation.
    pub fn deform_images(&self, images: Var, deformations: &[Deformation]) -> Var {
        let (n, _, h, w) = self.value(images).dims4();
        assert_eq!(n, deformations.len(), "one deformation per image");
        if deformations.iter().all(Deformation::is_identity) {
            return images;
        }
        let grids: Vec<_> = deformations.iter().map(|d| d.sampling_grid::<T>(h, w)).collect();
        self.grid_sample(images, self.constant(Tensor::stack(&grids)))
    }

    /// Applies each sample's deformation to its `[K, 2]` points.
    pub fn deform_points(&self, points: Var, deformations: &[Deformation]) -> Var {
        let pv = self.value(points);
        let (n, k) = (pv.shape()[0], pv.shape()[1]);
        assert_eq!(n, deformations.len(), "one deformation per sample");
        let mut out = Vec::with_capacity(pv.len());
        let mut jac = Vec::with_capacity(n * k);
        for (s, d) in deformations.iter().enumerate() {
            for p in pv.data()[s * k * 2..(s + 1) * k * 2].chunks_exact(2) {
                let z = [p[0].as_f64(), p[1].as_f64()];
                let q = d.apply(z);
                out.push(T::lit(q[0]));
                out.push(T::lit(q[1]));
                jac.push(d.jacobian(z));
            }
        }
        let value = Rc::new(Tensor::new(pv.shape().to_vec(), out));
        self.push_op(value, &[points], move |g| {
            let mut gx = Vec::with_capacity(g.len());
            for (j, gp) in jac.iter().zip(g.data().chunks_exact(2)) {
                let (g0, g1) = (gp[0].as_f64(), gp[1].as_f64());
                gx.push(T::lit(j[0][0] * g0 + j[1][0] * g1));
                gx.push(T::lit(j[0][1] * g0 + j[1][1] * g1));
            }
            vec![Some(Tensor::new(g.shape().to_vec(), gx))]
        })
    }

    /// `[N, K, 2, 2]` constant Jacobians of each deformation at `points`.
    pub fn deformation_jacobians(&self, points: Var, deformations: &[Deformation]) -> Var {
        let pv = self.value(points);
        let (n, k) = (pv.shape()[0], pv.shape()[1]);
        let mut data = Vec::with_capacity(n * k * 4);
        for (s, d) in deformations.iter().enumerate() {
            for p in pv.data()[s * k * 2..(s + 1) * k * 2].chunks_exact(2) {
                let j = d.jacobian([p[0].as_f64(), p[1].as_f64()]);
                data.extend(j.iter().flatten().map(|&v| T::lit(v)));
            }
        }
        self.constant(Tensor::new([n, k, 2, 2], data))
    }
}

/// Position and Jacobian consistency terms between keypoints `kp` of the
/// original images and `kp_t` of the deformed ones.
pub fn equivariance_terms<T: Real>(
    g: &Graph<T>,
    kp: &KeypointVars,
    kp_t: &KeypointVars,
    deformations: &[Deformation],
) -> (Var, Var) {
    let mapped = g.deform_points(kp_t.positions, deformations);
    let position = g.mean_all(g.abs(g.sub(kp.positions, mapped)));
    let jw = g.deformation_jacobians(kp_t.positions, deformations);
    let composed = g.matmul2x2(jw, kp_t.jacobians);
    let jacobian = g.mean_all(g.abs(g.sub(kp.jacobians, composed)));
    (position, jacobian)
}

/// Position term plus Jacobian term for one image under `transform`.
pub fn equivariance_loss(
    image: &Image,
    detector: &KeypointDetector,
    params: &ParamStore,
    transform: &Deformation,
    grid_size: usize,
) -> Result<f64> {
    let g = Graph::<f32>::new();
    let p: Bound = params.bind(&g, false);
    let x = g.constant(image.to_chw().reshape([1, 3, image.height(), image.width()]));
    let deformations = std::slice::from_ref(transform);
    let xt = g.deform_images(x, deformations);
    let kp = detector.forward(&g, &p, x, grid_size);
    let kp_t = detector.forward(&g, &p, xt, grid_size);
    let (pos, jac) = equivariance_terms(&g, &kp, &kp_t, deformations);
    let loss = g.value(pos).item().as_f64() + g.value(jac).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite equivariance loss".into()));
    }
    Ok(loss)
}
