//! Frozen, differentiable depth extraction and normals derived from depth.
//!
//! Three interchangeable depth backends are provided:
//!
//! * `baseline`: smoothed inverse luminance, needs no weights;
//! * `oracle`: returns the exact depth of an analytic [`SceneSpec`];
//! * `external`: a small convolutional depth network whose weights are read
//!   from an archive (see [`GeometryExtractor::external_template`] for the
//!   tensor names and shapes).
//!
//! Normals always come from [`normal_from_depth`], so every backend yields
//! the same kind of maps.

pub mod normals;
pub mod scene;

use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use normals::normal_from_depth;
pub use scene::{render_synthetic_scene, SceneSpec, Surface};

use crate::archive::Archive;
use crate::autograd::{Graph, Var};
use crate::dataio::Image;
use crate::error::{Error, Result};
use crate::nn::{component_rng, Conv2d, ParamStore};
use crate::tensor::{Real, Tensor};

/// Depth `[H, W]` (larger is nearer) and unit normals `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryMaps {
    pub depth: Tensor<f64>,
    pub normal: Tensor<f64>,
}

impl GeometryMaps {
    pub fn new(depth: Tensor<f64>, normal: Tensor<f64>) -> Result<Self> {
        let (h, w) = match depth.shape() {
            [h, w] => (*h, *w),
            s => return Err(Error::Shape(format!("depth must be H×W, got {s:?}"))),
        };
        if normal.shape() != [h, w, 3] {
            return Err(Error::Shape(format!("normal map {:?} does not match depth {h}x{w}", normal.shape())));
        }
        if depth.data().iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::Geometry("depth must be finite and strictly positive".into()));
        }
        for n in normal.data().chunks_exact(3) {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if (len - 1.0).abs() > 1e-5 || !(n[2] > 0.0) {
                return Err(Error::Geometry(format!("normal {n:?} is not a camera-facing unit vector")));
            }
        }
        Ok(Self { depth, normal })
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }
}

/// Backend selector as written in configs and on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Baseline,
    Oracle,
    External,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Oracle => "oracle",
            Self::External => "external",
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "oracle" => Ok(Self::Oracle),
            "external" => Ok(Self::External),
            other => Err(Error::Config(format!(
                "unknown geometry backend {other:?} (expected baseline, oracle or external)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
enum Backend {
    Baseline { relief: f64 },
    Oracle { spec: SceneSpec, depth: Tensor<f64> },
    External { conv1: Conv2d, conv2: Conv2d },
}

/// Channels of the external depth network's hidden layer.
pub const EXTERNAL_HIDDEN: usize = 8;
/// Added to the external network's softplus output so depth stays positive.
pub const EXTERNAL_DEPTH_OFFSET: f64 = 0.1;

/// Frozen depth extractor. Parameters are bound as graph constants, so
/// gradients reach the input image but never the extractor itself.
#[derive(Clone, Debug)]
pub struct GeometryExtractor {
    backend: Backend,
    params: ParamStore,
    pub pixel_spacing: f64,
}

fn gaussian_taps() -> Vec<f32> {
    let raw: Vec<f64> = (-2..=2).map(|k: i32| (-(k * k) as f64 / 2.0).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / s) as f32).collect()
}

impl GeometryExtractor {
    /// Smoothed inverse luminance: `depth = 1 + relief·(1 − blur(L))` with
    /// `relief = image_size / 4` pixel units.
    pub fn baseline(image_size: usize) -> Self {
        let mut params = ParamStore::new();
        params.add("geometry.luminance", Tensor::new([1, 3, 1, 1], vec![0.299, 0.587, 0.114]));
        params.add("geometry.blur", Tensor::new([5], gaussian_taps()));
        Self {
            backend: Backend::Baseline {
                relief: image_size as f64 / 4.0,
            },
            params,
            pixel_spacing: 1.0,
        }
    }

    /// Ground-truth depth of `spec`, whatever the input image.
    pub fn oracle(spec: SceneSpec) -> Result<Self> {
        let (_, maps) = render_synthetic_scene(&spec)?;
        Ok(Self {
            backend: Backend::Oracle { spec, depth: maps.depth },
            params: ParamStore::new(),
            pixel_spacing: 1.0,
        })
    }

    /// Loads external depth-network weights.
    pub fn external(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Geometry(format!(
                "external depth weights not found at {}; write a compatible archive \
                 (tensors geometry.depth.conv1.*, geometry.depth.conv2.*) or use \
                 --geometry-backend baseline",
                path.display()
            )));
        }
        let archive = Archive::load(path)?;
        let (mut store, conv1, conv2) = Self::external_layout(0);
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = archive.expect(&name, &shape)?.clone();
        }
        Ok(Self {
            backend: Backend::External { conv1, conv2 },
            params: store,
            pixel_spacing: 1.0,
        })
    }

    fn external_layout(seed: u64) -> (ParamStore, Conv2d, Conv2d) {
        let mut store = ParamStore::new();
        let mut rng = component_rng(seed, "geometry.depth");
        let conv1 = Conv2d::new(&mut store, "geometry.depth.conv1", 3, EXTERNAL_HIDDEN, 3, 1, true, &mut rng);
        let conv2 = Conv2d::new(&mut store, "geometry.depth.conv2", EXTERNAL_HIDDEN, 1, 3, 1, true, &mut rng);
        (store, conv1, conv2)
    }

    /// Randomly initialized weights in the layout [`GeometryExtractor::external`] expects.
    pub fn external_template(seed: u64) -> Archive {
        let (store, _, _) = Self::external_layout(seed);
        let mut archive = Archive::new();
        archive
            .metadata
            .insert("kind".into(), serde_json::Value::from("external-depth-weights"));
        for (name, t) in store.iter() {
            archive.push(name, t.clone());
        }
        archive
    }

    pub fn from_kind(kind: BackendKind, image_size: usize, weights: Option<&Path>) -> Result<Self> {
        match kind {
            BackendKind::Baseline => Ok(Self::baseline(image_size)),
            BackendKind::External => {
                let default = PathBuf::from("geometry_weights.bin");
                Self::external(weights.unwrap_or(&default))
            }
            BackendKind::Oracle => Err(Error::Config(
                "the oracle backend needs an analytic scene and is only available \
                 programmatically; use baseline or external"
                    .into(),
            )),
        }
    }

    pub fn kind(&self) -> BackendKind {
        match self.backend {
            Backend::Baseline { .. } => BackendKind::Baseline,
            Backend::Oracle { .. } => BackendKind::Oracle,
            Backend::External { .. } => BackendKind::External,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Hash of the backend identity and every frozen parameter.
    pub fn fingerprint(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.kind().as_str());
        h.update(self.params.fingerprint());
        match &self.backend {
            Backend::Baseline { relief } => h.update(relief.to_le_bytes()),
            Backend::Oracle { spec, .. } => h.update(serde_json::to_vec(spec).expect("spec serializes")),
            Backend::External { .. } => {}
        }
        h.update(self.pixel_spacing.to_le_bytes());
        h.finalize().into()
    }

    /// Depth `[N, 1, H, W]` of images `[N, 3, H, W]`.
    pub fn depth<T: Real>(&self, g: &Graph<T>, images: Var) -> Var {
        let p = self.params.bind(g, false);
        let (n, _, h, w) = g.value(images).dims4();
        match &self.backend {
            Backend::Baseline { relief } => {
                let lum_w = p[self.params.id("geometry.luminance").expect("luminance weights")];
                let taps = self.params.get(self.params.id("geometry.blur").expect("blur taps"));
                let taps: Vec<T> = taps.data().iter().map(|&v| T::lit(v as f64)).collect();
                let lum = g.conv2d(images, lum_w, None, 1, 0);
                let smooth = g.separable_blur(lum, taps);
                g.add_scalar(g.scale(smooth, -relief), 1.0 + relief)
            }
            Backend::Oracle { depth, .. } => {
                assert_eq!(depth.shape(), [h, w], "oracle scene size does not match the images");
                let d = depth.cast::<T>().reshape([1, 1, h, w]);
                // keep the image in the graph with a zero-gradient path
                let zero = g.scale(g.sum_axis(images, 1, true), 0.0);
                g.add(zero, g.broadcast_to(g.constant(d), &[n, 1, h, w]))
            }
            Backend::External { conv1, conv2 } => {
                let x = g.relu(conv1.forward(g, &p, images));
                g.add_scalar(g.softplus(conv2.forward(g, &p, x)), EXTERNAL_DEPTH_OFFSET)
            }
        }
    }

    /// Differentiable `(depth [N, 1, H, W], normals [N, 3, H, W])`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, images: Var) -> (Var, Var) {
        let depth = self.depth(g, images);
        let normals = g.normals_from_depth(depth, self.pixel_spacing);
        (depth, normals)
    }

    /// Geometry of a single image.
    pub fn extract(&self, image: &Image) -> Result<GeometryMaps> {
        let (h, w) = (image.height(), image.width());
        if let Backend::Oracle { depth, .. } = &self.backend {
            if depth.shape() != [h, w] {
                return Err(Error::Shape(format!(
                    "oracle scene is {:?}, image is {h}x{w}",
                    depth.shape()
                )));
            }
        }
        let g = Graph::<f64>::new();
        let x = g.constant(image.to_chw().cast::<f64>().reshape([1, 3, h, w]));
        let d = g.value(self.depth(&g, x));
        if !d.all_finite() {
            return Err(Error::Numerical("non-finite depth".into()));
        }
        let depth = (*d).clone().reshape([h, w]);
        let normal = normal_from_depth(&depth, self.pixel_spacing)?;
        GeometryMaps::new(depth, normal)
    }
}

impl<T: Real> Graph<T> {
    /// Separable convolution of `[N, C, H, W]` with symmetric `taps` along
    /// both axes, edges clamped.
    pub fn separable_blur(&self, x: Var, taps: Vec<T>) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let r = taps.len() / 2;
        let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        let taps = Rc::new(taps);
        let pass = {
            let taps = taps.clone();
            move |src: &[T], dst: &mut [T], adjoint: bool| {
                // horizontal then vertical; the adjoint runs the transposes in reverse order
                let mut tmp = vec![T::zero(); h * w];
                let horiz = |s: &[T], d: &mut [T]| {
                    for i in 0..h {
                        for j in 0..w {
                            for (k, &t) in taps.iter().enumerate() {
                                let jj = clamp(j as isize + k as isize - r as isize, w);
                                if adjoint {
                                    d[i * w + jj] += t * s[i * w + j];
                                } else {
                                    d[i * w + j] += t * s[i * w + jj];
                                }
                            }
                        }
                    }
                };
                let vert = |s: &[T], d: &mut [T]| {
                    for i in 0..h {
                        for j in 0..w {
                            for (k, &t) in taps.iter().enumerate() {
                                let ii = clamp(i as isize + k as isize - r as isize, h);
                                if adjoint {
                                    d[ii * w + j] += t * s[i * w + j];
                                } else {
                                    d[i * w + j] += t * s[ii * w + j];
                                }
                            }
                        }
                    }
                };
                if adjoint {
                    vert(src, &mut tmp);
                    horiz(&tmp, dst);
                } else {
                    horiz(src, &mut tmp);
                    vert(&tmp, dst);
                }
            }
        };
        let pass = Rc::new(pass);
        let hw = h * w;
        let mut out = vec![T::zero(); xv.len()];
        for p in 0..n * c {
            pass(&xv.data()[p * hw..(p + 1) * hw], &mut out[p * hw..(p + 1) * hw], false);
        }
        let value = Rc::new(Tensor::new([n, c, h, w], out));
        self.push_op(value, &[x], move |g| {
            let mut gx = vec![T::zero(); g.len()];
            for p in 0..n * c {
                pass(&g.data()[p * hw..(p + 1) * hw], &mut gx[p * hw..(p + 1) * hw], true);
            }
            vec![Some(Tensor::new([n, c, h, w], gx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::check_gradient;

    #[test]
    fn baseline_on_constant_gray_is_flat() {
        let ex = GeometryExtractor::baseline(16);
        let maps = ex.extract(&Image::constant(16, 16, [0.4; 3])).unwrap();
        let d0 = maps.depth.data()[0];
        assert!(maps.depth.data().iter().all(|&d| (d - d0).abs() < 1e-12));
        assert!((d0 - (1.0 + 4.0 * 0.6)).abs() < 1e-6);
    }

    #[test]
    fn oracle_reproduces_scene_depth() {
        let spec = SceneSpec::hemisphere(24);
        let (img, truth) = render_synthetic_scene(&spec).unwrap();
        let ex = GeometryExtractor::oracle(spec).unwrap();
        let maps = ex.extract(&img).unwrap();
        assert!(maps.depth.max_abs_diff(&truth.depth) <= 1e-5);
    }

    #[test]
    fn blur_preserves_constants_and_has_exact_adjoint() {
        let g = Graph::<f64>::new();
        let taps: Vec<f64> = gaussian_taps().iter().map(|&v| v as f64).collect();
        let y = g.value(g.separable_blur(g.constant(Tensor::full([1, 1, 4, 6], 2.5)), taps.clone()));
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
        let x = Tensor::from_fn([1, 1, 4, 5], |i| (i as f64 * 0.8).sin());
        let probe = Tensor::from_fn([1, 1, 4, 5], |i| 1.0 + (i as f64 * 0.3).cos());
        check_gradient(
            &x,
            move |g, x| g.sum_all(g.mul(g.separable_blur(x, taps.clone()), g.constant(probe.clone()))),
            1e-5,
            1e-8,
        );
    }

    #[test]
    fn baseline_depth_is_differentiable_in_the_image() {
        let ex = GeometryExtractor::baseline(8);
        let x = Tensor::from_fn([1, 3, 8, 8], |i| 0.5 + 0.3 * (i as f64 * 0.37).sin());
        check_gradient(&x, move |g, x| g.mean_all(ex.depth(g, x)), 1e-5, 1e-3);
    }

    #[test]
    fn external_weights_round_trip_and_missing_file_hint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let err = GeometryExtractor::external(&path).unwrap_err().to_string();
        assert!(err.contains("--geometry-backend baseline"), "{err}");
        GeometryExtractor::external_template(3).save(&path).unwrap();
        let ex = GeometryExtractor::external(&path).unwrap();
        let maps = ex.extract(&Image::from_fn(8, 8, |y, x| [x as f32 / 8.0, y as f32 / 8.0, 0.5])).unwrap();
        assert!(maps.depth.data().iter().all(|&d| d >= EXTERNAL_DEPTH_OFFSET));
    }

    #[test]
    fn fingerprint_depends_on_backend() {
        assert_eq!(GeometryExtractor::baseline(8).fingerprint(), GeometryExtractor::baseline(8).fingerprint());
        assert_ne!(GeometryExtractor::baseline(8).fingerprint(), GeometryExtractor::baseline(16).fingerprint());
    }
}
