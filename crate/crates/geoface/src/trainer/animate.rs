use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::dataio::Image;
use crate::error::{Error, Result};
use crate::motion::keypoints::Mat2;
use crate::motion::{invert_jacobian, KeypointSet, KeypointVars};
use crate::tensor::Tensor;

use super::TrainState;

/// How driving keypoints are mapped onto the source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    /// Driving keypoints are used as they are.
    Absolute,
    /// The motion of each driving frame relative to the first one is applied
    /// to the source keypoints.
    #[default]
    Relative,
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(Self::Absolute),
            "relative" => Ok(Self::Relative),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected absolute or relative)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnimationRequest {
    pub source: Image,
    pub driving: Vec<Image>,
    pub mode: TransferMode,
}

#[derive(Clone, Debug)]
pub struct Animation {
    pub frames: Vec<Image>,
    pub source_keypoints: KeypointSet,
    pub driving_keypoints: Vec<KeypointSet>,
    /// Keypoints actually used to drive each frame.
    pub transferred: Vec<KeypointSet>,
    /// Light surviving past the last sample of each ray, `[G, G]` per frame.
    pub transmittance: Vec<Tensor<f32>>,
}

fn matmul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Keypoints that drive the source for one driving frame.
///
/// Relative mode: `p = p_s + (p_t − p_0)` and `J = J_t · J_0⁻¹ · J_s`.
pub fn transfer_keypoints(
    source: &KeypointSet,
    driving: &KeypointSet,
    first: &KeypointSet,
    mode: TransferMode,
    jacobian_eps: f64,
) -> Result<KeypointSet> {
    if mode == TransferMode::Absolute {
        return Ok(driving.clone());
    }
    if source.len() != driving.len() || first.len() != driving.len() {
        return Err(Error::Shape("keypoint sets differ in size".into()));
    }
    let mut positions = Vec::with_capacity(source.len());
    let mut jacobians = Vec::with_capacity(source.len());
    for k in 0..source.len() {
        let (s, d, f) = (source.positions[k], driving.positions[k], first.positions[k]);
        positions.push([s[0] + (d[0] - f[0]), s[1] + (d[1] - f[1])]);
        let inv = invert_jacobian(first.jacobians[k], jacobian_eps)?.value;
        jacobians.push(matmul(&matmul(&driving.jacobians[k], &inv), &source.jacobians[k]));
    }
    KeypointSet::new(positions, jacobians)
}

/// Animates `request.source` with the motion of `request.driving`; one output
/// frame per driving frame.
pub fn animate(state: &TrainState, request: &AnimationRequest) -> Result<Animation> {
    if request.driving.is_empty() {
        return Err(Error::EmptyDriving);
    }
    let s = state.config.image_size;
    for im in std::iter::once(&request.source).chain(&request.driving) {
        if im.height() != s || im.width() != s {
            return Err(Error::Shape(format!(
                "frames must be {s}x{s} (preprocess them first), got {}x{}",
                im.height(),
                im.width()
            )));
        }
    }
    let gen = &state.generator;
    let detect_all = |images: &[&Image]| -> Vec<KeypointSet> {
        let g = Graph::<f32>::new();
        let p = state.gen_params.bind(&g, false);
        let x = g.constant(crate::dataio::batch_tensor(images));
        gen.detect(&g, &p, x).to_sets(&g)
    };
    let source_keypoints = detect_all(&[&request.source]).remove(0);
    let driving_refs: Vec<_> = request.driving.iter().collect();
    let driving_keypoints = detect_all(&driving_refs);

    let mut frames = Vec::with_capacity(request.driving.len());
    let mut transferred = Vec::with_capacity(request.driving.len());
    let mut transmittance = Vec::with_capacity(request.driving.len());
    for kp in &driving_keypoints {
        let kp_new = transfer_keypoints(
            &source_keypoints,
            kp,
            &driving_keypoints[0],
            request.mode,
            state.config.jacobian_eps,
        )?;
        let g = Graph::<f32>::new();
        let p = state.gen_params.bind(&g, false);
        let x = g.constant(request.source.to_chw().reshape([1, 3, s, s]));
        let kp_s = KeypointVars::constant(&g, std::slice::from_ref(&source_keypoints));
        let kp_d = KeypointVars::constant(&g, std::slice::from_ref(&kp_new));
        let out = gen.generate(&g, &p, x, &kp_s, &kp_d);
        let pred = g.value(out.prediction);
        if !pred.all_finite() {
            return Err(Error::Numerical("non-finite generated frame".into()));
        }
        frames.push(Image::from_chw(&(*pred).clone().reshape([3, s, s])));
        let density = g.value(out.density);
        let (_, d, h, w) = density.dims4();
        let tau = Tensor::from_fn([h, w], |i| {
            let optical: f32 = (0..d).map(|j| density.data()[j * h * w + i]).sum();
            (-optical).exp()
        });
        transmittance.push(tau);
        transferred.push(kp_new);
    }
    Ok(Animation {
        frames,
        source_keypoints,
        driving_keypoints,
        transferred,
        transmittance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::keypoints::IDENTITY;
    use crate::synthetic::BlobCorpus;
    use crate::trainer::TrainConfig;

    #[test]
    fn relative_transfer_of_a_still_sequence_is_the_source() {
        let s = KeypointSet::new(vec![[0.1, -0.2]], vec![[[1.1, 0.2], [0.0, 0.9]]]).unwrap();
        let d = KeypointSet::new(vec![[0.5, 0.5]], vec![[[0.8, 0.1], [-0.1, 1.2]]]).unwrap();
        let t = transfer_keypoints(&s, &d, &d, TransferMode::Relative, 1e-4).unwrap();
        assert_eq!(t.positions, s.positions);
        for (a, b) in t.jacobians[0].iter().flatten().zip(s.jacobians[0].iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        let moved = KeypointSet::new(vec![[0.6, 0.3]], vec![IDENTITY]).unwrap();
        let t = transfer_keypoints(&s, &moved, &d, TransferMode::Absolute, 1e-4).unwrap();
        assert_eq!(t, moved);
    }

    #[test]
    fn output_count_and_still_driving() {
        let st = TrainState::new(TrainConfig::small()).unwrap();
        let clips = BlobCorpus {
            clips: 1,
            frames_per_clip: 2,
            ..Default::default()
        }
        .generate();
        let frames = &clips.clips[0].1;
        let req = AnimationRequest {
            source: frames[0].clone(),
            driving: vec![frames[1].clone(); 3],
            mode: TransferMode::Relative,
        };
        let out = animate(&st, &req).unwrap();
        assert_eq!(out.frames.len(), 3);
        assert_eq!(out.frames[0], out.frames[2]);
        assert!(out.transmittance[0].data().iter().all(|&t| (0.0..=1.0).contains(&t)));

        let empty = AnimationRequest {
            driving: Vec::new(),
            ..req
        };
        assert!(matches!(animate(&st, &empty).unwrap_err(), Error::EmptyDriving));
    }
}
