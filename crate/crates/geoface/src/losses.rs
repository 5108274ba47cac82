//! Reconstruction and total objectives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataio::Image;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Frozen feature network used by [`perceptual_loss`].
pub trait FeatureExtractor {
    fn id(&self) -> &str;

    /// Stage activations of `x: [N, 3, H, W]`.
    fn stages<T: Real>(&self, g: &Graph<T>, x: Var) -> Vec<Var>;
}

/// The image itself as the only stage, which turns the perceptual loss into a
/// multi-scale L1.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn id(&self) -> &str {
        "identity"
    }

    fn stages<T: Real>(&self, _g: &Graph<T>, x: Var) -> Vec<Var> {
        vec![x]
    }
}

/// Pyramid levels at which features are compared: 1, ½, ¼.
pub const PYRAMID_LEVELS: usize = 3;

/// `Σ_scales Σ_stages mean|φ(x) − φ(y)|`.
pub fn perceptual_loss_var<T: Real, E: FeatureExtractor>(g: &Graph<T>, x: Var, y: Var, extractor: &E) -> Var {
    assert_eq!(g.shape(x), g.shape(y), "perceptual loss inputs differ in shape");
    let (mut a, mut b) = (x, y);
    let mut total: Option<Var> = None;
    for level in 0..PYRAMID_LEVELS {
        if level > 0 {
            a = g.avg_pool2(a);
            b = g.avg_pool2(b);
        }
        for (fa, fb) in extractor.stages(g, a).into_iter().zip(extractor.stages(g, b)) {
            let term = g.mean_all(g.abs(g.sub(fa, fb)));
            total = Some(match total {
                Some(t) => g.add(t, term),
                None => term,
            });
        }
    }
    total.expect("at least one stage")
}

pub fn perceptual_loss<E: FeatureExtractor>(x: &Image, y: &Image, extractor: &E) -> Result<f64> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    let (h, w) = (x.height(), x.width());
    let g = Graph::<f64>::new();
    let lift = |im: &Image| g.constant(im.to_chw().cast::<f64>().reshape([1, 3, h, w]));
    let loss = perceptual_loss_var(&g, lift(x), lift(y), extractor);
    let v = g.value(loss).item();
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub perceptual: f64,
    pub adversarial: f64,
    pub equivariance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 10.0,
            adversarial: 1.0,
            equivariance: 10.0,
        }
    }
}

impl LossWeights {
    pub fn unit() -> Self {
        Self {
            perceptual: 1.0,
            adversarial: 1.0,
            equivariance: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.perceptual, self.adversarial, self.equivariance];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted generator-side loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub perceptual: f64,
    pub adversarial: f64,
    pub equivariance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub perceptual: f64,
    pub adversarial_g: f64,
    pub equivariance: f64,
    pub total: f64,
    /// Mean discriminator score per member and for the weighted total, on
    /// real and generated inputs (e.g. `rgb.real`, `total.fake`).
    pub scores: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.perceptual, self.adversarial_g, self.equivariance, self.total]
            .iter()
            .chain(self.scores.values())
            .all(|v| v.is_finite())
    }
}

pub fn total_loss(c: LossComponents, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    Ok(LossReport {
        perceptual: c.perceptual,
        adversarial_g: c.adversarial,
        equivariance: c.equivariance,
        total: weighted_sum(c, w),
        scores: BTreeMap::new(),
    })
}

/// `w_P·L_P + w_G·L_GAN + w_E·L_E`; zero-weight terms are dropped entirely.
fn weighted_sum(c: LossComponents, w: &LossWeights) -> f64 {
    [
        (w.perceptual, c.perceptual),
        (w.adversarial, c.adversarial),
        (w.equivariance, c.equivariance),
    ]
    .iter()
    .filter(|(wt, _)| *wt != 0.0)
    .map(|(wt, v)| wt * v)
    .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::check_gradient;
    use crate::tensor::Tensor;

    #[test]
    fn identical_images_cost_nothing_and_the_loss_is_symmetric() {
        let a = Image::from_fn(16, 16, |y, x| [x as f32 / 16.0, y as f32 / 16.0, 0.5]);
        let b = Image::from_fn(16, 16, |y, x| [((x * y) % 5) as f32 / 5.0, 0.2, 0.9]);
        assert_eq!(perceptual_loss(&a, &a, &IdentityExtractor).unwrap(), 0.0);
        assert_eq!(
            perceptual_loss(&a, &b, &IdentityExtractor).unwrap(),
            perceptual_loss(&b, &a, &IdentityExtractor).unwrap()
        );
    }

    #[test]
    fn constant_offset_counts_once_per_level() {
        let a = Image::constant(16, 16, [0.25; 3]);
        let b = Image::constant(16, 16, [0.75; 3]);
        let l = perceptual_loss(&a, &b, &IdentityExtractor).unwrap();
        assert!((l - 3.0 * 0.5).abs() < 1e-7);
    }

    #[test]
    fn gradient_wrt_prediction() {
        let x = Tensor::from_fn([1, 3, 8, 8], |i| (i as f64 * 0.31).sin());
        let y = Tensor::from_fn([1, 3, 8, 8], |i| (i as f64 * 0.17).cos());
        check_gradient(
            &x,
            move |g, x| perceptual_loss_var(g, x, g.constant(y.clone()), &IdentityExtractor),
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn weighted_total() {
        let c = LossComponents {
            perceptual: 1.0,
            adversarial: 2.0,
            equivariance: 3.0,
        };
        assert_eq!(total_loss(c, &LossWeights::default()).unwrap().total, 42.0);
        assert_eq!(total_loss(LossComponents::default(), &LossWeights::default()).unwrap().total, 0.0);
        let w = LossWeights {
            adversarial: 0.0,
            ..LossWeights::default()
        };
        let big = LossComponents {
            adversarial: f64::INFINITY,
            ..c
        };
        assert_eq!(total_loss(big, &w).unwrap().total, 40.0);
        assert!(total_loss(c, &LossWeights { perceptual: -1.0, ..w }).is_err());
    }
}
