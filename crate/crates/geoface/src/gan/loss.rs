//! Adversarial objectives on discriminator probabilities.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Real;

/// Lower clamp applied before every logarithm.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLossKind {
    /// `−[log D(real) + log(1 − D(fake))]`, generator `−log D(fake)`.
    #[default]
    Log,
    /// `(D(real) − 1)² + D(fake)²`, generator `(D(fake) − 1)²`.
    LeastSquares,
}

fn safe_ln(x: f64) -> f64 {
    x.clamp(LOG_EPS, 1.0).ln()
}

/// Discriminator loss for scalar totals.
pub fn gan_loss_discriminator(d_real: f64, d_fake: f64) -> f64 {
    -(safe_ln(d_real) + safe_ln(1.0 - d_fake))
}

/// Non-saturating generator loss for a scalar total.
pub fn gan_loss_generator(d_fake: f64) -> f64 {
    -safe_ln(d_fake)
}

impl GanLossKind {
    /// Batch-mean discriminator loss over `[N]` totals.
    pub fn discriminator<T: Real>(self, g: &Graph<T>, real: Var, fake: Var) -> Var {
        match self {
            Self::Log => {
                let lr = g.ln(g.clamp(real, LOG_EPS, 1.0));
                let lf = g.ln(g.clamp(g.add_scalar(g.neg(fake), 1.0), LOG_EPS, 1.0));
                g.neg(g.add(g.mean_all(lr), g.mean_all(lf)))
            }
            Self::LeastSquares => {
                let r = g.mean_all(g.square(g.add_scalar(real, -1.0)));
                g.add(r, g.mean_all(g.square(fake)))
            }
        }
    }

    /// Batch-mean generator loss over `[N]` totals.
    pub fn generator<T: Real>(self, g: &Graph<T>, fake: Var) -> Var {
        match self {
            Self::Log => g.neg(g.mean_all(g.ln(g.clamp(fake, LOG_EPS, 1.0)))),
            Self::LeastSquares => g.mean_all(g.square(g.add_scalar(fake, -1.0))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn closed_forms() {
        assert!((gan_loss_discriminator(0.5, 0.5) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((gan_loss_generator(0.5) - 2f64.ln()).abs() < 1e-12);
        assert!(gan_loss_discriminator(1.0 - 1e-12, 1e-12) < 1e-9);
        assert!(gan_loss_generator(1.0) == 0.0);
        // clamped extremes stay finite
        assert!(gan_loss_discriminator(0.0, 1.0).is_finite());
    }

    #[test]
    fn graph_forms_match_scalars() {
        let g = Graph::<f64>::new();
        let real = g.constant(Tensor::new([2], vec![0.7, 0.9]));
        let fake = g.constant(Tensor::new([2], vec![0.2, 0.4]));
        let d = g.value(GanLossKind::Log.discriminator(&g, real, fake)).item();
        let expect = (gan_loss_discriminator(0.7, 0.2) + gan_loss_discriminator(0.9, 0.4)) / 2.0;
        assert!((d - expect).abs() < 1e-12);
        let gl = g.value(GanLossKind::Log.generator(&g, fake)).item();
        assert!((gl - (gan_loss_generator(0.2) + gan_loss_generator(0.4)) / 2.0).abs() < 1e-12);
        let ls = g.value(GanLossKind::LeastSquares.discriminator(&g, real, fake)).item();
        assert!((ls - ((0.09 + 0.01) / 2.0 + (0.04 + 0.16) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn discriminator_loss_is_nonnegative() {
        for r in [0.0, 0.1, 0.5, 0.99, 1.0] {
            for f in [0.0, 0.3, 0.7, 1.0] {
                assert!(gan_loss_discriminator(r, f) >= 0.0);
            }
        }
    }
}
