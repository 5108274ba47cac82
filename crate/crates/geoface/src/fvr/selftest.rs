//! Self-check of the volume renderer against a direct per-sample accumulation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{volume_render, RaySamples};
use crate::nn::component_rng;
use crate::tensor::Tensor;

pub const SELFTEST_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTestReport {
    pub cases: usize,
    /// Largest deviation between the renderer and the reference.
    pub max_abs_error: f64,
    /// Largest deviation of `Σ w_j` from `1 − τ_{D+1}`.
    pub max_budget_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Survival as a running product of per-sample survival probabilities.
fn reference(density: &[f64], color: &[f64], p: usize, d: usize, c: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; p * c];
    let mut weight_sums = vec![0.0; p];
    let mut residual = vec![0.0; p];
    for i in 0..p {
        let mut survive = 1.0;
        for j in 0..d {
            let keep = (-density[i * d + j]).exp();
            let w = survive * (1.0 - keep);
            for k in 0..c {
                out[i * c + k] += w * color[(i * d + j) * c + k];
            }
            weight_sums[i] += w;
            survive *= keep;
        }
        residual[i] = survive;
    }
    (out, weight_sums, residual)
}

/// Renders `cases` random ray bundles (up to 8 rays, 4 samples, 4 channels)
/// and compares them with the reference.
pub fn render_selftest(seed: u64, cases: usize) -> SelfTestReport {
    let mut rng = component_rng(seed, "render-selftest");
    let mut max_abs_error = 0.0f64;
    let mut max_budget_error = 0.0f64;
    for _ in 0..cases {
        let p = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=4);
        let c = rng.gen_range(1..=4);
        let density: Vec<f64> = (0..p * d).map(|_| rng.gen_range(0.0..3.0)).collect();
        let color: Vec<f64> = (0..p * d * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (want, weight_sums, residual) = reference(&density, &color, p, d, c);
        let samples = RaySamples::new(Tensor::new([p, d], density), Tensor::new([p, d, c], color))
            .expect("valid samples");
        let got = volume_render(&samples);
        for (a, b) in got.values.data().iter().zip(&want) {
            max_abs_error = max_abs_error.max((a - b).abs());
        }
        for (s, r) in weight_sums.iter().zip(&residual) {
            max_budget_error = max_budget_error.max((s - (1.0 - r)).abs());
        }
    }
    SelfTestReport {
        cases,
        max_abs_error,
        max_budget_error,
        tolerance: SELFTEST_TOLERANCE,
        passed: max_abs_error <= SELFTEST_TOLERANCE && max_budget_error <= SELFTEST_TOLERANCE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes() {
        let r = render_selftest(3, 50);
        assert!(r.passed, "{r:?}");
        assert_eq!(r.cases, 50);
    }
}
