//! Surface normals from depth maps.
//!
//! Depth grows toward the camera, so a surface facing the viewer has normal
//! `(0, 0, 1)` and `n ∝ (−∂d/∂x, −∂d/∂y, 1)`, with `x` along columns and `y`
//! along rows.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Central differences in the interior, one-sided at the borders.
/// Returns `(∂/∂x, ∂/∂y)` in units of `1 / spacing`.
fn gradients<T: Real>(d: &[T], h: usize, w: usize, spacing: T) -> (Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); h * w];
    let mut gy = vec![T::zero(); h * w];
    let two = T::lit(2.0);
    for i in 0..h {
        for j in 0..w {
            let at = |y: usize, x: usize| d[y * w + x];
            gx[i * w + j] = if w < 2 {
                T::zero()
            } else if j == 0 {
                (at(i, 1) - at(i, 0)) / spacing
            } else if j == w - 1 {
                (at(i, j) - at(i, j - 1)) / spacing
            } else {
                (at(i, j + 1) - at(i, j - 1)) / (two * spacing)
            };
            gy[i * w + j] = if h < 2 {
                T::zero()
            } else if i == 0 {
                (at(1, j) - at(0, j)) / spacing
            } else if i == h - 1 {
                (at(i, j) - at(i - 1, j)) / spacing
            } else {
                (at(i + 1, j) - at(i - 1, j)) / (two * spacing)
            };
        }
    }
    (gx, gy)
}

/// Adjoint of [`gradients`].
fn gradients_adjoint<T: Real>(gx: &[T], gy: &[T], h: usize, w: usize, spacing: T) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    let two = T::lit(2.0);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if w >= 2 {
                let g = gx[p];
                if j == 0 {
                    out[i * w + 1] += g / spacing;
                    out[p] -= g / spacing;
                } else if j == w - 1 {
                    out[p] += g / spacing;
                    out[p - 1] -= g / spacing;
                } else {
                    out[p + 1] += g / (two * spacing);
                    out[p - 1] -= g / (two * spacing);
                }
            }
            if h >= 2 {
                let g = gy[p];
                if i == 0 {
                    out[w + j] += g / spacing;
                    out[p] -= g / spacing;
                } else if i == h - 1 {
                    out[p] += g / spacing;
                    out[p - w] -= g / spacing;
                } else {
                    out[p + w] += g / (two * spacing);
                    out[p - w] -= g / (two * spacing);
                }
            }
        }
    }
    out
}

/// Unit normals `[H, W, 3]` of a positive depth map `[H, W]`.
pub fn normal_from_depth(depth: &Tensor<f64>, pixel_spacing: f64) -> Result<Tensor<f64>> {
    let (h, w) = match depth.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("depth must be H×W, got {s:?}"))),
    };
    if !(pixel_spacing > 0.0) {
        return Err(Error::Geometry(format!("pixel spacing must be positive, got {pixel_spacing}")));
    }
    if depth.data().iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::Geometry("depth must be finite and strictly positive".into()));
    }
    let (gx, gy) = gradients(depth.data(), h, w, pixel_spacing);
    let mut out = Vec::with_capacity(h * w * 3);
    for (&a, &b) in gx.iter().zip(&gy) {
        let norm = (a * a + b * b + 1.0).sqrt();
        out.extend([-a / norm, -b / norm, 1.0 / norm]);
    }
    Ok(Tensor::new([h, w, 3], out))
}

impl<T: Real> Graph<T> {
    /// `[N, 1, H, W]` → `[N, 2, H, W]` holding `∂/∂x` and `∂/∂y`.
    pub fn spatial_gradient(&self, x: Var, spacing: f64) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert_eq!(c, 1, "spatial_gradient expects a single channel");
        let sp = T::lit(spacing);
        let mut out = Vec::with_capacity(n * 2 * h * w);
        for s in 0..n {
            let (gx, gy) = gradients(&xv.data()[s * h * w..(s + 1) * h * w], h, w, sp);
            out.extend(gx);
            out.extend(gy);
        }
        let value = Rc::new(Tensor::new([n, 2, h, w], out));
        self.push_op(value, &[x], move |g| {
            let hw = h * w;
            let mut gx = Vec::with_capacity(n * hw);
            for s in 0..n {
                let base = s * 2 * hw;
                gx.extend(gradients_adjoint(&g.data()[base..base + hw], &g.data()[base + hw..base + 2 * hw], h, w, sp));
            }
            vec![Some(Tensor::new([n, 1, h, w], gx))]
        })
    }

    /// Differentiable unit normals `[N, 3, H, W]` of depth `[N, 1, H, W]`.
    pub fn normals_from_depth(&self, depth: Var, spacing: f64) -> Var {
        let grad = self.spatial_gradient(depth, spacing);
        let s = self.shape(depth);
        let ones = self.constant(Tensor::ones(s.clone()));
        let raw = self.concat(&[self.neg(grad), ones], 1);
        let norm = self.sqrt(self.sum_axis(self.square(raw), 1, true));
        self.div(raw, norm)
    }

    /// Per-sample min-max normalization of `[N, C, H, W]` to `[0, 1]`.
    pub fn minmax_normalize(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.shape()[0];
        let per = xv.len() / n;
        let eps = T::lit(eps);
        let mut y = Vec::with_capacity(xv.len());
        let mut stats = Vec::with_capacity(n);
        for s in 0..n {
            let xs = &xv.data()[s * per..(s + 1) * per];
            let (mut lo, mut hi) = (0, 0);
            for (i, &v) in xs.iter().enumerate() {
                if v < xs[lo] {
                    lo = i;
                }
                if v > xs[hi] {
                    hi = i;
                }
            }
            let r = xs[hi] - xs[lo] + eps;
            y.extend(xs.iter().map(|&v| (v - xs[lo]) / r));
            stats.push((lo, hi, r));
        }
        let value = Rc::new(Tensor::new(xv.shape().to_vec(), y));
        let yv = value.clone();
        self.push_op(value, &[x], move |g| {
            let mut gx = vec![T::zero(); g.len()];
            for (s, &(lo, hi, r)) in stats.iter().enumerate() {
                let gs = &g.data()[s * per..(s + 1) * per];
                let ys = &yv.data()[s * per..(s + 1) * per];
                let out = &mut gx[s * per..(s + 1) * per];
                let mut to_lo = T::zero();
                let mut to_hi = T::zero();
                for ((o, &gi), &yi) in out.iter_mut().zip(gs).zip(ys) {
                    *o = gi / r;
                    to_lo += gi * (yi - T::one()) / r;
                    to_hi -= gi * yi / r;
                }
                out[lo] += to_lo;
                out[hi] += to_hi;
            }
            vec![Some(Tensor::new(g.shape().to_vec(), gx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::check_gradient;

    #[test]
    fn constant_depth_faces_the_camera() {
        let n = normal_from_depth(&Tensor::full([5, 6], 3.0), 1.0).unwrap();
        for p in n.data().chunks_exact(3) {
            assert!((p[0]).abs() < 1e-12 && p[1].abs() < 1e-12 && (p[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_slope_plane() {
        let d = Tensor::from_fn([4, 6], |i| 10.0 + (i % 6) as f64);
        let n = normal_from_depth(&d, 1.0).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for p in n.data().chunks_exact(3) {
            assert!((p[0] + s).abs() < 1e-12 && p[1].abs() < 1e-12 && (p[2] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_covariance() {
        let d = Tensor::from_fn([5, 5], |i| 2.0 + ((i * 7) % 5) as f64 * 0.3);
        let a = normal_from_depth(&d, 1.0).unwrap();
        let b = normal_from_depth(&d.scale(3.5), 3.5).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_depth() {
        assert!(normal_from_depth(&Tensor::new([1, 2], vec![1.0, 0.0]), 1.0).is_err());
        assert!(normal_from_depth(&Tensor::new([1, 2], vec![1.0, 1.0]), 0.0).is_err());
    }

    #[test]
    fn graph_normals_match_plain_and_differentiate() {
        let d = Tensor::from_fn([1, 1, 4, 5], |i| 3.0 + (i as f64 * 0.9).sin());
        let g = Graph::new();
        let n = g.value(g.normals_from_depth(g.constant(d.clone()), 1.0));
        let plain = normal_from_depth(&d.clone().reshape([4, 5]), 1.0).unwrap();
        for p in 0..20 {
            for c in 0..3 {
                assert!((n.data()[c * 20 + p] - plain.data()[p * 3 + c]).abs() < 1e-14);
            }
        }
        let probe = Tensor::from_fn([1, 3, 4, 5], |i| (i as f64 * 0.4).cos());
        check_gradient(
            &d,
            move |g, x| g.sum_all(g.mul(g.normals_from_depth(x, 1.0), g.constant(probe.clone()))),
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn minmax_gradient() {
        let x = Tensor::from_fn([2, 1, 2, 3], |i| (i as f64 * 1.7).sin());
        let probe = Tensor::from_fn([2, 1, 2, 3], |i| 1.0 + i as f64);
        check_gradient(
            &x,
            move |g, x| g.sum_all(g.mul(g.minmax_normalize(x, 1e-6), g.constant(probe.clone()))),
            1e-6,
            1e-6,
        );
    }
}
