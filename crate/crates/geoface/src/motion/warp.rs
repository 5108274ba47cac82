//! Bilinear backward warping with border clamping.
//!
//! Sampling grids hold normalized `(x, y)` coordinates in `[-1, 1]`, where
//! `-1` and `1` address the centers of the first and last pixel.

use std::rc::Rc;

use super::dense::DenseMotion;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `[H, W, 2]` grid whose entry `(i, j)` is the normalized position of pixel `(i, j)`.
pub fn identity_grid<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let coord = |i: usize, n: usize| {
        if n > 1 {
            T::lit(2.0 * i as f64 / (n - 1) as f64 - 1.0)
        } else {
            T::zero()
        }
    };
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push(coord(j, w));
            data.push(coord(i, h));
        }
    }
    Tensor::new([h, w, 2], data)
}

/// Pixel-space sample position with its interpolation cell.
#[derive(Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
    /// d(pixel coordinate)/d(normalized coordinate), zero when clamped.
    scale: T,
}

#[inline]
fn tap<T: Real>(g: T, n: usize) -> Tap<T> {
    if n == 1 {
        return Tap {
            i0: 0,
            i1: 0,
            frac: T::zero(),
            scale: T::zero(),
        };
    }
    let half = T::lit((n - 1) as f64 * 0.5);
    let raw = (g + T::one()) * half;
    let max = T::lit((n - 1) as f64);
    let (p, scale) = if raw < T::zero() {
        (T::zero(), T::zero())
    } else if raw > max {
        (max, T::zero())
    } else {
        (raw, half)
    };
    let i0 = p.floor().to_usize().unwrap_or(0).min(n - 2);
    Tap {
        i0,
        i1: i0 + 1,
        frac: p - T::lit(i0 as f64),
        scale,
    }
}

/// `input: [N, C, H, W]`, `grid: [N, Ho, Wo, 2]` → `[N, C, Ho, Wo]`.
pub fn grid_sample_forward<T: Real>(input: &Tensor<T>, grid: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = input.dims4();
    let (ho, wo) = grid_dims(grid, n);
    let (id, gd) = (input.data(), grid.data());
    let mut out = vec![T::zero(); n * c * ho * wo];
    for s in 0..n {
        for p in 0..ho * wo {
            let gi = (s * ho * wo + p) * 2;
            let tx = tap(gd[gi], w);
            let ty = tap(gd[gi + 1], h);
            let (wx, wy) = (tx.frac, ty.frac);
            let w00 = (T::one() - wx) * (T::one() - wy);
            let w01 = wx * (T::one() - wy);
            let w10 = (T::one() - wx) * wy;
            let w11 = wx * wy;
            for ch in 0..c {
                let base = (s * c + ch) * h * w;
                let v = |y: usize, x: usize| id[base + y * w + x];
                out[(s * c + ch) * ho * wo + p] = w00 * v(ty.i0, tx.i0)
                    + w01 * v(ty.i0, tx.i1)
                    + w10 * v(ty.i1, tx.i0)
                    + w11 * v(ty.i1, tx.i1);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Cotangents of [`grid_sample_forward`] w.r.t. `input` and `grid`.
pub fn grid_sample_backward<T: Real>(
    input: &Tensor<T>,
    grid: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = input.dims4();
    let (ho, wo) = grid_dims(grid, n);
    let (id, gd, god) = (input.data(), grid.data(), g.data());
    let mut gin = vec![T::zero(); id.len()];
    let mut ggrid = vec![T::zero(); gd.len()];
    for s in 0..n {
        for p in 0..ho * wo {
            let gi = (s * ho * wo + p) * 2;
            let tx = tap(gd[gi], w);
            let ty = tap(gd[gi + 1], h);
            let (wx, wy) = (tx.frac, ty.frac);
            let (ux, uy) = (T::one() - wx, T::one() - wy);
            let mut dx = T::zero();
            let mut dy = T::zero();
            for ch in 0..c {
                let base = (s * c + ch) * h * w;
                let go = god[(s * c + ch) * ho * wo + p];
                let (a, b) = (base + ty.i0 * w, base + ty.i1 * w);
                gin[a + tx.i0] += go * ux * uy;
                gin[a + tx.i1] += go * wx * uy;
                gin[b + tx.i0] += go * ux * wy;
                gin[b + tx.i1] += go * wx * wy;
                let (v00, v01, v10, v11) = (id[a + tx.i0], id[a + tx.i1], id[b + tx.i0], id[b + tx.i1]);
                dx += go * ((v01 - v00) * uy + (v11 - v10) * wy);
                dy += go * ((v10 - v00) * ux + (v11 - v01) * wx);
            }
            ggrid[gi] = dx * tx.scale;
            ggrid[gi + 1] = dy * ty.scale;
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gin),
        Tensor::new(grid.shape().to_vec(), ggrid),
    )
}

fn grid_dims<T: Real>(grid: &Tensor<T>, n: usize) -> (usize, usize) {
    match grid.shape() {
        [gn, ho, wo, 2] if *gn == n => (*ho, *wo),
        s => panic!("grid shape {s:?} does not match batch {n}"),
    }
}

impl<T: Real> Graph<T> {
    /// Differentiable bilinear sampling of `input` at `grid`.
    pub fn grid_sample(&self, input: Var, grid: Var) -> Var {
        let iv = self.value(input);
        let gv = self.value(grid);
        let out = Rc::new(grid_sample_forward(&iv, &gv));
        self.push_op(out, &[input, grid], move |g| {
            let (gi, gg) = grid_sample_backward(&iv, &gv, g);
            vec![Some(gi), Some(gg)]
        })
    }

    /// `occlusion ⊙ sample(features, flow)`.
    ///
    /// `features: [N, C, H, W]`, `flow: [N, H, W, 2]`, `occlusion: [N, 1, H, W]`.
    pub fn warp_features(&self, features: Var, flow: Var, occlusion: Var) -> Var {
        let warped = self.grid_sample(features, flow);
        self.mul(warped, occlusion)
    }
}

/// `C×H×W` feature volume of a single frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Shape(format!("feature map must be C×H×W, got {:?}", values.shape())));
        }
        if !values.all_finite() {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        Ok(Self { values })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }
}

/// Samples `f_s` along the dense flow, then multiplies by the occlusion map.
pub fn warp_features<T: Real>(f_s: &FeatureMap<T>, dm: &DenseMotion<T>) -> Result<FeatureMap<T>> {
    let (c, h, w) = f_s.dims();
    if dm.flow.shape() != [h, w, 2] || dm.occlusion.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "flow {:?} / occlusion {:?} do not match features {h}x{w}",
            dm.flow.shape(),
            dm.occlusion.shape()
        )));
    }
    let g = Graph::<T>::new();
    let f = g.constant(f_s.values.clone().reshape([1, c, h, w]));
    let flow = g.constant(dm.flow.clone().reshape([1, h, w, 2]));
    let occ = g.constant(dm.occlusion.clone().reshape([1, 1, h, w]));
    let out = g.value(g.warp_features(f, flow, occ));
    FeatureMap::new((*out).clone().reshape([c, h, w]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::check_gradient;

    #[test]
    fn identity_grid_reproduces_input() {
        let x = Tensor::<f64>::from_fn([2, 3, 5, 7], |i| (i as f64 * 0.71).sin());
        let grid = Tensor::stack(&[identity_grid(5, 7), identity_grid(5, 7)]);
        let y = grid_sample_forward(&x, &grid);
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn clamps_outside_the_border() {
        let x = Tensor::<f64>::from_fn([1, 1, 2, 2], |i| i as f64);
        let grid = Tensor::new([1, 1, 2, 2], vec![-3.0, -3.0, 5.0, 5.0]);
        let y = grid_sample_forward(&x, &grid);
        assert_eq!(y.data(), &[0.0, 3.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = Tensor::from_fn([1, 2, 4, 5], |i| (i as f64 * 0.37).cos());
        // keep samples off pixel centers, where bilinear sampling has kinks
        let grid = Tensor::from_fn([1, 3, 3, 2], |i| (i as f64 * 1.3 + 0.1).sin() * 0.9);
        let probe = Tensor::from_fn([1, 2, 3, 3], |i| 1.0 + (i as f64 * 0.5).sin());
        let (g2, p2) = (grid.clone(), probe.clone());
        check_gradient(
            &x,
            move |g, x| {
                let y = g.grid_sample(x, g.constant(g2.clone()));
                g.sum_all(g.mul(y, g.constant(p2.clone())))
            },
            1e-5,
            1e-7,
        );
        check_gradient(
            &grid,
            move |g, grid| {
                let y = g.grid_sample(g.constant(x.clone()), grid);
                g.sum_all(g.mul(y, g.constant(probe.clone())))
            },
            1e-6,
            1e-5,
        );
    }
}
