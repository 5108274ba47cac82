//! Per-keypoint affine backward flows
//! `τ_k(z) = q_s,k + J_s,k · J_d,k⁻¹ · (z − q_d,k)`.

use std::rc::Rc;

use super::keypoints::{KeypointSet, KeypointVars, Mat2};
use super::warp::identity_grid;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianInverse {
    pub value: Mat2,
    /// True when `|det J| <= eps` and `J + eps·I` was inverted instead.
    pub regularized: bool,
}

#[inline]
fn inv2x2<T: Real>(m: [T; 4], eps: T) -> ([T; 4], bool) {
    let [mut a, b, c, mut d] = m;
    let mut det = a * d - b * c;
    let regularized = det.abs() <= eps;
    if regularized {
        a += eps;
        d += eps;
        det = a * d - b * c;
    }
    ([d / det, -b / det, -c / det, a / det], regularized)
}

pub fn invert_jacobian(j: Mat2, eps: f64) -> Result<JacobianInverse> {
    if j.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN in keypoint jacobian".into()));
    }
    let (inv, regularized) = inv2x2([j[0][0], j[0][1], j[1][0], j[1][1]], eps);
    Ok(JacobianInverse {
        value: [[inv[0], inv[1]], [inv[2], inv[3]]],
        regularized,
    })
}

impl<T: Real> Graph<T> {
    /// Inverse of every trailing 2×2 block, regularized where near singular.
    pub fn inv2x2(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        assert!(xv.shape().ends_with(&[2, 2]), "inv2x2 expects [..., 2, 2]");
        let eps = T::lit(eps);
        let mut data = Vec::with_capacity(xv.len());
        let mut regularized = 0usize;
        for m in xv.data().chunks_exact(4) {
            let (inv, r) = inv2x2([m[0], m[1], m[2], m[3]], eps);
            regularized += r as usize;
            data.extend(inv);
        }
        if regularized > 0 {
            log::debug!("regularized {regularized} near-singular jacobian(s)");
        }
        let out = Rc::new(Tensor::new(xv.shape().to_vec(), data));
        let inv = out.clone();
        self.push_op(out, &[x], move |g| {
            // d(A⁻¹) = -A⁻¹ dA A⁻¹  =>  ∂L/∂A = -A⁻ᵀ G A⁻ᵀ
            let mut gx = Vec::with_capacity(g.len());
            for (m, gm) in inv.data().chunks_exact(4).zip(g.data().chunks_exact(4)) {
                let it = [m[0], m[2], m[1], m[3]];
                let t = mat2_mul(&it, &[gm[0], gm[1], gm[2], gm[3]]);
                gx.extend(mat2_mul(&t, &it).map(|v| -v));
            }
            vec![Some(Tensor::new(g.shape().to_vec(), gx))]
        })
    }

    /// Batched product of trailing 2×2 blocks of equally shaped operands.
    pub fn matmul2x2(&self, a: Var, b: Var) -> Var {
        let s = self.shape(a);
        assert!(s.ends_with(&[2, 2]) && s == self.shape(b), "matmul2x2 shape mismatch");
        let lead = &s[..s.len() - 2];
        let shape_a: Vec<usize> = lead.iter().copied().chain([2, 2, 1]).collect();
        let shape_b: Vec<usize> = lead.iter().copied().chain([1, 2, 2]).collect();
        let prod = self.mul(self.reshape(a, &shape_a), self.reshape(b, &shape_b));
        self.sum_axis(prod, lead.len() + 1, false)
    }
}

fn mat2_mul<T: Real>(a: &[T; 4], b: &[T; 4]) -> [T; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

/// `[N, K+1, H, W, 2]` backward flows; channel 0 is the identity (background).
pub fn sparse_motion_var<T: Real>(
    g: &Graph<T>,
    kp_s: &KeypointVars,
    kp_d: &KeypointVars,
    h: usize,
    w: usize,
    eps: f64,
) -> Var {
    let s = g.shape(kp_s.positions);
    assert_eq!(s, g.shape(kp_d.positions), "source/driving keypoint shapes differ");
    let (n, k) = (s[0], s[1]);
    let affine = g.matmul2x2(kp_s.jacobians, g.inv2x2(kp_d.jacobians, eps));
    let grid = g.constant(identity_grid::<T>(h, w).reshape([1, 1, h, w, 2]));
    let diff = g.sub(grid, g.reshape(kp_d.positions, &[n, k, 1, 1, 2]));
    let moved = g.mul(
        g.reshape(affine, &[n, k, 1, 1, 2, 2]),
        g.reshape(diff, &[n, k, h, w, 1, 2]),
    );
    let flows = g.add(g.sum_axis(moved, 5, false), g.reshape(kp_s.positions, &[n, k, 1, 1, 2]));
    let background = g.broadcast_to(grid, &[n, 1, h, w, 2]);
    g.concat(&[background, flows], 1)
}

/// Per-keypoint flows of a single frame pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMotions<T> {
    /// `[K, H, W, 2]`
    pub flows: Tensor<T>,
    /// `[H, W, 2]`
    pub identity_grid: Tensor<T>,
}

impl<T: Real> SparseMotions<T> {
    /// `[K+1, H, W, 2]` with the identity grid first.
    pub fn with_background(&self) -> Tensor<T> {
        let mut parts = vec![self.identity_grid.clone()];
        let k = self.flows.shape()[0];
        for i in 0..k {
            parts.push(self.flows.narrow0(i, 1).reshape(self.identity_grid.shape().to_vec()));
        }
        Tensor::stack(&parts)
    }
}

pub fn sparse_motion(
    kp_s: &KeypointSet,
    kp_d: &KeypointSet,
    h: usize,
    w: usize,
    eps: f64,
) -> Result<SparseMotions<f64>> {
    if kp_s.len() != kp_d.len() {
        return Err(Error::Shape(format!(
            "{} source vs {} driving keypoints",
            kp_s.len(),
            kp_d.len()
        )));
    }
    let g = Graph::<f64>::new();
    let s = KeypointVars::constant(&g, std::slice::from_ref(kp_s));
    let d = KeypointVars::constant(&g, std::slice::from_ref(kp_d));
    let all = g.value(sparse_motion_var(&g, &s, &d, h, w, eps));
    let k = kp_s.len();
    let all = (*all).clone().reshape([k + 1, h, w, 2]);
    let flows = Tensor::new([k, h, w, 2], all.data()[h * w * 2..].to_vec());
    Ok(SparseMotions {
        flows,
        identity_grid: identity_grid(h, w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::check_gradient;

    #[test]
    fn inverse_examples() {
        let inv = invert_jacobian([[2.0, 0.0], [0.0, 2.0]], 1e-4).unwrap();
        assert_eq!(inv.value, [[0.5, 0.0], [0.0, 0.5]]);
        assert!(!inv.regularized);
        let inv = invert_jacobian([[1.0, 0.0], [0.0, 0.0]], 1e-2).unwrap();
        assert!(inv.regularized);
        assert!((inv.value[0][0] - 1.0 / 1.01).abs() < 1e-12);
        assert!((inv.value[1][1] - 1.0 / 0.01).abs() < 1e-9);
        assert!(invert_jacobian([[f64::NAN, 0.0], [0.0, 1.0]], 1e-4).is_err());
    }

    #[test]
    fn inverse_gradient() {
        let x = Tensor::new([2, 2, 2], vec![1.3, 0.2, -0.4, 0.9, 2.0, 0.5, 0.1, 0.7]);
        let probe = Tensor::from_fn([2, 2, 2], |i| (i as f64).cos());
        check_gradient(
            &x,
            move |g, x| g.sum_all(g.mul(g.inv2x2(x, 1e-4), g.constant(probe.clone()))),
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn driving_keypoint_maps_to_source_keypoint() {
        let s = KeypointSet::with_identity_jacobians(vec![[0.0, 0.0]]);
        let d = KeypointSet::with_identity_jacobians(vec![[0.5, 0.0]]);
        // grid of 5 columns has x = 0.5 at column 3
        let m = sparse_motion(&s, &d, 5, 5, 1e-4).unwrap();
        let at = |i: usize, j: usize| {
            let b = (i * 5 + j) * 2;
            [m.flows.data()[b], m.flows.data()[b + 1]]
        };
        let v = at(2, 3);
        assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn scaled_source_jacobian() {
        let s = KeypointSet::new(vec![[0.0, 0.0]], vec![[[2.0, 0.0], [0.0, 2.0]]]).unwrap();
        let d = KeypointSet::with_identity_jacobians(vec![[0.0, 0.0]]);
        let g = Graph::<f64>::new();
        let (sv, dv) = (KeypointVars::constant(&g, &[s]), KeypointVars::constant(&g, &[d]));
        // a 1×1 "grid" cannot express z = (0.1, 0.2); evaluate the flow formula on a custom grid
        let affine = g.value(g.matmul2x2(sv.jacobians, g.inv2x2(dv.jacobians, 1e-4)));
        let a = affine.data();
        let z = [0.1, 0.2];
        let out = [a[0] * z[0] + a[1] * z[1], a[2] * z[0] + a[3] * z[1]];
        assert!((out[0] - 0.2).abs() < 1e-12 && (out[1] - 0.4).abs() < 1e-12);
    }
}
