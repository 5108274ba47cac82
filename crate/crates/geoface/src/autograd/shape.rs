use std::rc::Rc;

use super::{Graph, Var};
use crate::tensor::{numel, Real, Tensor};

/// Numpy-style broadcast of two shapes (right aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let r = a.len().max(b.len());
    (0..r)
        .map(|i| {
            let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
            let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

/// For every linear index of `out_shape`, the linear index of the broadcast
/// source element in a tensor of `in_shape`.
pub(crate) fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let r = out_shape.len();
    assert!(in_shape.len() <= r, "cannot broadcast {in_shape:?} to {out_shape:?}");
    let off = r - in_shape.len();
    let mut strides = vec![0usize; r];
    let mut s = 1;
    for d in (0..in_shape.len()).rev() {
        let od = d + off;
        if in_shape[d] == out_shape[od] {
            strides[od] = s;
        } else {
            assert_eq!(in_shape[d], 1, "cannot broadcast {in_shape:?} to {out_shape:?}");
        }
        s *= in_shape[d];
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; r];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for d in (0..r).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Sums `g` down to `shape`, the adjoint of broadcasting.
pub fn sum_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let map = broadcast_map(shape, g.shape());
    let mut out = Tensor::zeros(shape.to_vec());
    let od = out.data_mut();
    for (&m, &v) in map.iter().zip(g.data()) {
        od[m] += v;
    }
    out
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Real> Graph<T> {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let out = (*xv).clone().reshape(shape.to_vec());
        self.push_op(Rc::new(out), &[x], move |g| {
            vec![Some(g.clone().reshape(in_shape.clone()))]
        })
    }

    pub fn broadcast_to(&self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let map = broadcast_map(&in_shape, shape);
        let data = map.iter().map(|&m| xv.data()[m]).collect();
        let out = Tensor::new(shape.to_vec(), data);
        self.push_op(Rc::new(out), &[x], move |g| {
            vec![Some(sum_to_shape(g, &in_shape))]
        })
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let values: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let first = values[0].shape().to_vec();
        let (outer, _, inner) = axis_split(&first, axis);
        let sizes: Vec<usize> = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for d in 0..s.len() {
                    if d != axis {
                        assert_eq!(s[d], first[d], "concat shape mismatch {s:?} vs {first:?}");
                    }
                }
                s[axis]
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &n) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let out = Tensor::new(shape, data);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        self.push_op(Rc::new(out), xs, move |g| {
            let mut grads: Vec<Vec<T>> = sizes
                .iter()
                .map(|&n| Vec::with_capacity(outer * n * inner))
                .collect();
            let gd = g.data();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &n) in grads.iter_mut().zip(&sizes) {
                    gi.extend_from_slice(&gd[pos..pos + n * inner]);
                    pos += n * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Some(Tensor::new(s.clone(), d)))
                .collect()
        })
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let (outer, n, inner) = axis_split(&in_shape, axis);
        assert!(start + len <= n, "slice {start}+{len} exceeds axis size {n}");
        let mut shape = in_shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let out = Tensor::new(shape, data);
        self.push_op(Rc::new(out), &[x], move |g| {
            let mut gx = Tensor::zeros(in_shape.clone());
            let gxd = gx.data_mut();
            for o in 0..outer {
                let base = (o * n + start) * inner;
                gxd[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_gradient;
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), vec![2, 4, 3]);
        assert_eq!(broadcast_shape(&[], &[5]), vec![5]);
    }

    #[test]
    fn sum_to_shape_is_adjoint_of_broadcast() {
        let g = Tensor::<f64>::from_fn([2, 3], |i| i as f64);
        let s = sum_to_shape(&g, &[1, 3]);
        assert_eq!(s.data(), &[3.0, 5.0, 7.0]);
        let s = sum_to_shape(&g, &[2, 1]);
        assert_eq!(s.data(), &[3.0, 12.0]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn([2, 1, 2], |i| i as f64));
        let b = g.constant(Tensor::from_fn([2, 2, 2], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1);
        assert_eq!(g.shape(c), vec![2, 3, 2]);
        let back = g.slice(c, 1, 1, 2);
        assert_eq!(*g.value(back), *g.value(b));
    }

    #[test]
    fn shape_op_gradients() {
        let x = Tensor::from_fn([2, 3], |i| (i as f64 * 0.7).sin());
        let w = Tensor::from_fn([2, 4, 3], |i| (i as f64 * 0.3).cos());
        check_gradient(
            &x,
            |g, x| {
                let wv = g.constant(w.clone());
                let xb = g.broadcast_to(g.reshape(x, &[2, 1, 3]), &[2, 4, 3]);
                let s = g.slice(g.concat(&[xb, wv], 1), 1, 2, 4);
                g.sum_all(g.mul(s, s))
            },
            1e-5,
            1e-7,
        );
    }
}
