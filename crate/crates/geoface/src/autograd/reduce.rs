use std::rc::Rc;

use super::shape::axis_split;
use super::{Graph, Var};
use crate::tensor::{Real, Tensor};

impl<T: Real> Graph<T> {
    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out = Rc::new(Tensor::scalar(xv.sum()));
        self.push_op(out, &[x], move |g| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).len();
        self.scale(self.sum_all(x), 1.0 / n as f64)
    }

    /// Sum over `axis`; with `keepdim` the axis stays with size 1.
    pub fn sum_axis(&self, x: Var, axis: usize, keepdim: bool) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let (outer, n, inner) = axis_split(&in_shape, axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xv.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = in_shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let out = Rc::new(Tensor::new(shape, data));
        self.push_op(out, &[x], move |g| {
            let mut gx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let row = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..n {
                    gx.extend_from_slice(row);
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx))]
        })
    }

    pub fn mean_axis(&self, x: Var, axis: usize, keepdim: bool) -> Var {
        let n = self.shape(x)[axis];
        self.scale(self.sum_axis(x, axis, keepdim), 1.0 / n as f64)
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = xv.data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for k in 0..n {
                    let e = (xd[at(k)] - m).exp();
                    y[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    y[at(k)] /= s;
                }
            }
        }
        let out = Rc::new(Tensor::new(shape.clone(), y));
        let yv = out.clone();
        self.push_op(out, &[x], move |g| {
            let (yd, gd) = (yv.data(), g.data());
            let mut gx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: T = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), gx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_gradient;
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([2, 3, 4], |i| (i as f64).sin() * 30.0));
        let y = g.value(g.softmax(x, 1));
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| y.data()[(o * 3 + k) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduction_gradients() {
        let x = Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.21).cos());
        let w2 = w.clone();
        check_gradient(
            &x,
            move |g, x| {
                let wv = g.constant(w.clone());
                g.sum_all(g.mul(g.softmax(x, 1), wv))
            },
            1e-5,
            1e-6,
        );
        check_gradient(
            &x,
            move |g, x| {
                let s = g.mean_axis(x, 2, true);
                let wv = g.constant(w2.clone());
                g.sum_all(g.mul(g.square(g.sub(x, s)), wv))
            },
            1e-5,
            1e-6,
        );
    }
}
