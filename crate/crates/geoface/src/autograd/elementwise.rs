use std::rc::Rc;

use super::shape::{broadcast_map, broadcast_shape};
use super::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Index maps of two operands into a common broadcast shape.
struct Bcast {
    shape: Vec<usize>,
    a: Option<Vec<usize>>,
    b: Option<Vec<usize>>,
}

impl Bcast {
    fn new(sa: &[usize], sb: &[usize]) -> Self {
        let shape = broadcast_shape(sa, sb);
        let map = |s: &[usize]| (s != shape.as_slice()).then(|| broadcast_map(s, &shape));
        Self {
            a: map(sa),
            b: map(sb),
            shape,
        }
    }

    #[inline]
    fn ia(&self, i: usize) -> usize {
        self.a.as_ref().map_or(i, |m| m[i])
    }

    #[inline]
    fn ib(&self, i: usize) -> usize {
        self.b.as_ref().map_or(i, |m| m[i])
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    fn binary(&self, a: Var, b: Var, op: BinOp) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let bc = Bcast::new(av.shape(), bv.shape());
        let (ad, bd) = (av.data(), bv.data());
        let n: usize = bc.shape.iter().product();
        let f = |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let data: Vec<T> = match (&bc.a, &bc.b) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(ad[bc.ia(i)], bd[bc.ib(i)])).collect(),
        };
        let out = Rc::new(Tensor::new(bc.shape.clone(), data));
        self.push_op(out, &[a, b], move |g| {
            let (ad, bd) = (av.data(), bv.data());
            let mut ga = Tensor::zeros(av.shape().to_vec());
            let mut gb = Tensor::zeros(bv.shape().to_vec());
            {
                let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                for (i, &gi) in g.data().iter().enumerate() {
                    let (ia, ib) = (bc.ia(i), bc.ib(i));
                    match op {
                        BinOp::Add => {
                            gad[ia] += gi;
                            gbd[ib] += gi;
                        }
                        BinOp::Sub => {
                            gad[ia] += gi;
                            gbd[ib] -= gi;
                        }
                        BinOp::Mul => {
                            gad[ia] += gi * bd[ib];
                            gbd[ib] += gi * ad[ia];
                        }
                        BinOp::Div => {
                            let y = bd[ib];
                            gad[ia] += gi / y;
                            gbd[ib] -= gi * ad[ia] / (y * y);
                        }
                    }
                }
            }
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary(
        &self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let xv = self.value(x);
        let out = Rc::new(xv.map(f));
        let yv = out.clone();
        self.push_op(out, &[x], move |g| {
            let data = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(yv.data()))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data))]
        })
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, move |v| v + c, |_, _| T::one())
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -T::one())
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max(T::zero()),
            |v, _| if v > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * s },
            move |v, _| if v > T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus, |v, _| sigmoid(v))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, T::exp, |_, y| y)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, T::ln, |v, _| T::one() / v)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, T::sqrt, |_, y| T::lit(0.5) / y)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |v, _| v + v)
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, T::abs, |v, _| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Clamp into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary(
            x,
            move |v| v.max(lo).min(hi),
            move |v, _| if v >= lo && v <= hi { T::one() } else { T::zero() },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_gradient;
    use super::*;

    #[test]
    fn broadcast_binary_values() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn([2, 3], |i| i as f64));
        let b = g.constant(Tensor::new([3], vec![1.0, 2.0, 4.0]));
        let c = g.div(a, b);
        assert_eq!(g.value(c).data(), &[0.0, 0.5, 0.5, 3.0, 2.0, 1.25]);
    }

    #[test]
    fn binary_gradients_with_broadcast() {
        let x = Tensor::from_fn([2, 1, 3], |i| 0.5 + (i as f64 * 0.9).sin().abs());
        let y = Tensor::from_fn([4, 1], |i| 1.0 + i as f64 * 0.25);
        for op in 0..4 {
            let yc = y.clone();
            check_gradient(
                &x,
                move |g, x| {
                    let yv = g.constant(yc.clone());
                    let z = match op {
                        0 => g.add(x, yv),
                        1 => g.sub(yv, x),
                        2 => g.mul(x, yv),
                        _ => g.div(yv, x),
                    };
                    g.sum_all(g.square(z))
                },
                1e-5,
                1e-7,
            );
        }
        let xc = x.clone();
        check_gradient(
            &y,
            move |g, y| {
                let xv = g.constant(xc.clone());
                g.sum_all(g.div(xv, y))
            },
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn unary_gradients() {
        let x = Tensor::from_fn([7], |i| -1.7 + i as f64 * 0.55);
        let pos = x.map(|v| v.abs() + 0.3);
        check_gradient(&x, |g, x| g.sum_all(g.sigmoid(x)), 1e-5, 1e-7);
        check_gradient(&x, |g, x| g.sum_all(g.softplus(x)), 1e-5, 1e-7);
        check_gradient(&x, |g, x| g.sum_all(g.exp(x)), 1e-5, 1e-7);
        check_gradient(&x, |g, x| g.sum_all(g.leaky_relu(x, 0.2)), 1e-5, 1e-7);
        check_gradient(&pos, |g, x| g.sum_all(g.ln(x)), 1e-5, 1e-7);
        check_gradient(&pos, |g, x| g.sum_all(g.sqrt(x)), 1e-5, 1e-7);
    }

    #[test]
    fn stable_activations_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
    }
}
