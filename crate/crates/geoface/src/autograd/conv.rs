use std::rc::Rc;

use super::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], geo: &ConvGeom, cols: &mut [T]) {
    let ConvGeom { c, h, w, kh, kw, stride, pad, ho, wo } = *geo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], geo: &ConvGeom, x: &mut [T]) {
    let ConvGeom { c, h, w, kh, kw, stride, pad, ho, wo } = *geo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// 2-D cross-correlation, `x: [N, C, H, W]`, `weight: [O, C, kh, kw]`,
    /// `bias: [O]`, zero padding.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let bv = bias.map(|b| self.value(b));
        let (n, c, h, w) = xv.dims4();
        let (o, wc, kh, kw) = wv.dims4();
        assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than input");
        if let Some(b) = &bv {
            assert_eq!(b.shape(), &[o], "conv2d: bias shape");
        }
        let geo = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncol) = (geo.rows(), geo.cols());
        let mut out = vec![T::zero(); n * o * ncol];
        let mut cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * ncol]
        };
        for s in 0..n {
            let xs = &xv.data()[s * c * h * w..(s + 1) * c * h * w];
            let ys = &mut out[s * o * ncol..(s + 1) * o * ncol];
            if let Some(b) = &bv {
                for (oc, &bval) in b.data().iter().enumerate() {
                    ys[oc * ncol..(oc + 1) * ncol].iter_mut().for_each(|v| *v = bval);
                }
            }
            let src: &[T] = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, &geo, &mut cols);
                &cols
            };
            T::gemm(o, rows, ncol, wv.data(), false, src, false, ys, bv.is_some());
        }
        let out = Rc::new(Tensor::new(vec![n, o, geo.ho, geo.wo], out));
        let need_x = self.requires_grad(x);
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.push_op(out, &parents, move |g| {
            let mut gw = Tensor::zeros(wv.shape().to_vec());
            let mut gx = need_x.then(|| Tensor::zeros(xv.shape().to_vec()));
            let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { rows * ncol }];
            let mut gcols = vec![T::zero(); rows * ncol];
            for s in 0..n {
                let xs = &xv.data()[s * c * h * w..(s + 1) * c * h * w];
                let gs = &g.data()[s * o * ncol..(s + 1) * o * ncol];
                let src: &[T] = if geo.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &geo, &mut cols);
                    &cols
                };
                T::gemm(o, ncol, rows, gs, false, src, true, gw.data_mut(), true);
                if let Some(gx) = gx.as_mut() {
                    let gxs = &mut gx.data_mut()[s * c * h * w..(s + 1) * c * h * w];
                    if geo.is_pointwise() {
                        T::gemm(rows, o, ncol, wv.data(), true, gs, false, gxs, false);
                    } else {
                        T::gemm(rows, o, ncol, wv.data(), true, gs, false, &mut gcols, false);
                        col2im(&gcols, &geo, gxs);
                    }
                }
            }
            let mut grads = vec![gx, Some(gw)];
            if has_bias {
                let mut gb = vec![T::zero(); o];
                for s in 0..n {
                    for (oc, acc) in gb.iter_mut().enumerate() {
                        let base = (s * o + oc) * ncol;
                        *acc += g.data()[base..base + ncol].iter().copied().sum::<T>();
                    }
                }
                grads.push(Some(Tensor::new(vec![o], gb)));
            }
            grads
        })
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let xd = xv.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..ho {
                for xx in 0..wo {
                    let i = base + 2 * y * w + 2 * xx;
                    out.push((xd[i] + xd[i + 1] + xd[i + w] + xd[i + w + 1]) * quarter);
                }
            }
        }
        let out = Rc::new(Tensor::new(vec![n, c, ho, wo], out));
        self.push_op(out, &[x], move |g| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for y in 0..ho {
                    for xx in 0..wo {
                        let v = g.data()[(p * ho + y) * wo + xx] * quarter;
                        let i = p * h * w + 2 * y * w + 2 * xx;
                        gx[i] = v;
                        gx[i + 1] = v;
                        gx[i + w] = v;
                        gx[i + w + 1] = v;
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], gx))]
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let xd = xv.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            for y in 0..ho {
                let row = &xd[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                for xx in 0..wo {
                    out.push(row[xx / 2]);
                }
            }
        }
        let out = Rc::new(Tensor::new(vec![n, c, ho, wo], out));
        self.push_op(out, &[x], move |g| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for y in 0..ho {
                    for xx in 0..wo {
                        gx[(p * h + y / 2) * w + xx / 2] += g.data()[(p * ho + y) * wo + xx];
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], gx))]
        })
    }

    /// Repeated 2× average pooling down to `size`×`size`.
    pub fn downsample_to(&self, x: Var, size: usize) -> Var {
        let mut cur = x;
        loop {
            let s = self.shape(cur);
            if s[2] == size {
                return cur;
            }
            assert!(s[2] > size && s[2].is_multiple_of(2), "cannot pool {}x{} down to {size}", s[2], s[3]);
            cur = self.avg_pool2(cur);
        }
    }

    /// Nearest upsampling by powers of two up to `size`×`size`.
    pub fn upsample_to(&self, x: Var, size: usize) -> Var {
        let mut cur = x;
        loop {
            let s = self.shape(cur);
            if s[2] == size {
                return cur;
            }
            assert!(s[2] < size, "cannot upsample {} to {size}", s[2]);
            cur = self.upsample2(cur);
        }
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance.
    pub fn instance_norm(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let m = h * w;
        let inv_m = T::lit(1.0 / m as f64);
        let eps = T::lit(eps);
        let mut y = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for p in 0..n * c {
            let xs = &xv.data()[p * m..(p + 1) * m];
            let mean = xs.iter().copied().sum::<T>() * inv_m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let is = T::one() / (var + eps).sqrt();
            inv_std[p] = is;
            for (yy, &v) in y[p * m..(p + 1) * m].iter_mut().zip(xs) {
                *yy = (v - mean) * is;
            }
        }
        let out = Rc::new(Tensor::new(vec![n, c, h, w], y));
        let yv = out.clone();
        self.push_op(out, &[x], move |g| {
            let mut gx = vec![T::zero(); n * c * m];
            for p in 0..n * c {
                let gs = &g.data()[p * m..(p + 1) * m];
                let ys = &yv.data()[p * m..(p + 1) * m];
                let gmean = gs.iter().copied().sum::<T>() * inv_m;
                let gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() * inv_m;
                for ((d, &gi), &yi) in gx[p * m..(p + 1) * m].iter_mut().zip(gs).zip(ys) {
                    *d = inv_std[p] * (gi - gmean - yi * gy);
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], gx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_gradient;
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4();
        let (o, _, kh, kw) = w.dims4();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Tensor::from_fn([n, o, ho, wo], |idx| {
            let ox = idx % wo;
            let oy = (idx / wo) % ho;
            let oc = (idx / (wo * ho)) % o;
            let s = idx / (wo * ho * o);
            let mut acc = b[oc];
            for ci in 0..c {
                for i in 0..kh {
                    for j in 0..kw {
                        let iy = (oy * stride + i) as isize - pad as isize;
                        let ix = (ox * stride + j) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.data()[((oc * c + ci) * kh + i) * kw + j]
                                * x.data()[((s * c + ci) * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive() {
        let x = Tensor::from_fn([2, 3, 7, 6], |i| (i as f64 * 0.13).sin());
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let w = Tensor::from_fn([4, 3, k, k], |i| (i as f64 * 0.07).cos());
            let b = [0.1, -0.2, 0.3, 0.0];
            let g = Graph::new();
            let (xv, wv, bv) = (
                g.constant(x.clone()),
                g.constant(w.clone()),
                g.constant(Tensor::new([4], b.to_vec())),
            );
            let y = g.value(g.conv2d(xv, wv, Some(bv), stride, pad));
            let want = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_gradients() {
        let x = Tensor::from_fn([2, 2, 5, 5], |i| (i as f64 * 0.13).sin());
        let w = Tensor::from_fn([3, 2, 3, 3], |i| (i as f64 * 0.07).cos());
        let probe = Tensor::from_fn([2, 3, 3, 3], |i| (i as f64 * 0.31).sin());
        let (wc, pc) = (w.clone(), probe.clone());
        check_gradient(
            &x,
            move |g, x| {
                let y = g.conv2d(x, g.constant(wc.clone()), None, 2, 1);
                g.sum_all(g.mul(y, g.constant(pc.clone())))
            },
            1e-5,
            1e-7,
        );
        let (xc, pc) = (x.clone(), probe.clone());
        check_gradient(
            &w,
            move |g, w| {
                let b = g.variable(Tensor::new([3], vec![0.5, 0.1, -0.3]));
                let y = g.conv2d(g.constant(xc.clone()), w, Some(b), 2, 1);
                g.sum_all(g.mul(y, g.constant(pc.clone())))
            },
            1e-5,
            1e-7,
        );
        let b = Tensor::new([3], vec![0.5, 0.1, -0.3]);
        check_gradient(
            &b,
            move |g, b| {
                let y = g.conv2d(g.constant(x.clone()), g.constant(w.clone()), Some(b), 2, 1);
                g.sum_all(g.mul(y, g.constant(probe.clone())))
            },
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn pooling_and_norm_gradients() {
        let x = Tensor::from_fn([1, 2, 4, 4], |i| (i as f64 * 0.9).sin());
        let probe = Tensor::from_fn([1, 2, 4, 4], |i| (i as f64 * 0.4).cos());
        let p2 = probe.clone();
        check_gradient(
            &x,
            move |g, x| {
                let y = g.upsample2(g.avg_pool2(x));
                g.sum_all(g.mul(y, g.constant(p2.clone())))
            },
            1e-5,
            1e-7,
        );
        check_gradient(
            &x,
            move |g, x| {
                let y = g.instance_norm(x, 1e-5);
                g.sum_all(g.mul(y, g.constant(probe.clone())))
            },
            1e-5,
            1e-6,
        );
    }
}
