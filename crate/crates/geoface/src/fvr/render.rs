//! Front-to-back compositing along orthographic rays.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-ray samples: density `[P, D]`, color `[P, D, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples<T> {
    pub density: Tensor<T>,
    pub color: Tensor<T>,
}

impl<T: Real> RaySamples<T> {
    pub fn new(density: Tensor<T>, color: Tensor<T>) -> Result<Self> {
        let (p, d) = match density.shape() {
            [p, d] => (*p, *d),
            s => return Err(Error::Shape(format!("density must be P×D, got {s:?}"))),
        };
        if color.rank() != 3 || color.shape()[..2] != [p, d] {
            return Err(Error::Shape(format!(
                "color {:?} does not match density {p}x{d}",
                color.shape()
            )));
        }
        if density.data().iter().any(|&s| !(s >= T::zero())) {
            return Err(Error::Numerical("densities must be nonnegative".into()));
        }
        Ok(Self { density, color })
    }

    pub fn num_rays(&self) -> usize {
        self.density.shape()[0]
    }

    pub fn samples_per_ray(&self) -> usize {
        self.density.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.color.shape()[2]
    }
}

/// Composited features `[P, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFeatures<T> {
    pub values: Tensor<T>,
}

impl<T: Real> RenderedFeatures<T> {
    /// `[C, H, W]` view for `P = H·W` row-major pixels.
    pub fn to_chw(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        let (p, c) = (self.values.shape()[0], self.values.shape()[1]);
        if p != h * w {
            return Err(Error::Shape(format!("{p} rays cannot fill {h}x{w}")));
        }
        Ok(Tensor::from_fn([c, h, w], |i| self.values.data()[(i % p) * c + i / p]))
    }
}

/// `τ_1..τ_{D+1}` of one ray: `τ_j = exp(−Σ_{k<j} σ_k)`.
pub fn transmittance<T: Real>(density: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(density.len() + 1);
    let mut acc = T::zero();
    out.push(T::one());
    for &s in density {
        acc += s;
        out.push((-acc).exp());
    }
    out
}

/// Forward pass over pixel-major buffers; returns the output and the
/// per-sample transmittances `[P, D]` needed by the backward pass.
fn render_forward<T: Real>(density: &[T], color: &[T], p: usize, d: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); p * c];
    let mut trans = vec![T::zero(); p * d];
    for i in 0..p {
        let sig = &density[i * d..(i + 1) * d];
        let mut acc = T::zero();
        for j in 0..d {
            let tj = (-acc).exp();
            trans[i * d + j] = tj;
            let w = tj * (T::one() - (-sig[j]).exp());
            let col = &color[(i * d + j) * c..(i * d + j + 1) * c];
            for (o, &cv) in out[i * c..(i + 1) * c].iter_mut().zip(col) {
                *o += w * cv;
            }
            acc += sig[j];
        }
    }
    (out, trans)
}

/// Cotangents w.r.t. density and color.
///
/// With `w_j = τ_j (1 − e^{−σ_j})`, `∂w_m/∂σ_m = τ_m e^{−σ_m}` and
/// `∂w_j/∂σ_m = −w_j` for `j > m`.
fn render_backward<T: Real>(
    density: &[T],
    color: &[T],
    trans: &[T],
    g: &[T],
    p: usize,
    d: usize,
    c: usize,
) -> (Vec<T>, Vec<T>) {
    let mut gd = vec![T::zero(); p * d];
    let mut gc = vec![T::zero(); p * d * c];
    for i in 0..p {
        let go = &g[i * c..(i + 1) * c];
        let mut later = T::zero();
        for j in (0..d).rev() {
            let s = density[i * d + j];
            let tj = trans[i * d + j];
            let e = (-s).exp();
            let w = tj * (T::one() - e);
            let base = (i * d + j) * c;
            let mut dot = T::zero();
            for k in 0..c {
                gc[base + k] = w * go[k];
                dot += go[k] * color[base + k];
            }
            gd[i * d + j] = tj * e * dot - later;
            later += w * dot;
        }
    }
    (gd, gc)
}

/// `F_r,i = Σ_j τ_j (1 − e^{−σ_ij}) c_ij`.
///
/// # Panics
/// On a negative density.
pub fn volume_render<T: Real>(samples: &RaySamples<T>) -> RenderedFeatures<T> {
    let (p, d, c) = (samples.num_rays(), samples.samples_per_ray(), samples.channels());
    assert!(
        samples.density.data().iter().all(|&s| s >= T::zero()),
        "volume_render requires nonnegative densities"
    );
    let (out, _) = render_forward(samples.density.data(), samples.color.data(), p, d, c);
    RenderedFeatures {
        values: Tensor::new([p, c], out),
    }
}

/// `[N, A, H, W]` → pixel-major `[N·H·W, A]`.
fn to_pixel_major<T: Real>(x: &[T], n: usize, a: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..a {
            for q in 0..hw {
                out[(s * hw + q) * a + ch] = x[(s * a + ch) * hw + q];
            }
        }
    }
    out
}

fn from_pixel_major<T: Real>(x: &[T], n: usize, a: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..a {
            for q in 0..hw {
                out[(s * a + ch) * hw + q] = x[(s * hw + q) * a + ch];
            }
        }
    }
    out
}

impl<T: Real> Graph<T> {
    /// `density: [N, D, H, W]`, `color: [N, D·C, H, W]` (sample-major
    /// channels) → `[N, C, H, W]`.
    pub fn volume_render(&self, density: Var, color: Var) -> Var {
        let dv = self.value(density);
        let cv = self.value(color);
        let (n, d, h, w) = dv.dims4();
        let (cn, dc, ch, cw) = cv.dims4();
        assert!(cn == n && ch == h && cw == w && dc % d == 0, "volume_render shape mismatch");
        assert!(dv.data().iter().all(|&s| s >= T::zero()), "volume_render requires nonnegative densities");
        let (c, hw) = (dc / d, h * w);
        let p = n * hw;
        let dens = Rc::new(to_pixel_major(dv.data(), n, d, hw));
        let cols = Rc::new(to_pixel_major(cv.data(), n, dc, hw));
        let (out, trans) = render_forward(&dens, &cols, p, d, c);
        let value = Rc::new(Tensor::new([n, c, h, w], from_pixel_major(&out, n, c, hw)));
        self.push_op(value, &[density, color], move |g| {
            let gp = to_pixel_major(g.data(), n, c, hw);
            let (gd, gc) = render_backward(&dens, &cols, &trans, &gp, p, d, c);
            vec![
                Some(Tensor::new([n, d, h, w], from_pixel_major(&gd, n, d, hw))),
                Some(Tensor::new([n, dc, h, w], from_pixel_major(&gc, n, dc, hw))),
            ]
        })
    }
}
