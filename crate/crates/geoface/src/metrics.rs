//! Image, keypoint and distribution metrics with pluggable backends.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataio::{list_frames, Image};
use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn same_shape(x: &Image, y: &Image) -> Result<()> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// Mean absolute difference on the `[0, 1]` scale; multiply by 255 for the
/// 8-bit scale.
pub fn l1(x: &Image, y: &Image) -> Result<f64> {
    same_shape(x, y)?;
    let s: f64 = x.pixels().iter().zip(y.pixels()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(s / x.pixels().len() as f64)
}

pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    same_shape(x, y)?;
    let mse: f64 = x
        .pixels()
        .iter()
        .zip(y.pixels())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / x.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            tmp[i * wo + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..n).map(|t| k[t] * tmp[(i + t) * wo + j]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM over channels and valid window positions.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    same_shape(x, y)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images")));
    }
    let k = ssim_kernel();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let a: Vec<f64> = (0..h * w).map(|p| x.pixels()[p * 3 + c] as f64).collect();
        let b: Vec<f64> = (0..h * w).map(|p| y.pixels()[p * 3 + c] as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let (mu_a, ..) = filter_valid(&a, h, w, &k);
        let (mu_b, ..) = filter_valid(&b, h, w, &k);
        let (aa, ..) = filter_valid(&prod(&a, &a), h, w, &k);
        let (bb, ..) = filter_valid(&prod(&b, &b), h, w, &k);
        let (ab, ..) = filter_valid(&prod(&a, &b), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Facial landmark detector in pixel coordinates.
pub trait LandmarkPlugin {
    fn id(&self) -> &str;
    /// `None` when no face is found.
    fn detect(&self, image: &Image) -> Option<Vec<[f64; 2]>>;
}

/// Luminance-weighted centroid of each image quadrant; fails on black frames.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuadrantCentroids;

impl LandmarkPlugin for QuadrantCentroids {
    fn id(&self) -> &str {
        "quadrant-centroids"
    }

    fn detect(&self, image: &Image) -> Option<Vec<[f64; 2]>> {
        let (h, w) = (image.height(), image.width());
        let lum = image.luminance();
        let mut acc = [[0.0f64; 3]; 4];
        for i in 0..h {
            for j in 0..w {
                let q = (i >= h / 2) as usize * 2 + (j >= w / 2) as usize;
                let v = lum[i * w + j] as f64;
                acc[q][0] += v;
                acc[q][1] += v * j as f64;
                acc[q][2] += v * i as f64;
            }
        }
        acc.iter()
            .map(|a| (a[0] > 1e-9).then(|| [a[1] / a[0], a[2] / a[0]]))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Akd {
    /// Mean landmark distance in pixels.
    pub value: f64,
    pub frames_used: usize,
    pub frames_skipped: usize,
}

/// Mean Euclidean landmark distance over frames where both detections exist.
pub fn akd_from_landmarks(pred: &[Option<Vec<[f64; 2]>>], gt: &[Option<Vec<[f64; 2]>>]) -> Result<Akd> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!("{} predicted vs {} reference frames", pred.len(), gt.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut used = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        let (Some(p), Some(g)) = (p, g) else { continue };
        if p.len() != g.len() {
            return Err(Error::Metric("landmark counts differ between frames".into()));
        }
        for (a, b) in p.iter().zip(g) {
            sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            n += 1;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("no detectable faces".into()));
    }
    Ok(Akd {
        value: if n == 0 { 0.0 } else { sum / n as f64 },
        frames_used: used,
        frames_skipped: pred.len() - used,
    })
}

pub fn akd<P: LandmarkPlugin + ?Sized>(pred: &[Image], gt: &[Image], plugin: &P) -> Result<Akd> {
    let detect = |frames: &[Image]| frames.iter().map(|f| plugin.detect(f)).collect::<Vec<_>>();
    akd_from_landmarks(&detect(pred), &detect(gt))
}

/// Frozen image embedder for distribution metrics.
pub trait Embedder {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, image: &Image) -> Vec<f64>;
}

/// Per-channel means and standard deviations plus mean absolute luminance
/// gradients along both axes (8 features).
#[derive(Clone, Copy, Debug, Default)]
pub struct MomentsEmbedder;

impl Embedder for MomentsEmbedder {
    fn id(&self) -> &str {
        "moments"
    }

    fn dim(&self) -> usize {
        8
    }

    fn embed(&self, image: &Image) -> Vec<f64> {
        let (h, w) = (image.height(), image.width());
        let n = (h * w) as f64;
        let mut out = Vec::with_capacity(8);
        let mut stds = Vec::with_capacity(3);
        for c in 0..3 {
            let vals = image.pixels().iter().skip(c).step_by(3).map(|&v| v as f64);
            let mean = vals.clone().sum::<f64>() / n;
            let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            out.push(mean);
            stds.push(var.sqrt());
        }
        out.extend(stds);
        let lum = image.luminance();
        let mut gx = 0.0;
        let mut gy = 0.0;
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    gx += (lum[i * w + j + 1] - lum[i * w + j]).abs() as f64;
                }
                if i + 1 < h {
                    gy += (lum[(i + 1) * w + j] - lum[i * w + j]).abs() as f64;
                }
            }
        }
        out.push(gx / n);
        out.push(gy / n);
        out
    }
}

fn mean_cov(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = set.first().map(Vec::len).unwrap_or(0);
    if d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(Error::Metric("feature vectors must be non-empty and equally sized".into()));
    }
    if set.len() < d + 1 {
        return Err(Error::Metric(format!(
            "fid needs at least {} samples for {d}-dimensional features, got {}",
            d + 1,
            set.len()
        )));
    }
    let n = set.len() as f64;
    let mut mean = DVector::zeros(d);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

/// Symmetric PSD square root; negative eigenvalues are clipped to zero.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let worst = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::min);
    if worst < -1e-6 {
        log::warn!("clipping negative eigenvalue {worst:e} in covariance square root");
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = mean_cov(a)?;
    let (mb, cb) = mean_cov(b)?;
    if ma.len() != mb.len() {
        return Err(Error::Metric("feature sets differ in dimension".into()));
    }
    // tr((Σa Σb)^{1/2}) = tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})
    let ra = sqrt_psd(ca.clone());
    let cross = sqrt_psd(&ra * &cb * &ra);
    let d = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Face-identity embedder for CSIM.
pub trait IdentityPlugin {
    fn id(&self) -> &str;
    fn embed(&self, image: &Image) -> Vec<f64>;
}

/// Stand-in for learned perceptual similarity backends.
pub trait LpipsPlugin {
    fn id(&self) -> &str;
    fn distance(&self, x: &Image, y: &Image) -> f64;
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity of identity embeddings.
pub fn csim<P: IdentityPlugin + ?Sized>(pred: &[Image], reference: &[Image], plugin: &P) -> Result<f64> {
    if pred.len() != reference.len() || pred.is_empty() {
        return Err(Error::Metric("csim needs equally long, non-empty sequences".into()));
    }
    let s: f64 = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| cosine(&plugin.embed(p), &plugin.embed(r)))
        .sum();
    Ok(s / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Value(f64),
    Unavailable { unavailable: String },
}

impl MetricValue {
    pub fn unavailable(reason: impl Into<String>) -> Self {
        Self::Unavailable {
            unavailable: reason.into(),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Value(v) => Some(*v),
            Self::Unavailable { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, MetricValue>,
    /// Number of samples behind each metric.
    pub counts: BTreeMap<String, usize>,
    /// Backend used by each metric.
    pub backends: BTreeMap<String, String>,
}

/// Optional backends for [`evaluate_frames`].
#[derive(Default)]
pub struct Plugins<'a> {
    pub identity: Option<&'a dyn IdentityPlugin>,
    pub lpips: Option<&'a dyn LpipsPlugin>,
}

/// Every metric over paired frame sequences.
pub fn evaluate_frames(pred: &[Image], gt: &[Image], plugins: &Plugins) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Metric(format!(
            "need equally many predicted and reference frames, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len();
    let mut r = MetricReport::default();
    let mut put = |name: &str, v: MetricValue, count: usize, backend: &str| {
        r.metrics.insert(name.into(), v);
        r.counts.insert(name.into(), count);
        r.backends.insert(name.into(), backend.into());
    };
    let mean = |f: fn(&Image, &Image) -> Result<f64>| -> Result<f64> {
        let mut s = 0.0;
        for (p, g) in pred.iter().zip(gt) {
            s += f(p, g)?;
        }
        Ok(s / n as f64)
    };
    let l1v = mean(l1)?;
    put("l1", MetricValue::Value(l1v), n, "builtin");
    put("l1_255", MetricValue::Value(l1v * 255.0), n, "builtin");
    put("psnr", MetricValue::Value(mean(psnr)?), n, "builtin");
    put("ssim", MetricValue::Value(mean(ssim)?), n, "builtin");
    match akd(pred, gt, &QuadrantCentroids) {
        Ok(a) => put("akd", MetricValue::Value(a.value), a.frames_used, QuadrantCentroids.id()),
        Err(e) => put("akd", MetricValue::unavailable(e.to_string()), 0, QuadrantCentroids.id()),
    }
    let emb = MomentsEmbedder;
    let fa: Vec<_> = pred.iter().map(|f| emb.embed(f)).collect();
    let fb: Vec<_> = gt.iter().map(|f| emb.embed(f)).collect();
    match fid(&fa, &fb) {
        Ok(v) => put("fid", MetricValue::Value(v), n, emb.id()),
        Err(e) => put("fid", MetricValue::unavailable(e.to_string()), n, emb.id()),
    }
    match plugins.identity {
        Some(p) => put("csim", MetricValue::Value(csim(pred, gt, p)?), n, p.id()),
        None => put("csim", MetricValue::unavailable("no identity plugin"), 0, "none"),
    }
    match plugins.lpips {
        Some(p) => {
            let s: f64 = pred.iter().zip(gt).map(|(a, b)| p.distance(a, b)).sum();
            put("lpips", MetricValue::Value(s / n as f64), n, p.id())
        }
        None => put("lpips", MetricValue::unavailable("no lpips plugin"), 0, "none"),
    }
    Ok(r)
}

/// Loads the frames of two directories (paired in name order) and evaluates them.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, plugins: &Plugins) -> Result<MetricReport> {
    let load = |dir: &Path| -> Result<Vec<Image>> {
        if !dir.is_dir() {
            return Err(Error::MissingRoot(dir.to_path_buf()));
        }
        list_frames(dir)?.iter().map(|p| Image::load(p)).collect()
    };
    evaluate_frames(&load(pred_dir)?, &load(gt_dir)?, plugins)
}
