//! Frame datasets on disk, deterministic pair sampling and preprocessing.
//!
//! A dataset root holds one directory per clip; the lexicographic order of the
//! frame files inside a clip is its temporal order:
//!
//! ```text
//! <root>/<clip_id>/frame_000000.png
//! <root>/<clip_id>/frame_000001.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image with `f32` samples in `[0, 1]`, stored row-major as `H×W×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {} samples, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numerical(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(y, x).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { height, width, pixels }
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            pixels: rgb.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
            .save(path)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    /// `[3, H, W]` planar tensor.
    pub fn to_chw(&self) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn([3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            self.pixels[p * 3 + c]
        })
    }

    /// Inverse of [`Image::to_chw`]; values are clamped into `[0, 1]`.
    pub fn from_chw(t: &Tensor<f32>) -> Self {
        let (c, h, w) = match t.shape() {
            [c, h, w] => (*c, *h, *w),
            [1, c, h, w] => (*c, *h, *w),
            s => panic!("expected [3, H, W] tensor, got {s:?}"),
        };
        assert_eq!(c, 3, "expected 3 channels");
        let d = t.data();
        Self::from_fn(h, w, |y, x| {
            [0, 1, 2].map(|ch| d[(ch * h + y) * w + x])
        })
    }

    pub fn luminance(&self) -> Vec<f32> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

/// Stacks equally sized images into an `[N, 3, H, W]` batch.
pub fn batch_tensor(images: &[&Image]) -> Tensor<f32> {
    let planes: Vec<Tensor<f32>> = images.iter().map(|im| im.to_chw()).collect();
    Tensor::stack(&planes)
}

pub const SUPPORTED_SIZES: [usize; 3] = [64, 128, 256];

/// Center-crops to a square and bilinearly resizes to `target_size`.
pub fn preprocess(raw: &Image, target_size: usize) -> Result<Image> {
    if !SUPPORTED_SIZES.contains(&target_size) {
        return Err(Error::Config(format!(
            "target size {target_size} not in {SUPPORTED_SIZES:?}"
        )));
    }
    Ok(crop_and_resize(raw, target_size))
}

pub(crate) fn crop_and_resize(raw: &Image, target: usize) -> Image {
    let side = raw.height.min(raw.width);
    let oy = (raw.height - side) / 2;
    let ox = (raw.width - side) / 2;
    if side == target {
        return Image::from_fn(target, target, |y, x| {
            [0, 1, 2].map(|c| raw.get(y + oy, x + ox, c))
        });
    }
    let scale = side as f64 / target as f64;
    let src = |d: usize| -> (usize, usize, f32) {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    Image::from_fn(target, target, |y, x| {
        let (y0, y1, wy) = src(y);
        let (x0, x1, wx) = src(x);
        [0, 1, 2].map(|c| {
            let p = |yy: usize, xx: usize| raw.get(yy + oy, xx + ox, c);
            let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
            let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
            top * (1.0 - wy) + bot * wy
        })
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub frame_dir: PathBuf,
    pub frame_count: usize,
    /// Frame file names in temporal order.
    pub frames: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub clips: Vec<ClipRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    clip_id: String,
    frame_count: usize,
    path: PathBuf,
}

fn is_frame_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// PNG/JPEG files directly inside `dir`, sorted by name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_frame_file(p))
        .collect();
    frames.sort();
    Ok(frames)
}

/// Enumerates `root/<clip_id>/<frames>`, keeping clips with at least two
/// decodable frames, ordered by clip id.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut clips = Vec::new();
    for dir in dirs {
        let clip_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let frames: Vec<String> = list_frames(&dir)?
            .iter()
            .filter(|p| image::image_dimensions(p).is_ok())
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        if frames.len() < 2 {
            log::warn!("skipping clip {clip_id}: {} decodable frame(s)", frames.len());
            continue;
        }
        clips.push(ClipRecord {
            clip_id,
            frame_dir: dir,
            frame_count: frames.len(),
            frames,
        });
    }
    if clips.is_empty() {
        return Err(Error::NoClips(root.to_path_buf()));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        clips,
    })
}

impl DatasetManifest {
    /// JSON listing of `{clip_id, frame_count, path}` with paths relative to the root.
    pub fn to_json(&self) -> String {
        let entries: Vec<ManifestEntry> = self
            .clips
            .iter()
            .map(|c| ManifestEntry {
                clip_id: c.clip_id.clone(),
                frame_count: c.frame_count,
                path: c
                    .frame_dir
                    .strip_prefix(&self.root)
                    .unwrap_or(&c.frame_dir)
                    .to_path_buf(),
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("manifest serializes")
    }

    pub fn total_frames(&self) -> usize {
        self.clips.iter().map(|c| c.frame_count).sum()
    }

    pub fn frame_path(&self, clip: usize, frame: usize) -> PathBuf {
        let c = &self.clips[clip];
        c.frame_dir.join(&c.frames[frame])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairIndex {
    pub clip: usize,
    pub source_index: usize,
    pub driving_index: usize,
}

/// Uniform clip, then two distinct uniform frames, as a pure function of
/// `(seed, step)`.
pub fn sample_pair_index(frame_counts: &[usize], seed: u64, step: u64) -> Result<PairIndex> {
    if frame_counts.is_empty() {
        return Err(Error::Config("cannot sample from an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let clip = rng.gen_range(0..frame_counts.len());
    let n = frame_counts[clip];
    if n < 2 {
        return Err(Error::Config(format!("clip {clip} has {n} frame(s)")));
    }
    let source_index = rng.gen_range(0..n);
    let mut driving_index = rng.gen_range(0..n - 1);
    if driving_index >= source_index {
        driving_index += 1;
    }
    Ok(PairIndex {
        clip,
        source_index,
        driving_index,
    })
}

#[derive(Clone, Debug)]
pub struct FramePair {
    pub source: Image,
    pub driving: Image,
    pub clip_id: String,
    pub source_index: usize,
    pub driving_index: usize,
}

/// Anything training pairs can be drawn from.
pub trait PairSource {
    fn image_size(&self) -> usize;

    fn sample(&self, seed: u64, step: u64) -> Result<FramePair>;

    /// The `batch` pairs of training step `step`.
    fn sample_batch(&self, seed: u64, step: u64, batch: usize) -> Result<Vec<FramePair>> {
        (0..batch as u64)
            .map(|b| self.sample(seed, step * batch as u64 + b))
            .collect()
    }
}

/// Reads pairs from a scanned manifest, preprocessing every frame to `size`.
pub struct DiskPairs {
    pub manifest: DatasetManifest,
    pub size: usize,
}

impl DiskPairs {
    pub fn new(manifest: DatasetManifest, size: usize) -> Result<Self> {
        if !SUPPORTED_SIZES.contains(&size) {
            return Err(Error::Config(format!("image size {size} not in {SUPPORTED_SIZES:?}")));
        }
        Ok(Self { manifest, size })
    }
}

pub fn sample_pair(manifest: &DatasetManifest, seed: u64, step: u64, size: usize) -> Result<FramePair> {
    let counts: Vec<usize> = manifest.clips.iter().map(|c| c.frame_count).collect();
    let idx = sample_pair_index(&counts, seed, step)?;
    let load = |i: usize| -> Result<Image> {
        preprocess(&Image::load(&manifest.frame_path(idx.clip, i))?, size)
    };
    Ok(FramePair {
        source: load(idx.source_index)?,
        driving: load(idx.driving_index)?,
        clip_id: manifest.clips[idx.clip].clip_id.clone(),
        source_index: idx.source_index,
        driving_index: idx.driving_index,
    })
}

impl PairSource for DiskPairs {
    fn image_size(&self) -> usize {
        self.size
    }

    fn sample(&self, seed: u64, step: u64) -> Result<FramePair> {
        sample_pair(&self.manifest, seed, step, self.size)
    }
}

/// In-memory clips, used for synthetic corpora.
#[derive(Clone, Debug)]
pub struct MemoryClips {
    pub clips: Vec<(String, Vec<Image>)>,
}

impl PairSource for MemoryClips {
    fn image_size(&self) -> usize {
        self.clips[0].1[0].height()
    }

    fn sample(&self, seed: u64, step: u64) -> Result<FramePair> {
        let counts: Vec<usize> = self.clips.iter().map(|c| c.1.len()).collect();
        let idx = sample_pair_index(&counts, seed, step)?;
        let (id, frames) = &self.clips[idx.clip];
        Ok(FramePair {
            source: frames[idx.source_index].clone(),
            driving: frames[idx.driving_index].clone(),
            clip_id: id.clone(),
            source_index: idx.source_index,
            driving_index: idx.driving_index,
        })
    }
}

impl MemoryClips {
    /// Writes the clips as `<root>/<clip_id>/frame_%06d.png`.
    pub fn write_to(&self, root: &Path) -> Result<()> {
        for (id, frames) in &self.clips {
            let dir = root.join(id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, f) in frames.iter().enumerate() {
                f.save_png(&dir.join(format!("frame_{i:06}.png")))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_preprocess_is_bit_identical() {
        let im = Image::from_fn(64, 64, |y, x| [(x as f32) / 63.0, (y as f32) / 63.0, 0.3]);
        assert_eq!(preprocess(&im, 64).unwrap(), im);
    }

    #[test]
    fn constant_image_stays_constant() {
        let im = Image::constant(96, 150, [0.4, 0.4, 0.4]);
        let out = preprocess(&im, 64).unwrap();
        assert_eq!((out.height(), out.width()), (64, 64));
        assert!(out.pixels().iter().all(|&v| (v - 0.4).abs() <= 1e-6));
    }

    #[test]
    fn crop_is_centered() {
        // left and right thirds are black, the central square white
        let im = Image::from_fn(384, 512, |_, x| {
            if (64..448).contains(&x) { [1.0; 3] } else { [0.0; 3] }
        });
        let out = preprocess(&im, 256).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unsupported_size_is_rejected() {
        let im = Image::constant(10, 10, [0.0; 3]);
        assert!(matches!(preprocess(&im, 100), Err(Error::Config(_))));
    }

    #[test]
    fn pair_sampling_is_deterministic_and_distinct() {
        let counts = [5, 3, 9];
        for step in 0..200 {
            let a = sample_pair_index(&counts, 11, step).unwrap();
            assert_eq!(a, sample_pair_index(&counts, 11, step).unwrap());
            assert_ne!(a.source_index, a.driving_index);
            assert!(a.driving_index < counts[a.clip] && a.source_index < counts[a.clip]);
        }
    }

    #[test]
    fn two_frame_clip_yields_both_orders() {
        let mut seen = std::collections::HashSet::new();
        for step in 0..100 {
            let p = sample_pair_index(&[2], 3, step).unwrap();
            seen.insert((p.source_index, p.driving_index));
        }
        let want: std::collections::HashSet<_> = [(0, 1), (1, 0)].into_iter().collect();
        assert_eq!(seen, want);
    }

    #[test]
    fn empty_dataset_cannot_be_sampled() {
        assert!(sample_pair_index(&[], 0, 0).is_err());
    }
}
