//! Procedural moving-blob clips for smoke tests and demos.

use rand::Rng;

use crate::dataio::{Image, MemoryClips};
use crate::nn::component_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobCorpus {
    pub clips: usize,
    pub frames_per_clip: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for BlobCorpus {
    fn default() -> Self {
        Self {
            clips: 50,
            frames_per_clip: 2,
            size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    center: [f64; 2],
    velocity: [f64; 2],
    radius: f64,
    color: [f32; 3],
}

/// Soft disc coverage in `[0, 1]` with a one-pixel ramp at the rim.
fn coverage(d: f64, radius: f64) -> f32 {
    (radius + 0.5 - d).clamp(0.0, 1.0) as f32
}

impl BlobCorpus {
    /// Each clip is a flat background with two colored discs translating at
    /// constant velocity.
    pub fn generate(&self) -> MemoryClips {
        let s = self.size as f64;
        let clips = (0..self.clips)
            .map(|c| {
                let mut rng = component_rng(self.seed, &format!("blobs.{c}"));
                let bg: [f32; 3] = [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)];
                let blobs: Vec<Blob> = (0..2)
                    .map(|_| Blob {
                        center: [rng.gen_range(0.3 * s..0.7 * s), rng.gen_range(0.3 * s..0.7 * s)],
                        velocity: [rng.gen_range(-0.08 * s..0.08 * s), rng.gen_range(-0.08 * s..0.08 * s)],
                        radius: rng.gen_range(0.12 * s..0.2 * s),
                        color: [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)],
                    })
                    .collect();
                let frames = (0..self.frames_per_clip)
                    .map(|t| {
                        Image::from_fn(self.size, self.size, |y, x| {
                            let mut px = bg;
                            for b in &blobs {
                                let cx = b.center[0] + b.velocity[0] * t as f64;
                                let cy = b.center[1] + b.velocity[1] * t as f64;
                                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                                let a = coverage(d, b.radius);
                                for (v, c) in px.iter_mut().zip(b.color) {
                                    *v = *v * (1.0 - a) + c * a;
                                }
                            }
                            px
                        })
                    })
                    .collect();
                (format!("blob_{c:03}"), frames)
            })
            .collect();
        MemoryClips { clips }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::PairSource;

    #[test]
    fn deterministic_and_moving() {
        let corpus = BlobCorpus {
            clips: 3,
            ..Default::default()
        };
        let a = corpus.generate();
        let b = corpus.generate();
        assert_eq!(a.clips, b.clips);
        assert_eq!(a.image_size(), 64);
        for (_, frames) in &a.clips {
            assert_eq!(frames.len(), 2);
            assert_ne!(frames[0], frames[1]);
        }
    }
}
