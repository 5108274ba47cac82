// Scores one image with the RGB, depth and normal discriminators and shows
// spectral normalization pinning a weight's largest singular value to one.

use geoface::gan::{discriminate, spectral_normalize, DiscriminatorEnsemble, EnsembleInput};
use geoface::geometry::GeometryExtractor;
use geoface::synthetic::BlobCorpus;
use geoface::Tensor;

pub fn run() -> anyhow::Result<()> {
    let parts = DiscriminatorEnsemble::standard([0.5, 0.25, 0.25], 7)?;
    let frame = &BlobCorpus { clips: 1, ..Default::default() }.generate().clips[0].1[0];
    let maps = GeometryExtractor::baseline(64).extract(frame)?;
    let normal = Tensor::from_fn([3, 64, 64], |i| maps.normal.data()[(i % 4096) * 3 + i / 4096] as f32);
    let input = EnsembleInput {
        rgb: frame.to_chw(),
        depth: Some(maps.depth.cast::<f32>()),
        normal: Some(normal),
    };
    let scores = discriminate(&parts, &input)?;
    for (m, s) in &scores.members {
        println!("{:>6}: {s:.4}", m.name());
    }
    println!(" total: {:.4}", scores.total);

    let w = Tensor::from_fn([4, 6], |i| ((i * 7 % 11) as f64 - 5.0) * 0.3);
    let mut u = vec![0.5; 4];
    let mut normalized = w.clone();
    for _ in 0..50 {
        normalized = spectral_normalize(&w, &mut u);
    }
    let sigma = nalgebra::DMatrix::from_row_slice(4, 6, normalized.data()).singular_values().max();
    println!("largest singular value after normalization: {sigma:.6}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run()
}
