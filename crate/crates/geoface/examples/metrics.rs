// Image and distribution metrics on synthetic frames.

use geoface::dataio::Image;
use geoface::metrics::{akd_from_landmarks, evaluate_frames, fid, Plugins};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub fn run() -> anyhow::Result<()> {
    let frames: Vec<Image> = (0..12)
        .map(|t| Image::from_fn(32, 32, move |y, x| [((x + t) % 32) as f32 / 31.0, y as f32 / 31.0, 0.5]))
        .collect();
    let shifted: Vec<Image> = (0..12)
        .map(|t| Image::from_fn(32, 32, move |y, x| [((x + t + 2) % 32) as f32 / 31.0, y as f32 / 31.0, 0.5]))
        .collect();
    let report = evaluate_frames(&frames, &shifted, &Plugins::default())?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    let akd = akd_from_landmarks(&[Some(vec![[10.0, 10.0]])], &[Some(vec![[13.0, 14.0]])])?;
    println!("landmarks offset by (3, 4): akd {}", akd.value);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut sample = |shift: f64| -> Vec<f64> {
        (0..4)
            .map(|i| Distribution::<f64>::sample(&StandardNormal, &mut rng) + if i == 0 { shift } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    let a: Vec<_> = (0..5000).map(|_| sample(0.0)).collect();
    let b: Vec<_> = (0..5000).map(|_| sample(1.0)).collect();
    println!("fid between unit Gaussians one unit apart: {:.3}", fid(&a, &b)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run()
}
