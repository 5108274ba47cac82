// Depth and normals of an analytic hemisphere, from the scene itself and
// from the luminance baseline.

use geoface::geometry::{normal_from_depth, render_synthetic_scene, GeometryExtractor, SceneSpec};

pub fn run() -> anyhow::Result<()> {
    let spec = SceneSpec::hemisphere(64);
    let (image, truth) = render_synthetic_scene(&spec)?;
    let derived = normal_from_depth(&truth.depth, 1.0)?;
    let c = 32 * 64 + 40;
    println!(
        "normal at (32, 40): analytic {:.3?}, from depth {:.3?}",
        &truth.normal.data()[c * 3..c * 3 + 3],
        &derived.data()[c * 3..c * 3 + 3]
    );

    let baseline = GeometryExtractor::baseline(64);
    let maps = baseline.extract(&image)?;
    let (lo, hi) = maps
        .depth
        .data()
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    println!("baseline depth range {lo:.2}..{hi:.2}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run()
}
