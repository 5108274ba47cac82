// Composites two rays front to back and checks the renderer against its
// reference accumulation.

use geoface::fvr::{render_selftest, transmittance, volume_render, RaySamples};
use geoface::Tensor;

pub fn run() -> anyhow::Result<()> {
    // ray 0 is nearly empty, ray 1 hits a dense red sample first
    let density = Tensor::new([2, 3], vec![0.01, 0.02, 0.01, 4.0, 0.5, 0.5]);
    let color = Tensor::new(
        [2, 3, 3],
        vec![
            0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, //
            1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0,
        ],
    );
    let samples = RaySamples::new(density.clone(), color)?;
    let out = volume_render(&samples);
    for ray in 0..2 {
        let tau = transmittance(&density.data()[ray * 3..ray * 3 + 3]);
        let rgb = &out.values.data()[ray * 3..ray * 3 + 3];
        println!("ray {ray}: rgb {rgb:.3?}, light passing through {:.3}", tau[3]);
    }
    let report = render_selftest(0, 100);
    println!(
        "reference check: {} cases, max error {:.2e}",
        report.cases, report.max_abs_error
    );
    anyhow::ensure!(report.passed, "renderer disagrees with the reference");
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run()
}
