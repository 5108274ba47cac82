// Builds the dense flow of a keypoint pair and warps a feature map with it.

use geoface::motion::{compose_dense_flow, sparse_motion, warp_features, DenseMotion, FeatureMap, KeypointSet};
use geoface::Tensor;

pub fn run() -> anyhow::Result<()> {
    let (h, w) = (8, 8);
    let source = KeypointSet::with_identity_jacobians(vec![[-0.5, 0.0], [0.5, 0.0]]);
    // the second keypoint moves a quarter of the frame to the right
    let driving = KeypointSet::with_identity_jacobians(vec![[-0.5, 0.0], [0.75, 0.0]]);
    let sparse = sparse_motion(&source, &driving, h, w, 1e-4)?;

    // give the right half of the frame to keypoint 2, the rest to the background
    let masks = Tensor::from_fn([3, h, w], |i| {
        let (k, x) = (i / (h * w), i % w);
        let right = x >= w / 2;
        f64::from(u8::from((k == 2 && right) || (k == 0 && !right)))
    });
    let flow = compose_dense_flow(&masks, &sparse)?;
    let motion = DenseMotion::new(masks, flow, Tensor::ones([h, w]))?;

    let ramp = FeatureMap::new(Tensor::from_fn([1, h, w], |i| (i % w) as f64))?;
    let warped = warp_features(&ramp, &motion)?;
    let row = &warped.values.data()[3 * w..4 * w];
    println!("source row: {:?}", &ramp.values.data()[3 * w..4 * w]);
    println!("warped row: {row:.2?}");

    // with background-only masks the flow is the identity and nothing moves
    let still = warp_features(&ramp, &DenseMotion::identity(2, h, w))?;
    anyhow::ensure!(still.values.max_abs_diff(&ramp.values) < 1e-12, "identity warp moved pixels");
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run()
}
