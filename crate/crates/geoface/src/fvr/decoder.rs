//! Shallow upsampling decoder with spatially adaptive normalization.

use rand::Rng;

use super::FvrConfig;
use crate::autograd::{Graph, Var};
use crate::dataio::Image;
use crate::error::{Error, Result};
use crate::motion::FeatureMap;
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::tensor::Real;

/// `instance_norm(x)·(1 + γ(cond)) + β(cond)`.
#[derive(Clone, Debug)]
struct Spade {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl Spade {
    fn new(store: &mut ParamStore, name: &str, channels: usize, cond: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            shared: Conv2d::new(store, &format!("{name}.shared"), cond, hidden, 3, 1, true, rng),
            gamma: Conv2d::new(store, &format!("{name}.gamma"), hidden, channels, 3, 1, true, rng),
            beta: Conv2d::new(store, &format!("{name}.beta"), hidden, channels, 3, 1, true, rng),
        }
    }

    fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var, cond: Var) -> Var {
        let size = g.shape(x)[2];
        let cond = g.upsample_to(cond, size);
        let act = g.relu(self.shared.forward(g, p, cond));
        let gamma = self.gamma.forward(g, p, act);
        let beta = self.beta.forward(g, p, act);
        let norm = g.instance_norm(x, 1e-5);
        g.add(g.mul(norm, g.add_scalar(gamma, 1.0)), beta)
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    norm: Spade,
    conv: Conv2d,
}

/// Decodes rendered features concatenated with warped source features into
/// an RGB frame, doubling resolution once per block.
#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<UpBlock>,
    out: Conv2d,
    pub feature_channels: usize,
    pub rendered_channels: usize,
}

impl Decoder {
    /// `num_up` doubling blocks; `feature_channels` are the warped source channels.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feature_channels: usize,
        num_up: usize,
        cfg: &FvrConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let cond = cfg.color_channels;
        let mut cin = feature_channels + cond;
        let mut blocks = Vec::with_capacity(num_up);
        for i in 0..num_up {
            let cout = (cin / 2).max(8);
            blocks.push(UpBlock {
                norm: Spade::new(store, &format!("{name}.up{i}.spade"), cin, cond, cfg.spade_hidden, rng),
                conv: Conv2d::new(store, &format!("{name}.up{i}.conv"), cin, cout, 3, 1, true, rng),
            });
            cin = cout;
        }
        Self {
            blocks,
            out: Conv2d::new(store, &format!("{name}.out"), cin, 3, 3, 1, true, rng),
            feature_channels,
            rendered_channels: cond,
        }
    }

    /// `features: [N, Cf, h, w]`, `rendered: [N, C, h, w]` → `[N, 3, h·2^k, w·2^k]` in `[0, 1]`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, features: Var, rendered: Var) -> Var {
        let mut x = g.concat(&[features, rendered], 1);
        for block in &self.blocks {
            x = g.leaky_relu(block.norm.forward(g, p, x, rendered), 0.2);
            x = block.conv.forward(g, p, g.upsample2(x));
        }
        g.sigmoid(self.out.forward(g, p, x))
    }
}

/// Decodes one frame from rendered features `[C, h, w]` and warped source features.
pub fn decode(
    rendered: &FeatureMap<f32>,
    features: &FeatureMap<f32>,
    decoder: &Decoder,
    params: &ParamStore,
) -> Result<Image> {
    let (cr, h, w) = rendered.dims();
    let (cf, hf, wf) = features.dims();
    if (h, w) != (hf, wf) || cr != decoder.rendered_channels || cf != decoder.feature_channels {
        return Err(Error::Shape(format!(
            "decoder expects {}+{} channels on one grid, got {cr}x{h}x{w} and {cf}x{hf}x{wf}",
            decoder.rendered_channels, decoder.feature_channels
        )));
    }
    let g = Graph::<f32>::new();
    let p = params.bind(&g, false);
    let y = decoder.forward(
        &g,
        &p,
        g.constant(features.values.clone().reshape([1, cf, h, w])),
        g.constant(rendered.values.clone().reshape([1, cr, h, w])),
    );
    let y = g.value(y);
    let s = y.shape().to_vec();
    Ok(Image::from_chw(&(*y).clone().reshape([3, s[2], s[3]])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::component_rng;
    use crate::tensor::Tensor;

    #[test]
    fn output_is_rgb_at_full_resolution_and_reproducible() {
        let cfg = FvrConfig::default();
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "dec", 16, 2, &cfg, &mut component_rng(0, "dec"));
        let fr = FeatureMap::new(Tensor::from_fn([8, 4, 4], |i| (i as f32 * 0.2).sin())).unwrap();
        let fs = FeatureMap::new(Tensor::from_fn([16, 4, 4], |i| (i as f32 * 0.5).cos())).unwrap();
        let a = decode(&fr, &fs, &dec, &store).unwrap();
        assert_eq!((a.height(), a.width()), (16, 16));
        assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a, decode(&fr, &fs, &dec, &store).unwrap());
    }
}
