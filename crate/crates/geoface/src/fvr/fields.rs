//! Density/color field extraction and the per-pixel ray MLP.

use rand::Rng;

use super::render::RaySamples;
use super::FvrConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::motion::FeatureMap;
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::tensor::Tensor;

/// Two 3×3 convolutions with a ReLU in between.
#[derive(Clone, Debug)]
pub struct FieldExtractor {
    conv1: Conv2d,
    conv2: Conv2d,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl FieldExtractor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_channels, hidden, 3, 1, true, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), hidden, out_channels, 3, 1, true, rng),
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: crate::tensor::Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        self.conv2.forward(g, p, g.relu(self.conv1.forward(g, p, x)))
    }
}

fn run_extractor(fw: &FeatureMap<f32>, net: &FieldExtractor, params: &ParamStore) -> Result<FeatureMap<f32>> {
    let (c, h, w) = fw.dims();
    if c != net.in_channels {
        return Err(Error::Shape(format!("extractor expects {} channels, got {c}", net.in_channels)));
    }
    let g = Graph::<f32>::new();
    let p = params.bind(&g, false);
    let y = g.value(net.forward(&g, &p, g.constant(fw.values.clone().reshape([1, c, h, w]))));
    FeatureMap::new((*y).clone().reshape([net.out_channels, h, w]))
}

/// Density features `[D, H, W]` from warped features.
pub fn extract_shape(fw: &FeatureMap<f32>, net: &FieldExtractor, params: &ParamStore) -> Result<FeatureMap<f32>> {
    run_extractor(fw, net, params)
}

/// Color features `[C_c, H, W]` from warped features.
pub fn extract_color(fw: &FeatureMap<f32>, net: &FieldExtractor, params: &ParamStore) -> Result<FeatureMap<f32>> {
    run_extractor(fw, net, params)
}

/// Per-pixel MLP (1×1 convolutions) from concatenated density and color
/// features to `D` softplus densities and `D·C` colors.
#[derive(Clone, Debug)]
pub struct RayMlp {
    layers: [Conv2d; 3],
    samples: usize,
    channels: usize,
}

impl RayMlp {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FvrConfig, rng: &mut impl Rng) -> Self {
        let (d, c, width) = (cfg.depth_samples, cfg.color_channels, cfg.mlp_width);
        let layer = |store: &mut ParamStore, i: usize, cin, cout, rng: &mut _| {
            Conv2d::new(store, &format!("{name}.fc{i}"), cin, cout, 1, 1, true, rng)
        };
        let layers = [
            layer(store, 0, d + c, width, rng),
            layer(store, 1, width, width, rng),
            layer(store, 2, width, d + d * c, rng),
        ];
        Self {
            layers,
            samples: d,
            channels: c,
        }
    }

    /// Returns `(density [N, D, H, W], color [N, D·C, H, W])`.
    pub fn forward<T: crate::tensor::Real>(&self, g: &Graph<T>, p: &Bound, density_feats: Var, color_feats: Var) -> (Var, Var) {
        let x = g.concat(&[density_feats, color_feats], 1);
        let x = g.relu(self.layers[0].forward(g, p, x));
        let x = g.relu(self.layers[1].forward(g, p, x));
        let y = self.layers[2].forward(g, p, x);
        let d = self.samples;
        let density = g.softplus(g.slice(y, 1, 0, d));
        let color = g.slice(y, 1, d, d * self.channels);
        (density, color)
    }
}

/// Ray samples for every pixel of a single frame, pixel-major.
pub fn ray_sample(
    density_feats: &FeatureMap<f32>,
    color_feats: &FeatureMap<f32>,
    mlp: &RayMlp,
    params: &ParamStore,
) -> Result<RaySamples<f32>> {
    let (dc, h, w) = density_feats.dims();
    let (cc, h2, w2) = color_feats.dims();
    if (h, w) != (h2, w2) || dc != mlp.samples || cc != mlp.channels {
        return Err(Error::Shape(format!(
            "ray MLP expects {}+{} channels on one grid, got {dc}x{h}x{w} and {cc}x{h2}x{w2}",
            mlp.samples, mlp.channels
        )));
    }
    let g = Graph::<f32>::new();
    let p = params.bind(&g, false);
    let (dens, col) = mlp.forward(
        &g,
        &p,
        g.constant(density_feats.values.clone().reshape([1, dc, h, w])),
        g.constant(color_feats.values.clone().reshape([1, cc, h, w])),
    );
    let (dv, cv) = (g.value(dens), g.value(col));
    if !dv.all_finite() || !cv.all_finite() {
        return Err(Error::Numerical("non-finite ray samples".into()));
    }
    let (d, c, hw) = (mlp.samples, mlp.channels, h * w);
    let density = Tensor::from_fn([hw, d], |i| dv.data()[(i % d) * hw + i / d]);
    let color = Tensor::from_fn([hw, d, c], |i| cv.data()[(i % (d * c)) * hw + i / (d * c)]);
    RaySamples::new(density, color)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::component_rng;

    fn setup() -> (FieldExtractor, FieldExtractor, RayMlp, ParamStore, FvrConfig) {
        let cfg = FvrConfig {
            depth_samples: 4,
            color_channels: 3,
            mlp_width: 8,
            ..FvrConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = component_rng(0, "fvr");
        let shape = FieldExtractor::new(&mut store, "shape", 5, 6, 4, &mut rng);
        let color = FieldExtractor::new(&mut store, "color", 5, 6, 3, &mut rng);
        let mlp = RayMlp::new(&mut store, "ray", &cfg, &mut rng);
        (shape, color, mlp, store, cfg)
    }

    #[test]
    fn zero_input_with_zero_bias_gives_zero_fields() {
        let (shape, color, _, store, _) = setup();
        let fw = FeatureMap::new(Tensor::zeros([5, 6, 7])).unwrap();
        let ds = extract_shape(&fw, &shape, &store).unwrap();
        let cs = extract_color(&fw, &color, &store).unwrap();
        assert_eq!(ds.dims(), (4, 6, 7));
        assert_eq!(cs.dims(), (3, 6, 7));
        assert!(ds.values.data().iter().chain(cs.values.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn extraction_is_reproducible() {
        let (shape, _, _, store, _) = setup();
        let fw = FeatureMap::new(Tensor::from_fn([5, 4, 4], |i| (i as f32).sin())).unwrap();
        assert_eq!(extract_shape(&fw, &shape, &store).unwrap(), extract_shape(&fw, &shape, &store).unwrap());
    }

    #[test]
    fn rays_are_independent_per_pixel() {
        let (_, _, mlp, store, _) = setup();
        let (h, w) = (3, 3);
        let df = Tensor::from_fn([4, h, w], |i| (i as f32 * 0.37).sin());
        let cf = Tensor::from_fn([3, h, w], |i| (i as f32 * 0.91).cos());
        let a = ray_sample(&FeatureMap::new(df.clone()).unwrap(), &FeatureMap::new(cf.clone()).unwrap(), &mlp, &store).unwrap();
        assert_eq!(a.num_rays(), h * w);
        assert!(a.density.data().iter().all(|&s| s >= 0.0));
        // swap pixels 1 and 7 in every input channel
        let swap = |t: &Tensor<f32>| {
            let mut t = t.clone();
            let hw = h * w;
            for ch in 0..t.shape()[0] {
                t.data_mut().swap(ch * hw + 1, ch * hw + 7);
            }
            t
        };
        let b = ray_sample(&FeatureMap::new(swap(&df)).unwrap(), &FeatureMap::new(swap(&cf)).unwrap(), &mlp, &store).unwrap();
        let row = |r: &RaySamples<f32>, i: usize| r.density.data()[i * 4..(i + 1) * 4].to_vec();
        assert_eq!(row(&a, 1), row(&b, 7));
        assert_eq!(row(&a, 7), row(&b, 1));
        assert_eq!(row(&a, 0), row(&b, 0));
    }
}
