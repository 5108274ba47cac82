//! Named parameter storage and the handful of layers the networks are built from.

use std::collections::HashMap;
use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// SHA-256 over names, shapes and raw bytes.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Puts every parameter on `g`, differentiable when `trainable`.
    pub fn bind<T: Real>(&self, g: &Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|t| {
                let t = t.cast::<T>();
                if trainable {
                    g.variable(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Cotangent per parameter, zero where the parameter was unused.
    pub fn gradients<T: Real>(&self, grads: &mut Gradients<T>, store: &ParamStore) -> Vec<Tensor<f32>> {
        self.vars
            .iter()
            .zip(store.ids())
            .map(|(&v, id)| match grads.take(v) {
                Some(t) => t.cast::<f32>(),
                None => Tensor::zeros(store.get(id).shape().to_vec()),
            })
            .collect()
    }
}

/// Deterministic RNG for a named component, independent of every other name.
pub fn component_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([cout])));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.stride, self.pad)
    }

    /// Same convolution with an externally prepared weight (e.g. spectrally normalized).
    pub fn forward_with<T: Real>(&self, g: &Graph<T>, p: &Bound, weight: Var, x: Var) -> Var {
        g.conv2d(x, weight, self.bias.map(|b| p[b]), self.stride, self.pad)
    }
}

/// Encoder-decoder with skip connections at every resolution.
///
/// Each down block is conv-relu-avgpool, each up block upsample-conv-relu
/// followed by concatenation with the matching encoder activation. The output
/// carries `block_expansion + in_channels` channels at input resolution.
#[derive(Clone, Debug)]
pub struct Hourglass {
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    pub out_channels: usize,
}

impl Hourglass {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        block_expansion: usize,
        num_blocks: usize,
        max_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let feats = |i: usize| max_features.min(block_expansion << (i + 1));
        let mut down = Vec::with_capacity(num_blocks);
        for i in 0..num_blocks {
            let cin = if i == 0 { in_channels } else { feats(i - 1) };
            down.push(Conv2d::new(store, &format!("{name}.down{i}"), cin, feats(i), 3, 1, true, rng));
        }
        let mut up = Vec::with_capacity(num_blocks);
        for i in (0..num_blocks).rev() {
            let cin = if i == num_blocks - 1 { feats(i) } else { 2 * feats(i) };
            let cout = if i == 0 { block_expansion } else { feats(i - 1) };
            up.push(Conv2d::new(store, &format!("{name}.up{i}"), cin, cout, 3, 1, true, rng));
        }
        Self {
            down,
            up,
            out_channels: block_expansion + in_channels,
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let mut skips = vec![x];
        let mut cur = x;
        for conv in &self.down {
            cur = g.avg_pool2(g.relu(conv.forward(g, p, cur)));
            skips.push(cur);
        }
        let mut out = skips.pop().expect("hourglass input");
        for conv in &self.up {
            out = g.relu(conv.forward(g, p, g.upsample2(out)));
            let skip = skips.pop().expect("hourglass skip");
            out = g.concat(&[out, skip], 1);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hourglass_shapes() {
        let mut store = ParamStore::new();
        let mut rng = component_rng(0, "hg");
        let hg = Hourglass::new(&mut store, "hg", 5, 8, 2, 32, &mut rng);
        let g = Graph::<f32>::new();
        let p = store.bind(&g, true);
        let x = g.constant(Tensor::ones([2, 5, 16, 16]));
        let y = hg.forward(&g, &p, x);
        assert_eq!(g.shape(y), vec![2, hg.out_channels, 16, 16]);
        assert_eq!(hg.out_channels, 13);
    }

    #[test]
    fn component_rngs_are_independent_of_each_other() {
        let a: u64 = component_rng(7, "a").gen();
        let a2: u64 = component_rng(7, "a").gen();
        let b: u64 = component_rng(7, "b").gen();
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros([3]));
        let f0 = s.fingerprint();
        s.get_mut(id).data_mut()[1] = 1.0;
        assert_ne!(f0, s.fingerprint());
    }
}
