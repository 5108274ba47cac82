//! Multi-scale patch discriminators and their weighted ensemble.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::spectral::random_vector;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{component_rng, Bound, Conv2d, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
    Normal,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Normal];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rgb => "rgb",
            Self::Depth => "depth",
            Self::Normal => "normal",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Self::Depth => 1,
            _ => 3,
        }
    }
}

/// Number of image scales each member looks at (full and half resolution).
pub const NUM_SCALES: usize = 2;
const CHANNELS: [usize; 3] = [16, 32, 64];
const SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
struct ScaleNet {
    convs: Vec<Conv2d>,
}

/// One discriminator: per scale, three stride-2 convolutions with leaky
/// ReLUs and a stride-1 patch head. Every weight is spectrally normalized at
/// use time; the output is the mean patch probability over both scales.
#[derive(Clone, Debug)]
pub struct Member {
    pub modality: Modality,
    scales: Vec<ScaleNet>,
}

impl Member {
    fn new(store: &mut ParamStore, sn: &mut ParamStore, modality: Modality, seed: u64) -> Self {
        let prefix = format!("disc.{}", modality.name());
        let mut rng = component_rng(seed, &prefix);
        let scales = (0..NUM_SCALES)
            .map(|s| {
                let mut cin = modality.channels();
                let mut convs = Vec::new();
                for (i, &cout) in CHANNELS.iter().enumerate() {
                    convs.push(Conv2d::new(store, &format!("{prefix}.s{s}.conv{i}"), cin, cout, 3, 2, true, &mut rng));
                    cin = cout;
                }
                convs.push(Conv2d::new(store, &format!("{prefix}.s{s}.head"), cin, 1, 3, 1, true, &mut rng));
                for c in &convs {
                    let rows = store.get(c.weight).shape()[0];
                    let name = format!("{}.u", store.name(c.weight));
                    sn.add(name, Tensor::new([rows], random_vector(rows, &mut rng)));
                }
                ScaleNet { convs }
            })
            .collect();
        Self { modality, scales }
    }

    fn weights(&self) -> impl Iterator<Item = &Conv2d> {
        self.scales.iter().flat_map(|s| &s.convs)
    }

    /// Per-sample probabilities `[N]` of `x: [N, C, H, W]`.
    fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, sn: &SpectralState, x: Var) -> Var {
        let n = g.shape(x)[0];
        let mut input = x;
        let mut total: Option<Var> = None;
        for (s, scale) in self.scales.iter().enumerate() {
            if s > 0 {
                input = g.avg_pool2(input);
            }
            let mut h = input;
            let last = scale.convs.len() - 1;
            for (i, conv) in scale.convs.iter().enumerate() {
                let w = sn.normalized(g, p, conv.weight);
                h = conv.forward_with(g, p, w, h);
                if i < last {
                    h = g.leaky_relu(h, SLOPE);
                }
            }
            let patches = g.shape(h)[1..].iter().product::<usize>();
            let prob = g.mean_axis(g.reshape(g.sigmoid(h), &[n, patches]), 1, false);
            total = Some(match total {
                Some(t) => g.add(t, prob),
                None => prob,
            });
        }
        g.scale(total.expect("at least one scale"), 1.0 / self.scales.len() as f64)
    }
}

/// Power-iteration vectors for one graph evaluation. Advanced vectors are
/// collected and only written back by [`SpectralState::commit`].
pub struct SpectralState<'a> {
    store: &'a ParamStore,
    vectors: &'a ParamStore,
    advanced: RefCell<Vec<(ParamId, Tensor<f32>)>>,
}

impl<'a> SpectralState<'a> {
    pub fn new(store: &'a ParamStore, vectors: &'a ParamStore) -> Self {
        Self {
            store,
            vectors,
            advanced: RefCell::new(Vec::new()),
        }
    }

    fn normalized<T: Real>(&self, g: &Graph<T>, p: &Bound, weight: ParamId) -> Var {
        let name = format!("{}.u", self.store.name(weight));
        let id = self.vectors.id(&name).expect("power-iteration vector registered");
        let u: Vec<T> = self.vectors.get(id).data().iter().map(|&v| T::lit(v as f64)).collect();
        let (w, next) = g.spectral_normalize(p[weight], &u);
        let next = Tensor::new([next.len()], next.iter().map(|v| v.as_f64() as f32).collect());
        self.advanced.borrow_mut().push((id, next));
        w
    }

    /// Advanced vectors, to be stored after a discriminator update.
    pub fn into_updates(self) -> Vec<(ParamId, Tensor<f32>)> {
        self.advanced.into_inner()
    }
}

/// Inputs of one evaluation, each `[N, C, H, W]`; depth is raw (it is
/// min-max normalized per image inside the ensemble).
#[derive(Clone, Copy, Debug)]
pub struct EnsembleVars {
    pub rgb: Var,
    pub depth: Option<Var>,
    pub normal: Option<Var>,
}

/// Weighted total `[N]` plus each evaluated member's score `[N]`.
#[derive(Clone, Debug)]
pub struct EnsembleOutput {
    pub total: Var,
    pub members: Vec<(Modality, Var)>,
}

/// Discriminators over `{rgb, depth, normal}` combined with simplex weights.
#[derive(Clone, Debug)]
pub struct DiscriminatorEnsemble {
    members: Vec<Member>,
    weights: Vec<f64>,
}

/// Parameters of a freshly built ensemble.
pub struct EnsembleParts {
    pub ensemble: DiscriminatorEnsemble,
    pub params: ParamStore,
    /// Power-iteration vectors, one per convolution weight.
    pub spectral: ParamStore,
}

pub fn check_simplex(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config(format!("ensemble weights {weights:?} must be nonnegative")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "ensemble weights {weights:?} sum to {sum}, not 1 (simplex violation)"
        )));
    }
    Ok(())
}

impl DiscriminatorEnsemble {
    /// Members are created in the given order; each member's initialization
    /// depends only on `seed` and its modality.
    pub fn build(members: &[(Modality, f64)], seed: u64) -> Result<EnsembleParts> {
        let weights: Vec<f64> = members.iter().map(|m| m.1).collect();
        check_simplex(&weights)?;
        let mut seen = std::collections::BTreeSet::new();
        for (m, _) in members {
            if !seen.insert(*m) {
                return Err(Error::Config(format!("duplicate ensemble member {}", m.name())));
            }
        }
        let mut params = ParamStore::new();
        let mut spectral = ParamStore::new();
        let members = members
            .iter()
            .map(|&(m, _)| Member::new(&mut params, &mut spectral, m, seed))
            .collect();
        Ok(EnsembleParts {
            ensemble: Self { members, weights },
            params,
            spectral,
        })
    }

    /// `[(rgb, λ_rgb), (depth, λ_depth), (normal, λ_normal)]`.
    pub fn standard(lambda: [f64; 3], seed: u64) -> Result<EnsembleParts> {
        let members: Vec<_> = Modality::ALL.iter().copied().zip(lambda).collect();
        Self::build(&members, seed)
    }

    pub fn members(&self) -> impl Iterator<Item = (Modality, f64)> + '_ {
        self.members.iter().map(|m| m.modality).zip(self.weights.iter().copied())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// True when a member with positive weight needs `modality`.
    pub fn needs(&self, modality: Modality) -> bool {
        self.members().any(|(m, w)| m == modality && w > 0.0)
    }

    pub fn num_weight_matrices(&self) -> usize {
        self.members.iter().map(|m| m.weights().count()).sum()
    }

    /// `D_total = Σ λ_i D_i`. Members with zero weight are not evaluated.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        sn: &SpectralState,
        input: &EnsembleVars,
    ) -> Result<EnsembleOutput> {
        let mut total: Option<Var> = None;
        let mut scores = Vec::new();
        for (member, &lambda) in self.members.iter().zip(&self.weights) {
            if lambda == 0.0 {
                continue;
            }
            let x = match member.modality {
                Modality::Rgb => input.rgb,
                Modality::Depth => g.minmax_normalize(
                    input
                        .depth
                        .ok_or_else(|| Error::Config("depth discriminator has weight but no depth input".into()))?,
                    1e-6,
                ),
                Modality::Normal => input
                    .normal
                    .ok_or_else(|| Error::Config("normal discriminator has weight but no normal input".into()))?,
            };
            let score = member.forward(g, p, sn, x);
            scores.push((member.modality, score));
            let weighted = if lambda == 1.0 { score } else { g.scale(score, lambda) };
            total = Some(match total {
                Some(t) => g.add(t, weighted),
                None => weighted,
            });
        }
        let total = total.ok_or_else(|| Error::Config("ensemble has no member with positive weight".into()))?;
        Ok(EnsembleOutput { total, members: scores })
    }
}

/// Plain single-image inputs.
#[derive(Clone, Debug)]
pub struct EnsembleInput {
    /// `[3, H, W]`
    pub rgb: Tensor<f32>,
    /// `[H, W]`
    pub depth: Option<Tensor<f32>>,
    /// `[3, H, W]`
    pub normal: Option<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub total: f64,
    pub members: Vec<(Modality, f64)>,
}

/// Scores one input without touching the power-iteration state.
pub fn discriminate(parts: &EnsembleParts, input: &EnsembleInput) -> Result<Scores> {
    let s = input.rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("rgb input must be 3×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let g = Graph::<f32>::new();
    let p = parts.params.bind(&g, false);
    let sn = SpectralState::new(&parts.params, &parts.spectral);
    let lift = |t: &Tensor<f32>, c: usize| -> Result<Var> {
        if t.len() != c * h * w {
            return Err(Error::Shape(format!("modality input {:?} does not match {h}x{w}", t.shape())));
        }
        Ok(g.constant(t.clone().reshape([1, c, h, w])))
    };
    let vars = EnsembleVars {
        rgb: lift(&input.rgb, 3)?,
        depth: input.depth.as_ref().map(|d| lift(d, 1)).transpose()?,
        normal: input.normal.as_ref().map(|n| lift(n, 3)).transpose()?,
    };
    let out = parts.ensemble.forward(&g, &p, &sn, &vars)?;
    Ok(Scores {
        total: g.value(out.total).item().as_f64(),
        members: out
            .members
            .iter()
            .map(|&(m, v)| (m, g.value(v).item().as_f64()))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(h: usize) -> EnsembleInput {
        EnsembleInput {
            rgb: Tensor::from_fn([3, h, h], |i| (i as f32 * 0.13).sin() * 0.5 + 0.5),
            depth: Some(Tensor::from_fn([h, h], |i| 1.0 + (i % h) as f32)),
            normal: Some(Tensor::from_fn([3, h, h], |i| if i / (h * h) == 2 { 1.0 } else { 0.0 })),
        }
    }

    #[test]
    fn simplex_is_enforced() {
        assert!(DiscriminatorEnsemble::standard([0.5, 0.25, 0.25], 0).is_ok());
        let err = DiscriminatorEnsemble::standard([0.5, 0.25, 0.15], 0).err().unwrap().to_string();
        assert!(err.contains("simplex"), "{err}");
        assert!(DiscriminatorEnsemble::standard([1.5, -0.25, -0.25], 0).is_err());
        assert!(DiscriminatorEnsemble::build(&[(Modality::Rgb, 0.5), (Modality::Rgb, 0.5)], 0).is_err());
    }

    #[test]
    fn degenerate_weights_reduce_to_the_rgb_member() {
        let full = DiscriminatorEnsemble::standard([1.0, 0.0, 0.0], 4).unwrap();
        let single = DiscriminatorEnsemble::build(&[(Modality::Rgb, 1.0)], 4).unwrap();
        let a = discriminate(&full, &input(16)).unwrap();
        let b = discriminate(&single, &input(16)).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.total, a.members[0].1);
    }

    #[test]
    fn total_is_the_weighted_member_sum_and_order_free() {
        let lambda = [0.5, 0.25, 0.25];
        let parts = DiscriminatorEnsemble::standard(lambda, 7).unwrap();
        let s = discriminate(&parts, &input(16)).unwrap();
        let expect: f64 = s.members.iter().zip(lambda).map(|(m, l)| m.1 * l).sum();
        assert!((s.total - expect).abs() < 1e-6);
        assert!(s.total > 0.0 && s.total < 1.0);
        let permuted = DiscriminatorEnsemble::build(
            &[(Modality::Normal, 0.25), (Modality::Rgb, 0.5), (Modality::Depth, 0.25)],
            7,
        )
        .unwrap();
        let t = discriminate(&permuted, &input(16)).unwrap();
        assert!((s.total - t.total).abs() < 1e-6);
    }

    #[test]
    fn missing_modality_with_weight_is_fatal() {
        let parts = DiscriminatorEnsemble::standard([0.5, 0.5, 0.0], 1).unwrap();
        let mut x = input(16);
        x.depth = None;
        assert!(discriminate(&parts, &x).is_err());
        x.normal = None;
        let rgb_only = DiscriminatorEnsemble::standard([1.0, 0.0, 0.0], 1).unwrap();
        assert!(discriminate(&rgb_only, &x).is_ok());
    }
}
