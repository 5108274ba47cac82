//! Adversarial training loop, checkpoints and one-shot animation.
//!
//! Each step draws a batch of (source, driving) frames of the same clip,
//! reconstructs the driving frame from the source, updates the discriminator
//! ensemble on detached reconstructions and then the generator on the
//! weighted perceptual, adversarial and equivariance objective.

mod animate;
mod checkpoint;
mod config;
mod model;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataio::{batch_tensor, FramePair, PairSource};
use crate::error::{Error, Result};
use crate::gan::{DiscriminatorEnsemble, EnsembleOutput, EnsembleParts, EnsembleVars, Modality, SpectralState};
use crate::geometry::GeometryExtractor;
use crate::losses::{perceptual_loss_var, total_loss, IdentityExtractor, LossComponents, LossReport};
use crate::motion::deform::equivariance_terms;
use crate::motion::{Deformation, DeformationConfig, KeypointVars};
use crate::nn::{component_rng, ParamStore};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub use animate::{animate, transfer_keypoints, Animation, AnimationRequest, TransferMode};
pub use checkpoint::{load_checkpoint, CHECKPOINT_KIND};
pub use config::TrainConfig;
pub use model::{Generator, GeneratorOutput, GENERATOR_MODULES};

/// Everything that changes during training, plus the frozen geometry
/// extractor. Per-step randomness is derived from `(seed, step)`, so the step
/// counter doubles as the RNG state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub gen_params: ParamStore,
    pub ensemble: DiscriminatorEnsemble,
    pub disc_params: ParamStore,
    /// Power-iteration vectors of the spectrally normalized weights.
    pub spectral: ParamStore,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub geometry: GeometryExtractor,
    pub step: u64,
    geometry_fingerprint: [u8; 32],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    pub discriminator: f64,
    /// Mean absolute error of the reconstruction on this batch.
    pub reconstruction_l1: f64,
}

fn adam(params: &ParamStore, cfg: &TrainConfig) -> Adam {
    Adam::new(params, cfg.learning_rate as f32, cfg.beta1 as f32, cfg.beta2 as f32)
}

impl TrainState {
    /// Fresh state with the geometry backend named in the config.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let geometry =
            GeometryExtractor::from_kind(config.geometry_backend, config.image_size, config.geometry_weights.as_deref())?;
        Self::with_geometry(config, geometry)
    }

    pub fn with_geometry(config: TrainConfig, geometry: GeometryExtractor) -> Result<Self> {
        config.validate()?;
        let parts = DiscriminatorEnsemble::standard(config.lambda(), config.seed)?;
        Self::with_ensemble(config, geometry, parts)
    }

    /// Fresh state around a caller-built discriminator ensemble.
    pub fn with_ensemble(config: TrainConfig, geometry: GeometryExtractor, parts: EnsembleParts) -> Result<Self> {
        config.validate()?;
        let mut gen_params = ParamStore::new();
        let generator = Generator::new(&mut gen_params, &config);
        let gen_opt = adam(&gen_params, &config);
        let disc_opt = adam(&parts.params, &config);
        Ok(Self {
            geometry_fingerprint: geometry.fingerprint(),
            generator,
            gen_params,
            ensemble: parts.ensemble,
            disc_params: parts.params,
            spectral: parts.spectral,
            gen_opt,
            disc_opt,
            geometry,
            step: 0,
            config,
        })
    }

    /// Errors if the geometry extractor differs from the one training started with.
    pub fn check_geometry_frozen(&self) -> Result<()> {
        if self.geometry.fingerprint() != self.geometry_fingerprint {
            return Err(Error::Geometry("geometry extractor parameters changed during training".into()));
        }
        Ok(())
    }

    /// Scalar parameter count per generator module and for the discriminators.
    pub fn parameter_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = GENERATOR_MODULES
            .iter()
            .map(|m| (m.to_string(), self.gen_params.num_scalars_with_prefix(&format!("{m}."))))
            .collect();
        counts.insert("disc".into(), self.disc_params.num_scalars());
        counts
    }

    /// Random deformations for the equivariance term of step `step`.
    fn deformations(&self, step: u64, n: usize) -> Vec<Deformation> {
        let mut rng = component_rng(self.config.seed, &format!("equivariance.{step}"));
        let cfg = DeformationConfig::default();
        (0..n).map(|_| Deformation::random(&mut rng, &cfg)).collect()
    }

    /// Geometry inputs for the ensemble, computed only for modalities that
    /// carry weight.
    fn ensemble_inputs(&self, g: &Graph<f32>, rgb: Var) -> EnsembleVars {
        let need_depth = self.ensemble.needs(Modality::Depth);
        let need_normal = self.ensemble.needs(Modality::Normal);
        let depth = (need_depth || need_normal).then(|| self.geometry.depth(g, rgb));
        let normal = need_normal.then(|| {
            g.normals_from_depth(depth.expect("depth computed"), self.geometry.pixel_spacing)
        });
        EnsembleVars {
            rgb,
            depth: depth.filter(|_| need_depth),
            normal,
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &[FramePair]) -> Result<StepReport> {
        let cfg = self.config.clone();
        let n = batch.len();
        if n == 0 {
            return Err(Error::Config("empty training batch".into()));
        }
        let s = cfg.image_size;
        for pair in batch {
            for im in [&pair.source, &pair.driving] {
                if im.height() != s || im.width() != s {
                    return Err(Error::Shape(format!(
                        "training frames must be {s}x{s}, got {}x{}",
                        im.height(),
                        im.width()
                    )));
                }
            }
        }
        let weights = cfg.loss_weights();
        let sources: Vec<_> = batch.iter().map(|p| &p.source).collect();
        let drivings: Vec<_> = batch.iter().map(|p| &p.driving).collect();
        let driving_t = batch_tensor(&drivings);

        // generator forward
        let g = Graph::<f32>::new();
        let p = self.gen_params.bind(&g, true);
        let xs = g.constant(batch_tensor(&sources));
        let xd = g.constant(driving_t.clone());
        let use_equivariance = weights.equivariance != 0.0;
        let deformations = if use_equivariance {
            self.deformations(self.step, n)
        } else {
            Vec::new()
        };
        let mut detect_input = vec![xs, xd];
        if use_equivariance {
            detect_input.push(g.deform_images(xd, &deformations));
        }
        let kp_all = self.generator.detect(&g, &p, g.concat(&detect_input, 0));
        let kp_part = |i: usize| KeypointVars {
            positions: g.slice(kp_all.positions, 0, i * n, n),
            jacobians: g.slice(kp_all.jacobians, 0, i * n, n),
        };
        let (kp_s, kp_d) = (kp_part(0), kp_part(1));
        let out = self.generator.generate(&g, &p, xs, &kp_s, &kp_d);
        let pred = out.prediction;

        let perceptual = perceptual_loss_var(&g, pred, xd, &IdentityExtractor);
        let equivariance = use_equivariance.then(|| {
            let (pos, jac) = equivariance_terms(&g, &kp_d, &kp_part(2), &deformations);
            if cfg.estimate_jacobian {
                g.add(pos, jac)
            } else {
                pos
            }
        });
        let fake_value = g.value(pred);
        let reconstruction_l1 = fake_value
            .data()
            .iter()
            .zip(driving_t.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / driving_t.len() as f64;

        // discriminator step on detached reconstructions
        let (d_loss, scores, d_grads, sn_updates) = {
            let gd = Graph::<f32>::new();
            let pd = self.disc_params.bind(&gd, true);
            let both = gd.concat(&[gd.constant(driving_t.clone()), gd.constant_rc(fake_value.clone())], 0);
            let sn = SpectralState::new(&self.disc_params, &self.spectral);
            let out = self.ensemble.forward(&gd, &pd, &sn, &self.ensemble_inputs(&gd, both))?;
            let real = gd.slice(out.total, 0, 0, n);
            let fake = gd.slice(out.total, 0, n, n);
            let loss = cfg.gan_loss.discriminator(&gd, real, fake);
            let scores = split_scores(&gd, &out, n);
            let d_loss = gd.value(loss).item() as f64;
            let mut grads = gd.backward(loss);
            let d_grads = pd.gradients(&mut grads, &self.disc_params);
            (d_loss, scores, d_grads, sn.into_updates())
        };
        let mut components = LossComponents {
            perceptual: g.value(perceptual).item() as f64,
            adversarial: 0.0,
            equivariance: equivariance.map_or(0.0, |e| g.value(e).item() as f64),
        };
        let abort = |what: &str, c: &LossComponents, d: f64| {
            Error::Numerical(format!(
                "non-finite {what} at step {}: perceptual={} adversarial={} equivariance={} discriminator={d}",
                self.step, c.perceptual, c.adversarial, c.equivariance
            ))
        };
        if !d_loss.is_finite() || !components.perceptual.is_finite() || !components.equivariance.is_finite() {
            return Err(abort("loss", &components, d_loss));
        }
        self.disc_opt.update(&mut self.disc_params, &d_grads);
        for (id, u) in sn_updates {
            *self.spectral.get_mut(id) = u;
        }

        // generator step against the updated ensemble
        let mut terms = vec![(weights.perceptual, perceptual)];
        if weights.adversarial != 0.0 {
            let pdc = self.disc_params.bind(&g, false);
            let sn = SpectralState::new(&self.disc_params, &self.spectral);
            let d_out = self.ensemble.forward(&g, &pdc, &sn, &self.ensemble_inputs(&g, pred))?;
            let adv = cfg.gan_loss.generator(&g, d_out.total);
            components.adversarial = g.value(adv).item() as f64;
            terms.push((weights.adversarial, adv));
        }
        if let Some(e) = equivariance {
            terms.push((weights.equivariance, e));
        }
        let total = terms
            .into_iter()
            .filter(|(w, _)| *w != 0.0)
            .map(|(w, v)| g.scale(v, w))
            .reduce(|a, b| g.add(a, b));
        let mut losses = total_loss(components, &weights)?;
        losses.scores = scores;
        if !losses.is_finite() {
            return Err(abort("generator loss", &components, d_loss));
        }
        if let Some(total) = total {
            let mut grads = g.backward(total);
            let g_grads = p.gradients(&mut grads, &self.gen_params);
            self.gen_opt.update(&mut self.gen_params, &g_grads);
        }
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            losses,
            discriminator: d_loss,
            reconstruction_l1,
        })
    }

    /// Runs until `config.total_steps`, calling `on_step` after every step.
    pub fn train(
        &mut self,
        data: &dyn PairSource,
        mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.config.total_steps {
            let batch = data.sample_batch(self.config.seed, self.step, self.config.batch_size)?;
            let report = self.train_step(&batch)?;
            on_step(self, &report)?;
        }
        self.check_geometry_frozen()
    }

    /// Driving-frame reconstructions with keypoints taken from the driving
    /// frames themselves.
    pub fn reconstruct(&self, pairs: &[FramePair]) -> Result<Vec<Tensor<f32>>> {
        let g = Graph::<f32>::new();
        let p = self.gen_params.bind(&g, false);
        let sources: Vec<_> = pairs.iter().map(|p| &p.source).collect();
        let drivings: Vec<_> = pairs.iter().map(|p| &p.driving).collect();
        let xs = g.constant(batch_tensor(&sources));
        let xd = g.constant(batch_tensor(&drivings));
        let kp_s = self.generator.detect(&g, &p, xs);
        let kp_d = self.generator.detect(&g, &p, xd);
        let pred = g.value(self.generator.generate(&g, &p, xs, &kp_s, &kp_d).prediction);
        let (_, c, h, w) = pred.dims4();
        Ok((0..pairs.len())
            .map(|i| pred.narrow0(i, 1).reshape([c, h, w]))
            .collect())
    }

    /// Mean absolute reconstruction error over `pairs`.
    pub fn reconstruction_l1(&self, pairs: &[FramePair]) -> Result<f64> {
        let preds = self.reconstruct(pairs)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (pred, pair) in preds.iter().zip(pairs) {
            let target = pair.driving.to_chw();
            sum += pred
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .sum::<f64>();
            count += target.len();
        }
        Ok(sum / count as f64)
    }
}

/// Mean real/fake score per evaluated member and for the weighted total.
fn split_scores(g: &Graph<f32>, out: &EnsembleOutput, n: usize) -> BTreeMap<String, f64> {
    let mut scores = BTreeMap::new();
    let halves = |v: Var| {
        let t = g.value(v);
        let mean = |s: &[f32]| s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64;
        (mean(&t.data()[..n]), mean(&t.data()[n..]))
    };
    let named = out.members.iter().map(|&(m, v)| (m.name(), v));
    for (name, v) in named.chain(std::iter::once(("total", out.total))) {
        let (real, fake) = halves(v);
        scores.insert(format!("{name}.real"), real);
        scores.insert(format!("{name}.fake"), fake);
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::BlobCorpus;

    fn corpus() -> crate::dataio::MemoryClips {
        BlobCorpus {
            clips: 4,
            ..Default::default()
        }
        .generate()
    }

    #[test]
    fn steps_are_deterministic_and_finite() {
        let data = corpus();
        let run = || {
            let mut st = TrainState::new(TrainConfig {
                total_steps: 2,
                ..TrainConfig::small()
            })
            .unwrap();
            let mut reports = Vec::new();
            st.train(&data, |_, r| {
                reports.push(r.clone());
                Ok(())
            })
            .unwrap();
            (st.gen_params.fingerprint(), st.disc_params.fingerprint(), reports)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        let r = &a.2[1];
        assert!(r.losses.is_finite());
        assert_eq!(r.step, 2);
        for key in ["rgb.real", "depth.fake", "normal.real", "total.fake"] {
            assert!(r.losses.scores.contains_key(key), "{key}");
        }
        let w = TrainConfig::small().loss_weights();
        let expect = w.perceptual * r.losses.perceptual
            + w.adversarial * r.losses.adversarial_g
            + w.equivariance * r.losses.equivariance;
        assert_eq!(r.losses.total, expect);
    }

    #[test]
    fn discriminator_step_leaves_generator_untouched_until_its_own_update() {
        let data = corpus();
        let mut st = TrainState::new(TrainConfig {
            weight_perceptual: 0.0,
            weight_adversarial: 0.0,
            weight_equivariance: 0.0,
            ..TrainConfig::small()
        })
        .unwrap();
        let before = st.gen_params.clone();
        let disc_before = st.disc_params.fingerprint();
        st.train_step(&data.sample_batch(0, 0, 2).unwrap()).unwrap();
        assert_eq!(st.gen_params, before);
        assert_ne!(st.disc_params.fingerprint(), disc_before);
    }

    #[test]
    fn wrong_frame_size_is_rejected() {
        let mut st = TrainState::new(TrainConfig::small()).unwrap();
        let data = BlobCorpus {
            clips: 2,
            size: 128,
            ..Default::default()
        }
        .generate();
        let err = st.train_step(&data.sample_batch(0, 0, 1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
