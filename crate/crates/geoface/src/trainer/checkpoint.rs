use std::path::Path;

use serde_json::{json, Map, Value};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::gan::{DiscriminatorEnsemble, Modality};
use crate::geometry::GeometryExtractor;
use crate::nn::ParamStore;
use crate::optim::Adam;

use super::{TrainConfig, TrainState};

pub const CHECKPOINT_KIND: &str = "geoface-train-state";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_store(archive: &mut Archive, prefix: &str, store: &ParamStore) {
    for (name, t) in store.iter() {
        archive.push(format!("{prefix}/{name}"), t.clone());
    }
}

fn push_moments(archive: &mut Archive, prefix: &str, store: &ParamStore, opt: &Adam) {
    for (moment, values) in [("m", &opt.m), ("v", &opt.v)] {
        for ((name, _), t) in store.iter().zip(values) {
            archive.push(format!("{prefix}.{moment}/{name}"), t.clone());
        }
    }
}

fn read_store(archive: &Archive, prefix: &str, store: &mut ParamStore) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = format!("{prefix}/{}", store.name(id));
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = archive.expect(&name, &shape)?.clone();
    }
    Ok(())
}

fn read_moments(archive: &Archive, prefix: &str, store: &ParamStore, opt: &mut Adam, step: u64) -> Result<()> {
    opt.step = step;
    for (moment, values) in [("m", &mut opt.m), ("v", &mut opt.v)] {
        for (id, t) in store.ids().zip(values.iter_mut()) {
            let name = format!("{prefix}.{moment}/{}", store.name(id));
            *t = archive.expect(&name, store.get(id).shape())?.clone();
        }
    }
    Ok(())
}

fn field<'a>(meta: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    meta.get(key)
        .ok_or_else(|| Error::Checkpoint(format!("manifest is missing {key:?}")))
}

fn as_u64(meta: &Map<String, Value>, key: &str) -> Result<u64> {
    field(meta, key)?
        .as_u64()
        .ok_or_else(|| Error::Checkpoint(format!("manifest field {key:?} is not an integer")))
}

impl TrainState {
    /// Parameters, optimizer moments and power-iteration vectors, with the
    /// config echo and parameter counts in the manifest. No timestamps or
    /// host details are recorded, so equal states give equal bytes.
    pub fn to_archive(&self) -> Result<Archive> {
        self.check_geometry_frozen()?;
        let mut a = Archive::new();
        let counts = self.parameter_counts();
        let total: usize = counts.values().sum();
        let members: Vec<Value> = self
            .ensemble
            .members()
            .map(|(m, w)| json!({"modality": m.name(), "weight": w}))
            .collect();
        let meta = json!({
            "kind": CHECKPOINT_KIND,
            "step": self.step,
            "seed": self.config.seed,
            "config": serde_json::to_value(&self.config).expect("config serializes"),
            "ensemble": members,
            "geometry": {
                "backend": self.geometry.kind().as_str(),
                "fingerprint": hex(&self.geometry.fingerprint()),
            },
            "optimizer": {
                "generator_steps": self.gen_opt.step,
                "discriminator_steps": self.disc_opt.step,
            },
            "parameter_counts": counts,
            "total_parameters": total,
        });
        if let Value::Object(m) = meta {
            a.metadata = m;
        }
        push_store(&mut a, "gen", &self.gen_params);
        push_store(&mut a, "disc", &self.disc_params);
        push_store(&mut a, "spectral", &self.spectral);
        push_moments(&mut a, "adam.gen", &self.gen_params, &self.gen_opt);
        push_moments(&mut a, "adam.disc", &self.disc_params, &self.disc_opt);
        Ok(a)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    /// Rebuilds a state; `geometry` overrides the backend named in the config
    /// and must match the recorded fingerprint.
    pub fn from_archive(archive: &Archive, geometry: Option<GeometryExtractor>) -> Result<Self> {
        let meta = &archive.metadata;
        if field(meta, "kind")?.as_str() != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint("archive is not a training checkpoint".into()));
        }
        let config: TrainConfig = serde_json::from_value(field(meta, "config")?.clone())
            .map_err(|e| Error::Checkpoint(format!("bad config echo: {e}")))?;
        let members = field(meta, "ensemble")?
            .as_array()
            .ok_or_else(|| Error::Checkpoint("ensemble must be a list".into()))?
            .iter()
            .map(|v| {
                let name = v["modality"].as_str().unwrap_or_default();
                let m = Modality::ALL
                    .into_iter()
                    .find(|m| m.name() == name)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown modality {name:?}")))?;
                let w = v["weight"]
                    .as_f64()
                    .ok_or_else(|| Error::Checkpoint("ensemble weight must be a number".into()))?;
                Ok((m, w))
            })
            .collect::<Result<Vec<_>>>()?;
        let geometry = match geometry {
            Some(g) => g,
            None => GeometryExtractor::from_kind(
                config.geometry_backend,
                config.image_size,
                config.geometry_weights.as_deref(),
            )?,
        };
        let recorded = field(meta, "geometry")?["fingerprint"].as_str().unwrap_or_default();
        if recorded != hex(&geometry.fingerprint()) {
            return Err(Error::Checkpoint(
                "geometry extractor does not match the one used for training".into(),
            ));
        }
        let parts = DiscriminatorEnsemble::build(&members, config.seed)?;
        let mut st = Self::with_ensemble(config, geometry, parts)?;

        let expected = 3 * (st.gen_params.len() + st.disc_params.len()) + st.spectral.len();
        if archive.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                archive.tensors.len()
            )));
        }
        read_store(archive, "gen", &mut st.gen_params)?;
        read_store(archive, "disc", &mut st.disc_params)?;
        read_store(archive, "spectral", &mut st.spectral)?;
        let opt = field(meta, "optimizer")?;
        let steps = |k: &str| {
            opt[k]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("optimizer.{k} missing")))
        };
        read_moments(archive, "adam.gen", &st.gen_params, &mut st.gen_opt, steps("generator_steps")?)?;
        read_moments(archive, "adam.disc", &st.disc_params, &mut st.disc_opt, steps("discriminator_steps")?)?;
        st.step = as_u64(meta, "step")?;
        if as_u64(meta, "total_parameters")? as usize != st.parameter_counts().values().sum::<usize>() {
            return Err(Error::Checkpoint("parameter count does not match the architecture".into()));
        }
        Ok(st)
    }
}

/// Loads a checkpoint using the geometry backend recorded in its config.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::from_archive(&Archive::load(path)?, None)
}
