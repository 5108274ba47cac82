// A few training steps on moving blobs, then a checkpoint round trip.

use geoface::dataio::PairSource;
use geoface::synthetic::BlobCorpus;
use geoface::trainer::{load_checkpoint, TrainConfig, TrainState};

pub fn run() -> anyhow::Result<()> {
    let data = BlobCorpus { clips: 8, ..Default::default() }.generate();
    let config = TrainConfig {
        total_steps: 6,
        ..TrainConfig::small()
    };
    let mut state = TrainState::new(config)?;
    let held_out = data.sample_batch(1234, 0, 4)?;
    println!("reconstruction L1 before: {:.4}", state.reconstruction_l1(&held_out)?);
    state.train(&data, |_, r| {
        println!(
            "step {}: total {:.3} (perceptual {:.3}, adversarial {:.3}, equivariance {:.3}), D {:.3}",
            r.step, r.losses.total, r.losses.perceptual, r.losses.adversarial_g, r.losses.equivariance, r.discriminator
        );
        Ok(())
    })?;
    println!("reconstruction L1 after:  {:.4}", state.reconstruction_l1(&held_out)?);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("checkpoint.bin");
    state.save_checkpoint(&path)?;
    let restored = load_checkpoint(&path)?;
    anyhow::ensure!(restored.gen_params == state.gen_params, "checkpoint changed the generator");
    println!("{:?}", state.parameter_counts());
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run()
}
