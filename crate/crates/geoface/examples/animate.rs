// Drives a source frame with another clip's motion, in both transfer modes.

use geoface::synthetic::BlobCorpus;
use geoface::trainer::{animate, AnimationRequest, TrainConfig, TrainState, TransferMode};

pub fn run() -> anyhow::Result<()> {
    let clips = BlobCorpus { clips: 2, frames_per_clip: 3, ..Default::default() }.generate();
    let state = TrainState::new(TrainConfig::small())?;
    for mode in [TransferMode::Relative, TransferMode::Absolute] {
        let request = AnimationRequest {
            source: clips.clips[0].1[0].clone(),
            driving: clips.clips[1].1.clone(),
            mode,
        };
        let out = animate(&state, &request)?;
        let moved: Vec<_> = out
            .transferred
            .iter()
            .map(|kp| kp.positions[0].map(|v| (v * 100.0).round() / 100.0))
            .collect();
        println!("{mode:?}: {} frames, first keypoint path {moved:?}", out.frames.len());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run()
}
