use std::fs;
use std::path::{Path, PathBuf};

use geoface::cli::{run, CONFIG_ECHO};
use geoface::synthetic::BlobCorpus;
use geoface::trainer::TrainConfig;
use tempfile::TempDir;

fn geoface(args: &[&str]) -> i32 {
    run(std::iter::once("geoface").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, steps: u64) -> PathBuf {
    let path = dir.join("small.toml");
    let cfg = TrainConfig {
        total_steps: steps,
        ..TrainConfig::small()
    };
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

/// Trains a tiny model and returns the checkpoint path.
fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let cfg = small_config(dir, 2);
    let out = dir.join("run");
    let code = geoface(&["train", "--synthetic", "--synthetic-clips", "3", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code, 0);
    out.join("checkpoint.bin")
}

#[test]
fn render_test_passes_and_echoes_options() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("rt");
    assert_eq!(geoface(&["render-test", "--cases", "20", "--out", s(&out)]), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("render_test.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["cases"], 20);
    assert!(fs::read_to_string(out.join(CONFIG_ECHO)).unwrap().contains("cases = 20"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(geoface(&["no-such-command"]), 1);
    assert_eq!(geoface(&["train", "--synthetic", "--data", "x"]), 1);
    assert_eq!(geoface(&["--help"]), 0);
}

#[test]
fn non_simplex_lambda_is_rejected() {
    let dir = TempDir::new().unwrap();
    let code = geoface(&[
        "train",
        "--synthetic",
        "--lambda-rgb",
        "0.5",
        "--lambda-depth",
        "0.2",
        "--lambda-normal",
        "0.2",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code, 1);
    assert!(!dir.path().join("checkpoint.bin").exists());
}

#[test]
fn training_needs_a_data_source() {
    let dir = TempDir::new().unwrap();
    assert_eq!(geoface(&["train", "--out", s(dir.path())]), 1);
    assert_eq!(geoface(&["scan", s(&dir.path().join("missing"))]), 1);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), 4);
    let (full, half, resumed) = (dir.path().join("full"), dir.path().join("half"), dir.path().join("resumed"));
    let base = ["train", "--synthetic", "--synthetic-clips", "4"];
    fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
        base.iter().chain(extra).copied().collect()
    }
    assert_eq!(geoface(&with(&base, &["--config", s(&cfg), "--out", s(&full)])), 0);
    assert_eq!(geoface(&with(&base, &["--config", s(&cfg), "--steps", "2", "--out", s(&half)])), 0);
    let ckpt = half.join("checkpoint.bin");
    assert_eq!(geoface(&with(&base, &["--resume", s(&ckpt), "--steps", "4", "--out", s(&resumed)])), 0);
    assert_eq!(
        fs::read(full.join("checkpoint.bin")).unwrap(),
        fs::read(resumed.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn trains_from_a_directory_and_checkpoints_periodically() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    BlobCorpus {
        clips: 3,
        frames_per_clip: 3,
        ..Default::default()
    }
    .generate()
    .write_to(&data)
    .unwrap();
    let scan_out = dir.path().join("scan");
    assert_eq!(geoface(&["scan", s(&data), "--out", s(&scan_out)]), 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(scan_out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.as_array().unwrap().len(), 3);
    assert_eq!(manifest[0]["frame_count"], 3);

    let cfg = small_config(dir.path(), 2);
    let out = dir.path().join("run");
    let code = geoface(&["train", "--data", s(&data), "--config", s(&cfg), "--checkpoint-every", "1", "--out", s(&out)]);
    assert_eq!(code, 0);
    assert!(out.join("checkpoint_step00000001.bin").is_file());
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn animate_writes_one_frame_per_driving_frame() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let clips = BlobCorpus {
        clips: 1,
        frames_per_clip: 4,
        ..Default::default()
    }
    .generate();
    let frames = &clips.clips[0].1;
    let source = dir.path().join("source.png");
    frames[0].save_png(&source).unwrap();
    let driving = dir.path().join("driving");
    fs::create_dir(&driving).unwrap();
    for (i, f) in frames[1..].iter().enumerate() {
        f.save_png(&driving.join(format!("{i:03}.png"))).unwrap();
    }
    let out = dir.path().join("anim");
    let code = geoface(&[
        "animate",
        "--checkpoint",
        s(&ckpt),
        "--source",
        s(&source),
        "--driving",
        s(&driving),
        "--mode",
        "absolute",
        "--dump-keypoints",
        "--dump-transmittance",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0);
    for i in 0..3 {
        assert!(out.join(format!("frame_{i:06}.png")).is_file());
        assert!(out.join(format!("transmittance_{i:06}.png")).is_file());
    }
    assert!(!out.join("frame_000003.png").exists());
    assert!(out.join("keypoints.json").is_file());

    // evaluating the output against itself gives zero error
    let eval = dir.path().join("eval");
    assert_eq!(geoface(&["evaluate", "--pred", s(&out), "--gt", s(&out), "--out", s(&eval)]), 0);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["metrics"]["l1"], 0.0);

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let code = geoface(&[
        "animate",
        "--checkpoint",
        s(&ckpt),
        "--source",
        s(&source),
        "--driving",
        s(&empty),
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn corrupted_checkpoint_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x55;
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, &bytes).unwrap();
    assert!(geoface::trainer::load_checkpoint(&bad).is_err());
    let source = dir.path().join("s.png");
    BlobCorpus::default().generate().clips[0].1[0].save_png(&source).unwrap();
    let code = geoface(&["animate", "--checkpoint", s(&bad), "--source", s(&source), "--driving", s(dir.path())]);
    assert_eq!(code, 2);
}

#[test]
fn geometry_writes_both_maps() {
    let dir = TempDir::new().unwrap();
    let image = dir.path().join("face.png");
    BlobCorpus::default().generate().clips[0].1[0].save_png(&image).unwrap();
    let out = dir.path().join("geo");
    assert_eq!(geoface(&["geometry", s(&image), "--out", s(&out)]), 0);
    assert!(out.join("depth.png").is_file());
    assert!(out.join("normal.png").is_file());
}
