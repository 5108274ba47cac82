//! Command-line front end. [`run`] parses arguments, executes one command and
//! maps the outcome to an exit code: 0 on success, 1 on invalid input, 2 on
//! runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dataio::{list_frames, preprocess, scan_dataset, DiskPairs, Image, PairSource};
use crate::error::{Error, Result};
use crate::fvr::render_selftest;
use crate::geometry::{BackendKind, GeometryExtractor, GeometryMaps};
use crate::metrics::{evaluate_dirs, Plugins};
use crate::synthetic::BlobCorpus;
use crate::trainer::{animate, load_checkpoint, AnimationRequest, TrainConfig, TrainState, TransferMode};

/// Name of the file every command writes into its output directory.
pub const CONFIG_ECHO: &str = "config_echo.toml";

#[derive(Debug, Parser)]
#[command(name = "geoface", version, about = "Keypoint-driven face animation with volume-rendered features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Index a dataset root (one sub-directory of frames per clip).
    Scan(ScanArgs),
    /// Train from scratch or resume from a checkpoint.
    Train(TrainArgs),
    /// Animate a source image with a directory of driving frames.
    Animate(AnimateArgs),
    /// Compare generated frames against reference frames.
    Evaluate(EvaluateArgs),
    /// Write depth and normal maps of one image.
    Geometry(GeometryArgs),
    /// Check the volume renderer against its reference accumulation.
    RenderTest(RenderTestArgs),
}

#[derive(Debug, Args, Serialize)]
struct ScanArgs {
    root: PathBuf,
    #[arg(long, default_value = "geoface-out")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Flat `key = value` config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root; omit together with --synthetic to train on moving blobs.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Train on the built-in moving-blob corpus.
    #[arg(long)]
    synthetic: bool,
    /// Number of clips in the synthetic corpus.
    #[arg(long, default_value_t = 50)]
    synthetic_clips: usize,
    #[arg(long, default_value = "geoface-out")]
    out: PathBuf,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Also write a checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_rgb: Option<f64>,
    #[arg(long)]
    lambda_depth: Option<f64>,
    #[arg(long)]
    lambda_normal: Option<f64>,
    #[arg(long)]
    geometry_backend: Option<BackendKind>,
    #[arg(long)]
    geometry_weights: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct AnimateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    /// Directory of driving frames, used in name order.
    #[arg(long)]
    driving: PathBuf,
    #[arg(long, default_value = "relative")]
    mode: TransferMode,
    #[arg(long, default_value = "geoface-out")]
    out: PathBuf,
    /// Write source, driving and transferred keypoints to keypoints.json.
    #[arg(long)]
    dump_keypoints: bool,
    /// Write the residual ray transmittance of every frame as a PNG.
    #[arg(long)]
    dump_transmittance: bool,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value = "geoface-out")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct GeometryArgs {
    image: PathBuf,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "baseline")]
    geometry_backend: BackendKind,
    #[arg(long)]
    geometry_weights: Option<PathBuf>,
    #[arg(long, default_value = "geoface-out")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct RenderTestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value = "geoface-out")]
    out: PathBuf,
}

impl clap::ValueEnum for BackendKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[Self::Baseline, Self::Oracle, Self::External]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

impl clap::ValueEnum for TransferMode {
    fn value_variants<'a>() -> &'a [Self] {
        &[Self::Absolute, Self::Relative]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Self::Absolute => "absolute",
            Self::Relative => "relative",
        }))
    }
}

/// Runs the command line `args` (including the program name) and returns
/// the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Scan(a) => cmd_scan(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Animate(a) => cmd_animate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Geometry(a) => cmd_geometry(&a),
        Command::RenderTest(a) => cmd_render_test(&a),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Echoes the command options as TOML.
fn echo_args(out: &Path, command: &str, args: &impl Serialize) -> Result<()> {
    let body = toml::to_string(args).map_err(|e| Error::Config(format!("cannot echo options: {e}")))?;
    write_text(&out.join(CONFIG_ECHO), &format!("# geoface {command}\n{body}"))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn cmd_scan(a: &ScanArgs) -> Result<()> {
    let manifest = scan_dataset(&a.root)?;
    prepare_out(&a.out)?;
    echo_args(&a.out, "scan", a)?;
    write_text(&a.out.join("manifest.json"), &manifest.to_json())?;
    println!(
        "{} clips, {} frames under {}",
        manifest.clips.len(),
        manifest.total_frames(),
        a.root.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(path) => {
            require_file(path, "config file")?;
            TrainConfig::load(path)?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.size {
        c.image_size = v;
    }
    if let Some(v) = a.steps {
        c.total_steps = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lambda_rgb {
        c.lambda_rgb = v;
    }
    if let Some(v) = a.lambda_depth {
        c.lambda_depth = v;
    }
    if let Some(v) = a.lambda_normal {
        c.lambda_normal = v;
    }
    if let Some(v) = a.geometry_backend {
        c.geometry_backend = v;
    }
    if let Some(v) = &a.geometry_weights {
        c.geometry_weights = Some(v.clone());
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut state = match &a.resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            let mut st = load_checkpoint(path)?;
            if let Some(steps) = a.steps {
                st.config.total_steps = steps;
            }
            st
        }
        None => TrainState::new(train_config(a)?)?,
    };
    let data: Box<dyn PairSource> = match (&a.data, a.synthetic) {
        (Some(root), _) => Box::new(DiskPairs::new(scan_dataset(root)?, state.config.image_size)?),
        (None, true) => Box::new(
            BlobCorpus {
                clips: a.synthetic_clips,
                size: state.config.image_size,
                seed: state.config.seed,
                ..Default::default()
            }
            .generate(),
        ),
        (None, false) => return Err(Error::Config("pass --data <root> or --synthetic".into())),
    };
    prepare_out(&a.out)?;
    write_text(&a.out.join(CONFIG_ECHO), &state.config.to_toml())?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let every = a.checkpoint_every.filter(|&n| n > 0);
    let out = a.out.clone();
    state.train(data.as_ref(), |st, report| {
        let line = serde_json::to_string(report).expect("report serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if report.step % 100 == 0 || report.step == st.config.total_steps {
            eprintln!(
                "step {:>6}  total {:.4}  recon-l1 {:.4}  disc {:.4}",
                report.step, report.losses.total, report.reconstruction_l1, report.discriminator
            );
        }
        if let Some(n) = every {
            if report.step % n == 0 {
                st.save_checkpoint(&out.join(format!("checkpoint_step{:08}.bin", report.step)))?;
            }
        }
        Ok(())
    })?;
    let path = a.out.join("checkpoint.bin");
    state.save_checkpoint(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_animate(a: &AnimateArgs) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.source, "source image")?;
    if !a.driving.is_dir() {
        return Err(Error::MissingRoot(a.driving.clone()));
    }
    let state = load_checkpoint(&a.checkpoint)?;
    let size = state.config.image_size;
    let source = preprocess(&Image::load(&a.source)?, size)?;
    let driving = list_frames(&a.driving)?
        .iter()
        .map(|p| preprocess(&Image::load(p)?, size))
        .collect::<Result<Vec<_>>>()?;
    let request = AnimationRequest {
        source,
        driving,
        mode: a.mode,
    };
    let result = animate(&state, &request)?;
    prepare_out(&a.out)?;
    echo_args(&a.out, "animate", a)?;
    for (i, frame) in result.frames.iter().enumerate() {
        frame.save_png(&a.out.join(format!("frame_{i:06}.png")))?;
    }
    if a.dump_keypoints {
        let dump = serde_json::json!({
            "source": result.source_keypoints,
            "driving": result.driving_keypoints,
            "transferred": result.transferred,
        });
        write_text(
            &a.out.join("keypoints.json"),
            &serde_json::to_string_pretty(&dump).expect("keypoints serialize"),
        )?;
    }
    if a.dump_transmittance {
        for (i, tau) in result.transmittance.iter().enumerate() {
            let (h, w) = (tau.shape()[0], tau.shape()[1]);
            let im = Image::from_fn(h, w, |y, x| [tau.data()[y * w + x]; 3]);
            im.save_png(&a.out.join(format!("transmittance_{i:06}.png")))?;
        }
    }
    println!("wrote {} frames to {}", result.frames.len(), a.out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let report = evaluate_dirs(&a.pred, &a.gt, &Plugins::default())?;
    prepare_out(&a.out)?;
    echo_args(&a.out, "evaluate", a)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&a.out.join("metrics.json"), &json)?;
    println!("{json}");
    Ok(())
}

/// Depth min-max scaled to 16 bits.
fn save_depth_png(maps: &GeometryMaps, path: &Path) -> Result<()> {
    let d = maps.depth.data();
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u16> = d.iter().map(|&v| (((v - lo) / span) * 65535.0).round() as u16).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(maps.width() as u32, maps.height() as u32, pixels)
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn cmd_geometry(a: &GeometryArgs) -> Result<()> {
    require_file(&a.image, "image")?;
    let extractor = GeometryExtractor::from_kind(a.geometry_backend, a.size, a.geometry_weights.as_deref())?;
    let image = preprocess(&Image::load(&a.image)?, a.size)?;
    let maps = extractor.extract(&image)?;
    prepare_out(&a.out)?;
    echo_args(&a.out, "geometry", a)?;
    save_depth_png(&maps, &a.out.join("depth.png"))?;
    let n = maps.normal.data();
    let w = maps.width();
    let normal = Image::from_fn(maps.height(), w, |y, x| {
        let i = (y * w + x) * 3;
        [0, 1, 2].map(|k| ((n[i + k] + 1.0) / 2.0) as f32)
    });
    normal.save_png(&a.out.join("normal.png"))?;
    println!("wrote depth.png and normal.png to {}", a.out.display());
    Ok(())
}

fn cmd_render_test(a: &RenderTestArgs) -> Result<()> {
    if a.cases == 0 {
        return Err(Error::Config("--cases must be positive".into()));
    }
    let report = render_selftest(a.seed, a.cases);
    prepare_out(&a.out)?;
    echo_args(&a.out, "render-test", a)?;
    write_text(
        &a.out.join("render_test.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    println!(
        "render oracle: {} cases, max error {:.3e}, weight budget error {:.3e} (tolerance {:.0e})",
        report.cases, report.max_abs_error, report.max_budget_error, report.tolerance
    );
    if !report.passed {
        return Err(Error::Numerical("volume renderer disagrees with the reference".into()));
    }
    println!("PASS");
    Ok(())
}
