use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crowdseg::eval::{iou, miou, scene_iou, IoUReport};
use crowdseg::gradcheck::{run_gradient_suite, DEFAULT_INSTANCES, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crowdseg::io;
use crowdseg::pipeline::{self, load_config, DecaySetting, PipelineConfig, PipelineInputs};
use crowdseg::synth::{generate_scene, SynthConfig};
use crowdseg::tracker::build_tracks;

#[derive(Parser)]
#[command(name = "crowdseg", version, about = "Crowd pseudo-segmentation from coherent motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect and track particles, writing JSON Lines tracks.
    Track {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pseudo-masks from a tracks file.
    Pseudolabel {
        #[arg(long)]
        tracks: PathBuf,
        /// Frames directory, used for the frame size and overlays.
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long, requires = "height")]
        width: Option<usize>,
        #[arg(long, requires = "width")]
        height: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlays: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Track and pseudo-label in one go.
    Run {
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        tracks: Option<PathBuf>,
        #[arg(long, requires = "height")]
        width: Option<usize>,
        #[arg(long, requires = "width")]
        height: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlays: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic scene.
    Synth {
        /// Scene config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        render_frames: bool,
    },
    /// Verify loss gradients against finite differences.
    Losscheck {
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Config file plus per-key overrides; flags win over the file.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    z: Option<DecaySetting>,
    #[arg(long = "threshold_factor")]
    threshold_factor: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long = "frame_stride")]
    frame_stride: Option<usize>,
    #[arg(long = "tracker.levels")]
    levels: Option<usize>,
    #[arg(long = "tracker.window")]
    window: Option<usize>,
    #[arg(long = "tracker.max_iters")]
    max_iters: Option<usize>,
    #[arg(long = "tracker.eps")]
    eps: Option<f64>,
    #[arg(long = "tracker.max_corners")]
    max_corners: Option<usize>,
    #[arg(long = "tracker.quality")]
    quality: Option<f64>,
    #[arg(long = "tracker.min_distance")]
    min_distance: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => PipelineConfig::default(),
        };
        macro_rules! apply {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = v; })*
            };
        }
        apply!(
            k => k, z => z, threshold_factor => threshold_factor, radius => radius,
            frame_stride => frame_stride, levels => tracker.levels, window => tracker.window,
            max_iters => tracker.max_iters, eps => tracker.eps, max_corners => tracker.max_corners,
            quality => tracker.quality, min_distance => tracker.min_distance,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

fn frame_size(width: Option<usize>, height: Option<usize>) -> Option<(usize, usize)> {
    width.zip(height)
}

fn run_stage(config: &ConfigArgs, inputs: PipelineInputs) -> Result<()> {
    let cfg = config.resolve()?;
    let summary = pipeline::run_pipeline(&cfg, &inputs)?;
    eprintln!(
        "{} tracks, {} masks written to {}",
        summary.tracks.len(),
        summary.keyframes.len(),
        summary.masks_dir.display()
    );
    Ok(())
}

/// Scenes are the subdirectories of `pred` when it has any, else `pred` itself.
fn evaluate(pred: &Path, gt: &Path) -> Result<IoUReport> {
    let mut scenes: BTreeMap<String, (PathBuf, PathBuf)> = BTreeMap::new();
    for entry in std::fs::read_dir(pred).with_context(|| format!("{}", pred.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            scenes.insert(name.clone(), (path, gt.join(&name)));
        }
    }
    if scenes.is_empty() {
        let name = pred
            .file_name()
            .map_or_else(|| "scene".to_string(), |n| n.to_string_lossy().into_owned());
        scenes.insert(name, (pred.to_path_buf(), gt.to_path_buf()));
    }

    let mut scores = Vec::new();
    for (name, (pred_dir, gt_dir)) in scenes {
        let gt_masks: BTreeMap<usize, PathBuf> = io::list_masks(&gt_dir)?.into_iter().collect();
        let mut ious = Vec::new();
        for (idx, pred_path) in io::list_masks(&pred_dir)? {
            let gt_path = gt_masks
                .get(&idx)
                .ok_or_else(|| anyhow!("{}: no ground truth for frame {idx}", pred_path.display()))?;
            ious.push(iou(&io::load_mask(&pred_path)?, &io::load_mask(gt_path)?)?);
        }
        let score = scene_iou(&ious).with_context(|| format!("scene {name}"))?;
        scores.push((name, score));
    }
    Ok(miou(&scores)?)
}

fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>, render: bool) -> Result<()> {
    let mut cfg: SynthConfig = match config {
        Some(p) => io::read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.render_frames |= render;
    let scene = generate_scene(&cfg)?;
    io::ensure_dir(out)?;
    io::save_tracks(&scene.tracks, &out.join("tracks.jsonl"))?;
    let labels: BTreeMap<u64, _> = scene
        .tracks
        .iter()
        .map(|t| t.id)
        .zip(scene.labels.iter().copied())
        .collect();
    io::write_json(&labels, &out.join("labels.json"))?;
    io::write_json(&cfg, &out.join("scene.json"))?;
    let gt_dir = out.join("gt");
    io::ensure_dir(&gt_dir)?;
    for m in &scene.gt_masks {
        io::save_mask(m, &gt_dir.join(io::gt_mask_file_name(m.keyframe)))?;
    }
    if let Some(frames) = &scene.frames {
        let dir = out.join("frames");
        io::ensure_dir(&dir)?;
        for f in frames {
            io::save_frame(f, &dir.join(format!("frame_{:06}.png", f.index())))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = pipeline::threads_from_env();
    match cli.command {
        Command::Track { frames, out, config } => {
            let cfg = config.resolve()?;
            let frames = io::load_frames(&frames)?;
            let tracks = pipeline::with_threads(threads, || build_tracks(&frames, cfg.frame_stride, &cfg.tracker))??;
            io::save_tracks(&tracks, &out)?;
        }
        Command::Pseudolabel {
            tracks,
            frames,
            width,
            height,
            out,
            overlays,
            config,
        } => {
            if frames.is_none() && width.is_none() {
                bail!("pseudolabel needs --frames or --width/--height");
            }
            let inputs = PipelineInputs {
                frames_dir: frames,
                tracks_file: Some(tracks),
                frame_size: frame_size(width, height),
                out_dir: out,
                overlays,
                threads,
            };
            run_stage(&config, inputs)?;
        }
        Command::Run {
            frames,
            tracks,
            width,
            height,
            out,
            overlays,
            config,
        } => {
            let inputs = PipelineInputs {
                frames_dir: frames,
                tracks_file: tracks,
                frame_size: frame_size(width, height),
                out_dir: out,
                overlays,
                threads,
            };
            run_stage(&config, inputs)?;
        }
        Command::Eval { pred, gt, out } => {
            let report = evaluate(&pred, &gt)?;
            match out {
                Some(path) => io::write_json(&report, &path)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Synth {
            config,
            out,
            seed,
            render_frames,
        } => {
            synth(config.as_deref(), &out, seed, render_frames)?;
        }
        Command::Losscheck { instances, seed } => {
            let report = run_gradient_suite(instances, seed, DEFAULT_STEP, DEFAULT_TOLERANCE);
            println!("{}", serde_json::to_string(&report)?);
            if !report.pass {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
