//! Pipeline configuration and the end-to-end pseudo-labelling run.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::collectiveness::{analyze_keyframe, kappa, CollectivenessResult, GraphParams, KeyframeDiagnostics};
use crate::error::{Error, Result};
use crate::eval::render_overlay;
use crate::io;
use crate::pseudolabel::{circular_region_merge, select_keyframes, Mask};
use crate::tracker::{build_tracks, Frame, ParticleTrack, Point, TrackerParams};

/// Environment variable selecting the worker thread count.
pub const THREADS_ENV: &str = "MPAS_THREADS";

/// Decay factor: explicit, or `1 / (2K)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum DecaySetting {
    #[default]
    Auto,
    Value(f64),
}

impl DecaySetting {
    pub fn resolve(&self, k: usize) -> f64 {
        match self {
            DecaySetting::Auto => 1.0 / (2.0 * k as f64),
            DecaySetting::Value(z) => *z,
        }
    }
}

impl std::str::FromStr for DecaySetting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(DecaySetting::Auto);
        }
        s.parse::<f64>()
            .map(DecaySetting::Value)
            .map_err(|_| format!("expected a number or \"auto\", got {s:?}"))
    }
}

impl Serialize for DecaySetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DecaySetting::Auto => s.serialize_str("auto"),
            DecaySetting::Value(z) => s.serialize_f64(*z),
        }
    }
}

impl<'de> Deserialize<'de> for DecaySetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(z) => Ok(DecaySetting::Value(z)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub z: DecaySetting,
    pub threshold_factor: f64,
    pub radius: f64,
    pub frame_stride: usize,
    pub tracker: TrackerParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 20,
            z: DecaySetting::Auto,
            threshold_factor: 0.6,
            radius: 20.0,
            frame_stride: 20,
            tracker: TrackerParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn decay(&self) -> f64 {
        self.z.resolve(self.k)
    }

    pub fn graph_params(&self) -> GraphParams {
        GraphParams {
            k: self.k,
            ..GraphParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::param("K must be at least 1"));
        }
        let z = self.decay();
        if !(z > 0.0) || z * self.k as f64 >= 1.0 {
            return Err(Error::DecayOutOfRange);
        }
        if !(self.threshold_factor > 0.0) || !self.threshold_factor.is_finite() {
            return Err(Error::param("threshold_factor must be positive"));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::param("radius must be positive"));
        }
        if self.frame_stride < 1 {
            return Err(Error::param("frame_stride must be at least 1"));
        }
        self.tracker.validate()
    }

    /// `z / (1 - zK)` for the resolved decay.
    pub fn kappa(&self) -> Result<f64> {
        kappa(self.decay(), self.k)
    }
}

/// Pseudo-labelling outcome for one keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeLabels {
    pub t: usize,
    pub mask: Mask,
    /// Track ids of the graph nodes, aligned with `result`.
    pub node_ids: Vec<u64>,
    pub positions: Vec<Point>,
    /// `None` when too few moving particles were present to form a graph.
    pub result: Option<CollectivenessResult>,
}

impl KeyframeLabels {
    pub fn kept_points(&self) -> Vec<Point> {
        self.partition().0
    }

    pub fn outlier_points(&self) -> Vec<Point> {
        self.partition().1
    }

    fn partition(&self) -> (Vec<Point>, Vec<Point>) {
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        if let Some(r) = &self.result {
            for (p, k) in self.positions.iter().zip(&r.kept) {
                if *k {
                    kept.push(*p);
                } else {
                    dropped.push(*p);
                }
            }
        }
        (kept, dropped)
    }

    pub fn diagnostics(&self) -> KeyframeDiagnostics {
        match &self.result {
            Some(r) => KeyframeDiagnostics::new(self.t, r),
            None => KeyframeDiagnostics {
                t: self.t,
                kappa: f64::NAN,
                phi: Vec::new(),
                kept: Vec::new(),
            },
        }
    }
}

/// Collectiveness filtering and circular region merging at each keyframe.
///
/// `tracks` must already be sampled at `keyframes`. The first keyframe has no
/// velocities and yields no mask.
pub fn pseudolabel_tracks(
    tracks: &[ParticleTrack],
    keyframes: &[usize],
    width: usize,
    height: usize,
    config: &PipelineConfig,
) -> Result<Vec<KeyframeLabels>> {
    config.validate()?;
    let params = config.graph_params();
    let z = config.decay();
    keyframes
        .par_iter()
        .skip(1)
        .map(
            |&t| match analyze_keyframe(tracks, t, &params, z, config.threshold_factor) {
                Ok((graph, result)) => {
                    let positions: Vec<Point> = graph.nodes.iter().map(|n| n.position).collect();
                    let kept: Vec<Point> = positions
                        .iter()
                        .zip(&result.kept)
                        .filter_map(|(p, k)| k.then_some(*p))
                        .collect();
                    Ok(KeyframeLabels {
                        t,
                        mask: circular_region_merge(&kept, config.radius, width, height).with_keyframe(t),
                        node_ids: graph.nodes.iter().map(|n| n.id).collect(),
                        positions,
                        result: Some(result),
                    })
                }
                Err(Error::GraphUnderpopulated) => Ok(KeyframeLabels {
                    t,
                    mask: Mask::empty(width, height).with_keyframe(t),
                    node_ids: Vec::new(),
                    positions: Vec::new(),
                    result: None,
                }),
                Err(e) => Err(e),
            },
        )
        .collect()
}

/// Where the pipeline reads from and writes to.
#[derive(Clone, Debug, Default)]
pub struct PipelineInputs {
    pub frames_dir: Option<PathBuf>,
    /// Pre-computed tracks; skips tracking.
    pub tracks_file: Option<PathBuf>,
    /// Needed only when no frames are given.
    pub frame_size: Option<(usize, usize)>,
    pub out_dir: PathBuf,
    pub overlays: bool,
    pub threads: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct PipelineSummary {
    pub tracks: Vec<ParticleTrack>,
    pub keyframes: Vec<KeyframeLabels>,
    pub tracks_path: PathBuf,
    pub masks_dir: PathBuf,
    pub diagnostics_path: PathBuf,
}

/// Reads `MPAS_THREADS`; unset or unparsable means "all cores".
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|n| *n > 0)
}

/// Runs `f` on a dedicated pool of `threads` workers (or the global pool).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::param(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Samples every track at multiples of `stride`.
pub fn resample_tracks(tracks: &[ParticleTrack], stride: usize) -> Vec<ParticleTrack> {
    tracks
        .iter()
        .map(|t| t.resample(stride))
        .filter(|t| !t.points.is_empty())
        .collect()
}

/// Tracking (unless tracks are supplied), pseudo-labelling and output writing.
///
/// Writes `tracks.jsonl`, `masks/mask_<t>.png` for every keyframe after the
/// first, `diagnostics.json` and, on request, `overlays/overlay_<t>.png`.
pub fn run_pipeline(config: &PipelineConfig, inputs: &PipelineInputs) -> Result<PipelineSummary> {
    config.validate()?;
    if inputs.frames_dir.is_none() && inputs.tracks_file.is_none() {
        return Err(Error::EmptyInput("need a frames directory or a tracks file".into()));
    }
    with_threads(inputs.threads, || run_inner(config, inputs))?
}

fn run_inner(config: &PipelineConfig, inputs: &PipelineInputs) -> Result<PipelineSummary> {
    let frames: Option<Vec<Frame>> = inputs.frames_dir.as_deref().map(io::load_frames).transpose()?;

    let (tracks, total_frames) = match (&inputs.tracks_file, &frames) {
        (Some(path), _) => {
            let raw = io::load_tracks(path)?;
            let last = raw.iter().filter_map(|t| t.points.last()).map(|p| p.t).max();
            let total = frames.as_ref().map_or(last.map_or(0, |t| t + 1), Vec::len);
            (resample_tracks(&raw, config.frame_stride), total)
        }
        (None, Some(frames)) => (
            build_tracks(frames, config.frame_stride, &config.tracker)?,
            frames.len(),
        ),
        (None, None) => unreachable!("checked by run_pipeline"),
    };

    let (width, height) = match (&frames, inputs.frame_size) {
        (Some(f), _) => (f[0].width(), f[0].height()),
        (None, Some(size)) => size,
        (None, None) => return Err(Error::param("frame size is required when no frames are given")),
    };

    let keyframes = select_keyframes(total_frames, config.frame_stride);
    let present: BTreeSet<usize> = tracks.iter().flat_map(|t| t.points.iter().map(|p| p.t)).collect();
    if keyframes.len() < 2 || present.len() < 2 {
        return Err(Error::InsufficientFrames);
    }
    let labels = pseudolabel_tracks(&tracks, &keyframes, width, height, config)?;

    io::ensure_dir(&inputs.out_dir)?;
    let tracks_path = inputs.out_dir.join("tracks.jsonl");
    io::save_tracks(&tracks, &tracks_path)?;
    let masks_dir = inputs.out_dir.join("masks");
    io::ensure_dir(&masks_dir)?;
    for kf in &labels {
        io::save_mask(&kf.mask, &masks_dir.join(io::mask_file_name(kf.t)))?;
    }
    let diagnostics: Vec<KeyframeDiagnostics> = labels.iter().map(KeyframeLabels::diagnostics).collect();
    let diagnostics_path = inputs.out_dir.join("diagnostics.json");
    io::write_json(&diagnostics, &diagnostics_path)?;

    if inputs.overlays {
        if let Some(frames) = &frames {
            let dir = inputs.out_dir.join("overlays");
            io::ensure_dir(&dir)?;
            for kf in &labels {
                let Some(frame) = frames.get(kf.t) else { continue };
                let img = render_overlay(frame, &kf.mask, &kf.kept_points(), &kf.outlier_points())?;
                let path = dir.join(format!("overlay_{:06}.png", kf.t));
                img.save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|e| Error::Image {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
            }
        }
    }

    Ok(PipelineSummary {
        tracks,
        keyframes: labels,
        tracks_path,
        masks_dir,
        diagnostics_path,
    })
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    io::read_json(path)
}
