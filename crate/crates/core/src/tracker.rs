//! Shi-Tomasi corner detection and pyramidal Lucas-Kanade tracking.
//!
//! Pixel coordinates refer to pixel centres: pixel `(i, j)` is centred at
//! `x = i`, `y = j`. A frame therefore spans `[-0.5, width - 0.5]` horizontally.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::select_keyframes;

/// Smallest accepted frame side, so that a 3-level pyramid still has pixels.
pub const MIN_FRAME_SIDE: usize = 16;

/// Normalised minimum eigenvalue below which a window is untrackable.
const MIN_EIGEN_THRESHOLD: f64 = 1e-6;

/// Neighbourhood used to accumulate the corner structure tensor.
const CORNER_BLOCK: usize = 3;

const LUMA_R: f32 = 0.299;
const LUMA_G: f32 = 0.587;
const LUMA_B: f32 = 0.114;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// A grayscale frame with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    index: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, index: usize, data: Vec<f32>) -> Result<Self> {
        if width < MIN_FRAME_SIDE || height < MIN_FRAME_SIDE {
            return Err(Error::InvalidFrame(format!(
                "{width}x{height} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidFrame(format!(
                "expected {} intensities, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidFrame(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            index,
            data,
        })
    }

    /// Builds a frame by evaluating `f(x, y)` at every pixel; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, index: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, index, data)
    }

    pub fn from_luma8(width: usize, height: usize, index: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::new(width, height, index, data)
    }

    /// Converts interleaved RGB bytes with luma weights 0.299/0.587/0.114.
    pub fn from_rgb8(width: usize, height: usize, index: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::InvalidFrame(format!(
                "expected {} RGB bytes, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(3)
            .map(|px| {
                let l = LUMA_R * f32::from(px[0]) + LUMA_G * f32::from(px[1]) + LUMA_B * f32::from(px[2]);
                (l / 255.0).clamp(0.0, 1.0)
            })
            .collect();
        Self::new(width, height, index, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn same_size(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Whether a point lies within the frame bounds extended by half a pixel.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= -0.5 && p.y >= -0.5 && p.x <= self.width as f64 - 0.5 && p.y <= self.height as f64 - 0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerParams {
    pub levels: usize,
    pub window: usize,
    pub max_iters: usize,
    pub eps: f64,
    pub max_corners: usize,
    pub quality: f64,
    pub min_distance: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 15,
            max_iters: 30,
            eps: 0.01,
            max_corners: 2000,
            quality: 0.01,
            min_distance: 5.0,
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::param("tracker.levels must be at least 1"));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::param("tracker.window must be odd and at least 3"));
        }
        if self.max_iters < 1 {
            return Err(Error::param("tracker.max_iters must be at least 1"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("tracker.eps must be positive"));
        }
        if self.max_corners < 1 {
            return Err(Error::param("tracker.max_corners must be at least 1"));
        }
        if !(self.quality > 0.0 && self.quality <= 1.0) {
            return Err(Error::param("tracker.quality must lie in (0, 1]"));
        }
        if !(self.min_distance >= 0.0) {
            return Err(Error::param("tracker.min_distance must be non-negative"));
        }
        Ok(())
    }
}

/// Minimum eigenvalue of the symmetric matrix `[[a, b], [b, c]]`.
fn min_eigenvalue(a: f64, b: f64, c: f64) -> f64 {
    let half_trace = 0.5 * (a + c);
    let half_diff = 0.5 * (a - c);
    half_trace - (half_diff * half_diff + b * b).sqrt()
}

/// Central-difference gradients with replicated borders.
fn gradients(data: &[f32], width: usize, height: usize) -> (Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0; data.len()];
    let mut gy = vec![0.0; data.len()];
    for y in 0..height {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(height - 1);
        for x in 0..width {
            let left = x.saturating_sub(1);
            let right = (x + 1).min(width - 1);
            gx[y * width + x] = 0.5 * (data[y * width + right] - data[y * width + left]);
            gy[y * width + x] = 0.5 * (data[down * width + x] - data[up * width + x]);
        }
    }
    (gx, gy)
}

/// Shi-Tomasi score (minimum structure-tensor eigenvalue over a 3x3 block) at every pixel.
pub fn corner_scores(frame: &Frame) -> Vec<f64> {
    let (w, h) = (frame.width, frame.height);
    let (gx, gy) = gradients(&frame.data, w, h);
    let half = (CORNER_BLOCK / 2) as isize;
    let mut scores = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
            for dy in -half..=half {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -half..=half {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let ix = f64::from(gx[yy * w + xx]);
                    let iy = f64::from(gy[yy * w + xx]);
                    a += ix * ix;
                    b += ix * iy;
                    c += iy * iy;
                }
            }
            scores[y * w + x] = min_eigenvalue(a, b, c).max(0.0);
        }
    }
    scores
}

/// Selects up to `max_corners` Shi-Tomasi corners, strongest first.
///
/// Candidates must be 3x3 local maxima of the score map with a score of at
/// least `quality` times the frame maximum. Selection is greedy in score order
/// (ties broken row-major) and rejects any candidate closer than
/// `min_distance` to one already selected.
pub fn detect_features(frame: &Frame, max_corners: usize, quality: f64, min_distance: f64) -> Result<Vec<Point>> {
    detect_features_excluding(frame, max_corners, quality, min_distance, &[])
}

/// As [`detect_features`], additionally rejecting candidates within
/// `min_distance` of any point in `existing`.
pub fn detect_features_excluding(
    frame: &Frame,
    max_corners: usize,
    quality: f64,
    min_distance: f64,
    existing: &[Point],
) -> Result<Vec<Point>> {
    if max_corners < 1 {
        return Err(Error::param("max_corners must be at least 1"));
    }
    if !(quality > 0.0 && quality <= 1.0) {
        return Err(Error::param("quality must lie in (0, 1]"));
    }
    let (w, h) = (frame.width, frame.height);
    let scores = corner_scores(frame);
    let max_score = scores.iter().copied().fold(0.0f64, f64::max);
    if max_score <= 1e-12 {
        return Ok(Vec::new());
    }
    let floor = quality * max_score;

    let mut candidates = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let s = scores[y * w + x];
            if s < floor || s <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nb: for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if scores[yy * w + xx] > s {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                candidates.push((s, y * w + x));
            }
        }
    }
    // Stable sort keeps row-major order among equal scores.
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut grid = SpacingGrid::new(w, h, min_distance);
    for p in existing {
        grid.insert(*p);
    }
    let mut picked = Vec::new();
    for (_, idx) in candidates {
        let p = Point::new((idx % w) as f64, (idx / w) as f64);
        if grid.is_clear(p) {
            grid.insert(p);
            picked.push(p);
            if picked.len() == max_corners {
                break;
            }
        }
    }
    Ok(picked)
}

/// Bucket grid answering "is any stored point closer than `radius`?".
struct SpacingGrid {
    radius: f64,
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<Point>>,
}

impl SpacingGrid {
    fn new(width: usize, height: usize, radius: f64) -> Self {
        let cell = radius.max(1.0);
        let cols = (width as f64 / cell).ceil() as usize + 2;
        let rows = (height as f64 / cell).ceil() as usize + 2;
        Self {
            radius,
            cell,
            cols,
            rows,
            buckets: vec![Vec::new(); cols * rows],
        }
    }

    fn cell_of(&self, p: Point) -> (usize, usize) {
        let cx = ((p.x + 1.0) / self.cell).floor().clamp(0.0, (self.cols - 1) as f64) as usize;
        let cy = ((p.y + 1.0) / self.cell).floor().clamp(0.0, (self.rows - 1) as f64) as usize;
        (cx, cy)
    }

    fn insert(&mut self, p: Point) {
        let (cx, cy) = self.cell_of(p);
        self.buckets[cy * self.cols + cx].push(p);
    }

    fn is_clear(&self, p: Point) -> bool {
        if self.radius <= 0.0 {
            return true;
        }
        let (cx, cy) = self.cell_of(p);
        for y in cy.saturating_sub(1)..=(cy + 1).min(self.rows - 1) {
            for x in cx.saturating_sub(1)..=(cx + 1).min(self.cols - 1) {
                if self.buckets[y * self.cols + x]
                    .iter()
                    .any(|q| q.distance(&p) < self.radius)
                {
                    return false;
                }
            }
        }
        true
    }
}

struct Level {
    width: usize,
    height: usize,
    img: Vec<f32>,
    gx: Vec<f32>,
    gy: Vec<f32>,
}

impl Level {
    fn new(width: usize, height: usize, img: Vec<f32>) -> Self {
        let (gx, gy) = gradients(&img, width, height);
        Self {
            width,
            height,
            img,
            gx,
            gy,
        }
    }

    /// 2x box-filter reduction.
    fn downsample(&self) -> Option<Level> {
        let (w, h) = (self.width / 2, self.height / 2);
        if w < 2 || h < 2 {
            return None;
        }
        let mut img = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = self.img[2 * y * self.width + 2 * x]
                    + self.img[2 * y * self.width + 2 * x + 1]
                    + self.img[(2 * y + 1) * self.width + 2 * x]
                    + self.img[(2 * y + 1) * self.width + 2 * x + 1];
                img.push(0.25 * s);
            }
        }
        Some(Level::new(w, h, img))
    }
}

/// Bilinear sample with clamp-to-edge addressing.
fn sample(buf: &[f32], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = f64::from(buf[y0 * width + x0]);
    let p10 = f64::from(buf[y0 * width + x1]);
    let p01 = f64::from(buf[y1 * width + x0]);
    let p11 = f64::from(buf[y1 * width + x1]);
    let top = p00 + fx * (p10 - p00);
    let bottom = p01 + fx * (p11 - p01);
    top + fy * (bottom - top)
}

/// Box-filter image pyramid; level 0 is the full-resolution frame.
pub struct Pyramid {
    levels: Vec<Level>,
}

impl Pyramid {
    pub fn new(frame: &Frame, levels: usize) -> Self {
        let mut out = vec![Level::new(frame.width, frame.height, frame.data.clone())];
        while out.len() < levels.max(1) {
            match out.last().and_then(Level::downsample) {
                Some(next) => out.push(next),
                None => break,
            }
        }
        Self { levels: out }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn width(&self) -> usize {
        self.levels[0].width
    }

    pub fn height(&self) -> usize {
        self.levels[0].height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackStatus {
    Tracked,
    Lost,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackedPoint {
    pub position: Point,
    pub status: TrackStatus,
}

impl TrackedPoint {
    fn lost(position: Point) -> Self {
        Self {
            position,
            status: TrackStatus::Lost,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.status == TrackStatus::Tracked
    }
}

/// Pyramidal Lucas-Kanade: follows each point from `prev` into `next`.
///
/// Output order matches `points`. A point is lost when its window has no
/// usable structure at some pyramid level or when it ends outside the frame.
pub fn track_features(
    prev: &Frame,
    next: &Frame,
    points: &[Point],
    levels: usize,
    window: usize,
    max_iters: usize,
    eps: f64,
) -> Result<Vec<TrackedPoint>> {
    if !prev.same_size(next) {
        return Err(Error::FrameSizeMismatch);
    }
    if levels < 1 {
        return Err(Error::param("levels must be at least 1"));
    }
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::param("window must be odd and at least 3"));
    }
    let prev_pyr = Pyramid::new(prev, levels);
    let next_pyr = Pyramid::new(next, levels);
    Ok(track_pyramids(&prev_pyr, &next_pyr, points, window, max_iters, eps))
}

pub(crate) fn track_pyramids(
    prev: &Pyramid,
    next: &Pyramid,
    points: &[Point],
    window: usize,
    max_iters: usize,
    eps: f64,
) -> Vec<TrackedPoint> {
    points
        .par_iter()
        .map(|p| track_point(prev, next, *p, window, max_iters, eps))
        .collect()
}

fn track_point(
    prev: &Pyramid,
    next: &Pyramid,
    start: Point,
    window: usize,
    max_iters: usize,
    eps: f64,
) -> TrackedPoint {
    let half = (window / 2) as isize;
    let n = window * window;
    let mut patch = vec![0.0f64; n];
    let mut patch_gx = vec![0.0f64; n];
    let mut patch_gy = vec![0.0f64; n];
    let mut patch_ok = vec![false; n];

    let depth = prev.depth().min(next.depth());
    let (mut gx_guess, mut gy_guess) = (0.0f64, 0.0f64);
    for lvl in (0..depth).rev() {
        let pl = &prev.levels[lvl];
        let nl = &next.levels[lvl];
        let scale = (1u64 << lvl) as f64;
        // Box reduction maps pixel centres as x_{l+1} = (x_l - 0.5) / 2.
        let px = (start.x + 0.5) / scale - 0.5;
        let py = (start.y + 0.5) / scale - 0.5;

        let inside =
            |l: &Level, x: f64, y: f64| x >= 0.0 && y >= 0.0 && x <= (l.width - 1) as f64 && y <= (l.height - 1) as f64;
        let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
        let mut valid = 0usize;
        let mut k = 0;
        for dy in -half..=half {
            for dx in -half..=half {
                let sx = px + dx as f64;
                let sy = py + dy as f64;
                patch_ok[k] = inside(pl, sx, sy);
                if patch_ok[k] {
                    let ix = sample(&pl.gx, pl.width, pl.height, sx, sy);
                    let iy = sample(&pl.gy, pl.width, pl.height, sx, sy);
                    patch[k] = sample(&pl.img, pl.width, pl.height, sx, sy);
                    patch_gx[k] = ix;
                    patch_gy[k] = iy;
                    a += ix * ix;
                    b += ix * iy;
                    c += iy * iy;
                    valid += 1;
                }
                k += 1;
            }
        }
        if valid == 0 || min_eigenvalue(a, b, c) / (valid as f64) < MIN_EIGEN_THRESHOLD {
            return TrackedPoint::lost(start);
        }

        // Only window samples inside both images contribute, so borders never
        // feed clamped (wrong) intensities into the normal equations.
        let (mut vx, mut vy) = (0.0f64, 0.0f64);
        for _ in 0..max_iters {
            let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
            let (mut bx, mut by) = (0.0f64, 0.0f64);
            let mut used = 0usize;
            let mut k = 0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let sx = px + gx_guess + vx + dx as f64;
                    let sy = py + gy_guess + vy + dy as f64;
                    if patch_ok[k] && inside(nl, sx, sy) {
                        let (ix, iy) = (patch_gx[k], patch_gy[k]);
                        let diff = patch[k] - sample(&nl.img, nl.width, nl.height, sx, sy);
                        a += ix * ix;
                        b += ix * iy;
                        c += iy * iy;
                        bx += diff * ix;
                        by += diff * iy;
                        used += 1;
                    }
                    k += 1;
                }
            }
            if used == 0 || min_eigenvalue(a, b, c) / (used as f64) < MIN_EIGEN_THRESHOLD {
                return TrackedPoint::lost(start);
            }
            let det = a * c - b * b;
            let ex = (c * bx - b * by) / det;
            let ey = (a * by - b * bx) / det;
            vx += ex;
            vy += ey;
            if (ex * ex + ey * ey).sqrt() < eps {
                break;
            }
        }
        if lvl > 0 {
            gx_guess = 2.0 * (gx_guess + vx);
            gy_guess = 2.0 * (gy_guess + vy);
        } else {
            gx_guess += vx;
            gy_guess += vy;
        }
    }

    let end = Point::new(start.x + gx_guess, start.y + gy_guess);
    let (w, h) = (prev.width() as f64, prev.height() as f64);
    if !end.x.is_finite() || !end.y.is_finite() || end.x < -0.5 || end.y < -0.5 || end.x > w - 0.5 || end.y > h - 0.5 {
        return TrackedPoint::lost(end);
    }
    TrackedPoint {
        position: end,
        status: TrackStatus::Tracked,
    }
}

/// One observation of a particle at frame `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub t: usize,
    pub x: f64,
    pub y: f64,
}

impl TrackPoint {
    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// A particle trajectory sampled at consecutive keyframes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleTrack {
    pub id: u64,
    pub points: Vec<TrackPoint>,
    pub alive: bool,
}

impl ParticleTrack {
    pub fn new(id: u64) -> Self {
        Self {
            id,
            points: Vec::new(),
            alive: true,
        }
    }

    pub fn push(&mut self, t: usize, p: Point) {
        self.points.push(TrackPoint { t, x: p.x, y: p.y });
    }

    pub fn point_at(&self, t: usize) -> Option<&TrackPoint> {
        self.points
            .binary_search_by_key(&t, |p| p.t)
            .ok()
            .map(|i| &self.points[i])
    }

    /// Backward-difference displacement into `t` from the previous sample.
    pub fn velocity_at(&self, t: usize) -> Option<(f64, f64)> {
        let i = self.points.binary_search_by_key(&t, |p| p.t).ok()?;
        if i == 0 {
            return None;
        }
        let (a, b) = (&self.points[i - 1], &self.points[i]);
        Some((b.x - a.x, b.y - a.y))
    }

    /// Keeps only samples whose frame index is a multiple of `stride`.
    ///
    /// The result is cut at the first gap so that consecutive samples stay
    /// exactly one stride apart.
    pub fn resample(&self, stride: usize) -> ParticleTrack {
        let stride = stride.max(1);
        let mut out = ParticleTrack {
            id: self.id,
            points: Vec::new(),
            alive: self.alive,
        };
        for p in self.points.iter().filter(|p| p.t % stride == 0) {
            if let Some(last) = out.points.last() {
                if p.t != last.t + stride {
                    out.alive = false;
                    break;
                }
            }
            out.points.push(*p);
        }
        out
    }
}

/// Detects particles on the first keyframe and follows them frame by frame.
///
/// Positions are recorded only at keyframes (every `keyframe_stride`-th
/// frame). A particle is dropped when LK loses it or when the
/// forward-backward error of a single frame step exceeds one pixel; its
/// track is truncated there. Every keyframe is topped up with fresh corners
/// until `max_corners` particles are alive again.
pub fn build_tracks(frames: &[Frame], keyframe_stride: usize, params: &TrackerParams) -> Result<Vec<ParticleTrack>> {
    params.validate()?;
    if keyframe_stride < 1 {
        return Err(Error::param("keyframe stride must be at least 1"));
    }
    if let Some(first) = frames.first() {
        if frames.iter().any(|f| !f.same_size(first)) {
            return Err(Error::FrameSizeMismatch);
        }
    }
    let keyframes = select_keyframes(frames.len(), keyframe_stride);
    if keyframes.len() < 2 {
        return Err(Error::InsufficientFrames);
    }
    let last = *keyframes.last().expect("at least two keyframes");

    let mut tracks: Vec<ParticleTrack> = Vec::new();
    // (index into `tracks`, current position)
    let mut active: Vec<(usize, Point)> = Vec::new();

    let seed = |tracks: &mut Vec<ParticleTrack>, active: &mut Vec<(usize, Point)>, frame: &Frame| -> Result<()> {
        let room = params.max_corners.saturating_sub(active.len());
        if room == 0 {
            return Ok(());
        }
        let existing: Vec<Point> = active.iter().map(|(_, p)| *p).collect();
        let fresh = detect_features_excluding(frame, room, params.quality, params.min_distance, &existing)?;
        for p in fresh {
            let mut track = ParticleTrack::new(tracks.len() as u64);
            track.push(frame.index, p);
            active.push((tracks.len(), p));
            tracks.push(track);
        }
        Ok(())
    };

    seed(&mut tracks, &mut active, &frames[0])?;
    let mut prev_pyr = Pyramid::new(&frames[0], params.levels);
    for (f, frame) in frames.iter().enumerate().take(last + 1).skip(1) {
        let next_pyr = Pyramid::new(frame, params.levels);
        let starts: Vec<Point> = active.iter().map(|(_, p)| *p).collect();
        let forward = track_pyramids(
            &prev_pyr,
            &next_pyr,
            &starts,
            params.window,
            params.max_iters,
            params.eps,
        );
        let ends: Vec<Point> = forward.iter().map(|t| t.position).collect();
        let backward = track_pyramids(&next_pyr, &prev_pyr, &ends, params.window, params.max_iters, params.eps);

        let mut survivors = Vec::with_capacity(active.len());
        for (i, (track_idx, start)) in active.iter().enumerate() {
            let ok = forward[i].is_tracked()
                && backward[i].is_tracked()
                && backward[i].position.distance(start) <= FORWARD_BACKWARD_LIMIT;
            if ok {
                survivors.push((*track_idx, forward[i].position));
            } else {
                tracks[*track_idx].alive = false;
            }
        }
        active = survivors;

        if f % keyframe_stride == 0 {
            for (track_idx, p) in &active {
                tracks[*track_idx].push(frames[f].index, *p);
            }
            if f != last {
                seed(&mut tracks, &mut active, &frames[f])?;
            }
        }
        prev_pyr = next_pyr;
    }
    // Particles that never reached a second keyframe still count as truncated tracks.
    Ok(tracks)
}

/// Forward-backward round-trip error (px) beyond which a particle is dropped.
pub const FORWARD_BACKWARD_LIMIT: f64 = 1.0;
