//! Synthetic crowd scenes with known coherent groups and incoherent noise particles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::{circular_region_merge, Mask};
use crate::tracker::{Frame, ParticleTrack, Point, MIN_FRAME_SIDE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_groups: usize,
    pub particles_per_group: usize,
    pub n_noise: usize,
    /// Number of frames; particles move once between consecutive frames.
    pub steps: usize,
    /// Group drift and noise step length, px per frame.
    pub drift_speed: f64,
    /// Per-axis Gaussian jitter added to each group step, px.
    pub jitter_sigma: f64,
    /// Disc radius of the ground-truth masks, px.
    pub radius: f64,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Per-axis standard deviation of a group's initial spatial spread, px.
    pub group_spread: f64,
    pub render_frames: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_groups: 1,
            particles_per_group: 50,
            n_noise: 25,
            steps: 40,
            drift_speed: 2.0,
            jitter_sigma: 0.1,
            radius: 20.0,
            width: 320,
            height: 240,
            seed: 0,
            group_spread: 25.0,
            render_frames: false,
        }
    }
}

/// Ground-truth membership of a synthetic particle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleLabel {
    Group(usize),
    Noise,
}

impl ParticleLabel {
    pub fn is_group(&self) -> bool {
        matches!(self, ParticleLabel::Group(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    /// One sample per frame; track ids equal their index here.
    pub tracks: Vec<ParticleTrack>,
    pub labels: Vec<ParticleLabel>,
    pub frames: Option<Vec<Frame>>,
    /// Ground truth for every frame index `0..steps`.
    pub gt_masks: Vec<Mask>,
    pub rng_seed: u64,
    pub width: usize,
    pub height: usize,
}

impl SynthScene {
    pub fn label_of(&self, id: u64) -> Option<ParticleLabel> {
        self.labels.get(id as usize).copied()
    }

    pub fn gt_mask(&self, t: usize) -> Option<&Mask> {
        self.gt_masks.get(t)
    }
}

fn start_range(extent: f64, margin: f64, travel: f64) -> (f64, f64) {
    let lo = margin - travel.min(0.0);
    let hi = extent - 1.0 - margin - travel.max(0.0);
    if lo <= hi {
        (lo, hi)
    } else {
        let mid = 0.5 * (extent - 1.0 - travel);
        (mid, mid)
    }
}

pub fn generate_scene(config: &SynthConfig) -> Result<SynthScene> {
    let group_total = config.n_groups * config.particles_per_group;
    let total = group_total + config.n_noise;
    if total == 0 {
        return Err(Error::EmptyInput("scene has no particles".into()));
    }
    if config.steps < 2 {
        return Err(Error::param("steps must be at least 2"));
    }
    if config.width < MIN_FRAME_SIDE || config.height < MIN_FRAME_SIDE {
        return Err(Error::param(format!(
            "scene must be at least {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
        )));
    }
    let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
    if !finite_nonneg(config.drift_speed) || !finite_nonneg(config.jitter_sigma) || !finite_nonneg(config.group_spread)
    {
        return Err(Error::param(
            "speeds, jitter and spread must be finite and non-negative",
        ));
    }
    if !(config.radius > 0.0) {
        return Err(Error::param("radius must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, h) = (config.width as f64, config.height as f64);
    let travel = config.drift_speed * (config.steps - 1) as f64;
    let margin = (2.0 * config.group_spread).min(0.25 * w.min(h));

    let mut centers = Vec::with_capacity(config.n_groups);
    let mut directions = Vec::with_capacity(config.n_groups);
    for _ in 0..config.n_groups {
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = (angle.cos(), angle.sin());
        let (x_lo, x_hi) = start_range(w, margin, travel * dir.0);
        let (y_lo, y_hi) = start_range(h, margin, travel * dir.1);
        let cx = if x_lo < x_hi { rng.gen_range(x_lo..=x_hi) } else { x_lo };
        let cy = if y_lo < y_hi { rng.gen_range(y_lo..=y_hi) } else { y_lo };
        centers.push(Point::new(cx, cy));
        directions.push(dir);
    }

    let spread = Normal::new(0.0, config.group_spread.max(f64::MIN_POSITIVE)).expect("valid spread");
    let jitter = Normal::new(0.0, config.jitter_sigma.max(f64::MIN_POSITIVE)).expect("valid jitter");
    let clamp_in = |p: Point| Point::new(p.x.clamp(0.0, w - 1.0), p.y.clamp(0.0, h - 1.0));

    let mut labels = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    for (g, c) in centers.iter().enumerate() {
        for _ in 0..config.particles_per_group {
            let p = Point::new(c.x + spread.sample(&mut rng), c.y + spread.sample(&mut rng));
            positions.push(clamp_in(p));
            labels.push(ParticleLabel::Group(g));
        }
    }
    for i in 0..config.n_noise {
        let p = if centers.is_empty() {
            Point::new(rng.gen_range(0.0..w - 1.0), rng.gen_range(0.0..h - 1.0))
        } else {
            // Interleave noise with the groups so rejection cannot rely on position.
            let c = centers[i % centers.len()];
            clamp_in(Point::new(c.x + spread.sample(&mut rng), c.y + spread.sample(&mut rng)))
        };
        positions.push(p);
        labels.push(ParticleLabel::Noise);
    }

    let mut tracks: Vec<ParticleTrack> = (0..total).map(|i| ParticleTrack::new(i as u64)).collect();
    for (track, p) in tracks.iter_mut().zip(&positions) {
        track.push(0, *p);
    }
    let in_frame = |p: &Point| p.x >= -0.5 && p.y >= -0.5 && p.x <= w - 0.5 && p.y <= h - 0.5;
    for t in 1..config.steps {
        for i in 0..total {
            let step = match labels[i] {
                ParticleLabel::Group(g) => {
                    let (jx, jy) = if config.jitter_sigma > 0.0 {
                        (jitter.sample(&mut rng), jitter.sample(&mut rng))
                    } else {
                        (0.0, 0.0)
                    };
                    (
                        config.drift_speed * directions[g].0 + jx,
                        config.drift_speed * directions[g].1 + jy,
                    )
                }
                ParticleLabel::Noise => {
                    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    (config.drift_speed * a.cos(), config.drift_speed * a.sin())
                }
            };
            if !tracks[i].alive {
                continue;
            }
            let p = Point::new(positions[i].x + step.0, positions[i].y + step.1);
            if in_frame(&p) {
                positions[i] = p;
                tracks[i].push(t, p);
            } else {
                tracks[i].alive = false;
            }
        }
    }

    let gt_masks = (0..config.steps)
        .map(|t| {
            let pts: Vec<Point> = tracks
                .iter()
                .zip(&labels)
                .filter(|(_, l)| l.is_group())
                .filter_map(|(tr, _)| tr.point_at(t).map(|p| p.position()))
                .collect();
            circular_region_merge(&pts, config.radius, config.width, config.height).with_keyframe(t)
        })
        .collect();

    let frames = if config.render_frames {
        Some(render_frames(&tracks, config.width, config.height, config.steps)?)
    } else {
        None
    };

    Ok(SynthScene {
        tracks,
        labels,
        frames,
        gt_masks,
        rng_seed: config.seed,
        width: config.width,
        height: config.height,
    })
}

const DOT_SIGMA: f64 = 1.5;
const DOT_AMPLITUDE: f64 = 0.6;

/// Particles as Gaussian dots over a static, weakly textured background.
pub fn render_frames(tracks: &[ParticleTrack], width: usize, height: usize, steps: usize) -> Result<Vec<Frame>> {
    let background: Vec<f64> = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            0.25 + 0.03 * (0.05 * x).sin() * (0.07 * y).cos()
        })
        .collect();
    let reach = (3.0 * DOT_SIGMA).ceil() as i64;
    (0..steps)
        .map(|t| {
            let mut img = background.clone();
            for tr in tracks {
                let Some(p) = tr.point_at(t) else { continue };
                let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
                for y in (cy - reach).max(0)..=(cy + reach).min(height as i64 - 1) {
                    for x in (cx - reach).max(0)..=(cx + reach).min(width as i64 - 1) {
                        let d2 = (x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2);
                        img[y as usize * width + x as usize] +=
                            DOT_AMPLITUDE * (-d2 / (2.0 * DOT_SIGMA * DOT_SIGMA)).exp();
                    }
                }
            }
            let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
            Frame::new(width, height, t, data)
        })
        .collect()
}

/// Smooth random texture supporting exact integer translations.
pub struct TexturePattern {
    width: usize,
    height: usize,
    margin: usize,
    field: Vec<f32>,
}

impl TexturePattern {
    /// `margin` bounds the largest translation that stays inside the generated field.
    pub fn new(width: usize, height: usize, margin: usize, seed: u64) -> Self {
        let (fw, fh) = (width + 2 * margin, height + 2 * margin);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut field: Vec<f32> = (0..fw * fh).map(|_| rng.gen::<f32>()).collect();
        for _ in 0..2 {
            field = box_blur(&field, fw, fh, 2);
        }
        let (lo, hi) = field
            .iter()
            .fold((f32::MAX, f32::MIN), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let span = (hi - lo).max(f32::EPSILON);
        for v in &mut field {
            *v = 0.1 + 0.8 * (*v - lo) / span;
        }
        Self {
            width,
            height,
            margin,
            field,
        }
    }

    /// The pattern moved by `(dx, dy)`: `shifted(x, y) = base(x - dx, y - dy)`.
    pub fn frame(&self, dx: i64, dy: i64, index: usize) -> Result<Frame> {
        let m = self.margin as i64;
        if dx.abs() > m || dy.abs() > m {
            return Err(Error::param(format!("shift ({dx}, {dy}) exceeds texture margin {m}")));
        }
        let fw = self.width + 2 * self.margin;
        Frame::from_fn(self.width, self.height, index, |x, y| {
            let sx = (x as i64 + m - dx) as usize;
            let sy = (y as i64 + m - dy) as usize;
            self.field[sy * fw + sx]
        })
    }
}

fn box_blur(src: &[f32], w: usize, h: usize, r: usize) -> Vec<f32> {
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let s: f32 = src[y * w + lo..=y * w + hi].iter().sum();
            tmp[y * w + x] = s / (hi - lo + 1) as f32;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let s: f32 = (lo..=hi).map(|yy| tmp[yy * w + x]).sum();
            out[y * w + x] = s / (hi - lo + 1) as f32;
        }
    }
    out
}
