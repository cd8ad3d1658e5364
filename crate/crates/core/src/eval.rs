//! IoU scoring and diagnostic overlays.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::Mask;
use crate::tracker::{Frame, Point};

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if !pred.same_size(gt) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.bits().iter().zip(gt.bits()) {
        inter += usize::from(*p && *g);
        union += usize::from(*p || *g);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean of the per-keyframe IoUs of one scene.
pub fn scene_iou(frame_ious: &[f64]) -> Result<f64> {
    if frame_ious.is_empty() {
        return Err(Error::EmptyInput("scene has no scored frames".into()));
    }
    Ok(frame_ious.iter().sum::<f64>() / frame_ious.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene: String,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub per_scene: Vec<SceneScore>,
    pub miou: f64,
}

/// Unweighted mean over scenes.
pub fn miou(scores: &[(String, f64)]) -> Result<IoUReport> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scenes to average".into()));
    }
    if let Some((scene, v)) = scores.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
        return Err(Error::param(format!("IoU {v} for scene {scene} outside [0, 1]")));
    }
    let miou = scores.iter().map(|(_, v)| v).sum::<f64>() / scores.len() as f64;
    Ok(IoUReport {
        per_scene: scores
            .iter()
            .map(|(s, v)| SceneScore {
                scene: s.clone(),
                iou: *v,
            })
            .collect(),
        miou,
    })
}

pub const MASK_TINT: [u8; 3] = [0, 255, 0];
pub const KEPT_COLOR: [u8; 3] = [0, 128, 255];
pub const OUTLIER_COLOR: [u8; 3] = [255, 0, 0];
const MARKER_ARM: i64 = 2;

/// Grayscale frame with the mask tinted green, kept particles as blue `+` and
/// outliers as red `x`.
pub fn render_overlay(frame: &Frame, mask: &Mask, kept: &[Point], outliers: &[Point]) -> Result<RgbImage> {
    let (w, h) = (frame.width(), frame.height());
    if mask.width() != w || mask.height() != h {
        return Err(Error::ShapeMismatch(format!(
            "frame {w}x{h} vs mask {}x{}",
            mask.width(),
            mask.height()
        )));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = (frame.get(x, y) * 255.0).round() as u8;
            let px = if mask.get(x, y) {
                let blend = |c: u8| ((u16::from(g) + u16::from(c)) / 2) as u8;
                Rgb([blend(MASK_TINT[0]), blend(MASK_TINT[1]), blend(MASK_TINT[2])])
            } else {
                Rgb([g, g, g])
            };
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    for p in kept {
        draw_marker(&mut img, *p, KEPT_COLOR, &[(1, 0), (0, 1)]);
    }
    for p in outliers {
        draw_marker(&mut img, *p, OUTLIER_COLOR, &[(1, 1), (1, -1)]);
    }
    Ok(img)
}

fn draw_marker(img: &mut RgbImage, p: Point, color: [u8; 3], axes: &[(i64, i64)]) {
    let cx = p.x.round() as i64;
    let cy = p.y.round() as i64;
    let (w, h) = (i64::from(img.width()), i64::from(img.height()));
    for (ax, ay) in axes {
        for s in -MARKER_ARM..=MARKER_ARM {
            let (x, y) = (cx + s * ax, cy + s * ay);
            if (0..w).contains(&x) && (0..h).contains(&y) {
                img.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
    }
}
