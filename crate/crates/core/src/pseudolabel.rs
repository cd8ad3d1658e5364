//! Circular region merging: pseudo-masks as unions of discs around kept particles.

use crate::error::{Error, Result};
use crate::tracker::Point;

/// Binary crowd/background mask. Also used for ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    pub keyframe: usize,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
            keyframe: 0,
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
            keyframe: 0,
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
            keyframe: 0,
        })
    }

    pub fn with_keyframe(mut self, keyframe: usize) -> Self {
        self.keyframe = keyframe;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn same_size(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Sets every in-frame pixel centre within `radius` of `center` (inclusive).
    pub fn paint_disc(&mut self, center: Point, radius: f64) {
        if !(radius > 0.0) || !center.x.is_finite() || !center.y.is_finite() {
            return;
        }
        let r2 = radius * radius;
        let x_lo = (center.x - radius).ceil().max(0.0);
        let x_hi = (center.x + radius).floor().min(self.width as f64 - 1.0);
        let y_lo = (center.y - radius).ceil().max(0.0);
        let y_hi = (center.y + radius).floor().min(self.height as f64 - 1.0);
        if x_lo > x_hi || y_lo > y_hi {
            return;
        }
        for py in y_lo as usize..=y_hi as usize {
            let dy = py as f64 - center.y;
            for px in x_lo as usize..=x_hi as usize {
                let dx = px as f64 - center.x;
                if dx * dx + dy * dy <= r2 {
                    self.bits[py * self.width + px] = true;
                }
            }
        }
    }
}

/// Mask of a single disc.
pub fn rasterize_disc(center: Point, radius: f64, width: usize, height: usize) -> Mask {
    let mut mask = Mask::empty(width, height);
    mask.paint_disc(center, radius);
    mask
}

/// Union of discs of the same radius centred at each particle.
pub fn circular_region_merge(particles: &[Point], radius: f64, width: usize, height: usize) -> Mask {
    let mut mask = Mask::empty(width, height);
    for p in particles {
        mask.paint_disc(*p, radius);
    }
    mask
}

/// Frame indices `0, stride, 2*stride, ...` below `total_frames`.
pub fn select_keyframes(total_frames: usize, stride: usize) -> Vec<usize> {
    (0..total_frames).step_by(stride.max(1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disc_sizes() {
        assert_eq!(rasterize_disc(Point::new(10.0, 10.0), 2.0, 64, 64).count(), 13);
        assert_eq!(rasterize_disc(Point::new(10.0, 10.0), 0.5, 64, 64).count(), 1);
        assert_eq!(rasterize_disc(Point::new(0.0, 0.0), 2.0, 64, 64).count(), 6);
        assert_eq!(rasterize_disc(Point::new(-50.0, 10.0), 2.0, 64, 64).count(), 0);
    }

    #[test]
    fn merge_examples() {
        assert_eq!(circular_region_merge(&[], 20.0, 64, 64).count(), 0);
        let far = [Point::new(5.0, 5.0), Point::new(105.0, 5.0)];
        assert_eq!(circular_region_merge(&far, 2.0, 128, 16).count(), 26);
        let same = [Point::new(5.0, 5.0), Point::new(5.0, 5.0)];
        assert_eq!(circular_region_merge(&same, 2.0, 16, 16).count(), 13);
    }

    #[test]
    fn keyframes() {
        assert_eq!(select_keyframes(40, 20), vec![0, 20]);
        assert_eq!(select_keyframes(5, 1), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_keyframes(5, 20), vec![0]);
        assert!(select_keyframes(0, 20).is_empty());
    }

    #[test]
    fn from_bits_checks_length() {
        assert!(Mask::from_bits(4, 4, vec![false; 15]).is_err());
    }
}
