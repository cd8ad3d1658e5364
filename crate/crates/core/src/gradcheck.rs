//! Central finite-difference verification of the loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{air_grad, air_loss, dice_grad, dice_loss, FeatureMap, SegOutput};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_INSTANCES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub dice_max_rel_err: f64,
    pub air_max_rel_err: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Largest relative error between [`dice_grad`] and central differences of [`dice_loss`].
pub fn check_dice(seg: &SegOutput, step: f64) -> f64 {
    let analytic = dice_grad(seg);
    let mut o = seg.predictions().to_vec();
    let mut worst = 0.0f64;
    for k in 0..o.len() {
        let orig = o[k];
        o[k] = orig + step;
        let plus = dice_loss(&seg.with_predictions(o.clone()).expect("perturbed prediction in range"));
        o[k] = orig - step;
        let minus = dice_loss(&seg.with_predictions(o.clone()).expect("perturbed prediction in range"));
        o[k] = orig;
        worst = worst.max(relative_error(analytic[k], (plus - minus) / (2.0 * step)));
    }
    worst
}

/// Largest relative error between [`air_grad`] and central differences of [`air_loss`].
pub fn check_air(f: &FeatureMap, f_hat: &FeatureMap, step: f64) -> f64 {
    let analytic = air_grad(f, f_hat).expect("shapes checked by caller");
    let mut probe = f.clone();
    let mut worst = 0.0f64;
    for k in 0..f.values().len() {
        let orig = f.values()[k];
        probe.values_mut()[k] = orig + step;
        let plus = air_loss(&probe, f_hat).expect("same shape");
        probe.values_mut()[k] = orig - step;
        let minus = air_loss(&probe, f_hat).expect("same shape");
        probe.values_mut()[k] = orig;
        worst = worst.max(relative_error(analytic.values()[k], (plus - minus) / (2.0 * step)));
    }
    worst
}

/// Random instances up to 8x8 pixels and 4 channels.
pub fn run_gradient_suite(instances: usize, seed: u64, step: f64, tolerance: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dice_worst = 0.0f64;
    let mut air_worst = 0.0f64;
    for _ in 0..instances {
        let w = rng.gen_range(1..=8);
        let h = rng.gen_range(1..=8);
        let c = rng.gen_range(1..=4);
        // Keep o far enough from {0, 1} that o +/- step stays valid.
        let o: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.05..0.95)).collect();
        let y: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.5)).collect();
        let seg = SegOutput::new(w, h, o, y).expect("generated in range");
        dice_worst = dice_worst.max(check_dice(&seg, step));

        let n = w * h * c;
        let f = FeatureMap::new(w, h, c, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("finite");
        let g = FeatureMap::new(w, h, c, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("finite");
        air_worst = air_worst.max(check_air(&f, &g, step));
    }
    GradCheckReport {
        dice_max_rel_err: dice_worst,
        air_max_rel_err: air_worst,
        pass: dice_worst < tolerance && air_worst < tolerance,
    }
}
