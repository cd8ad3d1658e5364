//! Acceptance criteria. Each test prints one `[PASS]`/`[FAIL]` line; run with
//! `cargo test -p crowdseg-core --test acceptance -- --nocapture --test-threads=1`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdseg::collectiveness::{
    filter_outliers, kappa, particle_collectiveness, z_closed_form, z_series, SparseMatrix,
};
use crowdseg::eval::{iou, miou};
use crowdseg::gradcheck::run_gradient_suite;
use crowdseg::losses::{dice_loss, SegOutput};
use crowdseg::pipeline::{pseudolabel_tracks, resample_tracks, run_pipeline, PipelineConfig, PipelineInputs};
use crowdseg::pseudolabel::{circular_region_merge, rasterize_disc, select_keyframes};
use crowdseg::synth::{generate_scene, SynthConfig, TexturePattern};
use crowdseg::tracker::{detect_features, track_features, Point};
use crowdseg::{io, Mask};

fn report(name: &str, pass: bool, detail: String) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

/// Random sparse W with n <= 50, at most K entries per row in [0, 1], and z with zK <= 0.5.
fn random_graph(rng: &mut ChaCha8Rng) -> (SparseMatrix, usize, f64) {
    let n = rng.gen_range(2..=50);
    let k = rng.gen_range(1..=(n - 1).min(20));
    let rows = (0..n)
        .map(|i| {
            let cnt = rng.gen_range(0..=k);
            let mut cols: Vec<usize> = (0..n).filter(|j| *j != i).collect();
            for s in 0..cnt {
                let pick = rng.gen_range(s..cols.len());
                cols.swap(s, pick);
            }
            cols[..cnt].iter().map(|j| (*j, rng.gen_range(0.0..=1.0))).collect()
        })
        .collect();
    let w = SparseMatrix::from_rows(n, rows).unwrap();
    let z = rng.gen_range(0.01..=0.5) / k as f64;
    (w, k, z)
}

#[test]
fn closed_form_matches_series() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (w, _, z) = random_graph(&mut rng);
        let closed = z_closed_form(&w, z).unwrap();
        let series = z_series(&w, z, 64).unwrap();
        worst = worst.max(closed.max_abs_diff(&series));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "closed-form/series equivalence",
        worst <= 1e-10 && secs < 5.0,
        format!("max |diff| = {worst:.3e} (<= 1e-10), {secs:.2}s (< 5s)"),
    );
}

#[test]
fn kappa_bounds_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = 0usize;
    let mut min_entry = f64::INFINITY;
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..100 {
        let (w, k, z) = random_graph(&mut rng);
        let kap = kappa(z, k).unwrap();
        for v in z_closed_form(&w, z).unwrap().as_slice() {
            min_entry = min_entry.min(*v);
            worst_excess = worst_excess.max(v - kap);
            if *v < 0.0 || *v > kap + 1e-12 {
                violations += 1;
            }
        }
    }
    report(
        "kappa bound",
        violations == 0,
        format!("{violations} violations, min entry {min_entry:.3e}, max(Z - kappa) {worst_excess:.3e}"),
    );
}

#[test]
fn worked_pair_example() {
    let w = SparseMatrix::from_rows(2, vec![vec![(1, 1.0)], vec![(0, 1.0)]]).unwrap();
    let z = z_closed_form(&w, 0.25).unwrap();
    let expected = [1.0 / 15.0, 4.0 / 15.0, 4.0 / 15.0, 1.0 / 15.0];
    let z_err = z
        .as_slice()
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let phi = particle_collectiveness(&z);
    let phi_err = phi.iter().map(|p| (p - 1.0 / 3.0).abs()).fold(0.0, f64::max);
    report(
        "worked 2-particle example",
        z_err <= 1e-12 && phi_err <= 1e-12,
        format!("Z err {z_err:.1e}, phi err {phi_err:.1e}"),
    );
}

#[test]
fn coherent_clique_limit() {
    let mut worst = 0.0f64;
    let mut at_defaults = f64::NAN;
    for (k, z) in [(20usize, 1.0 / 40.0), (5, 0.1), (1, 0.25), (10, 0.07)] {
        let n = k + 1;
        let rows = (0..n)
            .map(|i| (0..n).filter(|j| *j != i).map(|j| (j, 1.0)).collect())
            .collect();
        let w = SparseMatrix::from_rows(n, rows).unwrap();
        let phi = particle_collectiveness(&z_closed_form(&w, z).unwrap());
        let target = z * k as f64 / (1.0 - z * k as f64);
        worst = worst.max(phi.iter().map(|p| (p - target).abs()).fold(0.0, f64::max));
        if k == 20 {
            at_defaults = phi[0];
        }
    }
    report(
        "coherent clique limit",
        worst <= 1e-9 && (at_defaults - 1.0).abs() <= 1e-9,
        format!("max |phi - zK/(1-zK)| = {worst:.1e}, phi at K=20 z=1/40 = {at_defaults:.12}"),
    );
}

#[test]
fn defaults_resolution() {
    let cfg = PipelineConfig::default();
    let z = cfg.decay();
    let r = filter_outliers(&[], z, cfg.k, cfg.threshold_factor).unwrap();
    let pass = cfg.k == 20 && z == 0.025 && (r.kappa - 0.05).abs() < 1e-15 && (r.threshold - 0.03).abs() < 1e-15;
    report(
        "defaults resolution",
        pass,
        format!("K={} z={} kappa={} threshold={}", cfg.k, z, r.kappa, r.threshold),
    );
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let r = run_gradient_suite(100, 7, 1e-4, 1e-5);
    let secs = start.elapsed().as_secs_f64();
    report(
        "gradient suite",
        r.pass && secs < 5.0,
        format!(
            "dice {:.2e}, air {:.2e} (< 1e-5), {secs:.2}s",
            r.dice_max_rel_err, r.air_max_rel_err
        ),
    );
}

#[test]
fn dice_edge_cases() {
    let y = vec![true, false, false, true, true, false];
    let o: Vec<f64> = y.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
    let perfect = dice_loss(&SegOutput::new(3, 2, o, y).unwrap());
    let single = dice_loss(&SegOutput::new(1, 1, vec![0.5], vec![true]).unwrap());
    report(
        "dice edge cases",
        perfect == 0.0 && (single - 0.2).abs() <= 1e-12,
        format!("o=y -> {perfect}, o=0.5,y=1 -> {single}"),
    );
}

#[test]
fn crm_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0usize;
    for _ in 0..200 {
        let n = rng.gen_range(0..=10);
        let radius = rng.gen_range(0.5..12.0);
        let pts: Vec<Point> = (0..n)
            .map(|_| Point::new(rng.gen_range(-10.0..74.0), rng.gen_range(-10.0..74.0)))
            .collect();
        let mask = circular_region_merge(&pts, radius, 64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let expect = pts
                    .iter()
                    .any(|p| (x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2) <= radius * radius);
                mismatches += usize::from(expect != mask.get(x, y));
            }
        }
    }
    let disc = rasterize_disc(Point::new(10.0, 10.0), 2.0, 64, 64).count();
    report(
        "CRM oracle",
        mismatches == 0 && disc == 13,
        format!("{mismatches} mismatched pixels over 200 scenes, radius-2 disc = {disc} px"),
    );
}

#[test]
fn tracker_translation_oracle() {
    let tex = TexturePattern::new(128, 128, 8, 5);
    let prev = tex.frame(0, 0, 0).unwrap();
    let next = tex.frame(2, 0, 1).unwrap();
    let pts = detect_features(&prev, 200, 0.01, 5.0).unwrap();
    let out = track_features(&prev, &next, &pts, 3, 15, 30, 0.01).unwrap();
    let tracked: Vec<_> = pts.iter().zip(&out).filter(|(_, t)| t.is_tracked()).collect();
    let good = tracked
        .iter()
        .filter(|(p, t)| (t.position.x - p.x - 2.0).abs() <= 0.1 && (t.position.y - p.y).abs() <= 0.1)
        .count();
    let frac = good as f64 / tracked.len().max(1) as f64;
    report(
        "tracker translation oracle",
        frac >= 0.95 && !tracked.is_empty(),
        format!(
            "{good}/{} tracked points within 0.1 px of (2,0) = {:.3}",
            tracked.len(),
            frac
        ),
    );
}

struct SceneOutcome {
    recall: f64,
    rejection: f64,
    iou: f64,
}

fn run_synthetic_scene(seed: u64) -> SceneOutcome {
    let scene = generate_scene(&SynthConfig {
        n_groups: 1,
        particles_per_group: 50,
        n_noise: 25,
        steps: 40,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = PipelineConfig::default();
    let tracks = resample_tracks(&scene.tracks, cfg.frame_stride);
    let keyframes = select_keyframes(40, cfg.frame_stride);
    let labels = pseudolabel_tracks(&tracks, &keyframes, scene.width, scene.height, &cfg).unwrap();

    let (mut group_kept, mut group_total, mut noise_rejected, mut noise_total) = (0, 0, 0, 0);
    let mut ious = Vec::new();
    for kf in &labels {
        let result = kf.result.as_ref().expect("synthetic graph populated");
        for (id, kept) in kf.node_ids.iter().zip(&result.kept) {
            if scene.label_of(*id).unwrap().is_group() {
                group_total += 1;
                group_kept += usize::from(*kept);
            } else {
                noise_total += 1;
                noise_rejected += usize::from(!*kept);
            }
        }
        ious.push(iou(&kf.mask, scene.gt_mask(kf.t).unwrap()).unwrap());
    }
    SceneOutcome {
        recall: group_kept as f64 / group_total as f64,
        rejection: noise_rejected as f64 / noise_total as f64,
        iou: ious.iter().sum::<f64>() / ious.len() as f64,
    }
}

#[test]
fn end_to_end_synthetic() {
    let start = Instant::now();
    let outcomes: Vec<SceneOutcome> = (0..20).map(run_synthetic_scene).collect();
    let mean = |f: fn(&SceneOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / outcomes.len() as f64;
    let (recall, rejection, iou) = (mean(|o| o.recall), mean(|o| o.rejection), mean(|o| o.iou));
    let secs = start.elapsed().as_secs_f64();
    println!("  group recall   {recall:.3} (>= 0.95): {}", recall >= 0.95);
    println!("  noise rejection {rejection:.3} (>= 0.90): {}", rejection >= 0.90);
    println!("  mask IoU        {iou:.3} (>= 0.70): {}", iou >= 0.7);
    println!("  runtime         {secs:.2}s (< 60s)");
    report(
        "end-to-end synthetic scene",
        recall >= 0.95 && rejection >= 0.90 && iou >= 0.7 && secs < 60.0,
        format!("recall {recall:.3}, rejection {rejection:.3}, IoU {iou:.3} over 20 seeds"),
    );
}

#[test]
fn miou_arithmetic() {
    let scenes = [0.4887, 0.7078, 0.6617, 0.6553, 0.6655, 0.6892];
    let scores: Vec<(String, f64)> = scenes
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("scene{}", i + 1), *v))
        .collect();
    let r = miou(&scores).unwrap();
    report(
        "mIoU arithmetic",
        (r.miou - 0.6447).abs() <= 5e-5,
        format!("mIoU = {:.6} (0.6447 +/- 5e-5)", r.miou),
    );
}

#[test]
fn determinism_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(&SynthConfig {
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let tracks_path = dir.path().join("tracks.jsonl");
    io::save_tracks(&scene.tracks, &tracks_path).unwrap();

    let run = |threads: usize| -> Vec<(String, Vec<u8>)> {
        let out = dir.path().join(format!("out{threads}"));
        let inputs = PipelineInputs {
            tracks_file: Some(tracks_path.clone()),
            frame_size: Some((scene.width, scene.height)),
            out_dir: out.clone(),
            threads: Some(threads),
            ..Default::default()
        };
        run_pipeline(&PipelineConfig::default(), &inputs).unwrap();
        let mut files: Vec<_> = std::fs::read_dir(out.join("masks"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect()
    };
    let one = run(1);
    let four = run(4);
    let masks_nonempty = one.iter().all(|(name, _)| {
        io::load_mask(&dir.path().join("out1/masks").join(name))
            .map(|m: Mask| m.count() > 0)
            .unwrap_or(false)
    });
    report(
        "determinism across thread counts",
        !one.is_empty() && one == four && masks_nonempty,
        format!(
            "{} mask files, identical for MPAS_THREADS=1 and 4: {}",
            one.len(),
            one == four
        ),
    );
}
