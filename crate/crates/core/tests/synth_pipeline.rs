use crowdseg::collectiveness::{analyze_keyframe, velocity_correlation};
use crowdseg::eval::iou;
use crowdseg::pipeline::{pseudolabel_tracks, resample_tracks, run_pipeline, PipelineConfig, PipelineInputs};
use crowdseg::pseudolabel::{circular_region_merge, select_keyframes};
use crowdseg::synth::{generate_scene, SynthConfig};
use crowdseg::{io, Error, Point};

#[test]
fn jitter_free_group_is_perfectly_correlated() {
    let scene = generate_scene(&SynthConfig {
        n_noise: 0,
        jitter_sigma: 0.0,
        particles_per_group: 12,
        group_spread: 5.0,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    for t in 1..40 {
        let v: Vec<(f64, f64)> = scene.tracks.iter().filter_map(|tr| tr.velocity_at(t)).collect();
        for a in &v {
            for b in &v {
                assert!((velocity_correlation(*a, *b, 1e-6) - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn small_coherent_group_passes_threshold() {
    let cfg = PipelineConfig::default();
    let scene = generate_scene(&SynthConfig {
        particles_per_group: 21,
        n_noise: 0,
        drift_speed: 2.0,
        jitter_sigma: 0.05,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let tracks = resample_tracks(&scene.tracks, cfg.frame_stride);
    let (graph, result) =
        analyze_keyframe(&tracks, 20, &cfg.graph_params(), cfg.decay(), cfg.threshold_factor).unwrap();
    assert_eq!(graph.nodes.len(), 21);
    assert!(
        result.kept.iter().all(|k| *k),
        "phi {:?} threshold {}",
        result.phi,
        result.threshold
    );
}

#[test]
fn same_seed_same_scene() {
    let cfg = SynthConfig {
        seed: 42,
        render_frames: true,
        steps: 5,
        ..SynthConfig::default()
    };
    assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
    let other = generate_scene(&SynthConfig {
        seed: 43,
        ..cfg.clone()
    })
    .unwrap();
    assert_ne!(generate_scene(&cfg).unwrap().tracks, other.tracks);
}

#[test]
fn ground_truth_is_group_merge() {
    let scene = generate_scene(&SynthConfig {
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    for t in [0, 17, 39] {
        let pts: Vec<Point> = scene
            .tracks
            .iter()
            .filter(|tr| scene.label_of(tr.id).unwrap().is_group())
            .filter_map(|tr| tr.point_at(t).map(|p| Point::new(p.x, p.y)))
            .collect();
        assert_eq!(
            scene.gt_mask(t).unwrap().bits(),
            circular_region_merge(&pts, 20.0, 320, 240).bits()
        );
    }
}

#[test]
fn group_shares_drift_up_to_jitter() {
    let scene = generate_scene(&SynthConfig {
        jitter_sigma: 0.1,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let group: Vec<_> = scene
        .tracks
        .iter()
        .filter(|t| scene.label_of(t.id).unwrap().is_group())
        .collect();
    for t in 1..40 {
        let v: Vec<(f64, f64)> = group.iter().filter_map(|tr| tr.velocity_at(t)).collect();
        let n = v.len() as f64;
        let mean = (
            v.iter().map(|a| a.0).sum::<f64>() / n,
            v.iter().map(|a| a.1).sum::<f64>() / n,
        );
        assert!((mean.0.hypot(mean.1) - 2.0).abs() < 0.1);
        assert!(v.iter().all(|a| (a.0 - mean.0).hypot(a.1 - mean.1) < 1.0));
    }
}

#[test]
fn rejects_empty_and_short_scenes() {
    let none = SynthConfig {
        n_groups: 0,
        n_noise: 0,
        ..SynthConfig::default()
    };
    assert!(matches!(generate_scene(&none), Err(Error::EmptyInput(_))));
    assert!(generate_scene(&SynthConfig {
        steps: 1,
        ..SynthConfig::default()
    })
    .is_err());
}

#[test]
fn phi_is_reproducible() {
    let cfg = PipelineConfig::default();
    let run = || {
        let scene = generate_scene(&SynthConfig {
            seed: 11,
            ..SynthConfig::default()
        })
        .unwrap();
        let tracks = resample_tracks(&scene.tracks, 20);
        pseudolabel_tracks(&tracks, &[0, 20], 320, 240, &cfg)
            .unwrap()
            .into_iter()
            .map(|k| (k.mask, k.result))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

/// Group recall and noise rejection over 100 seeded scenes with jitter at 5% of the drift.
#[test]
fn label_fidelity() {
    let cfg = PipelineConfig::default();
    let (mut recall, mut rejection) = (0.0, 0.0);
    let trials = 100;
    for seed in 0..trials {
        let scene = generate_scene(&SynthConfig {
            jitter_sigma: 0.1,
            drift_speed: 2.0,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let tracks = resample_tracks(&scene.tracks, cfg.frame_stride);
        let labels = pseudolabel_tracks(&tracks, &select_keyframes(40, 20), 320, 240, &cfg).unwrap();
        let (mut gk, mut gt, mut nr, mut nt) = (0usize, 0usize, 0usize, 0usize);
        for kf in &labels {
            let r = kf.result.as_ref().unwrap();
            for (id, kept) in kf.node_ids.iter().zip(&r.kept) {
                if scene.label_of(*id).unwrap().is_group() {
                    gt += 1;
                    gk += usize::from(*kept);
                } else {
                    nt += 1;
                    nr += usize::from(!*kept);
                }
            }
        }
        recall += gk as f64 / gt as f64;
        rejection += nr as f64 / nt as f64;
    }
    recall /= trials as f64;
    rejection /= trials as f64;
    assert!(
        recall >= 0.95 && rejection >= 0.90,
        "recall {recall:.3}, rejection {rejection:.3}"
    );
}

#[test]
fn rendered_frames_through_tracker() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(&SynthConfig {
        n_noise: 0,
        seed: 2,
        render_frames: true,
        ..SynthConfig::default()
    })
    .unwrap();
    let frames_dir = dir.path().join("frames");
    io::ensure_dir(&frames_dir).unwrap();
    for f in scene.frames.as_ref().unwrap() {
        io::save_frame(f, &frames_dir.join(format!("frame_{:06}.png", f.index()))).unwrap();
    }
    let inputs = PipelineInputs {
        frames_dir: Some(frames_dir),
        out_dir: dir.path().join("out"),
        overlays: true,
        ..Default::default()
    };
    let summary = run_pipeline(&PipelineConfig::default(), &inputs).unwrap();
    assert_eq!(summary.keyframes.len(), 1);
    let kf = &summary.keyframes[0];
    assert_eq!(kf.t, 20);
    let score = iou(&kf.mask, scene.gt_mask(20).unwrap()).unwrap();
    assert!(score >= 0.5, "IoU {score:.3} with {} kept", kf.kept_points().len());
    assert!(dir.path().join("out/overlays/overlay_000020.png").exists());
    assert!(dir.path().join("out/masks/mask_000020.png").exists());
    for t in &summary.tracks {
        for p in &t.points {
            assert!(p.x >= -0.5 && p.y >= -0.5 && p.x <= 319.5 && p.y <= 239.5);
        }
    }
}

#[test]
fn diagnostics_record_per_keyframe() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(&SynthConfig {
        seed: 4,
        steps: 60,
        drift_speed: 1.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let tracks_path = dir.path().join("in.jsonl");
    io::save_tracks(&scene.tracks, &tracks_path).unwrap();
    let summary = run_pipeline(
        &PipelineConfig::default(),
        &PipelineInputs {
            tracks_file: Some(tracks_path),
            frame_size: Some((320, 240)),
            out_dir: dir.path().join("out"),
            ..Default::default()
        },
    )
    .unwrap();
    let diag: serde_json::Value = io::read_json(&summary.diagnostics_path).unwrap();
    let arr = diag.as_array().unwrap();
    assert_eq!(arr.len(), 2);
    assert_eq!(arr[0]["t"], 20);
    assert_eq!(arr[1]["t"], 40);
    assert!((arr[0]["kappa"].as_f64().unwrap() - 0.05).abs() < 1e-15);
    assert_eq!(
        arr[0]["phi"].as_array().unwrap().len(),
        arr[0]["kept"].as_array().unwrap().len()
    );
}
