use std::path::Path;
use std::process::{Command, Output};

fn crowdseg(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_crowdseg"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .into_iter()
        .map(|f| {
            (
                f.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&f).unwrap(),
            )
        })
        .collect()
}

#[test]
fn synth_pseudolabel_eval_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    ok(&crowdseg(&["synth", "--out", p(&scene), "--seed", "7"], &[]));
    assert!(scene.join("tracks.jsonl").exists());
    assert!(scene.join("gt/gt_mask_000020.png").exists());
    let labels: serde_json::Value = serde_json::from_slice(&std::fs::read(scene.join("labels.json")).unwrap()).unwrap();
    assert_eq!(labels.as_object().unwrap().len(), 75);

    let out = tmp.path().join("out");
    ok(&crowdseg(
        &[
            "pseudolabel",
            "--tracks",
            p(&scene.join("tracks.jsonl")),
            "--width",
            "320",
            "--height",
            "240",
            "--out",
            p(&out),
        ],
        &[],
    ));
    assert!(out.join("masks/mask_000020.png").exists());
    assert!(out.join("diagnostics.json").exists());

    let report = tmp.path().join("report.json");
    ok(&crowdseg(
        &[
            "eval",
            "--pred",
            p(&out.join("masks")),
            "--gt",
            p(&scene.join("gt")),
            "--out",
            p(&report),
        ],
        &[],
    ));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let miou = r["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert_eq!(r["per_scene"].as_array().unwrap().len(), 1);
}

#[test]
fn out_of_range_decay_fails_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    ok(&crowdseg(&["synth", "--out", p(&scene)], &[]));
    let out = tmp.path().join("out");
    let res = crowdseg(
        &[
            "pseudolabel",
            "--tracks",
            p(&scene.join("tracks.jsonl")),
            "--width",
            "320",
            "--height",
            "240",
            "--out",
            p(&out),
            "--z",
            "0.1",
        ],
        &[],
    );
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("decay factor out of convergence range"), "{err}");
    assert!(!out.exists());
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    ok(&crowdseg(&["synth", "--out", p(&scene)], &[]));
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"K": 20, "z": 0.5}"#).unwrap();
    let args = |extra: &'static [&'static str]| {
        let mut a = vec![
            "pseudolabel".to_string(),
            "--tracks".into(),
            p(&scene.join("tracks.jsonl")).into(),
            "--width".into(),
            "320".into(),
            "--height".into(),
            "240".into(),
            "--out".into(),
            p(&tmp.path().join("out")).into(),
            "--config".into(),
            p(&cfg).into(),
        ];
        a.extend(extra.iter().map(|s| s.to_string()));
        a
    };
    let run = |a: Vec<String>| crowdseg(&a.iter().map(String::as_str).collect::<Vec<_>>(), &[]);
    assert!(!run(args(&[])).status.success());
    ok(&run(args(&["--z", "auto"])));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    ok(&crowdseg(
        &["synth", "--out", p(&scene), "--seed", "3", "--render-frames"],
        &[],
    ));
    let mut results = Vec::new();
    for threads in ["1", "4"] {
        let out = tmp.path().join(format!("out{threads}"));
        ok(&crowdseg(
            &["run", "--frames", p(&scene.join("frames")), "--out", p(&out)],
            &[("MPAS_THREADS", threads)],
        ));
        results.push((
            dir_bytes(&out.join("masks")),
            std::fs::read(out.join("tracks.jsonl")).unwrap(),
            std::fs::read(out.join("diagnostics.json")).unwrap(),
        ));
    }
    assert!(!results[0].0.is_empty());
    assert_eq!(results[0], results[1]);
}

#[test]
fn track_writes_jsonl() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    ok(&crowdseg(&["synth", "--out", p(&scene), "--render-frames"], &[]));
    let tracks = tmp.path().join("t.jsonl");
    ok(&crowdseg(
        &["track", "--frames", p(&scene.join("frames")), "--out", p(&tracks)],
        &[],
    ));
    let text = std::fs::read_to_string(&tracks).unwrap();
    assert!(text.lines().count() > 10);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["id"].is_u64());
        for pt in v["points"].as_array().unwrap() {
            assert_eq!(pt[0].as_u64().unwrap() % 20, 0);
        }
    }
}

#[test]
fn frame_loading_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let res = crowdseg(
        &["track", "--frames", p(&empty), "--out", p(&tmp.path().join("t.jsonl"))],
        &[],
    );
    assert!(!res.status.success());

    let mixed = tmp.path().join("mixed");
    std::fs::create_dir(&mixed).unwrap();
    image::GrayImage::new(32, 32).save(mixed.join("f0.png")).unwrap();
    image::GrayImage::new(32, 24).save(mixed.join("f1.png")).unwrap();
    let res = crowdseg(
        &["track", "--frames", p(&mixed), "--out", p(&tmp.path().join("t.jsonl"))],
        &[],
    );
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("frame size mismatch"));
}

#[test]
fn losscheck_reports_json() {
    let out = crowdseg(&["losscheck", "--instances", "20"], &[]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pass"], true);
    assert!(v["dice_max_rel_err"].as_f64().unwrap() < 1e-5);
}

#[test]
fn pseudolabel_without_size_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let res = crowdseg(
        &[
            "pseudolabel",
            "--tracks",
            p(&tmp.path().join("x.jsonl")),
            "--out",
            p(tmp.path()),
        ],
        &[],
    );
    assert!(!res.status.success());
}
