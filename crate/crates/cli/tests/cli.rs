use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nrsfm::data::{load_history, load_scene};
use nrsfm::geometry::{normalized_3d_error, project};

fn nrsfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nrsfm"))
        .args(args)
        .output()
        .expect("running nrsfm")
}

fn ok(args: &[&str]) -> String {
    let out = nrsfm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = nrsfm(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        Work {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn generate(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec!["generate", "--out", s(&out), "--points", "12", "--frames", "60"];
        args.extend_from_slice(&["--widths", "8,4", "--sparsity", "2,1", "--seed", "3"]);
        args.extend_from_slice(extra);
        ok(&args);
        out
    }

    fn train(&self, scene: &Path, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec!["train", "--scene", s(scene), "--out", s(&out), "--quiet"];
        args.extend_from_slice(&["--k-first", "8", "--k-last", "4", "--batch-size", "8"]);
        args.extend_from_slice(&["--eval-interval", "20"]);
        if !extra.contains(&"--steps") {
            args.extend_from_slice(&["--steps", "60"]);
        }
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn generate_writes_scene_and_truth_parameters() {
    let w = Work::new();
    let out = w.path("scene.csv");
    ok(&["generate", "--out", s(&out), "--frames", "25", "--seed", "1"]);
    let scene = load_scene(&out).unwrap();
    assert_eq!((scene.points, scene.len()), (31, 25));
    assert!(w.path("scene.csv.truth.ckpt").exists());
    let again = w.path("again.csv");
    ok(&["generate", "--out", s(&again), "--frames", "25", "--seed", "1"]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn generate_applies_noise_and_missing_points() {
    let w = Work::new();
    let noisy = w.generate("noisy.csv", &["--noise", "0.2"]);
    let scene = load_scene(&noisy).unwrap();
    for (f, t) in scene.frames.iter().zip(scene.truth.as_ref().unwrap()) {
        let clean = project(&t.shape, &t.camera, scene.mode).unwrap();
        let ratio = (&f.measurement.0 - &clean.0).norm() / clean.0.norm();
        assert!((ratio - 0.2).abs() <= 1e-12);
    }
    let holes = w.generate("holes.csv", &["--max-missing", "7"]);
    let scene = load_scene(&holes).unwrap();
    for f in &scene.frames {
        assert!((1..=7).contains(&(12 - f.mask.visible_count())));
    }
}

#[test]
fn train_is_reproducible_and_logs_every_interval() {
    let w = Work::new();
    let scene = w.generate("scene.csv", &[]);
    let a = w.train(&scene, "a.ckpt", &[]);
    let b = w.train(&scene, "b.ckpt", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ha = fs::read_to_string(w.path("a.ckpt.history.csv")).unwrap();
    let hb = fs::read_to_string(w.path("b.ckpt.history.csv")).unwrap();
    assert_eq!(ha, hb);
    let history = load_history(w.path("a.ckpt.history.csv")).unwrap();
    let steps: Vec<u64> = history.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 20, 40, 60]);
}

#[test]
fn flags_override_the_config_file_and_both_are_echoed() {
    let w = Work::new();
    let scene = w.generate("scene.csv", &[]);
    let cfg = w.path("run.cfg");
    fs::write(&cfg, "# small run\nbatch_size = 4\nseed=11\ntotal_steps=999\n").unwrap();
    let out = w.train(&scene, "m.ckpt", &["--config", s(&cfg)]);
    let text = fs::read_to_string(w.path("m.ckpt.history.csv")).unwrap();
    assert!(text.contains("# file.batch_size=4"));
    assert!(text.contains("# file.total_steps=999"));
    assert!(text.contains("# flag.total_steps=60"));
    assert!(text.contains("# flag.batch_size=8"));
    assert!(text.contains("# seed=11\n"));
    assert!(text.contains("# total_steps=60\n"));
    assert!(text.contains("# batch_size=8\n"));
    assert!(out.exists());

    fs::write(&cfg, "no_such_key=1\n").unwrap();
    let err = fail(&[
        "train", "--scene", s(&scene), "--out", s(&w.path("x.ckpt")), "--config", s(&cfg),
    ]);
    assert!(err.contains("no_such_key"), "{err}");
    assert!(!w.path("x.ckpt").exists());
}

#[test]
fn resume_continues_to_the_same_model() {
    let w = Work::new();
    let scene = w.generate("scene.csv", &[]);
    let full = w.train(&scene, "full.ckpt", &[]);
    let half = w.train(&scene, "half.ckpt", &["--steps", "30"]);
    let resumed = w.train(&scene, "resumed.ckpt", &["--resume", s(&half)]);
    let a = nrsfm::data::load_params(&full).unwrap();
    let b = nrsfm::data::load_params(&resumed).unwrap();
    assert_eq!(a.state.params, b.state.params);

    let err = fail(&[
        "train", "--scene", s(&scene), "--out", s(&w.path("bad.ckpt")), "--resume", s(&half),
        "--k-first", "9", "--k-last", "4",
    ]);
    assert!(err.contains("architecture"), "{err}");
}

#[test]
fn reconstruct_and_evaluate_agree_with_training_history() {
    let w = Work::new();
    let scene = w.generate("scene.csv", &[]);
    let ck = w.train(&scene, "m.ckpt", &[]);
    let est = w.path("est.csv");
    ok(&["reconstruct", "--scene", s(&scene), "--checkpoint", s(&ck), "--out", s(&est)]);
    let est2 = w.path("est2.csv");
    ok(&["reconstruct", "--scene", s(&scene), "--checkpoint", s(&ck), "--out", s(&est2)]);
    assert_eq!(fs::read(&est).unwrap(), fs::read(&est2).unwrap());
    let loaded = load_scene(&est).unwrap();
    assert_eq!(loaded.len(), 60);

    let report = ok(&[
        "evaluate", "--estimates", s(&est), "--truth", s(&scene), "--precision", "12",
        "--coherence", s(&ck),
    ]);
    let value = |key: &str| -> f64 {
        report
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key},")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(report.starts_with("metric,value\nframes,60\n"));
    let history = load_history(w.path("m.ckpt.history.csv")).unwrap();
    let last = history.last().unwrap();
    assert!((value("normalized_mean_3d_error") - last.error_3d.unwrap()).abs() <= 1e-9);
    assert!((value("coherence") - last.coherence).abs() <= 1e-9);

    let truth = load_scene(&scene).unwrap().truth_shapes().unwrap();
    let lib = normalized_3d_error(&loaded.truth_shapes().unwrap(), &truth, false).unwrap();
    assert!((value("normalized_mean_3d_error") - lib).abs() <= 1e-9);
}

#[test]
fn evaluating_truth_against_itself_gives_zero() {
    let w = Work::new();
    let scene = w.generate("scene.csv", &[]);
    let curve = w.path("curve.csv");
    let report = ok(&[
        "evaluate", "--estimates", s(&scene), "--truth", s(&scene), "--cumulative", s(&curve),
        "--bins", "10",
    ]);
    assert!(report.contains("normalized_mean_3d_error,0.000000\n"), "{report}");
    let text = fs::read_to_string(&curve).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("threshold,fraction"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 11);
    assert!(rows.windows(2).all(|p| p[0].0 < p[1].0 && p[0].1 <= p[1].1));
    assert_eq!(rows.last().unwrap().1, 1.0);
}

#[test]
fn errors_exit_nonzero_without_partial_outputs() {
    let w = Work::new();
    let scene = w.generate("scene.csv", &[]);
    let other = w.path("other.csv");
    ok(&["generate", "--out", s(&other), "--frames", "5", "--points", "12"]);

    let curve = w.path("curve.csv");
    let err = fail(&[
        "evaluate", "--estimates", s(&scene), "--truth", s(&other), "--cumulative", s(&curve),
    ]);
    assert!(err.starts_with("error:"), "{err}");
    assert!(!curve.exists());

    let err = fail(&[
        "train", "--scene", s(&scene), "--out", s(&w.path("t.ckpt")), "--network-mode",
        "translation",
    ]);
    assert!(err.contains("weak_perspective"), "{err}");
    assert!(!w.path("t.ckpt").exists());
    assert!(!w.path("t.ckpt.history.csv").exists());

    let missing = w.path("nope.csv");
    fail(&["reconstruct", "--scene", s(&missing), "--checkpoint", s(&missing), "--out", s(&w.path("r.csv"))]);
    assert!(!w.path("r.csv").exists());

    let big = w.path("big.csv");
    ok(&["generate", "--out", s(&big), "--frames", "5", "--points", "13", "--widths", "8,4", "--sparsity", "2,1"]);
    let ck = w.train(&scene, "m.ckpt", &["--steps", "5"]);
    let err = fail(&["reconstruct", "--scene", s(&big), "--checkpoint", s(&ck), "--out", s(&w.path("r.csv"))]);
    assert!(err.contains("points"), "{err}");
    assert!(!w.path("r.csv").exists());

    fail(&["generate", "--out", s(&w.path("g.csv")), "--sparsity", "40,2"]);
    assert!(!w.path("g.csv").exists());
    assert!(!w.path("g.csv.truth.ckpt").exists());
}

#[test]
fn translation_mode_trains_on_weak_perspective_scenes() {
    let w = Work::new();
    let scene = w.path("weak.csv");
    ok(&["generate", "--out", s(&scene), "--frames", "60", "--mode", "weak_perspective", "--seed", "2"]);
    let ck = w.path("m.ckpt");
    ok(&[
        "train", "--scene", s(&scene), "--out", s(&ck), "--quiet", "--network-mode", "translation",
        "--steps", "40", "--batch-size", "8", "--eval-interval", "20",
    ]);
    let est = w.path("est.csv");
    ok(&["reconstruct", "--scene", s(&scene), "--checkpoint", s(&ck), "--out", s(&est)]);
    let report = ok(&["evaluate", "--estimates", s(&est), "--truth", s(&scene)]);
    assert!(report.contains("normalized_mean_3d_error,"));
    let loaded = load_scene(&est).unwrap();
    let truth = loaded.truth.as_ref().unwrap();
    assert!(truth.iter().all(|t| t.camera.orthonormality_error() <= 1e-8));
}
