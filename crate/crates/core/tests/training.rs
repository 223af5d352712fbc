use nalgebra::{DMatrix, DVector};
use nrsfm::data::{
    checkpoint_from_bytes, checkpoint_to_bytes, synth_planted, Checkpoint, PlantedSpec, Scene,
};
use nrsfm::geometry::{normalized_3d_error, random_camera, Measurement2D, ProjectionMode, VisibilityMask};
use nrsfm::network::{forward, ModelParams, NetworkMode};
use nrsfm::sparse::Activation;
use nrsfm::training::{
    adam_step, gradients, lr_schedule, reconstruct, train, train_with, OptimizerState,
    TrainConfig, TrainState, ADAM_EPSILON,
};

fn small_spec(frames: usize, seed: u64) -> PlantedSpec {
    PlantedSpec {
        points: 10,
        frames,
        widths: vec![8, 4],
        sparsity: vec![2, 1],
        seed,
        ..PlantedSpec::default()
    }
}

fn small_config(steps: u64) -> TrainConfig {
    TrainConfig {
        k_first: 8,
        k_last: 4,
        batch_size: 16,
        total_steps: steps,
        eval_interval: 50,
        base_learning_rate: 3e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn tiny_params() -> ModelParams {
    let config = TrainConfig {
        k_first: 4,
        k_last: 2,
        ..TrainConfig::default()
    };
    nrsfm::training::init_params(&config, 3, 1).unwrap()
}

#[test]
fn first_adam_step_moves_each_entry_by_the_learning_rate() {
    let mut p = tiny_params();
    for t in p.encoder_thresholds.iter_mut() {
        t.fill(0.5);
    }
    let before = p.clone();
    let mut grads = p.zeros_like();
    let mut k = 0.0f64;
    for (_, g) in grads.tensors_mut() {
        for v in g.iter_mut() {
            k += 1.0;
            *v = if (k as i64) % 3 == 0 { 0.0 } else { (k * 0.37).sin() * 2.0 };
        }
    }
    let mut state = OptimizerState::new(&p);
    let lr = 1e-3;
    adam_step(&mut p, &grads, &mut state, lr);
    assert_eq!(state.step, 1);
    let after = p.tensors();
    for (((_, _, a), (_, _, b)), (_, _, g)) in after.iter().zip(before.tensors()).zip(grads.tensors()) {
        for i in 0..a.len() {
            // Bias-corrected first step: m/c1 = g, v/c2 = g^2.
            let want = b[i] - lr * g[i] / (g[i].abs() + ADAM_EPSILON);
            let want = if a[i] == 0.0 && want < 0.0 { 0.0 } else { want };
            assert!((a[i] - want).abs() <= 1e-15, "{} vs {want}", a[i]);
        }
    }
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut p = tiny_params();
    let before = p.clone();
    let mut state = OptimizerState::new(&p);
    let zero = p.zeros_like();
    adam_step(&mut p, &zero, &mut state, 0.1);
    assert_eq!(p, before);
}

#[test]
fn thresholds_are_clamped_at_zero() {
    let mut p = tiny_params();
    let mut grads = p.zeros_like();
    for t in grads.encoder_thresholds.iter_mut().chain(grads.decoder_thresholds.iter_mut()) {
        t.fill(1.0);
    }
    grads.beta.fill(1.0);
    let mut state = OptimizerState::new(&p);
    let beta0 = p.beta.clone();
    for _ in 0..5 {
        adam_step(&mut p, &grads, &mut state, 0.1);
    }
    for t in p.encoder_thresholds.iter().chain(&p.decoder_thresholds) {
        assert!(t.iter().all(|&v| v == 0.0));
    }
    // Non-threshold tensors are free to go negative.
    assert!(p.beta.iter().zip(beta0.iter()).all(|(a, b)| a < b));
    assert!(p.beta.iter().any(|&v| v < 0.0));
}

#[test]
fn learning_rate_schedule_examples() {
    let c = TrainConfig::default();
    assert_eq!(lr_schedule(0, &c), 1e-3);
    assert!((lr_schedule(1000, &c) - 9.5e-4).abs() <= 1e-18);
    assert!((lr_schedule(20_000, &c) - 1e-3 * 0.95f64.powi(20)).abs() <= 1e-15);
    assert!((lr_schedule(500, &c) - 1e-3 * 0.95f64.sqrt()).abs() <= 1e-15);
    let mut prev = f64::INFINITY;
    for s in (0..30_000).step_by(250) {
        let lr = lr_schedule(s, &c);
        assert!(lr < prev);
        prev = lr;
    }
}

#[test]
fn gradient_vanishes_at_an_exact_fit() {
    let mut a = DMatrix::from_fn(5, 3, |i, j| ((i * 3 + j) as f64 * 0.7).cos());
    a.row_mut(4).fill(0.0);
    let a = a.qr().q();
    let m0 = random_camera(3, ProjectionMode::Orthogonal).rotation;
    let m0d = DMatrix::from_iterator(3, 2, m0.iter().copied());
    let mut p = ModelParams::new(NetworkMode::Standard, Activation::Soft, a.clone(), vec![]).unwrap();
    p.beta = &m0d / 2.0;
    p.gamma = DVector::from_element(1, 1.0);
    let w = Measurement2D(a * m0d);
    let mask = VisibilityMask::all_visible(5);
    let (l, g) = gradients(&p, &[(&w, &mask)]).unwrap();
    assert!(l <= 1e-6 * (1.0 + 1e-9));
    for (name, _, data) in g.tensors() {
        let worst = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst <= 1e-6, "{name}: {worst:e}");
    }
}

#[test]
fn training_is_deterministic() {
    let scene = synth_planted(&small_spec(120, 1)).unwrap().scene;
    let config = small_config(150);
    let (p1, h1) = train(&scene, &config).unwrap();
    let (p2, h2) = train(&scene, &config).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    let steps: Vec<u64> = h1.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 50, 100, 150]);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let scene = synth_planted(&small_spec(70, 2)).unwrap().scene;
    let full_config = small_config(200);
    let full = train_with(&scene, &full_config, None, &mut |_| {}).unwrap();

    // Stop at a step that is neither an epoch nor an eval boundary.
    let half_config = TrainConfig {
        total_steps: 73,
        ..full_config.clone()
    };
    let half = train_with(&scene, &half_config, None, &mut |_| {}).unwrap();
    let bytes = checkpoint_to_bytes(&Checkpoint {
        config: half_config,
        state: half,
    });
    let restored = checkpoint_from_bytes(&bytes).unwrap().state;
    let resumed = train_with(&scene, &full_config, Some(restored), &mut |_| {}).unwrap();

    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.optimizer, full.optimizer);
    assert_eq!((resumed.skipped, resumed.visits), (full.skipped, full.visits));
    let strip = |s: &TrainState| -> Vec<u64> { s.history.records.iter().map(|r| r.step).collect() };
    // The interrupted run also logged its final step.
    assert!(strip(&resumed).contains(&73));
    for r in &full.history.records {
        let m = resumed.history.records.iter().find(|q| q.step == r.step).unwrap();
        assert_eq!(m, r);
    }
}

#[test]
fn training_lowers_the_loss_and_the_error() {
    let scene = synth_planted(&small_spec(200, 3)).unwrap().scene;
    let (_, h) = train(&scene, &small_config(400)).unwrap();
    let first = &h.records[0];
    let last = h.last().unwrap();
    assert!(last.mean_loss < 0.75 * first.mean_loss, "{} -> {}", first.mean_loss, last.mean_loss);
    assert!(last.error_3d.unwrap() < first.error_3d.unwrap());
    assert!(last.skipped as f64 <= 1e-3 * last.visits as f64);
    assert_eq!(last.visits, 400 * 16);
}

#[test]
fn reconstruction_reproduces_the_logged_error() {
    let scene = synth_planted(&small_spec(150, 4)).unwrap().scene;
    let (params, h) = train(&scene, &small_config(200)).unwrap();
    let a = reconstruct(&scene, &params).unwrap();
    let b = reconstruct(&scene, &params).unwrap();
    assert_eq!(a, b);
    let est: Vec<_> = a.into_iter().map(|(s, _)| s).collect();
    for s in &est {
        for c in 0..3 {
            assert!(s.0.column(c).sum().abs() <= 1e-9);
        }
    }
    let err = normalized_3d_error(&est, &scene.truth_shapes().unwrap(), false).unwrap();
    let logged = h.last().unwrap().error_3d.unwrap();
    assert!((err - logged).abs() <= 1e-9, "{err} vs {logged}");
}

fn split(scene: &Scene, at: usize) -> (Scene, Scene) {
    let part = |r: std::ops::Range<usize>| Scene {
        frames: scene.frames[r.clone()].to_vec(),
        truth: scene.truth.as_ref().map(|t| t[r].to_vec()),
        ..scene.clone()
    };
    (part(0..at), part(at..scene.frames.len()))
}

#[test]
fn held_out_frames_generalize() {
    let scene = synth_planted(&small_spec(300, 5)).unwrap().scene;
    let (train_scene, held) = split(&scene, 200);
    let (params, _) = train(&train_scene, &small_config(400)).unwrap();
    let err = |s: &Scene| {
        let est: Vec<_> = reconstruct(s, &params).unwrap().into_iter().map(|(e, _)| e).collect();
        normalized_3d_error(&est, &s.truth_shapes().unwrap(), false).unwrap()
    };
    let (e_train, e_held) = (err(&train_scene), err(&held));
    assert!(e_held <= 2.0 * e_train, "held-out {e_held} vs train {e_train}");
}

#[test]
fn mismatched_point_count_is_rejected() {
    let scene = synth_planted(&small_spec(20, 6)).unwrap().scene;
    let config = small_config(10);
    let other = nrsfm::training::init_params(&config, 11, 0).unwrap();
    assert!(reconstruct(&scene, &other).is_err());
    let resume = TrainState::new(other);
    assert!(train_with(&scene, &config, Some(resume), &mut |_| {}).is_err());
}

#[test]
fn forward_on_trained_model_keeps_orthonormal_cameras() {
    let scene = synth_planted(&small_spec(100, 7)).unwrap().scene;
    let (params, _) = train(&scene, &small_config(100)).unwrap();
    let frames = nrsfm::training::prepare_frames(&scene, params.mode).unwrap();
    for f in &frames {
        if let Ok(out) = forward(&f.measurement, &f.mask, &params) {
            assert!(out.camera.orthonormality_error() <= 1e-8);
        }
    }
}
