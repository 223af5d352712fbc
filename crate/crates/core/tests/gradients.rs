use nalgebra::DMatrix;
use nrsfm::geometry::{Measurement2D, VisibilityMask};
use nrsfm::network::{batch_loss, ModelParams, NetworkMode};
use nrsfm::sparse::Activation;
use nrsfm::training::{gradients, init_params, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

type Instance = (ModelParams, Vec<(Measurement2D, VisibilityMask)>);

/// Random small instance (P=4, N=2, K=(6,3), batch 2) whose forward pass is
/// well defined and not dead; draws with a rank-deficient camera or an
/// all-zero decoded shape are redrawn.
fn random_instance(seed: u64, mode: NetworkMode, activation: Activation) -> Instance {
    (0..100)
        .map(|attempt| draw(seed * 1000 + attempt, mode, activation))
        .find(|(p, b)| {
            b.iter().all(|(w, m)| {
                nrsfm::network::forward(w, m, p).is_ok_and(|out| out.shape.0.norm() > 0.0)
            })
        })
        .expect("a well-posed instance within 100 draws")
}

fn draw(seed: u64, mode: NetworkMode, activation: Activation) -> Instance {
    let config = TrainConfig {
        layers: 2,
        k_first: 6,
        k_last: 3,
        mode,
        activation,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(&config, 4, seed).unwrap();
    for (name, data) in params.tensors_mut() {
        let thresholds = name.contains("threshold");
        for v in data.iter_mut() {
            *v = if thresholds {
                rng.random_range(0.0..0.05)
            } else {
                *v + rng.random_range(-0.3..0.3)
            };
        }
    }
    let batch = (0..2)
        .map(|f| {
            let w = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
            let mut mask = VisibilityMask::all_visible(4);
            if f == 1 {
                mask.0[rng.random_range(0..4)] = false;
            }
            (Measurement2D(w), mask)
        })
        .collect();
    (params, batch)
}

/// Central-difference gradient check; returns (max relative error, entries checked).
fn check(params: &ModelParams, batch: &[(Measurement2D, VisibilityMask)]) -> (f64, usize) {
    let refs: Vec<_> = batch.iter().map(|(w, m)| (w, m)).collect();
    let (_, grad) = gradients(params, &refs).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grad
        .tensors()
        .into_iter()
        .map(|(n, _, d)| (n, d.to_vec()))
        .collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (t, (name, g)) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            if g[i].abs() <= 1e-8 {
                continue;
            }
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[t].1[i] += delta;
                batch_loss(&refs, &p).unwrap()
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            let rel = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-8);
            if rel > 1e-4 {
                eprintln!("{name}[{i}]: analytic {} vs fd {fd} (rel {rel:e})", g[i]);
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn gradients_match_finite_differences_standard_relu() {
    for seed in 0..5 {
        let (p, b) = random_instance(seed, NetworkMode::Standard, Activation::Relu);
        let (worst, n) = check(&p, &b);
        assert!(n >= 10, "seed {seed}: only {n} active gradient entries");
        assert!(worst <= 1e-4, "seed {seed}: {worst:e}");
    }
}

#[test]
fn gradients_match_finite_differences_soft() {
    for seed in 10..15 {
        let (p, b) = random_instance(seed, NetworkMode::Standard, Activation::Soft);
        let (worst, _) = check(&p, &b);
        assert!(worst <= 1e-4, "seed {seed}: {worst:e}");
    }
}

#[test]
fn gradients_match_finite_differences_translation() {
    for seed in 20..25 {
        let (p, b) = random_instance(seed, NetworkMode::Translation, Activation::Relu);
        let (worst, _) = check(&p, &b);
        assert!(worst <= 1e-4, "seed {seed}: {worst:e}");
    }
}

#[test]
fn doubling_the_batch_doubles_the_gradient() {
    let (p, b) = random_instance(3, NetworkMode::Standard, Activation::Relu);
    let once: Vec<_> = b.iter().map(|(w, m)| (w, m)).collect();
    let twice: Vec<_> = b.iter().chain(b.iter()).map(|(w, m)| (w, m)).collect();
    let (l1, g1) = gradients(&p, &once).unwrap();
    let (l2, g2) = gradients(&p, &twice).unwrap();
    assert!((l2 - 2.0 * l1).abs() <= 1e-12 * l1.abs());
    for ((_, _, a), (_, _, b)) in g1.tensors().into_iter().zip(g2.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((y - 2.0 * x).abs() <= 1e-12 * x.abs().max(1e-12));
        }
    }
}
