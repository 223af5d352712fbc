//! Exact gradients (hand-derived backward pass, including the polar-factor
//! differential), Adam, the learning-rate schedule and the training loop.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix3x2, Vector2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::{
    mutual_coherence, normalize_bbox, BboxTransform, CameraWeak, Measurement2D, PolarFactor,
    ProjectionMode, Shape3D, VisibilityMask,
};
use crate::network::{is_threshold_tensor, trace, ModelParams, NetworkMode, Trace};
use crate::sparse::{apply_row_mask, Activation};

/// Lower clamp on `sigma_i + sigma_j` in the polar-factor differential.
pub const SIGMA_SUM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub layers: usize,
    pub k_first: usize,
    pub k_last: usize,
    pub activation: Activation,
    pub mode: NetworkMode,
    pub batch_size: usize,
    pub total_steps: u64,
    pub base_learning_rate: f64,
    pub decay_factor: f64,
    pub decay_steps: u64,
    pub seed: u64,
    pub eval_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layers: 2,
            k_first: 32,
            k_last: 8,
            activation: Activation::Relu,
            mode: NetworkMode::Standard,
            batch_size: 64,
            total_steps: 20_000,
            base_learning_rate: 1e-3,
            decay_factor: 0.95,
            decay_steps: 1000,
            seed: 0,
            eval_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 {
            return fail("layers must be at least 1");
        }
        if self.k_last == 0 || self.k_first < self.k_last {
            return fail("widths must satisfy k_first >= k_last >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        if !(self.base_learning_rate > 0.0) || !self.base_learning_rate.is_finite() {
            return fail("learning rate must be positive");
        }
        if !(self.decay_factor > 0.0) || self.decay_steps == 0 {
            return fail("decay factor must be positive and decay steps at least 1");
        }
        if self.eval_interval == 0 {
            return fail("eval interval must be at least 1");
        }
        Ok(())
    }

    /// `key=value` pairs in a fixed order (config files, checkpoints,
    /// history headers).
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("k_first", self.k_first.to_string()),
            ("k_last", self.k_last.to_string()),
            ("activation", self.activation.name().to_string()),
            ("mode", self.mode.name().to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("total_steps", self.total_steps.to_string()),
            (
                "base_learning_rate",
                format!("{:e}", self.base_learning_rate),
            ),
            ("decay_factor", format!("{:e}", self.decay_factor)),
            ("decay_steps", self.decay_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        match key {
            "layers" => self.layers = num(key, value)?,
            "k_first" => self.k_first = num(key, value)?,
            "k_last" => self.k_last = num(key, value)?,
            "activation" => self.activation = Activation::parse(value.trim())?,
            "mode" => self.mode = NetworkMode::parse(value.trim())?,
            "batch_size" => self.batch_size = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "base_learning_rate" => self.base_learning_rate = num(key, value)?,
            "decay_factor" => self.decay_factor = num(key, value)?,
            "decay_steps" => self.decay_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key `{other}`"
                )))
            }
        }
        Ok(())
    }

    /// `K_1 .. K_N`, intermediate widths linearly interpolated.
    pub fn widths(&self) -> Vec<usize> {
        let n = self.layers;
        if n == 1 {
            return vec![self.k_first];
        }
        (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                (self.k_first as f64 + (self.k_last as f64 - self.k_first as f64) * t).round()
                    as usize
            })
            .collect()
    }
}

/// `base * decay^(step / decay_steps)` with a continuous exponent.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    config.base_learning_rate
        * config
            .decay_factor
            .powf(step as f64 / config.decay_steps as f64)
}

/// Gaussian dictionaries with unit-norm atoms, zero thresholds, averaging
/// defaults for the camera/code combiners.
pub fn init_params(config: &TrainConfig, points: usize, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    if points == 0 {
        return Err(Error::Config("model needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = config.widths();
    let mut first = DMatrix::from_fn(points, 3 * widths[0], |_, _| {
        rand::Rng::sample(&mut rng, StandardNormal)
    });
    for k in 0..widths[0] {
        let mut atom = first.columns_mut(3 * k, 3);
        let n = atom.norm();
        atom /= n;
    }
    let dictionaries = widths
        .windows(2)
        .map(|w| {
            let mut d = DMatrix::from_fn(w[0], w[1], |_, _| {
                rand::Rng::sample(&mut rng, StandardNormal)
            });
            for mut c in d.column_iter_mut() {
                let n = c.norm();
                c /= n;
            }
            d
        })
        .collect();
    ModelParams::new(config.mode, config.activation, first, dictionaries)
}

/// Adjoint of the polar factor `Q = U V^T` of a full-rank 3x2 matrix:
/// maps `dL/dQ` to `dL/dM`.
pub fn polar_factor_backward(pf: &PolarFactor, grad_q: &Matrix3x2<f64>) -> Matrix3x2<f64> {
    let q = &pf.ortho;
    let v = &pf.v;
    let s = &pf.singular_values;
    let h_inv = v * Matrix2::from_diagonal(&Vector2::new(1.0 / s[0], 1.0 / s[1])) * v.transpose();
    let orth = Matrix3::identity() - q * q.transpose();
    let along = orth * grad_q * h_inv;
    let a = v.transpose() * q.transpose() * grad_q * v;
    let f = Matrix2::from_fn(|i, j| 1.0 / (s[i] + s[j]).max(SIGMA_SUM_FLOOR));
    let b = v * a.component_mul(&f) * v.transpose();
    along + q * (b - b.transpose())
}

fn add_into(acc: &mut ModelParams, other: &ModelParams) {
    for ((_, a), (_, _, b)) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Backward pass for one traced frame.
fn backward(params: &ModelParams, tr: &Trace) -> ModelParams {
    let mut g = params.zeros_like();
    let r = params.block_rows();
    let n = params.layers();
    let act = params.activation;
    let q = DMatrix::from_iterator(3, 2, tr.polar.ortho.iter().copied());

    // reprojection = S Q + 1 t^T, residual = mask (x0 - reprojection)
    let d_rep = -(&tr.residual / tr.loss);
    let d_shape = &d_rep * q.transpose();
    let d_q = tr.shape.tr_mul(&d_rep);
    let d_t = Vector2::new(d_rep.column(0).sum(), d_rep.column(1).sum());

    let mut d_cam = DVector::zeros(2 * r);
    let mut d_homog = 0.0;
    if params.mode == NetworkMode::Translation {
        d_cam[6] = d_t[0] / tr.homogeneous;
        d_cam[7] = d_t[1] / tr.homogeneous;
        d_homog = -d_t.dot(&tr.translation) / tr.homogeneous;
    }
    let d_q = Matrix3x2::from_iterator(d_q.iter().copied());
    let d_m = polar_factor_backward(&tr.polar, &d_q);
    for a in 0..3 {
        for c in 0..2 {
            d_cam[2 * a + c] = d_m[(a, c)];
        }
    }

    let psi_n = tr.hidden.last().unwrap();
    // camera = Psi_N^T gamma
    let mut d_psi_n = &params.gamma * d_cam.transpose();
    g.gamma = psi_n * &d_cam;

    // decoder, last layer: shape = sum_k y1[k] A_k (+ homogeneous = sum y1)
    let y1 = &tr.dec_codes[0];
    let k1 = y1.len();
    let mut d_y = DVector::from_fn(k1, |k, _| {
        let mut acc = d_homog;
        for a in 0..3 {
            acc += params.first.column(3 * k + a).dot(&d_shape.column(a));
        }
        acc
    });
    for (k, &c) in y1.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        for a in 0..3 {
            g.first
                .column_mut(3 * k + a)
                .axpy(c, &d_shape.column(a), 1.0);
        }
    }
    for j in 0..n - 1 {
        let u = &tr.dec_pre[j];
        let b = &params.decoder_thresholds[j];
        let mut du = DVector::zeros(u.len());
        for k in 0..u.len() {
            let (dx, db) = act.derivative(u[k], b[k]);
            du[k] = d_y[k] * dx;
            g.decoder_thresholds[j][k] = d_y[k] * db;
        }
        g.dictionaries[j] += &du * tr.dec_codes[j + 1].transpose();
        d_y = params.dictionaries[j].tr_mul(&du);
    }

    // code = Psi_N beta_flat
    let beta_flat = DVector::from_fn(2 * r, |j, _| params.beta[(j / 2, j % 2)]);
    d_psi_n += &d_y * beta_flat.transpose();
    let d_beta = psi_n.tr_mul(&d_y);
    for j in 0..2 * r {
        g.beta[(j / 2, j % 2)] = d_beta[j];
    }

    // encoder
    let mut d_h = d_psi_n;
    for i in (0..n).rev() {
        let z = &tr.pre[i];
        let b = &params.encoder_thresholds[i];
        let mut dz = DMatrix::zeros(z.nrows(), z.ncols());
        for k in 0..z.nrows() {
            let mut db_acc = 0.0;
            for j in 0..z.ncols() {
                let (dx, db) = act.derivative(z[(k, j)], b[k]);
                dz[(k, j)] = d_h[(k, j)] * dx;
                db_acc += d_h[(k, j)] * db;
            }
            g.encoder_thresholds[i][k] = db_acc;
        }
        if i > 0 {
            let d = &params.dictionaries[i - 1];
            g.dictionaries[i - 1] += &tr.hidden[i - 1] * dz.transpose();
            d_h = d * dz;
        } else {
            // Z_1 block k = A~_k^T x0, so dA~_k = x0 dZ_1^k^T
            for k in 0..z.nrows() {
                for a in 0..3 {
                    let w0 = dz[(k, 2 * a)];
                    let w1 = dz[(k, 2 * a + 1)];
                    let mut col = g.first.column_mut(3 * k + a);
                    col.axpy(w0, &tr.x0.column(0), 1.0);
                    col.axpy(w1, &tr.x0.column(1), 1.0);
                }
            }
        }
    }
    g
}

fn check_finite(g: &ModelParams) -> Result<()> {
    for (name, _, data) in g.tensors() {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    Ok(())
}

/// Loss and gradient for one frame.
pub fn frame_gradient(
    params: &ModelParams,
    w: &Measurement2D,
    mask: &VisibilityMask,
) -> Result<(f64, ModelParams)> {
    let tr = trace(w, mask, params)?;
    let g = backward(params, &tr);
    check_finite(&g)?;
    Ok((tr.loss, g))
}

/// Summed loss and its exact gradient over a batch. Frames are evaluated in
/// parallel and reduced in batch order.
pub fn gradients(
    params: &ModelParams,
    batch: &[(&Measurement2D, &VisibilityMask)],
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let results: Vec<Result<(f64, ModelParams)>> = batch
        .par_iter()
        .map(|(w, m)| frame_gradient(params, w, m))
        .collect();
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for res in results {
        let (l, g) = res?;
        loss += l;
        add_into(&mut total, &g);
    }
    Ok((loss, total))
}

/// Per-frame results with failing frames skipped.
struct SkippingBatch {
    grads: ModelParams,
    used: usize,
    skipped: usize,
}

fn gradients_skipping(
    params: &ModelParams,
    batch: &[(&Measurement2D, &VisibilityMask)],
) -> Result<SkippingBatch> {
    let results: Vec<Result<(f64, ModelParams)>> = batch
        .par_iter()
        .map(|(w, m)| frame_gradient(params, w, m))
        .collect();
    let mut out = SkippingBatch {
        grads: params.zeros_like(),
        used: 0,
        skipped: 0,
    };
    for res in results {
        match res {
            Ok((_, g)) => {
                add_into(&mut out.grads, &g);
                out.used += 1;
            }
            Err(Error::RankDeficient { .. }) => out.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update; thresholds are projected back onto `>= 0`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let tensors = params.tensors_mut().into_iter();
    let grads = grads.tensors().into_iter();
    let ms = state.first_moment.tensors_mut().into_iter();
    let vs = state.second_moment.tensors_mut().into_iter();
    for ((((name, p), (_, _, g)), (_, m)), (_, v)) in tensors.zip(grads).zip(ms).zip(vs) {
        let clamp = is_threshold_tensor(&name);
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPSILON);
            p[i] -= update;
            if clamp && p[i] < 0.0 {
                p[i] = 0.0;
            }
        }
    }
}

/// One evaluation snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub step: u64,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub coherence: f64,
    pub error_3d: Option<f64>,
    /// Cumulative frame visits skipped by the numerical error path.
    pub skipped: u64,
    /// Cumulative frame visits.
    pub visits: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

pub const HISTORY_HEADER: &str = "step,learning_rate,mean_loss,coherence,error_3d,skipped,visits";

impl TrainHistory {
    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }

    /// CSV rows (without header), 17 significant digits.
    pub fn csv_rows(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| {
                format!(
                    "{},{:.16e},{:.16e},{:.16e},{},{},{}",
                    r.step,
                    r.learning_rate,
                    r.mean_loss,
                    r.coherence,
                    r.error_3d.map(|e| format!("{e:.16e}")).unwrap_or_default(),
                    r.skipped,
                    r.visits
                )
            })
            .collect()
    }

    pub fn parse_row(line: &str, lineno: usize) -> Result<HistoryRecord> {
        let bad = |m: &str| Error::Parse {
            line: lineno,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("history row needs 7 fields"));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("bad number"));
        let int = |s: &str| s.trim().parse::<u64>().map_err(|_| bad("bad integer"));
        Ok(HistoryRecord {
            step: int(f[0])?,
            learning_rate: num(f[1])?,
            mean_loss: num(f[2])?,
            coherence: num(f[3])?,
            error_3d: if f[4].trim().is_empty() {
                None
            } else {
                Some(num(f[4])?)
            },
            skipped: int(f[5])?,
            visits: int(f[6])?,
        })
    }
}

/// Full resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub history: TrainHistory,
    pub skipped: u64,
    pub visits: u64,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        TrainState {
            optimizer: OptimizerState::new(&params),
            params,
            history: TrainHistory::default(),
            skipped: 0,
            visits: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }
}

/// A frame ready for the network together with the transform back to
/// image units.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub measurement: Measurement2D,
    pub mask: VisibilityMask,
    pub transform: BboxTransform,
}

/// Normalizes every frame for the network. Standard mode uses bounding-box
/// normalization; translation mode keeps image coordinates so the
/// translation survives. Frames that already carry normalization records are
/// used as stored.
pub fn prepare_frames(scene: &Scene, mode: NetworkMode) -> Result<Vec<PreparedFrame>> {
    if let Some(records) = &scene.normalization {
        return Ok(scene
            .frames
            .iter()
            .zip(records)
            .map(|(f, t)| PreparedFrame {
                measurement: Measurement2D(apply_row_mask(&f.measurement.0, f.mask.as_slice())),
                mask: f.mask.clone(),
                transform: *t,
            })
            .collect());
    }
    scene
        .frames
        .iter()
        .map(|f| {
            let (measurement, transform) = match mode {
                NetworkMode::Standard => normalize_bbox(&f.measurement, &f.mask)?,
                NetworkMode::Translation => (
                    Measurement2D(apply_row_mask(&f.measurement.0, f.mask.as_slice())),
                    BboxTransform::identity(),
                ),
            };
            Ok(PreparedFrame {
                measurement,
                mask: f.mask.clone(),
                transform,
            })
        })
        .collect()
}

/// Maps a network output back to image units, with the shape centered.
fn to_image_units(
    shape: &Shape3D,
    camera: &CameraWeak,
    transform: &BboxTransform,
) -> (Shape3D, CameraWeak) {
    let (centered, mean) = shape.centered();
    let shift = camera.rotation.transpose() * mean.transpose();
    let translation = (camera.translation + shift) * transform.scale + transform.centroid;
    (
        Shape3D(centered.0 * transform.scale),
        CameraWeak {
            rotation: camera.rotation,
            scale: 1.0,
            translation,
        },
    )
}

fn reconstruct_prepared(
    frames: &[PreparedFrame],
    params: &ModelParams,
) -> Vec<Result<(f64, Shape3D, CameraWeak)>> {
    frames
        .par_iter()
        .map(|f| {
            let tr = trace(&f.measurement, &f.mask, params)?;
            let cam = CameraWeak {
                rotation: tr.polar.ortho,
                scale: 1.0,
                translation: tr.translation,
            };
            let (s, c) = to_image_units(&Shape3D(tr.shape), &cam, &f.transform);
            Ok((tr.loss, s, c))
        })
        .collect()
}

/// Pure inference on every frame: centered shape and camera in image units.
pub fn reconstruct(scene: &Scene, params: &ModelParams) -> Result<Vec<(Shape3D, CameraWeak)>> {
    if scene.points != params.points() {
        return Err(Error::DimensionMismatch(format!(
            "scene has {} points, model expects {}",
            scene.points,
            params.points()
        )));
    }
    let frames = prepare_frames(scene, params.mode)?;
    reconstruct_prepared(&frames, params)
        .into_iter()
        .map(|r| r.map(|(_, s, c)| (s, c)))
        .collect()
}

fn evaluate(
    frames: &[PreparedFrame],
    truth: Option<&[Shape3D]>,
    allow_scale: bool,
    state: &TrainState,
    lr: f64,
) -> Result<HistoryRecord> {
    let results = reconstruct_prepared(frames, &state.params);
    let mut loss = 0.0;
    let mut ok = 0usize;
    let mut err_sum = 0.0;
    for (i, res) in results.into_iter().enumerate() {
        if let Ok((l, s, _)) = res {
            loss += l;
            ok += 1;
            if let Some(t) = truth {
                err_sum += crate::geometry::frame_3d_error(&s, &t[i], allow_scale)?;
            }
        }
    }
    let denom = ok.max(1) as f64;
    Ok(HistoryRecord {
        step: state.step(),
        learning_rate: lr,
        mean_loss: loss / denom,
        coherence: mutual_coherence(&state.params.last_dictionary())?,
        error_3d: truth.map(|_| err_sum / denom),
        skipped: state.skipped,
        visits: state.visits,
    })
}

fn epoch_order(seed: u64, epoch: u64, frames: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frames).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch + 1));
    order.shuffle(&mut rng);
    order
}

/// Trains from scratch. See [`train_with`].
pub fn train(scene: &Scene, config: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    let state = train_with(scene, config, None, &mut |_| {})?;
    Ok((state.params, state.history))
}

/// Runs minibatch Adam up to `config.total_steps`, continuing from `resume`
/// when given. `observer` sees every history record as it is produced.
///
/// Minibatches walk a per-epoch seeded permutation of the frames, so the
/// visit sequence depends only on `(seed, step)` and resuming is exact.
pub fn train_with(
    scene: &Scene,
    config: &TrainConfig,
    resume: Option<TrainState>,
    observer: &mut dyn FnMut(&HistoryRecord),
) -> Result<TrainState> {
    config.validate()?;
    if scene.frames.is_empty() {
        return Err(Error::EmptyScene);
    }
    let frames = prepare_frames(scene, config.mode)?;
    let truth: Option<Vec<Shape3D>> = scene
        .truth
        .as_ref()
        .map(|t| t.iter().map(|g| g.shape.clone()).collect());
    let allow_scale = scene.mode == ProjectionMode::WeakPerspective;

    let mut state = match resume {
        Some(s) => {
            if s.params.points() != scene.points {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint has {} points, scene has {}",
                    s.params.points(),
                    scene.points
                )));
            }
            s
        }
        None => TrainState::new(init_params(config, scene.points, config.seed)?),
    };

    let n = frames.len() as u64;
    let batch = config.batch_size as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    loop {
        let step = state.step();
        let lr = lr_schedule(step, config);
        let due = step % config.eval_interval == 0 || step == config.total_steps;
        if due && state.history.last().is_none_or(|r| r.step < step) {
            let rec = evaluate(&frames, truth.as_deref(), allow_scale, &state, lr)?;
            observer(&rec);
            state.history.records.push(rec);
        }
        if step >= config.total_steps {
            break;
        }
        let mut picked = Vec::with_capacity(config.batch_size);
        for j in 0..batch {
            let g = step * batch + j;
            let epoch = g / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_order(config.seed, epoch, frames.len())));
            }
            picked.push(cached.as_ref().unwrap().1[(g % n) as usize]);
        }
        let refs: Vec<(&Measurement2D, &VisibilityMask)> = picked
            .iter()
            .map(|&i| (&frames[i].measurement, &frames[i].mask))
            .collect();
        let res = gradients_skipping(&state.params, &refs)?;
        state.visits += batch;
        state.skipped += res.skipped as u64;
        if res.used > 0 {
            check_finite(&res.grads)?;
            adam_step(&mut state.params, &res.grads, &mut state.optimizer, lr);
        } else {
            state.optimizer.step += 1;
        }
    }
    Ok(state)
}
