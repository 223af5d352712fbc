//! The forward model: block-ISTA encoder, code/camera bottleneck, decoder
//! and the masked reprojection loss.
//!
//! Block codes use the flattened `K x 2r` layout of [`BlockCode`], so the
//! Kronecker-structured layer `(D_i (x) I_r)^T Psi` is the plain product
//! `D_i^T Psi_flat`.

use nalgebra::{DMatrix, DVector, Matrix3x2, Vector2};

use crate::error::{dim_err, Error, Result};
use crate::geometry::{
    polar_factor, CameraWeak, Measurement2D, PolarFactor, Shape3D, VisibilityMask,
};
use crate::sparse::{apply_row_mask, Activation, BlockCode, Dictionary, SparseCode};

/// Smoothing added under the square root of each frame's residual norm.
pub const LOSS_SMOOTHING: f64 = 1e-12;
/// Smallest decoded homogeneous coordinate accepted in translation mode.
pub const MIN_HOMOGENEOUS: f64 = 1e-6;

/// Block height of the codes: 3 rows for a plain camera, 4 rows when the
/// translation is carried as an extra homogeneous row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NetworkMode {
    #[default]
    Standard,
    Translation,
}

impl NetworkMode {
    pub fn block_rows(self) -> usize {
        match self {
            NetworkMode::Standard => 3,
            NetworkMode::Translation => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NetworkMode::Standard => "standard",
            NetworkMode::Translation => "translation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" | "orthogonal" => Ok(NetworkMode::Standard),
            "translation" | "weak_translation" => Ok(NetworkMode::Translation),
            other => Err(Error::InvalidArgument(format!(
                "unknown network mode `{other}`"
            ))),
        }
    }
}

/// Learnable parameters. Gradient aggregates reuse this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mode: NetworkMode,
    pub activation: Activation,
    /// First dictionary in reshaped `P x 3K_1` form; atom `k` is the `P x 3`
    /// shape in columns `3k..3k+3`.
    pub first: DMatrix<f64>,
    /// `D_2 .. D_N`, with `D_i` of size `K_{i-1} x K_i`.
    pub dictionaries: Vec<DMatrix<f64>>,
    /// `b_1 .. b_N`, one threshold per block.
    pub encoder_thresholds: Vec<DVector<f64>>,
    /// Decoder thresholds for `psi_1 .. psi_{N-1}` (entry `j` applies to the
    /// output of `D_{j+2}`); the last decoder layer is linear.
    pub decoder_thresholds: Vec<DVector<f64>>,
    /// `r x 2` weights turning a block into a code entry.
    pub beta: DMatrix<f64>,
    /// Per-block weights combining `Psi_N` into the camera.
    pub gamma: DVector<f64>,
}

impl ModelParams {
    /// Assembles parameters with zero thresholds and the averaging defaults
    /// for `beta` (`1 / 2r`) and `gamma` (`1 / K_N`).
    pub fn new(
        mode: NetworkMode,
        activation: Activation,
        first: DMatrix<f64>,
        dictionaries: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if first.ncols() % 3 != 0 || first.ncols() == 0 {
            return dim_err(format!("first dictionary has {} columns", first.ncols()));
        }
        let mut widths = vec![first.ncols() / 3];
        widths.extend(dictionaries.iter().map(|d| d.ncols()));
        let r = mode.block_rows();
        let last = *widths.last().unwrap();
        let params = ModelParams {
            mode,
            activation,
            first,
            encoder_thresholds: widths.iter().map(|&k| DVector::zeros(k)).collect(),
            decoder_thresholds: widths[..widths.len() - 1]
                .iter()
                .map(|&k| DVector::zeros(k))
                .collect(),
            dictionaries,
            beta: DMatrix::from_element(r, 2, 1.0 / (2 * r) as f64),
            gamma: DVector::from_element(last, 1.0 / last as f64),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn points(&self) -> usize {
        self.first.nrows()
    }

    pub fn layers(&self) -> usize {
        self.dictionaries.len() + 1
    }

    pub fn block_rows(&self) -> usize {
        self.mode.block_rows()
    }

    /// `K_1 .. K_N`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.first.ncols() / 3];
        w.extend(self.dictionaries.iter().map(|d| d.ncols()));
        w
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.block_rows();
        if self.first.nrows() == 0 || self.first.ncols() == 0 || self.first.ncols() % 3 != 0 {
            return dim_err(format!(
                "first dictionary is {}x{}",
                self.first.nrows(),
                self.first.ncols()
            ));
        }
        let widths = self.widths();
        for (i, d) in self.dictionaries.iter().enumerate() {
            if d.nrows() != widths[i] {
                return dim_err(format!(
                    "dictionary {} has {} rows, previous layer has {} atoms",
                    i + 2,
                    d.nrows(),
                    widths[i]
                ));
            }
        }
        if self.encoder_thresholds.len() != widths.len()
            || self
                .encoder_thresholds
                .iter()
                .zip(&widths)
                .any(|(b, &k)| b.len() != k)
        {
            return dim_err("encoder thresholds do not match layer widths");
        }
        if self.decoder_thresholds.len() + 1 != widths.len()
            || self
                .decoder_thresholds
                .iter()
                .zip(&widths)
                .any(|(b, &k)| b.len() != k)
        {
            return dim_err("decoder thresholds do not match layer widths");
        }
        if self.beta.shape() != (r, 2) {
            return dim_err(format!(
                "beta is {:?}, expected ({r}, 2)",
                self.beta.shape()
            ));
        }
        if self.gamma.len() != *widths.last().unwrap() {
            return dim_err("gamma length differs from the last layer width");
        }
        let thresholds = self
            .encoder_thresholds
            .iter()
            .chain(&self.decoder_thresholds);
        if thresholds.flat_map(|b| b.iter()).any(|&t| !(t >= 0.0)) {
            return Err(Error::InvalidArgument(
                "thresholds must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, data) in z.tensors_mut() {
            data.fill(0.0);
        }
        z
    }

    /// The first dictionary as `3P x K_1` (atom = row-major vectorized shape).
    pub fn first_dictionary(&self) -> Dictionary {
        let p = self.points();
        let k1 = self.first.ncols() / 3;
        Dictionary(DMatrix::from_fn(3 * p, k1, |i, k| {
            self.first[(i / 3, 3 * k + i % 3)]
        }))
    }

    /// The deepest dictionary `D_N` (the first one when `N = 1`).
    pub fn last_dictionary(&self) -> Dictionary {
        match self.dictionaries.last() {
            Some(d) => Dictionary(d.clone()),
            None => self.first_dictionary(),
        }
    }

    /// `P x rK_1` matrix used by the first encoder layer: each atom,
    /// followed by a column of ones in translation mode.
    pub fn encoder_first(&self) -> DMatrix<f64> {
        let r = self.block_rows();
        let k1 = self.first.ncols() / 3;
        DMatrix::from_fn(self.points(), r * k1, |p, j| {
            let (k, a) = (j / r, j % r);
            if a < 3 {
                self.first[(p, 3 * k + a)]
            } else {
                1.0
            }
        })
    }

    /// Named flat views of every tensor, in checkpoint order
    /// (column-major data).
    pub fn tensors(&self) -> Vec<(String, (usize, usize), &[f64])> {
        let mut out = vec![(
            "dictionary.1".to_string(),
            self.first.shape(),
            self.first.as_slice(),
        )];
        for (i, d) in self.dictionaries.iter().enumerate() {
            out.push((format!("dictionary.{}", i + 2), d.shape(), d.as_slice()));
        }
        for (i, b) in self.encoder_thresholds.iter().enumerate() {
            out.push((
                format!("encoder_threshold.{}", i + 1),
                b.shape(),
                b.as_slice(),
            ));
        }
        for (i, b) in self.decoder_thresholds.iter().enumerate() {
            out.push((
                format!("decoder_threshold.{}", i + 1),
                b.shape(),
                b.as_slice(),
            ));
        }
        out.push(("beta".to_string(), self.beta.shape(), self.beta.as_slice()));
        out.push((
            "gamma".to_string(),
            self.gamma.shape(),
            self.gamma.as_slice(),
        ));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![("dictionary.1".to_string(), self.first.as_mut_slice())];
        for (i, d) in self.dictionaries.iter_mut().enumerate() {
            out.push((format!("dictionary.{}", i + 2), d.as_mut_slice()));
        }
        for (i, b) in self.encoder_thresholds.iter_mut().enumerate() {
            out.push((format!("encoder_threshold.{}", i + 1), b.as_mut_slice()));
        }
        for (i, b) in self.decoder_thresholds.iter_mut().enumerate() {
            out.push((format!("decoder_threshold.{}", i + 1), b.as_mut_slice()));
        }
        out.push(("beta".to_string(), self.beta.as_mut_slice()));
        out.push(("gamma".to_string(), self.gamma.as_mut_slice()));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    fn check_input(&self, w: &Measurement2D, mask: &VisibilityMask) -> Result<()> {
        if w.0.nrows() != self.points() || w.0.ncols() != 2 {
            return dim_err(format!(
                "measurement is {}x{}, model expects {}x2",
                w.0.nrows(),
                w.0.ncols(),
                self.points()
            ));
        }
        if mask.len() != self.points() {
            return dim_err(format!(
                "mask length {} vs {} points",
                mask.len(),
                self.points()
            ));
        }
        Ok(())
    }
}

pub(crate) fn is_threshold_tensor(name: &str) -> bool {
    name.starts_with("encoder_threshold") || name.starts_with("decoder_threshold")
}

/// Everything a forward pass computes, including the pre-activations the
/// backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub x0: DMatrix<f64>,
    /// Encoder pre-activations `Z_i` (flat block layout).
    pub pre: Vec<DMatrix<f64>>,
    /// Encoder outputs `Psi_i`.
    pub hidden: Vec<DMatrix<f64>>,
    pub code: DVector<f64>,
    /// Flattened `r x 2` raw camera.
    pub camera_flat: DVector<f64>,
    /// Decoder pre-activations for `psi_1 .. psi_{N-1}`.
    pub dec_pre: Vec<DVector<f64>>,
    /// Decoder codes `psi_1 .. psi_N`.
    pub dec_codes: Vec<DVector<f64>>,
    pub shape: DMatrix<f64>,
    /// Homogeneous coordinate (translation mode), otherwise 1.
    pub homogeneous: f64,
    pub polar: PolarFactor,
    pub translation: Vector2<f64>,
    pub reprojection: DMatrix<f64>,
    pub residual: DMatrix<f64>,
    pub loss: f64,
}

fn activate(z: &DMatrix<f64>, b: &DVector<f64>, act: Activation) -> DMatrix<f64> {
    DMatrix::from_fn(z.nrows(), z.ncols(), |k, j| act.apply(z[(k, j)], b[k]))
}

fn encode_flat(
    params: &ModelParams,
    x0: &DMatrix<f64>,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let r = params.block_rows();
    let act = params.activation;
    let stacked = params.encoder_first().tr_mul(x0);
    let z1 = BlockCode::from_stacked(r, &stacked)?.into_flat();
    let mut pre = Vec::with_capacity(params.layers());
    let mut hidden = Vec::with_capacity(params.layers());
    hidden.push(activate(&z1, &params.encoder_thresholds[0], act));
    pre.push(z1);
    for (i, d) in params.dictionaries.iter().enumerate() {
        let z = d.tr_mul(&hidden[i]);
        hidden.push(activate(&z, &params.encoder_thresholds[i + 1], act));
        pre.push(z);
    }
    Ok((pre, hidden))
}

fn beta_flat(params: &ModelParams) -> DVector<f64> {
    let r = params.block_rows();
    DVector::from_fn(2 * r, |j, _| params.beta[(j / 2, j % 2)])
}

fn recover_flat(params: &ModelParams, psi_n: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let code = psi_n * beta_flat(params);
    let camera = psi_n.tr_mul(&params.gamma);
    (code, camera)
}

/// Decoder: returns pre-activations, codes `psi_1..psi_N`, shape, homogeneous coordinate.
fn decode_flat(
    params: &ModelParams,
    code: &DVector<f64>,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, DMatrix<f64>, f64) {
    let n = params.layers();
    let mut codes = vec![DVector::zeros(0); n];
    let mut dec_pre = vec![DVector::zeros(0); n - 1];
    codes[n - 1] = code.clone();
    for j in (0..n - 1).rev() {
        let u = &params.dictionaries[j] * &codes[j + 1];
        let b = &params.decoder_thresholds[j];
        codes[j] = DVector::from_fn(u.len(), |k, _| params.activation.apply(u[k], b[k]));
        dec_pre[j] = u;
    }
    let y1 = &codes[0];
    let p = params.points();
    let mut shape = DMatrix::zeros(p, 3);
    for (k, &c) in y1.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        for a in 0..3 {
            shape
                .column_mut(a)
                .axpy(c, &params.first.column(3 * k + a), 1.0);
        }
    }
    let homogeneous = match params.mode {
        NetworkMode::Standard => 1.0,
        NetworkMode::Translation => y1.sum(),
    };
    (dec_pre, codes, shape, homogeneous)
}

pub(crate) fn trace(
    w: &Measurement2D,
    mask: &VisibilityMask,
    params: &ModelParams,
) -> Result<Trace> {
    params.check_input(w, mask)?;
    let x0 = apply_row_mask(&w.0, mask.as_slice());
    let (pre, hidden) = encode_flat(params, &x0)?;
    let (code, camera_flat) = recover_flat(params, hidden.last().unwrap());
    let (dec_pre, dec_codes, shape, homogeneous) = decode_flat(params, &code);

    let raw = Matrix3x2::from_fn(|a, c| camera_flat[2 * a + c]);
    let polar = polar_factor(&raw)?;
    let translation = match params.mode {
        NetworkMode::Standard => Vector2::zeros(),
        NetworkMode::Translation => {
            if !(homogeneous.abs() >= MIN_HOMOGENEOUS) {
                return Err(Error::RankDeficient { sigma: homogeneous });
            }
            Vector2::new(camera_flat[6], camera_flat[7]) / homogeneous
        }
    };
    let q = DMatrix::from_iterator(3, 2, polar.ortho.iter().copied());
    let mut reprojection = &shape * q;
    for mut row in reprojection.row_iter_mut() {
        row[0] += translation[0];
        row[1] += translation[1];
    }
    let residual = apply_row_mask(&(&x0 - &reprojection), mask.as_slice());
    let loss = (residual.norm_squared() + LOSS_SMOOTHING).sqrt();
    Ok(Trace {
        x0,
        pre,
        hidden,
        code,
        camera_flat,
        dec_pre,
        dec_codes,
        shape,
        homogeneous,
        polar,
        translation,
        reprojection,
        residual,
        loss,
    })
}

/// Encoder output `Psi_1 .. Psi_N` for one (normalized) frame.
pub fn encode(
    w: &Measurement2D,
    mask: &VisibilityMask,
    params: &ModelParams,
) -> Result<Vec<BlockCode>> {
    params.check_input(w, mask)?;
    let x0 = apply_row_mask(&w.0, mask.as_slice());
    let (_, hidden) = encode_flat(params, &x0)?;
    let r = params.block_rows();
    hidden
        .into_iter()
        .map(|h| BlockCode::from_flat(r, h))
        .collect()
}

/// Code `psi_N^k = sum_ij beta_ij [Psi_N^k]_ij` and raw camera `sum_k gamma_k Psi_N^k`.
pub fn recover_code_camera(
    psi_n: &BlockCode,
    params: &ModelParams,
) -> Result<(SparseCode, DMatrix<f64>)> {
    let r = params.block_rows();
    if psi_n.block_rows() != r || psi_n.block_count() != params.gamma.len() {
        return dim_err(format!(
            "hidden code has {} blocks of {} rows, model expects {} of {r}",
            psi_n.block_count(),
            psi_n.block_rows(),
            params.gamma.len()
        ));
    }
    let (code, cam) = recover_flat(params, psi_n.flat());
    Ok((
        SparseCode(code),
        DMatrix::from_fn(r, 2, |a, c| cam[2 * a + c]),
    ))
}

/// Decoder from `psi_N` to the `P x 3` shape.
pub fn decode(code: &SparseCode, params: &ModelParams) -> Result<Shape3D> {
    if code.len() != params.gamma.len() {
        return dim_err(format!(
            "code length {} vs K_N = {}",
            code.len(),
            params.gamma.len()
        ));
    }
    let (_, _, shape, _) = decode_flat(params, &code.0);
    Ok(Shape3D(shape))
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `Psi_1 .. Psi_N`; the last entry is the bottleneck input.
    pub hidden_blocks: Vec<BlockCode>,
    pub code: SparseCode,
    /// `r x 2` camera before orthonormalization.
    pub camera_raw: DMatrix<f64>,
    /// Orthonormalized camera; unit scale, translation from the 4th block
    /// row in translation mode.
    pub camera: CameraWeak,
    pub shape: Shape3D,
    pub reprojection: Measurement2D,
    pub loss: f64,
}

impl From<Trace> for ForwardOutput {
    fn from(t: Trace) -> Self {
        let r = t.camera_flat.len() / 2;
        ForwardOutput {
            hidden_blocks: t
                .hidden
                .into_iter()
                .map(|h| BlockCode::from_flat(r, h).expect("layout checked by the encoder"))
                .collect(),
            code: SparseCode(t.code),
            camera_raw: DMatrix::from_fn(r, 2, |a, c| t.camera_flat[2 * a + c]),
            camera: CameraWeak {
                rotation: t.polar.ortho,
                scale: 1.0,
                translation: t.translation,
            },
            shape: Shape3D(t.shape),
            reprojection: Measurement2D(t.reprojection),
            loss: t.loss,
        }
    }
}

/// Full pass for one normalized frame. The block height comes from `params.mode`.
pub fn forward(
    w: &Measurement2D,
    mask: &VisibilityMask,
    params: &ModelParams,
) -> Result<ForwardOutput> {
    trace(w, mask, params).map(ForwardOutput::from)
}

/// Smoothed, masked reprojection error of one frame.
pub fn loss(w: &Measurement2D, mask: &VisibilityMask, params: &ModelParams) -> Result<f64> {
    trace(w, mask, params).map(|t| t.loss)
}

/// Summed loss over a batch of frames.
pub fn batch_loss(
    frames: &[(&Measurement2D, &VisibilityMask)],
    params: &ModelParams,
) -> Result<f64> {
    frames.iter().map(|(w, m)| loss(w, m, params)).sum()
}

/// Outcome of checking the non-negative split of a block code.
#[derive(Debug, Clone)]
pub struct SplitCheck {
    /// `[Psi^+; -Psi^-]`, twice as many blocks, all entries non-negative.
    pub split: BlockCode,
    /// Largest entry of `|[D, -D] split - D Psi|`.
    pub reconstruction_gap: f64,
    /// Largest entry of `|sum [gamma, -gamma] split - sum gamma Psi|`.
    pub camera_gap: f64,
    pub nonnegative: bool,
}

/// Verifies that a signed block code can be rewritten as a non-negative one
/// over the doubled dictionary `[D, -D]`, and that camera recovery with
/// `[gamma, -gamma]` is unchanged.
pub fn nonneg_split_check(
    d: &Dictionary,
    psi: &BlockCode,
    gamma: &DVector<f64>,
) -> Result<SplitCheck> {
    let k = psi.block_count();
    if d.atom_count() != k || gamma.len() != k {
        return dim_err(format!(
            "{} atoms, {} blocks, {} camera weights",
            d.atom_count(),
            k,
            gamma.len()
        ));
    }
    let flat = psi.flat();
    let cols = flat.ncols();
    let split_flat = DMatrix::from_fn(2 * k, cols, |i, j| {
        if i < k {
            flat[(i, j)].max(0.0)
        } else {
            -(flat[(i - k, j)].min(0.0))
        }
    });
    let mut doubled = DMatrix::zeros(d.input_dim(), 2 * k);
    doubled.columns_mut(0, k).copy_from(d.atoms());
    doubled.columns_mut(k, k).copy_from(&(-d.atoms()));
    let direct = d.atoms() * flat;
    let via_split = &doubled * &split_flat;
    let reconstruction_gap = (&via_split - &direct).amax();

    let mut gamma2 = DVector::zeros(2 * k);
    gamma2.rows_mut(0, k).copy_from(gamma);
    gamma2.rows_mut(k, k).copy_from(&(-gamma));
    let camera_gap = (split_flat.tr_mul(&gamma2) - flat.tr_mul(gamma)).amax();
    let nonnegative = split_flat.iter().all(|&v| v >= 0.0);
    Ok(SplitCheck {
        split: BlockCode::from_flat(psi.block_rows(), split_flat)?,
        reconstruction_gap,
        camera_gap,
        nonnegative,
    })
}
