//! Thresholding operators and the (block) ISTA primitives the network is
//! assembled from.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};

/// Nonlinearity applied after each dictionary product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// Two-sided soft-thresholding, the proximal map of the l1 norm.
    Soft,
    /// One-sided shrinkage `max(x - b, 0)`; yields non-negative codes.
    #[default]
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Soft => "soft",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Activation::Soft),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}`"
            ))),
        }
    }

    /// Applies the activation to a single entry with threshold `b`.
    #[inline]
    pub fn apply(self, x: f64, b: f64) -> f64 {
        match self {
            Activation::Soft => shrink(x, b),
            Activation::Relu => (x - b).max(0.0),
        }
    }

    /// Partial derivatives `(d/dx, d/db)` at a point. The kink is assigned
    /// to the inactive side.
    #[inline]
    pub fn derivative(self, x: f64, b: f64) -> (f64, f64) {
        match self {
            Activation::Soft => {
                if x > b {
                    (1.0, -1.0)
                } else if x < -b {
                    (1.0, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Relu => {
                if x > b {
                    (1.0, -1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }
}

/// Scalar soft-thresholding.
#[inline]
pub fn shrink(x: f64, b: f64) -> f64 {
    if x > b {
        x - b
    } else if x < -b {
        x + b
    } else {
        0.0
    }
}

/// Elementwise soft-thresholding. `b` must have length 1 (broadcast) or the
/// length of `x`.
pub fn soft_threshold(x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if b.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidArgument(
            "thresholds must be non-negative".into(),
        ));
    }
    match b.len() {
        1 => Ok(x.iter().map(|&v| shrink(v, b[0])).collect()),
        n if n == x.len() => Ok(x.iter().zip(b).map(|(&v, &t)| shrink(v, t)).collect()),
        n => dim_err(format!(
            "threshold length {n} does not broadcast to {}",
            x.len()
        )),
    }
}

/// A dense code vector (psi or z).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode(pub DVector<f64>);

impl SparseCode {
    pub fn zeros(len: usize) -> Self {
        SparseCode(DVector::zeros(len))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|v| v.abs() > 0.0).count()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }
}

/// `K` blocks of size `r x 2`, stored as a `K x 2r` matrix whose row `k`
/// holds block `k` flattened row-major (`[a00, a01, a10, a11, ...]`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCode {
    rows: usize,
    data: DMatrix<f64>,
}

impl BlockCode {
    pub fn zeros(blocks: usize, rows: usize) -> Self {
        BlockCode {
            rows,
            data: DMatrix::zeros(blocks, 2 * rows),
        }
    }

    /// Wraps a `K x 2r` matrix in the flattened layout.
    pub fn from_flat(rows: usize, data: DMatrix<f64>) -> Result<Self> {
        if rows == 0 || data.ncols() != 2 * rows {
            return dim_err(format!(
                "flat block matrix has {} columns, expected {}",
                data.ncols(),
                2 * rows
            ));
        }
        Ok(BlockCode { rows, data })
    }

    /// Builds from a stacked `rK x 2` matrix (block `k` = rows `kr..kr+r`).
    pub fn from_stacked(rows: usize, stacked: &DMatrix<f64>) -> Result<Self> {
        if rows == 0 || stacked.ncols() != 2 || stacked.nrows() % rows != 0 {
            return dim_err(format!(
                "stacked matrix {}x{} is not a column of {rows}x2 blocks",
                stacked.nrows(),
                stacked.ncols()
            ));
        }
        let blocks = stacked.nrows() / rows;
        let data = DMatrix::from_fn(blocks, 2 * rows, |k, j| stacked[(k * rows + j / 2, j % 2)]);
        Ok(BlockCode { rows, data })
    }

    pub fn from_blocks(blocks: &[DMatrix<f64>]) -> Result<Self> {
        let rows = blocks.first().map(|b| b.nrows()).unwrap_or(3);
        let mut data = DMatrix::zeros(blocks.len(), 2 * rows);
        for (k, b) in blocks.iter().enumerate() {
            if b.nrows() != rows || b.ncols() != 2 {
                return dim_err(format!("block {k} is {}x{}", b.nrows(), b.ncols()));
            }
            for a in 0..rows {
                for c in 0..2 {
                    data[(k, 2 * a + c)] = b[(a, c)];
                }
            }
        }
        Ok(BlockCode { rows, data })
    }

    /// Stacked `rK x 2` form.
    pub fn to_stacked(&self) -> DMatrix<f64> {
        let r = self.rows;
        DMatrix::from_fn(self.block_count() * r, 2, |i, c| {
            self.data[(i / r, 2 * (i % r) + c)]
        })
    }

    pub fn block(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, 2, |a, c| self.data[(k, 2 * a + c)])
    }

    pub fn block_rows(&self) -> usize {
        self.rows
    }

    pub fn block_count(&self) -> usize {
        self.data.nrows()
    }

    pub fn flat(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.data
    }

    pub fn into_flat(self) -> DMatrix<f64> {
        self.data
    }

    pub fn block_norm(&self, k: usize) -> f64 {
        self.data.row(k).norm()
    }
}

/// A dictionary whose columns are atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary(pub DMatrix<f64>);

impl Dictionary {
    pub fn new(atoms: DMatrix<f64>) -> Result<Self> {
        if atoms.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "dictionary needs at least one atom".into(),
            ));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "dictionary has non-finite entries".into(),
            ));
        }
        Ok(Dictionary(atoms))
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn atom_count(&self) -> usize {
        self.0.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.0.nrows()
    }
}

/// `0.5 ||x - Dz||^2 + tau ||z||_1`.
pub fn lasso_objective(x: &DVector<f64>, d: &Dictionary, z: &DVector<f64>, tau: f64) -> f64 {
    0.5 * (x - &d.0 * z).norm_squared() + tau * z.lp_norm(1)
}

/// Classical ISTA from `z = 0`.
pub fn ista(
    x: &DVector<f64>,
    d: &Dictionary,
    alpha: f64,
    tau: f64,
    iters: usize,
) -> Result<SparseCode> {
    if x.len() != d.input_dim() {
        return dim_err(format!(
            "signal length {} vs dictionary rows {}",
            x.len(),
            d.input_dim()
        ));
    }
    if !(alpha > 0.0) || iters == 0 {
        return Err(Error::InvalidArgument(
            "ista needs alpha > 0 and iters >= 1".into(),
        ));
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(
            "thresholds must be non-negative".into(),
        ));
    }
    let mut z = DVector::zeros(d.atom_count());
    for _ in 0..iters {
        z = ista_iteration(x, d, &z, alpha, tau);
    }
    Ok(SparseCode(z))
}

/// One ISTA update; exposed so callers can monitor the objective.
pub fn ista_iteration(
    x: &DVector<f64>,
    d: &Dictionary,
    z: &DVector<f64>,
    alpha: f64,
    tau: f64,
) -> DVector<f64> {
    let residual = &d.0 * z - x;
    let v = z - alpha * d.0.tr_mul(&residual);
    v.map(|e| shrink(e, alpha * tau))
}

/// Exact minimizer of `0.5 ||U - V||_F^2 + tau * sum_k ||U_k||_F`.
pub fn group_prox(v: &BlockCode, tau: f64) -> Result<BlockCode> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument("tau must be non-negative".into()));
    }
    let mut out = v.clone();
    for k in 0..v.block_count() {
        let norm = v.block_norm(k);
        let factor = if norm > 0.0 {
            (1.0 - tau / norm).max(0.0)
        } else {
            0.0
        };
        out.data.row_mut(k).scale_mut(factor);
    }
    Ok(out)
}

/// Elementwise shrinkage with threshold `b[k]` shared by every entry of block `k`.
pub fn block_threshold(v: &BlockCode, b: &[f64], activation: Activation) -> Result<BlockCode> {
    if b.len() != v.block_count() {
        return dim_err(format!(
            "{} thresholds for {} blocks",
            b.len(),
            v.block_count()
        ));
    }
    if b.iter().any(|&t| !(t >= 0.0)) {
        return Err(Error::InvalidArgument(
            "thresholds must be non-negative".into(),
        ));
    }
    let mut out = v.clone();
    for (k, &t) in b.iter().enumerate() {
        for e in out.data.row_mut(k).iter_mut() {
            *e = activation.apply(*e, t);
        }
    }
    Ok(out)
}

/// Single-iteration block ISTA from zero with unit step:
/// `eta(D^T (Omega X); b (x) 1_{r x 2})`.
///
/// `x` is `n x 2`, `d` is `n x rK`, and `mask` (if given) selects the rows of
/// `x` that are observed. Hidden rows are zeroed before the product.
pub fn block_ista_step(
    x: &DMatrix<f64>,
    d: &Dictionary,
    b: &[f64],
    mask: Option<&[bool]>,
    activation: Activation,
    block_rows: usize,
) -> Result<BlockCode> {
    if x.ncols() != 2 || x.nrows() != d.input_dim() {
        return dim_err(format!(
            "measurement {}x{} vs dictionary with {} rows",
            x.nrows(),
            x.ncols(),
            d.input_dim()
        ));
    }
    if block_rows == 0 || d.atom_count() % block_rows != 0 {
        return dim_err(format!(
            "{} dictionary columns are not {block_rows}-row blocks",
            d.atom_count()
        ));
    }
    let masked = match mask {
        Some(m) => {
            if m.len() != x.nrows() {
                return dim_err(format!("mask length {} vs {} rows", m.len(), x.nrows()));
            }
            apply_row_mask(x, m)
        }
        None => x.clone(),
    };
    let stacked = d.0.tr_mul(&masked);
    let code = BlockCode::from_stacked(block_rows, &stacked)?;
    block_threshold(&code, b, activation)
}

/// Copy of `x` with hidden rows set to zero.
pub fn apply_row_mask(x: &DMatrix<f64>, visible: &[bool]) -> DMatrix<f64> {
    let mut out = x.clone();
    for (i, &v) in visible.iter().enumerate() {
        if !v {
            out.row_mut(i).fill(0.0);
        }
    }
    out
}

/// Number of blocks with at least one nonzero entry.
pub fn block_sparsity(z: &BlockCode) -> usize {
    (0..z.block_count())
        .filter(|&k| z.data.row(k).iter().any(|&v| v != 0.0))
        .count()
}
