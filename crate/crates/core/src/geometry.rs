//! Cameras, projection, input normalization, shape alignment and the
//! evaluation metrics.

use nalgebra::{
    DMatrix, Matrix2, Matrix3, Matrix3x2, Quaternion, RowVector2, UnitQuaternion, Vector2,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};
use crate::sparse::Dictionary;

/// Tolerance used when validating a camera's rotation part.
pub const ORTHONORMAL_TOL: f64 = 1e-6;
/// Smallest singular value accepted by [`orthonormalize_camera`].
pub const RANK_TOL: f64 = 1e-10;

/// `P x 2` image coordinates, one row per landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement2D(pub DMatrix<f64>);

/// `P x 3` landmark coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape3D(pub DMatrix<f64>);

/// Per-point visibility (the diagonal of the occlusion mask).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMask(pub Vec<bool>);

impl Measurement2D {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.ncols() != 2 || points.nrows() == 0 {
            return dim_err(format!(
                "measurement must be P x 2, got {}x{}",
                points.nrows(),
                points.ncols()
            ));
        }
        Ok(Measurement2D(points))
    }

    pub fn points(&self) -> usize {
        self.0.nrows()
    }
}

impl Shape3D {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.ncols() != 3 || points.nrows() == 0 {
            return dim_err(format!(
                "shape must be P x 3, got {}x{}",
                points.nrows(),
                points.ncols()
            ));
        }
        Ok(Shape3D(points))
    }

    pub fn points(&self) -> usize {
        self.0.nrows()
    }

    /// Copy translated so the centroid is at the origin, and the centroid.
    pub fn centered(&self) -> (Shape3D, nalgebra::RowVector3<f64>) {
        let mean = self.0.row_mean();
        let mut out = self.0.clone();
        for mut row in out.row_iter_mut() {
            row -= &mean;
        }
        (
            Shape3D(out),
            nalgebra::RowVector3::new(mean[0], mean[1], mean[2]),
        )
    }
}

impl VisibilityMask {
    pub fn all_visible(points: usize) -> Self {
        VisibilityMask(vec![true; points])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn hidden_count(&self) -> usize {
        self.len() - self.visible_count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectionMode {
    #[default]
    Orthogonal,
    WeakPerspective,
}

impl ProjectionMode {
    pub fn name(self) -> &'static str {
        match self {
            ProjectionMode::Orthogonal => "orthogonal",
            ProjectionMode::WeakPerspective => "weak_perspective",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "orthogonal" => Ok(ProjectionMode::Orthogonal),
            "weak_perspective" | "weak" => Ok(ProjectionMode::WeakPerspective),
            other => Err(Error::InvalidArgument(format!(
                "unknown projection mode `{other}`"
            ))),
        }
    }
}

/// Weak-perspective camera `W = scale * S M + 1 t^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraWeak {
    pub rotation: Matrix3x2<f64>,
    pub scale: f64,
    pub translation: Vector2<f64>,
}

impl CameraWeak {
    pub fn orthogonal(rotation: Matrix3x2<f64>) -> Self {
        CameraWeak {
            rotation,
            scale: 1.0,
            translation: Vector2::zeros(),
        }
    }

    /// `||M^T M - I||` measured as the largest absolute entry.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.rotation)
    }
}

pub fn orthonormality_error(m: &Matrix3x2<f64>) -> f64 {
    (m.tr_mul(m) - Matrix2::identity()).amax()
}

pub fn project(s: &Shape3D, cam: &CameraWeak, mode: ProjectionMode) -> Result<Measurement2D> {
    if orthonormality_error(&cam.rotation) > ORTHONORMAL_TOL {
        return Err(Error::InvalidArgument(
            "camera rotation part is not column-orthonormal".into(),
        ));
    }
    if s.0.ncols() != 3 {
        return dim_err("shape must have 3 columns");
    }
    let rot = DMatrix::from_iterator(3, 2, cam.rotation.iter().copied());
    match mode {
        ProjectionMode::Orthogonal => {
            if cam.scale != 1.0 || cam.translation != Vector2::zeros() {
                return Err(Error::InvalidArgument(
                    "orthogonal projection requires unit scale and zero translation".into(),
                ));
            }
            Ok(Measurement2D(&s.0 * rot))
        }
        ProjectionMode::WeakPerspective => {
            if !(cam.scale > 0.0) {
                return Err(Error::InvalidArgument(
                    "camera scale must be positive".into(),
                ));
            }
            let mut w = (&s.0 * rot) * cam.scale;
            let t = RowVector2::new(cam.translation[0], cam.translation[1]);
            for mut row in w.row_iter_mut() {
                row += t;
            }
            Ok(Measurement2D(w))
        }
    }
}

/// Seeded [`random_camera_with`].
pub fn random_camera(seed: u64, mode: ProjectionMode) -> CameraWeak {
    random_camera_with(&mut ChaCha8Rng::seed_from_u64(seed), mode)
}

/// Uniform random rotation (unit-quaternion sampling); weak-perspective
/// cameras additionally get `scale ~ U[0.5, 1.5]` and `t ~ U[-0.5, 0.5]^2`.
pub fn random_camera_with<R: Rng + ?Sized>(rng: &mut R, mode: ProjectionMode) -> CameraWeak {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = Quaternion::new(
        b * (tau * u3).cos(),
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
    );
    let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
    let m = rot.matrix();
    let rotation = Matrix3x2::from_columns(&[m.column(0).into_owned(), m.column(1).into_owned()]);
    match mode {
        ProjectionMode::Orthogonal => CameraWeak::orthogonal(rotation),
        ProjectionMode::WeakPerspective => {
            let scale = rng.random_range(0.5..=1.5);
            let translation =
                Vector2::new(rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5));
            CameraWeak {
                rotation,
                scale,
                translation,
            }
        }
    }
}

/// Record of a bounding-box normalization: `normalized = (raw - centroid) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BboxTransform {
    pub centroid: Vector2<f64>,
    pub scale: f64,
}

impl BboxTransform {
    pub fn identity() -> Self {
        BboxTransform {
            centroid: Vector2::zeros(),
            scale: 1.0,
        }
    }

    /// Maps normalized coordinates back to image units (hidden rows stay zero).
    pub fn denormalize(&self, w: &Measurement2D, mask: &VisibilityMask) -> Measurement2D {
        let mut out = w.0.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            if mask.is_visible(i) {
                row[0] = row[0] * self.scale + self.centroid[0];
                row[1] = row[1] * self.scale + self.centroid[1];
            }
        }
        Measurement2D(out)
    }
}

/// Centers the visible points on their centroid and divides by the larger
/// bounding-box side. Hidden rows are zeroed.
pub fn normalize_bbox(
    w: &Measurement2D,
    mask: &VisibilityMask,
) -> Result<(Measurement2D, BboxTransform)> {
    if mask.len() != w.points() {
        return dim_err(format!(
            "mask length {} vs {} points",
            mask.len(),
            w.points()
        ));
    }
    let visible: Vec<usize> = (0..w.points()).filter(|&i| mask.is_visible(i)).collect();
    if visible.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} visible points",
            visible.len()
        )));
    }
    let mut centroid = Vector2::zeros();
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for &i in &visible {
        for c in 0..2 {
            let v = w.0[(i, c)];
            centroid[c] += v;
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    centroid /= visible.len() as f64;
    let scale = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Degenerate("visible points have zero extent".into()));
    }
    let mut out = DMatrix::zeros(w.points(), 2);
    for &i in &visible {
        for c in 0..2 {
            out[(i, c)] = (w.0[(i, c)] - centroid[c]) / scale;
        }
    }
    Ok((Measurement2D(out), BboxTransform { centroid, scale }))
}

/// `(1/P) * sum of hidden points`: the offset left after centering on the
/// visible points with hidden entries zeroed.
pub fn translation_residual(w: &Measurement2D, mask: &VisibilityMask) -> Vector2<f64> {
    let p = w.points() as f64;
    let mut acc = Vector2::zeros();
    for i in 0..w.points() {
        if !mask.is_visible(i) {
            acc[0] += w.0[(i, 0)];
            acc[1] += w.0[(i, 1)];
        }
    }
    acc / p
}

/// Thin SVD `M = U diag(sigma) V^T` of a 3x2 camera and its polar factor `U V^T`.
#[derive(Debug, Clone)]
pub struct PolarFactor {
    pub ortho: Matrix3x2<f64>,
    pub u: Matrix3x2<f64>,
    pub singular_values: Vector2<f64>,
    pub v: Matrix2<f64>,
}

pub fn polar_factor(m: &Matrix3x2<f64>) -> Result<PolarFactor> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient { sigma: f64::NAN });
    }
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let sigma = svd.singular_values;
    let smallest = sigma.min();
    if !(smallest > RANK_TOL) {
        return Err(Error::RankDeficient { sigma: smallest });
    }
    Ok(PolarFactor {
        ortho: u * v_t,
        u,
        singular_values: sigma,
        v: v_t.transpose(),
    })
}

/// Nearest column-orthonormal matrix (polar factor) and the singular values.
pub fn orthonormalize_camera(m: &Matrix3x2<f64>) -> Result<(Matrix3x2<f64>, Vector2<f64>)> {
    let pf = polar_factor(m)?;
    Ok((pf.ortho, pf.singular_values))
}

/// Orthogonal Procrustes solution (reflections allowed) with optional scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
}

pub fn procrustes(est: &Shape3D, gt: &Shape3D, allow_scale: bool) -> Result<Alignment> {
    if est.0.shape() != gt.0.shape() || est.0.ncols() != 3 {
        return dim_err(format!(
            "shapes {:?} and {:?} differ",
            est.0.shape(),
            gt.0.shape()
        ));
    }
    let h = est.0.tr_mul(&gt.0);
    let h = Matrix3::from_iterator(h.iter().copied());
    let svd = h.svd(true, true);
    let rotation = svd.u.expect("requested U") * svd.v_t.expect("requested V^T");
    let scale = if allow_scale {
        let denom = est.0.norm_squared();
        if denom > 0.0 {
            svd.singular_values.sum() / denom
        } else {
            1.0
        }
    } else {
        1.0
    };
    Ok(Alignment { rotation, scale })
}

/// `est * R` (or `c * est * R`) with `R` the Procrustes minimizer.
pub fn align_shapes(est: &Shape3D, gt: &Shape3D, allow_scale: bool) -> Result<Shape3D> {
    let a = procrustes(est, gt, allow_scale)?;
    let r = DMatrix::from_iterator(3, 3, a.rotation.iter().copied());
    Ok(Shape3D((&est.0 * r) * a.scale))
}

/// `||align(est) - gt||_F / ||gt||_F` for one frame.
pub fn frame_3d_error(est: &Shape3D, gt: &Shape3D, allow_scale: bool) -> Result<f64> {
    let norm = gt.0.norm();
    if !(norm > 0.0) {
        return Err(Error::ZeroNorm("ground-truth shape".into()));
    }
    let aligned = align_shapes(est, gt, allow_scale)?;
    Ok((aligned.0 - &gt.0).norm() / norm)
}

pub fn per_frame_3d_errors(
    estimates: &[Shape3D],
    truths: &[Shape3D],
    allow_scale: bool,
) -> Result<Vec<f64>> {
    if estimates.len() != truths.len() {
        return dim_err(format!(
            "{} estimates vs {} truths",
            estimates.len(),
            truths.len()
        ));
    }
    estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| frame_3d_error(e, t, allow_scale))
        .collect()
}

/// Normalized mean 3D error over frames.
pub fn normalized_3d_error(
    estimates: &[Shape3D],
    truths: &[Shape3D],
    allow_scale: bool,
) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("no frames to evaluate".into()));
    }
    let errs = per_frame_3d_errors(estimates, truths, allow_scale)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Fraction of frames with error at or below each threshold.
pub fn cumulative_error_curve(errors: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let n = errors.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| (t, errors.iter().filter(|&&e| e <= t).count() as f64 / n))
        .collect()
}

/// Largest absolute cosine between two distinct atoms.
pub fn mutual_coherence(d: &Dictionary) -> Result<f64> {
    let atoms = d.atoms();
    if atoms.ncols() < 2 {
        return Err(Error::InvalidArgument(
            "coherence needs at least two atoms".into(),
        ));
    }
    let norms: Vec<f64> = atoms.column_iter().map(|c| c.norm()).collect();
    if let Some(k) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(Error::ZeroNorm(format!("atom {k}")));
    }
    let gram = atoms.tr_mul(atoms);
    let mut best = 0.0f64;
    for i in 0..atoms.ncols() {
        for j in (i + 1)..atoms.ncols() {
            best = best.max((gram[(i, j)] / (norms[i] * norms[j])).abs());
        }
    }
    Ok(best.min(1.0))
}

/// Seeded [`noise_perturb_with`].
pub fn noise_perturb(w: &Measurement2D, ratio: f64, seed: u64) -> Result<Measurement2D> {
    noise_perturb_with(w, ratio, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Adds Gaussian noise rescaled so that `||noise||_F / ||W||_F = ratio`.
pub fn noise_perturb_with<R: Rng + ?Sized>(
    w: &Measurement2D,
    ratio: f64,
    rng: &mut R,
) -> Result<Measurement2D> {
    if !(ratio >= 0.0) {
        return Err(Error::InvalidArgument(
            "noise ratio must be non-negative".into(),
        ));
    }
    let noise =
        DMatrix::<f64>::from_fn(w.0.nrows(), w.0.ncols(), |_, _| rng.sample(StandardNormal));
    let (wn, nn) = (w.0.norm(), noise.norm());
    if ratio == 0.0 || wn == 0.0 || nn == 0.0 {
        return Ok(w.clone());
    }
    Ok(Measurement2D(&w.0 + noise * (ratio * wn / nn)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn first_two_columns() -> Matrix3x2<f64> {
        Matrix3x2::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)
    }

    #[test]
    fn project_examples() {
        let s = Shape3D::new(DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0])).unwrap();
        let ortho = project(
            &s,
            &CameraWeak::orthogonal(first_two_columns()),
            ProjectionMode::Orthogonal,
        )
        .unwrap();
        assert_eq!(ortho.0, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        let cam = CameraWeak {
            rotation: first_two_columns(),
            scale: 2.0,
            translation: Vector2::new(1.0, 1.0),
        };
        let weak = project(&s, &cam, ProjectionMode::WeakPerspective).unwrap();
        assert_eq!(weak.0, DMatrix::from_row_slice(1, 2, &[3.0, 1.0]));
        assert!(project(&s, &cam, ProjectionMode::Orthogonal).is_err());
        let bad = CameraWeak::orthogonal(first_two_columns() * 1.1);
        assert!(project(&s, &bad, ProjectionMode::Orthogonal).is_err());
    }

    #[test]
    fn random_camera_is_orthonormal_and_deterministic() {
        for seed in 0..200 {
            let cam = random_camera(seed, ProjectionMode::WeakPerspective);
            assert!(cam.orthonormality_error() < 1e-12);
            assert!((0.5..=1.5).contains(&cam.scale));
            assert!(cam.translation.iter().all(|t| t.abs() <= 0.5));
            assert_eq!(cam, random_camera(seed, ProjectionMode::WeakPerspective));
        }
    }

    #[test]
    fn normalize_bbox_two_points() {
        let w = Measurement2D::new(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 0.0])).unwrap();
        let (n, t) = normalize_bbox(&w, &VisibilityMask::all_visible(2)).unwrap();
        assert_eq!(n.0, DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.5, 0.0]));
        assert_eq!(t.scale, 2.0);
        let (again, t2) = normalize_bbox(&n, &VisibilityMask::all_visible(2)).unwrap();
        assert_eq!(again.0, n.0);
        assert_eq!(t2, BboxTransform::identity());
    }

    #[test]
    fn normalize_bbox_rejects_degenerate() {
        let w = Measurement2D::new(DMatrix::from_row_slice(
            3,
            2,
            &[1.0, 1.0, 1.0, 1.0, 5.0, 5.0],
        ))
        .unwrap();
        let mask = VisibilityMask(vec![true, true, false]);
        assert!(matches!(
            normalize_bbox(&w, &mask),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn translation_residual_examples() {
        let w = Measurement2D::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 3.0, 3.0])).unwrap();
        assert_eq!(
            translation_residual(&w, &VisibilityMask::all_visible(2)),
            Vector2::zeros()
        );
        let r = translation_residual(&w, &VisibilityMask(vec![true, false]));
        assert_eq!(r, Vector2::new(1.5, 1.5));
    }

    #[test]
    fn orthonormalize_strips_scale() {
        let (q, s) = orthonormalize_camera(&(first_two_columns() * 3.0)).unwrap();
        assert_relative_eq!(q, first_two_columns(), epsilon = 1e-12);
        assert_relative_eq!(s, Vector2::new(3.0, 3.0), epsilon = 1e-12);
        let rank_one = Matrix3x2::new(1.0, 2.0, 2.0, 4.0, 3.0, 6.0);
        assert!(matches!(
            orthonormalize_camera(&rank_one),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn align_recovers_mirror() {
        let gt = Shape3D::new(DMatrix::from_fn(5, 3, |i, j| {
            ((i * 3 + j * 7) % 5) as f64 - 2.0 + 0.1 * j as f64
        }))
        .unwrap();
        let mut flipped = gt.clone();
        flipped.0.column_mut(2).neg_mut();
        assert!(frame_3d_error(&flipped, &gt, false).unwrap() < 1e-12);
        assert!(frame_3d_error(&gt, &gt, false).unwrap() < 1e-12);
        let scaled = Shape3D(&gt.0 * 1.1);
        assert!(frame_3d_error(&scaled, &gt, true).unwrap() < 1e-12);
        assert!(frame_3d_error(&scaled, &gt, false).unwrap() > 0.05);
    }

    #[test]
    fn error_rejects_zero_truth() {
        let z = Shape3D(DMatrix::zeros(3, 3));
        assert!(matches!(
            frame_3d_error(&z, &z, false),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn coherence_examples() {
        let ortho = Dictionary::new(DMatrix::identity(4, 3)).unwrap();
        assert_eq!(mutual_coherence(&ortho).unwrap(), 0.0);
        let dup = Dictionary::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0])).unwrap();
        assert_relative_eq!(mutual_coherence(&dup).unwrap(), 1.0, epsilon = 1e-15);
        let zero = Dictionary::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 0.0])).unwrap();
        assert!(matches!(mutual_coherence(&zero), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn noise_ratio_is_exact() {
        let w = Measurement2D::new(DMatrix::from_fn(31, 2, |i, j| {
            (i as f64 * 0.37 + j as f64).sin()
        }))
        .unwrap();
        assert_eq!(noise_perturb(&w, 0.0, 3).unwrap(), w);
        let a = noise_perturb(&w, 0.2, 3).unwrap();
        let b = noise_perturb(&w, 0.2, 4).unwrap();
        assert!(((&a.0 - &w.0).norm() / w.0.norm() - 0.2).abs() < 1e-12);
        assert!(((&b.0 - &w.0).norm() / w.0.norm() - 0.2).abs() < 1e-12);
        assert_ne!(a, b);
        assert!(noise_perturb(&w, -0.1, 3).is_err());
    }

    #[test]
    fn cumulative_curve_is_monotone() {
        let curve = cumulative_error_curve(&[0.1, 0.2, 0.3, 0.05], &[0.0, 0.1, 0.25, 1.0]);
        assert_eq!(
            curve.iter().map(|c| c.1).collect::<Vec<_>>(),
            vec![0.0, 0.5, 0.75, 1.0]
        );
    }
}
