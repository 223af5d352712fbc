//! Scenes, planted-model generation, missing-data injection and the on-disk
//! formats (scene CSV container, checkpoints, history reports).
//!
//! # Scene file
//!
//! UTF-8 text, `\n` line endings. A preamble of `key,value` lines
//! (`nrsfm-scene,1`, `points,P`, `frames,F`, `mode,orthogonal|weak_perspective`)
//! is followed by sections, each introduced by a `[name]` line and a header
//! row:
//!
//! ```text
//! [measurements]   frame,point,u,v,visible          (required, F*P rows)
//! [shapes]         frame,point,x,y,z                (optional, F*P rows)
//! [cameras]        frame,m11,m12,m21,m22,m31,m32,scale,t1,t2   (with shapes, F rows)
//! [normalization]  frame,cx,cy,scale                (optional, F rows)
//! ```
//!
//! Reals are written with 17 significant digits (`{:.16e}`), `visible` is
//! `0` or `1`, and camera rotation entries are row-major.
//!
//! # Checkpoint file
//!
//! A text manifest of `key=value` lines starting with `nrsfm-checkpoint` and
//! `version=1`, listing configuration, counters, history rows and one
//! `tensor=name,rows,cols` line per tensor, terminated by a line `end`.
//! The rest of the file is the concatenation of every tensor in manifest
//! order as little-endian `f64`, column-major.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3x2, Vector2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{
    noise_perturb_with, normalize_bbox, project, random_camera_with, BboxTransform, CameraWeak,
    Measurement2D, ProjectionMode, Shape3D, VisibilityMask,
};
use crate::network::{ModelParams, NetworkMode};
use crate::sparse::Activation;
use crate::training::{OptimizerState, TrainConfig, TrainHistory, TrainState, HISTORY_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub measurement: Measurement2D,
    pub mask: VisibilityMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    pub shape: Shape3D,
    pub camera: CameraWeak,
}

/// A set of frames with a common point count.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: usize,
    pub mode: ProjectionMode,
    pub frames: Vec<Frame>,
    pub truth: Option<Vec<FrameTruth>>,
    /// Present when `frames` hold normalized coordinates.
    pub normalization: Option<Vec<BboxTransform>>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = |m: String| Err(Error::DimensionMismatch(m));
        for (i, f) in self.frames.iter().enumerate() {
            if f.measurement.0.shape() != (self.points, 2) || f.mask.len() != self.points {
                return dim(format!("frame {i} does not have {} points", self.points));
            }
            if f.mask.visible_count() == 0 {
                return Err(Error::InvalidArgument(format!(
                    "frame {i} has no visible point"
                )));
            }
        }
        if let Some(t) = &self.truth {
            if t.len() != self.frames.len() {
                return dim(format!(
                    "{} ground-truth frames for {} frames",
                    t.len(),
                    self.frames.len()
                ));
            }
            if let Some(i) = t.iter().position(|g| g.shape.0.shape() != (self.points, 3)) {
                return dim(format!(
                    "ground-truth shape {i} does not have {} points",
                    self.points
                ));
            }
        }
        if let Some(n) = &self.normalization {
            if n.len() != self.frames.len() {
                return dim(format!(
                    "{} normalization records for {} frames",
                    n.len(),
                    self.frames.len()
                ));
            }
        }
        Ok(())
    }

    /// Bounding-box normalized copy with the transforms recorded.
    pub fn normalized(&self) -> Result<Scene> {
        if self.normalization.is_some() {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        let mut records = Vec::with_capacity(self.frames.len());
        for f in &mut out.frames {
            let (w, t) = normalize_bbox(&f.measurement, &f.mask)?;
            f.measurement = w;
            records.push(t);
        }
        out.normalization = Some(records);
        Ok(out)
    }

    /// Ground-truth shapes, if present.
    pub fn truth_shapes(&self) -> Option<Vec<Shape3D>> {
        self.truth
            .as_ref()
            .map(|t| t.iter().map(|g| g.shape.clone()).collect())
    }

    /// Copy with every point marked visible again.
    pub fn unhidden(&self) -> Scene {
        let mut out = self.clone();
        for f in &mut out.frames {
            f.mask = VisibilityMask::all_visible(self.points);
        }
        out
    }
}

/// Parameters of a synthetic scene drawn from the hierarchical sparse model.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub points: usize,
    pub frames: usize,
    /// `K_1 .. K_N`.
    pub widths: Vec<usize>,
    /// Per layer: entry `N-1` is the support size of `psi_N`; entry `i < N-1`
    /// is the number of nonzeros in each column of `D_{i+2}`, i.e. how many
    /// layer-`i+1` atoms one layer-`i+2` atom activates.
    pub sparsity: Vec<usize>,
    pub mode: ProjectionMode,
    pub noise_ratio: f64,
    /// 0 for full visibility.
    pub max_missing: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            points: 31,
            frames: 2000,
            widths: vec![32, 8],
            sparsity: vec![4, 2],
            mode: ProjectionMode::Orthogonal,
            noise_ratio: 0.0,
            max_missing: 0,
            seed: 0,
        }
    }
}

impl PlantedSpec {
    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.points < 3 || self.frames == 0 || self.widths.is_empty() {
            return fail("planted scene needs P >= 3, F >= 1 and at least one layer".into());
        }
        if self.sparsity.len() != self.widths.len() {
            return fail(format!(
                "{} sparsity entries for {} layers",
                self.sparsity.len(),
                self.widths.len()
            ));
        }
        for (i, (&s, &k)) in self.sparsity.iter().zip(&self.widths).enumerate() {
            if s == 0 || s > k {
                return fail(format!("layer {} sparsity {s} outside 1..={k}", i + 1));
            }
        }
        if !(self.noise_ratio >= 0.0) {
            return fail("noise ratio must be non-negative".into());
        }
        if self.max_missing >= self.points {
            return fail(format!(
                "max missing {} must be below P = {}",
                self.max_missing, self.points
            ));
        }
        Ok(())
    }
}

/// A planted scene together with what generated it.
#[derive(Debug, Clone)]
pub struct Planted {
    pub scene: Scene,
    /// Generating dictionaries (zero thresholds, ReLU, standard mode).
    pub params: ModelParams,
    /// `psi_N` per frame.
    pub codes: Vec<DVector<f64>>,
}

/// Expands `psi_N` through the dictionary chain to a `P x 3` shape.
pub fn expand_code(params: &ModelParams, code: &DVector<f64>) -> Shape3D {
    let mut c = code.clone();
    for d in params.dictionaries.iter().rev() {
        c = d * c;
    }
    let s = params.first_dictionary().0 * c;
    Shape3D(DMatrix::from_fn(params.points(), 3, |p, a| s[3 * p + a]))
}

/// Samples a scene from the hierarchical sparse model: centered unit-norm
/// shape atoms, non-negative sparse deeper dictionaries, non-negative sparse
/// codes with magnitudes in `[0.5, 1.5]`, one random camera per frame.
pub fn synth_planted(spec: &PlantedSpec) -> Result<Planted> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.points;
    let n = spec.layers();

    let mut first = DMatrix::from_fn(p, 3 * spec.widths[0], |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    for mut col in first.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    for k in 0..spec.widths[0] {
        let mut atom = first.columns_mut(3 * k, 3);
        let norm = atom.norm();
        atom /= norm;
    }
    let mut dictionaries = Vec::with_capacity(n - 1);
    for i in 1..n {
        let (rows, cols) = (spec.widths[i - 1], spec.widths[i]);
        let mut d = DMatrix::zeros(rows, cols);
        for j in 0..cols {
            for r in sample(&mut rng, rows, spec.sparsity[i - 1]).into_iter() {
                d[(r, j)] = rng.random_range(0.2..1.0);
            }
            let mut c = d.column_mut(j);
            let norm = c.norm();
            c /= norm;
        }
        dictionaries.push(d);
    }
    let params = ModelParams::new(NetworkMode::Standard, Activation::Relu, first, dictionaries)?;

    let k_n = spec.widths[n - 1];
    let mut frames = Vec::with_capacity(spec.frames);
    let mut truth = Vec::with_capacity(spec.frames);
    let mut codes = Vec::with_capacity(spec.frames);
    for _ in 0..spec.frames {
        let mut code = DVector::zeros(k_n);
        for k in sample(&mut rng, k_n, spec.sparsity[n - 1]).into_iter() {
            code[k] = rng.random_range(0.5..=1.5);
        }
        let shape = expand_code(&params, &code);
        let camera = random_camera_with(&mut rng, spec.mode);
        let mut w = project(&shape, &camera, spec.mode)?;
        if spec.noise_ratio > 0.0 {
            w = noise_perturb_with(&w, spec.noise_ratio, &mut rng)?;
        }
        frames.push(Frame {
            measurement: w,
            mask: VisibilityMask::all_visible(p),
        });
        truth.push(FrameTruth { shape, camera });
        codes.push(code);
    }
    let mut scene = Scene {
        points: p,
        mode: spec.mode,
        frames,
        truth: Some(truth),
        normalization: None,
    };
    if spec.max_missing > 0 {
        scene = make_missing(&scene, spec.max_missing, spec.seed.wrapping_add(1))?;
    }
    Ok(Planted {
        scene,
        params,
        codes,
    })
}

/// Hides `m ~ U{1..max_missing}` distinct points per frame. Coordinates are
/// kept so that restoring the mask restores the scene; they are zeroed when
/// frames are normalized for the network.
pub fn make_missing(scene: &Scene, max_missing: usize, seed: u64) -> Result<Scene> {
    if max_missing == 0 || max_missing >= scene.points {
        return Err(Error::InvalidArgument(format!(
            "max missing must be in 1..{}, got {max_missing}",
            scene.points
        )));
    }
    if scene.normalization.is_some() {
        return Err(Error::InvalidArgument(
            "hide points before normalizing the scene".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    for f in &mut out.frames {
        let m = rng.random_range(1..=max_missing);
        let mut visible = vec![true; scene.points];
        for i in sample(&mut rng, scene.points, m).into_iter() {
            visible[i] = false;
        }
        f.mask = VisibilityMask(visible);
    }
    Ok(out)
}

const SCENE_MAGIC: &str = "nrsfm-scene";
const SCENE_VERSION: u32 = 1;

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serializes a scene in the text container format.
pub fn scene_to_string(scene: &Scene) -> Result<String> {
    scene.validate()?;
    let mut s = String::new();
    let _ = writeln!(s, "{SCENE_MAGIC},{SCENE_VERSION}");
    let _ = writeln!(s, "points,{}", scene.points);
    let _ = writeln!(s, "frames,{}", scene.frames.len());
    let _ = writeln!(s, "mode,{}", scene.mode.name());
    s.push_str("[measurements]\nframe,point,u,v,visible\n");
    for (f, fr) in scene.frames.iter().enumerate() {
        for p in 0..scene.points {
            let _ = writeln!(
                s,
                "{f},{p},{},{},{}",
                fmt_f(fr.measurement.0[(p, 0)]),
                fmt_f(fr.measurement.0[(p, 1)]),
                u8::from(fr.mask.is_visible(p))
            );
        }
    }
    if let Some(truth) = &scene.truth {
        s.push_str("[shapes]\nframe,point,x,y,z\n");
        for (f, t) in truth.iter().enumerate() {
            for p in 0..scene.points {
                let r = t.shape.0.row(p);
                let _ = writeln!(s, "{f},{p},{},{},{}", fmt_f(r[0]), fmt_f(r[1]), fmt_f(r[2]));
            }
        }
        s.push_str("[cameras]\nframe,m11,m12,m21,m22,m31,m32,scale,t1,t2\n");
        for (f, t) in truth.iter().enumerate() {
            let m = &t.camera.rotation;
            let _ = write!(s, "{f}");
            for a in 0..3 {
                for c in 0..2 {
                    let _ = write!(s, ",{}", fmt_f(m[(a, c)]));
                }
            }
            let tr = &t.camera.translation;
            let _ = writeln!(
                s,
                ",{},{},{}",
                fmt_f(t.camera.scale),
                fmt_f(tr[0]),
                fmt_f(tr[1])
            );
        }
    }
    if let Some(norm) = &scene.normalization {
        s.push_str("[normalization]\nframe,cx,cy,scale\n");
        for (f, t) in norm.iter().enumerate() {
            let _ = writeln!(
                s,
                "{f},{},{},{}",
                fmt_f(t.centroid[0]),
                fmt_f(t.centroid[1]),
                fmt_f(t.scale)
            );
        }
    }
    Ok(s)
}

/// Writes to a temporary sibling and renames, so a failed write leaves no
/// partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.partial",
        path.extension().and_then(|e| e.to_str()).unwrap_or("tmp")
    ));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), scene_to_string(scene)?.as_bytes())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    parse_scene(&fs::read_to_string(path)?)
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate().peekable(),
            last: 0,
        }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        let (i, l) = self.inner.next()?;
        self.last = i + 1;
        Some((i + 1, l))
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.next().ok_or_else(|| Error::Parse {
            line: self.last + 1,
            message: format!("unexpected end of file, expected {what}"),
        })
    }

    fn peek_section(&mut self) -> Option<&'a str> {
        self.inner
            .peek()
            .and_then(|(_, l)| l.strip_prefix('[').and_then(|r| r.strip_suffix(']')))
    }
}

fn perr<T>(line: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        line,
        message: message.into(),
    })
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.trim()
        .parse()
        .or_else(|_| perr(line, format!("expected an integer, found `{s}`")))
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse()
        .or_else(|_| perr(line, format!("expected a number, found `{s}`")))
}

fn key_value<'a>(lines: &mut Lines<'a>, key: &str) -> Result<(usize, &'a str)> {
    let (n, l) = lines.expect(key)?;
    match l.split_once(',') {
        Some((k, v)) if k == key => Ok((n, v)),
        _ => perr(n, format!("expected `{key},...`")),
    }
}

fn section_rows<'a>(
    lines: &mut Lines<'a>,
    header: &str,
    count: usize,
    fields: usize,
) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let (n, h) = lines.expect("section header row")?;
    if h != header {
        return perr(n, format!("expected header `{header}`"));
    }
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, l) = lines.expect("data row")?;
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != fields {
            return perr(n, format!("expected {fields} fields, found {}", f.len()));
        }
        rows.push((n, f));
    }
    Ok(rows)
}

fn frame_point(f: &[&str], n: usize, frames: usize, points: usize) -> Result<(usize, usize)> {
    let (fi, pi) = (parse_usize(f[0], n)?, parse_usize(f[1], n)?);
    if fi >= frames || pi >= points {
        return perr(n, format!("frame/point index ({fi}, {pi}) out of range"));
    }
    Ok((fi, pi))
}

pub fn parse_scene(text: &str) -> Result<Scene> {
    let mut lines = Lines::new(text);
    let (n, version) = key_value(&mut lines, SCENE_MAGIC)?;
    if parse_usize(version, n)? != SCENE_VERSION as usize {
        return perr(n, format!("unsupported scene version `{version}`"));
    }
    let (n, v) = key_value(&mut lines, "points")?;
    let points = parse_usize(v, n)?;
    let (n, v) = key_value(&mut lines, "frames")?;
    let frames = parse_usize(v, n)?;
    let (n, v) = key_value(&mut lines, "mode")?;
    let mode = ProjectionMode::parse(v).or_else(|e| perr(n, e.to_string()))?;
    if points == 0 {
        return perr(n, "scene needs at least one point");
    }

    let mut measurements: Option<Vec<Frame>> = None;
    let mut shapes: Option<Vec<Shape3D>> = None;
    let mut cameras: Option<Vec<CameraWeak>> = None;
    let mut normalization: Option<Vec<BboxTransform>> = None;

    while let Some((n, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let name = match line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            Some(name) => name,
            None => return perr(n, format!("expected a section, found `{line}`")),
        };
        match name {
            "measurements" => {
                let rows = section_rows(&mut lines, "frame,point,u,v,visible", frames * points, 5)?;
                let mut w = vec![DMatrix::from_element(points, 2, f64::NAN); frames];
                let mut vis = vec![vec![None; points]; frames];
                for (n, f) in rows {
                    let (fi, pi) = frame_point(&f, n, frames, points)?;
                    if vis[fi][pi].is_some() {
                        return perr(n, format!("duplicate row for frame {fi} point {pi}"));
                    }
                    w[fi][(pi, 0)] = parse_f64(f[2], n)?;
                    w[fi][(pi, 1)] = parse_f64(f[3], n)?;
                    vis[fi][pi] = Some(match f[4].trim() {
                        "1" => true,
                        "0" => false,
                        other => {
                            return perr(n, format!("visible must be 0 or 1, found `{other}`"))
                        }
                    });
                }
                measurements = Some(
                    w.into_iter()
                        .zip(vis)
                        .map(|(m, v)| Frame {
                            measurement: Measurement2D(m),
                            mask: VisibilityMask(
                                v.into_iter().map(|x| x.unwrap_or(false)).collect(),
                            ),
                        })
                        .collect(),
                );
            }
            "shapes" => {
                let rows = section_rows(&mut lines, "frame,point,x,y,z", frames * points, 5)?;
                let mut s = vec![DMatrix::from_element(points, 3, f64::NAN); frames];
                let mut seen = vec![false; frames * points];
                for (n, f) in rows {
                    let (fi, pi) = frame_point(&f, n, frames, points)?;
                    if std::mem::replace(&mut seen[fi * points + pi], true) {
                        return perr(n, format!("duplicate row for frame {fi} point {pi}"));
                    }
                    for a in 0..3 {
                        s[fi][(pi, a)] = parse_f64(f[2 + a], n)?;
                    }
                }
                shapes = Some(s.into_iter().map(Shape3D).collect());
            }
            "cameras" => {
                let rows = section_rows(
                    &mut lines,
                    "frame,m11,m12,m21,m22,m31,m32,scale,t1,t2",
                    frames,
                    10,
                )?;
                let mut cams = vec![None; frames];
                for (n, f) in rows {
                    let fi = parse_usize(f[0], n)?;
                    if fi >= frames || cams[fi].is_some() {
                        return perr(n, format!("bad or duplicate camera frame {fi}"));
                    }
                    let mut v = [0.0; 9];
                    for (i, x) in v.iter_mut().enumerate() {
                        *x = parse_f64(f[1 + i], n)?;
                    }
                    cams[fi] = Some(CameraWeak {
                        rotation: Matrix3x2::new(v[0], v[1], v[2], v[3], v[4], v[5]),
                        scale: v[6],
                        translation: Vector2::new(v[7], v[8]),
                    });
                }
                cameras = Some(
                    cams.into_iter()
                        .map(|c| c.expect("all rows present"))
                        .collect(),
                );
            }
            "normalization" => {
                let rows = section_rows(&mut lines, "frame,cx,cy,scale", frames, 4)?;
                let mut recs = vec![None; frames];
                for (n, f) in rows {
                    let fi = parse_usize(f[0], n)?;
                    if fi >= frames || recs[fi].is_some() {
                        return perr(n, format!("bad or duplicate normalization frame {fi}"));
                    }
                    recs[fi] = Some(BboxTransform {
                        centroid: Vector2::new(parse_f64(f[1], n)?, parse_f64(f[2], n)?),
                        scale: parse_f64(f[3], n)?,
                    });
                }
                normalization = Some(
                    recs.into_iter()
                        .map(|r| r.expect("all rows present"))
                        .collect(),
                );
            }
            other => return perr(n, format!("unknown section `{other}`")),
        }
        let _ = lines.peek_section();
    }
    let end = lines.last + 1;
    let frames_v = match measurements {
        Some(m) => m,
        None => return perr(end, "missing [measurements] section"),
    };
    let truth = match (shapes, cameras) {
        (Some(s), Some(c)) => Some(
            s.into_iter()
                .zip(c)
                .map(|(shape, camera)| FrameTruth { shape, camera })
                .collect(),
        ),
        (None, None) => None,
        _ => return perr(end, "[shapes] and [cameras] must appear together"),
    };
    let scene = Scene {
        points,
        mode,
        frames: frames_v,
        truth,
        normalization,
    };
    scene.validate()?;
    Ok(scene)
}

const CHECKPOINT_MAGIC: &str = "nrsfm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or reuse a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    /// Wraps bare parameters (fresh optimizer, empty history).
    pub fn from_params(config: TrainConfig, params: ModelParams) -> Self {
        Checkpoint {
            config,
            state: TrainState::new(params),
        }
    }
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let p = &ck.state.params;
    let mut m = String::new();
    let _ = writeln!(m, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(m, "version={CHECKPOINT_VERSION}");
    let _ = writeln!(m, "points={}", p.points());
    let _ = writeln!(m, "model.mode={}", p.mode.name());
    let _ = writeln!(m, "model.activation={}", p.activation.name());
    let widths: Vec<String> = p.widths().iter().map(|w| w.to_string()).collect();
    let _ = writeln!(m, "model.widths={}", widths.join(","));
    for (k, v) in ck.config.entries() {
        let _ = writeln!(m, "config.{k}={v}");
    }
    let _ = writeln!(m, "state.step={}", ck.state.optimizer.step);
    let _ = writeln!(m, "state.skipped={}", ck.state.skipped);
    let _ = writeln!(m, "state.visits={}", ck.state.visits);
    for row in ck.state.history.csv_rows() {
        let _ = writeln!(m, "history={row}");
    }
    let groups = [
        ("param", p),
        ("adam_m", &ck.state.optimizer.first_moment),
        ("adam_v", &ck.state.optimizer.second_moment),
    ];
    for (prefix, t) in groups {
        for (name, (r, c), _) in t.tensors() {
            let _ = writeln!(m, "tensor={prefix}/{name},{r},{c}");
        }
    }
    m.push_str("end\n");
    let mut bytes = m.into_bytes();
    for (_, t) in groups {
        for (_, _, data) in t.tensors() {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    bytes
}

pub fn save_params(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_to_bytes(ck))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let marker = b"\nend\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|i| i + marker.len())
        .ok_or_else(|| Error::Parse {
            line: 0,
            message: "checkpoint manifest has no `end` line".into(),
        })?;
    let manifest = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Parse {
        line: 0,
        message: "checkpoint manifest is not UTF-8".into(),
    })?;
    let mut blob = &bytes[split..];

    let mut lines = manifest.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == CHECKPOINT_MAGIC => {}
        _ => return perr(1, "not a checkpoint file"),
    }
    let mut config = TrainConfig::default();
    let mut points = None;
    let mut mode = None;
    let mut activation = None;
    let mut widths: Option<Vec<usize>> = None;
    let mut history = TrainHistory::default();
    let mut tensors: Vec<(String, usize, usize)> = Vec::new();
    let (mut step, mut skipped, mut visits) = (0u64, 0u64, 0u64);
    let mut version_seen = false;
    for (n, line) in lines {
        if line == "end" {
            break;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n,
            message: format!("expected key=value, found `{line}`"),
        })?;
        let int = |v: &str| {
            v.parse::<u64>()
                .or_else(|_| perr(n, format!("bad integer `{v}`")))
        };
        match key {
            "version" => {
                if value != CHECKPOINT_VERSION.to_string() {
                    return Err(Error::Version {
                        found: value.to_string(),
                        expected: CHECKPOINT_VERSION,
                    });
                }
                version_seen = true;
            }
            "points" => points = Some(int(value)? as usize),
            "model.mode" => {
                mode = Some(NetworkMode::parse(value).or_else(|e| perr(n, e.to_string()))?)
            }
            "model.activation" => {
                activation = Some(Activation::parse(value).or_else(|e| perr(n, e.to_string()))?)
            }
            "model.widths" => {
                widths = Some(
                    value
                        .split(',')
                        .map(|w| parse_usize(w, n))
                        .collect::<Result<_>>()?,
                );
            }
            "state.step" => step = int(value)?,
            "state.skipped" => skipped = int(value)?,
            "state.visits" => visits = int(value)?,
            "history" => history.records.push(TrainHistory::parse_row(value, n)?),
            "tensor" => {
                let f: Vec<&str> = value.split(',').collect();
                if f.len() != 3 {
                    return perr(n, "tensor line needs name,rows,cols");
                }
                tensors.push((
                    f[0].to_string(),
                    parse_usize(f[1], n)?,
                    parse_usize(f[2], n)?,
                ));
            }
            k if k.starts_with("config.") => config
                .set(&k["config.".len()..], value)
                .or_else(|e| perr(n, e.to_string()))?,
            other => return perr(n, format!("unknown manifest key `{other}`")),
        }
    }
    if !version_seen {
        return Err(Error::Version {
            found: "missing".into(),
            expected: CHECKPOINT_VERSION,
        });
    }
    let (points, mode, activation, widths) = match (points, mode, activation, widths) {
        (Some(p), Some(m), Some(a), Some(w)) if !w.is_empty() => (p, m, a, w),
        _ => return perr(0, "checkpoint manifest lacks model shape metadata"),
    };
    let first = DMatrix::zeros(points, 3 * widths[0]);
    let dicts = widths
        .windows(2)
        .map(|w| DMatrix::zeros(w[0], w[1]))
        .collect();
    let template = ModelParams::new(mode, activation, first, dicts)
        .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    let mut groups = [template.clone(), template.clone(), template];
    let expected: Vec<(String, usize, usize)> = ["param", "adam_m", "adam_v"]
        .iter()
        .flat_map(|prefix| {
            groups[0]
                .tensors()
                .into_iter()
                .map(move |(name, (r, c), _)| (format!("{prefix}/{name}"), r, c))
        })
        .collect();
    if tensors != expected {
        return Err(Error::CheckpointMismatch(
            "tensor list does not match the declared model shape".into(),
        ));
    }
    for g in groups.iter_mut() {
        for (_, data) in g.tensors_mut() {
            let need = data.len() * 8;
            if blob.len() < need {
                return Err(Error::CheckpointMismatch("tensor data is truncated".into()));
            }
            for (i, v) in data.iter_mut().enumerate() {
                *v = f64::from_le_bytes(blob[8 * i..8 * i + 8].try_into().expect("8 bytes"));
            }
            blob = &blob[need..];
        }
    }
    if !blob.is_empty() {
        return Err(Error::CheckpointMismatch(format!(
            "{} trailing bytes",
            blob.len()
        )));
    }
    let [params, m, v] = groups;
    params.validate()?;
    Ok(Checkpoint {
        config,
        state: TrainState {
            params,
            optimizer: OptimizerState {
                first_moment: m,
                second_moment: v,
                step,
            },
            history,
            skipped,
            visits,
        },
    })
}

/// History report: `# key=value` config echo, header row, one row per record.
pub fn history_to_string(config: &TrainConfig, history: &TrainHistory) -> String {
    let mut s = String::new();
    for (k, v) in config.entries() {
        let _ = writeln!(s, "# {k}={v}");
    }
    let _ = writeln!(s, "{HISTORY_HEADER}");
    for row in history.csv_rows() {
        let _ = writeln!(s, "{row}");
    }
    s
}

pub fn save_history(
    config: &TrainConfig,
    history: &TrainHistory,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_atomic(path.as_ref(), history_to_string(config, history).as_bytes())
}

pub fn load_history(path: impl AsRef<Path>) -> Result<TrainHistory> {
    let text = fs::read_to_string(path)?;
    let mut history = TrainHistory::default();
    let mut header = false;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header {
            if line != HISTORY_HEADER {
                return perr(i + 1, "unexpected history header");
            }
            header = true;
            continue;
        }
        history.records.push(TrainHistory::parse_row(line, i + 1)?);
    }
    Ok(history)
}
