//! `nrsfm`: generate planted scenes, train, reconstruct and evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nrsfm::data::{
    history_to_string, load_params, load_scene, save_params, save_scene, synth_planted,
    write_atomic, Checkpoint, FrameTruth, PlantedSpec, Scene,
};
use nrsfm::geometry::{
    cumulative_error_curve, mutual_coherence, per_frame_3d_errors, ProjectionMode,
};
use nrsfm::network::NetworkMode;
use nrsfm::training::{reconstruct, train_with, HistoryRecord, TrainConfig, TrainState};

#[derive(Parser)]
#[command(
    name = "nrsfm",
    version,
    about = "Deep non-rigid structure from motion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a scene from a random hierarchical sparse model.
    Generate(GenerateArgs),
    /// Train a network on a scene.
    Train(TrainArgs),
    /// Run a trained network on every frame of a scene.
    Reconstruct(ReconstructArgs),
    /// Compare estimated shapes against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene file to write.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint holding the generating dictionaries [default: <out>.truth.ckpt].
    #[arg(long)]
    truth_params: Option<PathBuf>,
    #[arg(long, default_value_t = 31)]
    points: usize,
    #[arg(long, default_value_t = 2000)]
    frames: usize,
    /// `orthogonal` or `weak_perspective`.
    #[arg(long, default_value = "orthogonal")]
    mode: String,
    /// Layer widths K_1..K_N.
    #[arg(long, value_delimiter = ',', default_value = "32,8")]
    widths: Vec<usize>,
    /// Nonzeros per column of D_2..D_N, then the support size of the code.
    #[arg(long, value_delimiter = ',', default_value = "4,2")]
    sparsity: Vec<usize>,
    /// Per-frame noise ratio ||N|| / ||W||.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Hide between 1 and this many points per frame (0 keeps all visible).
    #[arg(long, default_value_t = 0)]
    max_missing: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// History report to write [default: <out>.history.csv].
    #[arg(long)]
    history: Option<PathBuf>,
    /// `key=value` configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    k_first: Option<usize>,
    #[arg(long)]
    k_last: Option<usize>,
    /// `relu` or `soft`.
    #[arg(long)]
    activation: Option<String>,
    /// `standard` (3x2 blocks) or `translation` (4x2 blocks).
    #[arg(long)]
    network_mode: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    decay_steps: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene file receiving the estimated shapes and cameras.
    #[arg(long)]
    out: PathBuf,
    /// Accepted for uniformity; inference is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Scene file with estimated shapes.
    #[arg(long)]
    estimates: PathBuf,
    /// Scene file with ground-truth shapes.
    #[arg(long)]
    truth: PathBuf,
    /// Write `threshold,fraction` pairs here.
    #[arg(long)]
    cumulative: Option<PathBuf>,
    /// Upper end of the cumulative curve (raised to the largest error).
    #[arg(long, default_value_t = 1.0)]
    max_threshold: f64,
    #[arg(long, default_value_t = 100)]
    bins: usize,
    /// Also report the coherence of this checkpoint's last dictionary.
    #[arg(long)]
    coherence: Option<PathBuf>,
    /// Decimal places in the report.
    #[arg(long, default_value_t = 6)]
    precision: usize,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Removes the listed files unless disarmed.
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn track(&mut self, p: &Path) {
        self.0.push(p.to_path_buf());
    }

    fn commit(mut self) {
        self.0.clear();
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        for p in &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let spec = PlantedSpec {
        points: a.points,
        frames: a.frames,
        widths: a.widths.clone(),
        sparsity: a.sparsity.clone(),
        mode: ProjectionMode::parse(&a.mode)?,
        noise_ratio: a.noise,
        max_missing: a.max_missing,
        seed: a.seed,
    };
    let planted = synth_planted(&spec)?;
    let truth_path = a
        .truth_params
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".truth.ckpt"));
    let widths = planted.params.widths();
    let config = TrainConfig {
        layers: widths.len(),
        k_first: widths[0],
        k_last: *widths.last().unwrap(),
        seed: a.seed,
        ..TrainConfig::default()
    };

    let mut outputs = Outputs(Vec::new());
    outputs.track(&a.out);
    save_scene(&planted.scene, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    outputs.track(&truth_path);
    save_params(
        &Checkpoint::from_params(config, planted.params),
        &truth_path,
    )
    .with_context(|| format!("writing {}", truth_path.display()))?;
    outputs.commit();
    println!(
        "wrote {} ({} frames, {} points) and {}",
        a.out.display(),
        planted.scene.len(),
        planted.scene.points,
        truth_path.display()
    );
    Ok(())
}

/// Parses `key=value` lines; `#` starts a comment.
fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", path.display(), i + 1);
        };
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(entries)
}

fn flag_overrides(a: &TrainArgs) -> Vec<(&'static str, String)> {
    let mut v = Vec::new();
    let mut put = |k: &'static str, val: Option<String>| {
        if let Some(val) = val {
            v.push((k, val));
        }
    };
    put("layers", a.layers.map(|x| x.to_string()));
    put("k_first", a.k_first.map(|x| x.to_string()));
    put("k_last", a.k_last.map(|x| x.to_string()));
    put("activation", a.activation.clone());
    put("mode", a.network_mode.clone());
    put("batch_size", a.batch_size.map(|x| x.to_string()));
    put("total_steps", a.steps.map(|x| x.to_string()));
    put("base_learning_rate", a.learning_rate.map(|x| x.to_string()));
    put("decay_factor", a.decay_factor.map(|x| x.to_string()));
    put("decay_steps", a.decay_steps.map(|x| x.to_string()));
    put("eval_interval", a.eval_interval.map(|x| x.to_string()));
    put("seed", a.seed.map(|x| x.to_string()));
    v
}

fn train(a: &TrainArgs) -> Result<()> {
    let scene = load_scene(&a.scene).with_context(|| format!("loading {}", a.scene.display()))?;
    let mut config = TrainConfig::default();
    let mut provenance = String::new();
    if let Some(path) = &a.config {
        provenance.push_str(&format!("# config_file={}\n", path.display()));
        for (k, v) in read_config_file(path)? {
            config
                .set(&k, &v)
                .with_context(|| format!("in {}", path.display()))?;
            provenance.push_str(&format!("# file.{k}={v}\n"));
        }
    }
    for (k, v) in flag_overrides(a) {
        config.set(k, &v)?;
        provenance.push_str(&format!("# flag.{k}={v}\n"));
    }
    config.validate()?;
    if config.mode == NetworkMode::Translation && scene.mode != ProjectionMode::WeakPerspective {
        bail!("translation mode needs a weak_perspective scene");
    }

    let resume = match &a.resume {
        Some(path) => {
            let ck = load_params(path).with_context(|| format!("loading {}", path.display()))?;
            let p = &ck.state.params;
            if p.widths() != config.widths()
                || p.mode != config.mode
                || p.activation != config.activation
            {
                bail!(
                    "checkpoint {} does not match the configured architecture",
                    path.display()
                );
            }
            Some(ck.state)
        }
        None => None,
    };

    let quiet = a.quiet;
    let mut progress = |r: &HistoryRecord| {
        if quiet {
            return;
        }
        let err = r
            .error_3d
            .map(|e| format!("  error {e:.6}"))
            .unwrap_or_default();
        println!(
            "step {:>7}  lr {:.3e}  loss {:.6}  coherence {:.4}{err}  skipped {}",
            r.step, r.learning_rate, r.mean_loss, r.coherence, r.skipped
        );
    };
    let state: TrainState = train_with(&scene, &config, resume, &mut progress)?;

    let history_path = a
        .history
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".history.csv"));
    let mut outputs = Outputs(Vec::new());
    outputs.track(&a.out);
    let ck = Checkpoint {
        config: config.clone(),
        state,
    };
    save_params(&ck, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    outputs.track(&history_path);
    let report = provenance + &history_to_string(&config, &ck.state.history);
    write_atomic(&history_path, report.as_bytes())
        .with_context(|| format!("writing {}", history_path.display()))?;
    outputs.commit();
    Ok(())
}

fn reconstruct_cmd(a: &ReconstructArgs) -> Result<()> {
    let scene = load_scene(&a.scene).with_context(|| format!("loading {}", a.scene.display()))?;
    let ck = load_params(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let estimates = reconstruct(&scene, &ck.state.params)?;
    let out = Scene {
        truth: Some(
            estimates
                .into_iter()
                .map(|(shape, camera)| FrameTruth { shape, camera })
                .collect(),
        ),
        ..scene
    };
    save_scene(&out, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let est =
        load_scene(&a.estimates).with_context(|| format!("loading {}", a.estimates.display()))?;
    let gt = load_scene(&a.truth).with_context(|| format!("loading {}", a.truth.display()))?;
    let (Some(e), Some(t)) = (est.truth_shapes(), gt.truth_shapes()) else {
        bail!("both files need a [shapes] section");
    };
    if e.len() != t.len() || est.points != gt.points {
        bail!(
            "estimates have {} frames of {} points, ground truth {} frames of {} points",
            e.len(),
            est.points,
            t.len(),
            gt.points
        );
    }
    let errors = per_frame_3d_errors(&e, &t, gt.mode == ProjectionMode::WeakPerspective)?;
    let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    let p = a.precision;
    println!("metric,value");
    println!("frames,{}", errors.len());
    println!("normalized_mean_3d_error,{mean:.p$}");

    let mut outputs = Outputs(Vec::new());
    if let Some(path) = &a.coherence {
        let ck = load_params(path).with_context(|| format!("loading {}", path.display()))?;
        let c = mutual_coherence(&ck.state.params.last_dictionary())?;
        println!("coherence,{c:.p$}");
    }
    if let Some(path) = &a.cumulative {
        let bins = a.bins.max(1);
        let top = errors.iter().cloned().fold(a.max_threshold, f64::max);
        let thresholds: Vec<f64> = (0..=bins).map(|i| top * i as f64 / bins as f64).collect();
        let mut text = String::from("threshold,fraction\n");
        for (th, frac) in cumulative_error_curve(&errors, &thresholds) {
            text.push_str(&format!("{th:.16e},{frac:.16e}\n"));
        }
        outputs.track(path);
        write_atomic(path, text.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    outputs.commit();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
