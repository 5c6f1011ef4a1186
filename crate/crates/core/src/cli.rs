//! Command-line front end. Every command is a thin wrapper over [`crate::eval`],
//! [`crate::synth`], [`crate::net`] and [`crate::io`].
//!
//! Exit codes: 0 success, 2 input error, 3 degenerate computation, 4 failed
//! property check.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::alignment::IcpConfig;
use crate::eval::{self, EQUIVARIANCE_TOL};
use crate::io::{self, TOOL_VERSION};
use crate::losses::{self, LossConfig};
use crate::metrics::DepthAlign;
use crate::net::{self, Mode, ModelWeights, NetConfig};
use crate::synth::{self, PerturbSpec, SceneSpec};
use crate::{Error, Result};

/// Gradient checks fail above this relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "equiview", version, about = "Reference-free multi-view geometry: synthesis, inference, losses and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "equivariant")]
    pub mode: Mode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Content-ordered global attention (bitwise-reproducible across view orders).
    #[arg(long)]
    pub deterministic: bool,
    /// NetConfig JSON; `--mode`, `--seed` and `--deterministic` override it.
    #[arg(long)]
    pub net_config: Option<PathBuf>,
    /// Weights saved by `init-model`; overrides every other model option.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene with analytic ground truth.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fabricate predictions from ground truth with controlled noise.
    Perturb {
        #[arg(long)]
        scene: PathBuf,
        /// PerturbSpec JSON; defaults to no noise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write freshly initialized model weights.
    InitModel {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the network on a scene's images.
    Infer {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Training losses of a prediction against a scene.
    Loss {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// LossConfig JSON; defaults if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic loss gradients with central differences.
    Gradcheck {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure how far the network is from permutation equivariance.
    Equivariance {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// RRA/RTA at 5/15/30 degrees, AUC@30, ATE and RPE.
    EvalPose {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Abs Rel and delta < 1.25 after depth alignment.
    EvalDepth {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "scale")]
        align: DepthAlign,
        /// Align and score each frame separately, then average.
        #[arg(long)]
        per_frame: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy, completion and normal consistency after Sim(3) alignment.
    EvalPoints {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Refine the alignment with ICP.
        #[arg(long)]
        icp: bool,
        #[arg(long, default_value_t = 50)]
        icp_iterations: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-metric standard deviation over reference-view swaps.
    Robustness {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Only `all` is supported.
        #[arg(long, default_value = "all")]
        metric: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalized eigenvalues of the camera-center covariance.
    Spectrum {
        /// A prediction or scene file.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Builds the report document: the body's fields plus `report` and `tool_version`.
pub fn report_json<T: Serialize>(name: &str, body: &T) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(body)?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("report".into(), name.into());
            obj.insert("tool_version".into(), TOOL_VERSION.into());
        }
        None => return Err(Error::InvalidConfig(format!("report {name} is not an object"))),
    }
    Ok(v)
}

fn emit<T: Serialize>(name: &str, body: &T, out: Option<&Path>) -> Result<()> {
    let bytes = io::to_json_pretty(&report_json(name, body)?)?;
    match out {
        Some(p) => std::fs::write(p, bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes)?;
        }
    }
    Ok(())
}

/// Resolves model options to weights.
pub fn load_model(args: &ModelArgs) -> Result<ModelWeights> {
    if let Some(path) = &args.weights {
        return io::load_weights(path);
    }
    let mut cfg: NetConfig = match &args.net_config {
        Some(path) => read_json(path)?,
        None => NetConfig::default(),
    };
    cfg.mode = args.mode;
    cfg.seed = args.seed;
    cfg.deterministic = cfg.deterministic || args.deterministic;
    net::init_model(&cfg)
}

fn loss_config(path: Option<&PathBuf>) -> Result<LossConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => LossConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct LossDocument {
    config: LossConfig,
    #[serde(flatten)]
    report: losses::LossReport,
}

#[derive(Serialize)]
struct GradcheckDocument {
    #[serde(flatten)]
    report: eval::GradcheckReport,
    tolerance: f64,
    passed: bool,
}

fn execute(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Synth { spec, out, seed } => {
            let mut spec: SceneSpec = read_json(spec)?;
            if let Some(s) = seed {
                spec.seed = *s;
            }
            let sample = synth::generate(&spec)?;
            io::save_scene(out, &sample, serde_json::to_value(&spec)?, spec.seed)?;
        }
        Command::Perturb { scene, spec, seed, out } => {
            let (sample, _) = io::load_scene(scene)?;
            let p: PerturbSpec = match spec {
                Some(path) => read_json(path)?,
                None => PerturbSpec::default(),
            };
            p.validate()?;
            let preds = synth::perturb(&sample, &p, *seed);
            io::save_prediction(out, &preds, serde_json::json!({ "perturb": p }), *seed)?;
        }
        Command::InitModel { model, out } => {
            io::save_weights(out, &load_model(model)?)?;
        }
        Command::Infer { scene, model, out } => {
            let (sample, _) = io::load_scene(scene)?;
            let w = load_model(model)?;
            let preds = eval::net_predictions(&net::forward(&sample.images, &w)?);
            io::save_prediction(out, &preds, serde_json::json!({ "net": w.config }), w.config.seed)?;
        }
        Command::Loss { scene, pred, config, out } => {
            let (sample, _) = io::load_scene(scene)?;
            let (preds, _) = io::load_prediction(pred)?;
            let cfg = loss_config(config.as_ref())?;
            let report = losses::total_loss(&preds, &sample.targets(), &cfg)?;
            emit("loss", &LossDocument { config: cfg, report }, out.as_deref())?;
        }
        Command::Gradcheck { scene, pred, trials, h, config, seed, out } => {
            let (sample, _) = io::load_scene(scene)?;
            let (preds, _) = io::load_prediction(pred)?;
            let cfg = loss_config(config.as_ref())?;
            let report = eval::gradient_check(&preds, &sample.targets(), &cfg, *trials, *h, *seed)?;
            let passed = report.max_rel_error < GRADCHECK_TOL;
            emit("gradcheck", &GradcheckDocument { report, tolerance: GRADCHECK_TOL, passed }, out.as_deref())?;
            if !passed {
                return Ok(4);
            }
        }
        Command::Equivariance { scene, model, trials, out } => {
            let (sample, _) = io::load_scene(scene)?;
            let w = load_model(model)?;
            let report = eval::evaluate_equivariance(&sample, &w, *trials)?;
            emit("equivariance", &report, out.as_deref())?;
            if w.config.mode == Mode::Equivariant && !(report.max_rel_deviation < EQUIVARIANCE_TOL) {
                return Ok(4);
            }
        }
        Command::EvalPose { pred, gt, out } => {
            let poses = load_poses(pred)?;
            let (sample, _) = io::load_scene(gt)?;
            emit("pose", &eval::evaluate_poses(&poses, &sample.gt_poses)?, out.as_deref())?;
        }
        Command::EvalDepth { pred, gt, align, per_frame, out } => {
            let preds = load_predictions_or_scene(pred)?;
            let (sample, _) = io::load_scene(gt)?;
            emit("depth", &eval::evaluate_depth(&preds, &sample, *align, *per_frame)?, out.as_deref())?;
        }
        Command::EvalPoints { pred, gt, icp, icp_iterations, out } => {
            let preds = load_predictions_or_scene(pred)?;
            let (sample, _) = io::load_scene(gt)?;
            let cfg = IcpConfig::new(*icp_iterations, IcpConfig::default().convergence_tol(), None)?;
            let report = eval::evaluate_points(&preds, &sample, icp.then_some(&cfg))?;
            emit("points", &report, out.as_deref())?;
        }
        Command::Robustness { scene, model, metric, out } => {
            if metric != "all" {
                return Err(Error::InvalidConfig(format!("unsupported metric selection `{metric}`; use `all`")));
            }
            let (sample, _) = io::load_scene(scene)?;
            let w = load_model(model)?;
            emit("robustness", &eval::evaluate_robustness(&sample, &w)?, out.as_deref())?;
        }
        Command::Spectrum { pred, out } => {
            emit("spectrum", &eval::evaluate_spectrum(&load_poses(pred)?)?, out.as_deref())?;
        }
    }
    Ok(0)
}

/// Predictions from a prediction file, or a scene's ground truth posing as one.
pub fn load_predictions_or_scene(path: &Path) -> Result<Vec<losses::ViewPrediction>> {
    let manifest: io::Manifest = read_json(&io::manifest_path(path))?;
    match manifest.kind {
        io::ManifestKind::Scene => Ok(io::load_scene(path)?.0.as_predictions()),
        _ => Ok(io::load_prediction(path)?.0),
    }
}

fn load_poses(path: &Path) -> Result<Vec<crate::Pose>> {
    Ok(load_predictions_or_scene(path)?.into_iter().map(|p| p.pose).collect())
}
