//! End-to-end evaluation: the reports behind each CLI command, computed from
//! in-memory scenes and predictions.
//!
//! Units: angles in degrees, distances in ground-truth scene units, ratios
//! and accuracies as fractions in `[0, 1]`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{icp_refine, IcpConfig};
use crate::geometry::{umeyama_sim3, Pose, Rotation, Sim3};
use crate::losses::{self, grid_normals, LossConfig, ViewPrediction, ViewTarget};
use crate::metrics::{self, Cloud, DepthAlign, MetricMap};
use crate::net::{self, ModelWeights};
use crate::synth::SceneSample;
use crate::{Error, Result};

pub const POSE_THRESHOLDS_DEG: [u32; 3] = [5, 15, 30];
pub const AUC_MAX_DEG: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub n_views: usize,
    pub n_pairs: usize,
    pub rra_5: f64,
    pub rra_15: f64,
    pub rra_30: f64,
    pub rta_5: f64,
    pub rta_15: f64,
    pub rta_30: f64,
    pub auc_30: f64,
    pub ate: f64,
    pub rpe_trans: f64,
    pub rpe_rot_deg: f64,
}

pub fn evaluate_poses(pred: &[Pose], gt: &[Pose]) -> Result<PoseReport> {
    let errors = metrics::pairwise_angular_errors(pred, gt)?;
    let rpe = metrics::rpe(pred, gt)?;
    let [a, b, c] = POSE_THRESHOLDS_DEG.map(f64::from);
    Ok(PoseReport {
        n_views: pred.len(),
        n_pairs: errors.len(),
        rra_5: metrics::rra_at(&errors, a),
        rra_15: metrics::rra_at(&errors, b),
        rra_30: metrics::rra_at(&errors, c),
        rta_5: metrics::rta_at(&errors, a),
        rta_15: metrics::rta_at(&errors, b),
        rta_30: metrics::rta_at(&errors, c),
        auc_30: metrics::auc_at(&errors, AUC_MAX_DEG)?,
        ate: metrics::ate(pred, gt)?,
        rpe_trans: rpe.trans,
        rpe_rot_deg: rpe.rot_deg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub align: DepthAlign,
    /// One alignment for the whole sequence, or one per frame.
    pub per_frame: bool,
    pub n_views: usize,
    pub abs_rel: f64,
    pub delta_125: f64,
    /// Alignment parameters; per-frame runs report the per-frame values.
    pub scales: Vec<f64>,
    pub shifts: Vec<f64>,
}

fn check_counts(preds: &[ViewPrediction], scene: &SceneSample) -> Result<()> {
    if preds.len() != scene.n_views() {
        return Err(Error::LengthMismatch(preds.len(), scene.n_views()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Depth of the predicted pointmaps against ground truth. A sequence-level
/// run pools every frame under one alignment; per-frame metrics are averaged.
pub fn evaluate_depth(preds: &[ViewPrediction], scene: &SceneSample, align: DepthAlign, per_frame: bool) -> Result<DepthReport> {
    check_counts(preds, scene)?;
    let pred_depth: Vec<_> = preds.iter().map(|p| p.pointmap.depth()).collect();
    let gt_depth: Vec<_> = scene.gt_pointmaps.iter().map(|p| p.depth()).collect();
    let (abs_rel, delta_125, scales, shifts) = if per_frame {
        let ms = pred_depth
            .iter()
            .zip(&gt_depth)
            .zip(&scene.valid)
            .map(|((p, g), m)| metrics::depth_metrics(p, g, m, align))
            .collect::<Result<Vec<_>>>()?;
        let abs: Vec<f64> = ms.iter().map(|m| m.abs_rel).collect();
        let del: Vec<f64> = ms.iter().map(|m| m.delta_125).collect();
        (metrics::mean(&abs), metrics::mean(&del), ms.iter().map(|m| m.scale).collect(), ms.iter().map(|m| m.shift).collect())
    } else {
        let (p, mask) = metrics::stack_depths(&pred_depth, &scene.valid)?;
        let (g, _) = metrics::stack_depths(&gt_depth, &scene.valid)?;
        let m = metrics::depth_metrics(&p, &g, &mask, align)?;
        (m.abs_rel, m.delta_125, vec![m.scale], vec![m.shift])
    };
    Ok(DepthReport { align, per_frame, n_views: preds.len(), abs_rel, delta_125, scales, shifts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointsReport {
    pub icp: bool,
    pub n_points: usize,
    /// Similarity applied to the prediction before measuring.
    pub alignment: Sim3,
    /// RMS distance between corresponded points after Umeyama.
    pub umeyama_rmse: f64,
    /// RMS nearest-neighbor distance per ICP iteration, starting at the Umeyama result.
    pub icp_history: Vec<f64>,
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub nc_mean: Option<f64>,
    pub nc_median: Option<f64>,
}

/// World-frame clouds over ground-truth-valid pixels, with grid normals where
/// they exist. Returned clouds are index-aligned (pixel correspondence).
pub fn world_clouds(preds: &[ViewPrediction], scene: &SceneSample) -> Result<(Cloud, Cloud)> {
    check_counts(preds, scene)?;
    let mut pred = Cloud::default();
    let mut gt = Cloud::default();
    for ((p, t), mask) in preds.iter().zip(scene.targets()).zip(&scene.valid) {
        let pred_valid = mask.map(|&b| b);
        let (pn, pn_ok) = grid_normals(&p.pointmap, &pred_valid)?;
        let (gn, gn_ok) = grid_normals(&t.pointmap, mask)?;
        for i in 0..mask.len() {
            if !mask.data[i] || !p.pointmap.data[i].iter().all(|v| v.is_finite()) {
                continue;
            }
            pred.points.push(p.pose.transform_point(&p.pointmap.data[i]));
            pred.normals.push(pn_ok.data[i].then(|| p.pose.rotation.apply(&pn.data[i])));
            gt.points.push(t.pose.transform_point(&t.pointmap.data[i]));
            gt.normals.push(gn_ok.data[i].then(|| t.pose.rotation.apply(&gn.data[i])));
        }
    }
    if pred.points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok((pred, gt))
}

/// Umeyama on pixel correspondences, optional ICP refinement, then Acc/Comp/NC.
pub fn evaluate_points(preds: &[ViewPrediction], scene: &SceneSample, icp: Option<&IcpConfig>) -> Result<PointsReport> {
    let (pred, gt) = world_clouds(preds, scene)?;
    let coarse = umeyama_sim3(&pred.points, &gt.points, true)?;
    let umeyama_rmse = crate::geometry::alignment_rmse(&coarse, &pred.points, &gt.points);
    let (alignment, icp_history) = match icp {
        Some(cfg) => {
            let out = icp_refine(&pred.points, &gt.points, &coarse, cfg)?;
            (out.transform, out.history)
        }
        None => (coarse, Vec::new()),
    };
    let m = metrics::cloud_metrics(&pred.transformed(&alignment), &gt)?;
    Ok(PointsReport {
        icp: icp.is_some(),
        n_points: pred.points.len(),
        alignment,
        umeyama_rmse,
        icp_history,
        acc_mean: m.acc_mean,
        acc_median: m.acc_median,
        comp_mean: m.comp_mean,
        comp_median: m.comp_median,
        nc_mean: m.nc_mean,
        nc_median: m.nc_median,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub n_views: usize,
    pub eigenvalues: [f64; 3],
    pub degenerate: bool,
}

pub fn evaluate_spectrum(poses: &[Pose]) -> Result<SpectrumReport> {
    let s = metrics::pose_spectrum(poses)?;
    Ok(SpectrumReport { n_views: poses.len(), eigenvalues: s.values, degenerate: s.degenerate })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub h: f64,
    pub checked: usize,
    /// Coordinates where a kink lies within `h`, detected from one-sided differences.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Coordinate {
    Point { view: usize, pixel: usize, axis: usize },
    Logit { view: usize, pixel: usize },
    Translation { view: usize, axis: usize },
    Rotation { view: usize, axis: usize },
}

fn nudge(preds: &[ViewPrediction], c: Coordinate, step: f64) -> Vec<ViewPrediction> {
    let mut p = preds.to_vec();
    match c {
        Coordinate::Point { view, pixel, axis } => p[view].pointmap.data[pixel][axis] += step,
        Coordinate::Logit { view, pixel } => p[view].conf_logits.data[pixel] += step,
        Coordinate::Translation { view, axis } => p[view].pose.translation[axis] += step,
        Coordinate::Rotation { view, axis } => {
            let mut w = Vector3::zeros();
            w[axis] = step;
            p[view].pose.rotation = Rotation::from_axis_angle(&w).compose(&p[view].pose.rotation);
        }
    }
    p
}

fn analytic(g: &losses::LossGradients, c: Coordinate) -> f64 {
    match c {
        Coordinate::Point { view, pixel, axis } => g.views[view].pointmap.data[pixel][axis],
        Coordinate::Logit { view, pixel } => g.views[view].conf_logits.data[pixel],
        Coordinate::Translation { view, axis } => g.views[view].translation[axis],
        Coordinate::Rotation { view, axis } => g.views[view].rotation[axis],
    }
}

/// Relative error with a floor on the denominator so that vanishing
/// gradients compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of the total loss (with `s*` frozen) to
/// central differences at `trials` random coordinates. Coordinates whose
/// forward and backward slopes disagree straddle a kink and are skipped.
pub fn gradient_check(preds: &[ViewPrediction], targets: &[ViewTarget], cfg: &LossConfig, trials: usize, h: f64, seed: u64) -> Result<GradcheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h must be positive, got {h}")));
    }
    let g = losses::grad_total_loss_with_margin(preds, targets, cfg, 0.0)?;
    let s = g.s_star;
    let f = |p: &[ViewPrediction]| losses::total_at_scale(p, targets, cfg, s);
    let f0 = f(preds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for _ in 0..trials {
        let view = rng.random_range(0..preds.len());
        let pixels = preds[view].pointmap.len();
        let c = match rng.random_range(0..4) {
            0 => Coordinate::Point { view, pixel: rng.random_range(0..pixels), axis: rng.random_range(0..3) },
            1 => Coordinate::Logit { view, pixel: rng.random_range(0..pixels) },
            2 => Coordinate::Translation { view, axis: rng.random_range(0..3) },
            _ => Coordinate::Rotation { view, axis: rng.random_range(0..3) },
        };
        let fp = f(&nudge(preds, c, h))?;
        let fm = f(&nudge(preds, c, -h))?;
        let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-6) {
            skipped += 1;
            continue;
        }
        checked += 1;
        worst = worst.max(relative_error(analytic(&g, c), (fp - fm) / (2.0 * h)));
    }
    Ok(GradcheckReport { trials, h, checked, skipped, max_rel_error: worst })
}

/// Network outputs as loss/metric predictions.
pub fn net_predictions(out: &net::NetOutput) -> Vec<ViewPrediction> {
    out.poses
        .iter()
        .zip(&out.pointmaps)
        .zip(&out.conf_logits)
        .map(|((pose, pointmap), conf)| ViewPrediction { pointmap: pointmap.clone(), conf_logits: conf.clone(), pose: *pose })
        .collect()
}

/// Every scalar metric of the pose, depth (scale-aligned) and points reports,
/// keyed `pose.*`, `depth.*`, `points.*`.
pub fn scalar_metrics(preds: &[ViewPrediction], scene: &SceneSample) -> Result<MetricMap> {
    let mut m = MetricMap::new();
    let poses: Vec<Pose> = preds.iter().map(|p| p.pose).collect();
    let put = |m: &mut MetricMap, prefix: &str, v: serde_json::Value| {
        if let serde_json::Value::Object(obj) = v {
            for (k, v) in obj {
                if let Some(x) = v.as_f64() {
                    m.insert(format!("{prefix}.{k}"), x);
                }
            }
        }
    };
    put(&mut m, "pose", serde_json::to_value(evaluate_poses(&poses, &scene.gt_poses)?)?);
    let d = evaluate_depth(preds, scene, DepthAlign::Scale, false)?;
    m.insert("depth.abs_rel".into(), d.abs_rel);
    m.insert("depth.delta_125".into(), d.delta_125);
    let p = evaluate_points(preds, scene, None)?;
    for (k, v) in [("acc_mean", p.acc_mean), ("acc_median", p.acc_median), ("comp_mean", p.comp_mean), ("comp_median", p.comp_median)] {
        m.insert(format!("points.{k}"), v);
    }
    if let (Some(a), Some(b)) = (p.nc_mean, p.nc_median) {
        m.insert("points.nc_mean".into(), a);
        m.insert("points.nc_median".into(), b);
    }
    m.remove("pose.n_views");
    m.remove("pose.n_pairs");
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub n_views: usize,
    pub mode: net::Mode,
    /// Population standard deviation of each metric over the `N` reference swaps.
    pub std: MetricMap,
    pub max_std: f64,
}

/// Runs the network `N` times, each time with a different view placed first,
/// evaluates each run in the original view order, and reports per-metric
/// standard deviation.
pub fn evaluate_robustness(scene: &SceneSample, w: &ModelWeights) -> Result<RobustnessReport> {
    let views: Vec<usize> = (0..scene.n_views()).collect();
    let std = metrics::robustness_std(&views, |_, order| {
        let images: Vec<_> = order.iter().map(|&i| scene.images[i].clone()).collect();
        let out = net_predictions(&net::forward(&images, w)?);
        let mut restored = out.clone();
        for (pos, &orig) in order.iter().enumerate() {
            restored[orig] = out[pos].clone();
        }
        scalar_metrics(&restored, scene)
    })?;
    let max_std = std.values().fold(0.0f64, |m, v| m.max(*v));
    Ok(RobustnessReport { n_views: scene.n_views(), mode: w.config.mode, std, max_std })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub mode: net::Mode,
    pub n_views: usize,
    pub trials: usize,
    pub max_rel_deviation: f64,
    pub tolerance: f64,
}

pub const EQUIVARIANCE_TOL: f64 = 1e-5;

pub fn evaluate_equivariance(scene: &SceneSample, w: &ModelWeights, trials: usize) -> Result<EquivarianceReport> {
    Ok(EquivarianceReport {
        mode: w.config.mode,
        n_views: scene.n_views(),
        trials,
        max_rel_deviation: net::check_equivariance(w, &scene.images, trials)?,
        tolerance: EQUIVARIANCE_TOL,
    })
}
