//! Training objective: scale-absorbed point loss, grid-normal loss,
//! confidence BCE, relative-camera loss and their weighted total, with
//! analytic gradients.
//!
//! One scene scale `s*` (the weighted-median solution of the depth-weighted
//! L1 problem) is shared by every term. Gradients treat `s*` as a constant.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::alignment::{solve_scale_weighted_l1, ScaleProblem};
use crate::geometry::{geodesic_angle, relative_pose, Pose};
use crate::grid::{check_shape, ConfidenceMap, Grid, Mask, PointMap};
use crate::{Error, Result};

/// Smallest cross-product norm that still defines a normal.
const MIN_NORMAL_NORM: f64 = 1e-12;
/// Residuals this small are treated as sitting exactly on a kink's minimum
/// (sub-gradient zero) rather than next to it.
const KINK_ZERO: f64 = 1e-12;
/// Angles this small are treated as exactly zero by the gradient.
const ANGLE_ZERO: f64 = 1e-7;
/// Default distance to non-smooth loci required by [`grad_total_loss`].
pub const SMOOTHNESS_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPrediction {
    pub pointmap: PointMap,
    pub conf_logits: ConfidenceMap,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewTarget {
    pub pointmap: PointMap,
    pub valid: Mask,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Translation weight inside the camera loss.
    pub lambda_trans: f64,
    pub lambda_normal: f64,
    pub lambda_conf: f64,
    pub lambda_cam: f64,
    pub huber_delta: f64,
    pub conf_epsilon: f64,
    /// Reduce per-view and per-pair partial sums in sorted order, making every
    /// reported value bitwise independent of view order.
    pub fixed_order: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_trans: 1.0,
            lambda_normal: 1.0,
            lambda_conf: 0.1,
            lambda_cam: 1.0,
            huber_delta: 1.0,
            conf_epsilon: 0.05,
            fixed_order: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lambda_trans", self.lambda_trans), ("huber_delta", self.huber_delta), ("conf_epsilon", self.conf_epsilon)];
        let non_negative = [("lambda_normal", self.lambda_normal), ("lambda_conf", self.lambda_conf), ("lambda_cam", self.lambda_cam)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Same weights with every auxiliary term switched off.
    pub fn points_only(&self) -> Self {
        Self { lambda_normal: 0.0, lambda_conf: 0.0, lambda_cam: 0.0, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub points: f64,
    pub normal: f64,
    pub conf: f64,
    pub cam_rot: f64,
    pub cam_trans: f64,
    pub s_star: f64,
}

/// Weighted total of the component values.
pub fn combine(cfg: &LossConfig, points: f64, normal: f64, conf: f64, rot: f64, trans: f64) -> f64 {
    points + cfg.lambda_normal * normal + cfg.lambda_conf * conf + cfg.lambda_cam * (rot + cfg.lambda_trans * trans)
}

fn reduce(mut parts: Vec<f64>, fixed_order: bool) -> f64 {
    if fixed_order {
        parts.sort_by(f64::total_cmp);
    }
    parts.into_iter().sum()
}

fn check_views(preds: &[ViewPrediction], targets: &[ViewTarget]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::TooFewViews { needed: 1, got: 0 });
    }
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch(preds.len(), targets.len()));
    }
    for (p, t) in preds.iter().zip(targets) {
        check_shape(&p.pointmap, &t.pointmap, "pred/gt pointmap")?;
        check_shape(&p.pointmap, &p.conf_logits, "pointmap/confidence")?;
        check_shape(&t.pointmap, &t.valid, "pointmap/mask")?;
    }
    Ok(())
}

/// Pixels that take part in the point and confidence terms.
fn pixel_valid(t: &ViewTarget, p: &ViewPrediction, i: usize) -> bool {
    let x = &t.pointmap.data[i];
    t.valid.data[i] && x.iter().all(|c| c.is_finite()) && x.z > 0.0 && p.pointmap.data[i].iter().all(|c| c.is_finite())
}

/// The pooled depth-weighted L1 scale problem over every valid pixel.
pub fn scene_scale_problem(preds: &[ViewPrediction], targets: &[ViewTarget]) -> Result<ScaleProblem> {
    check_views(preds, targets)?;
    let mut problem = ScaleProblem { pred: Vec::new(), gt: Vec::new(), weight: Vec::new() };
    for (p, t) in preds.iter().zip(targets) {
        for i in 0..t.valid.len() {
            if !pixel_valid(t, p, i) {
                continue;
            }
            let (a, b) = (&p.pointmap.data[i], &t.pointmap.data[i]);
            let w = 1.0 / b.z;
            for c in 0..3 {
                problem.pred.push(a[c]);
                problem.gt.push(b[c]);
                problem.weight.push(w);
            }
        }
    }
    Ok(problem)
}

pub fn solve_scene_scale(preds: &[ViewPrediction], targets: &[ViewTarget]) -> Result<f64> {
    solve_scale_weighted_l1(&scene_scale_problem(preds, targets)?)
}

fn points_at_scale(preds: &[ViewPrediction], targets: &[ViewTarget], s: f64, fixed_order: bool) -> Result<f64> {
    let mut parts = Vec::with_capacity(preds.len());
    let mut count = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        let mut sum = 0.0;
        for i in 0..t.valid.len() {
            if !pixel_valid(t, p, i) {
                continue;
            }
            let (a, b) = (&p.pointmap.data[i], &t.pointmap.data[i]);
            sum += (a * s - b).abs().sum() / b.z;
            count += 1;
        }
        parts.push(sum);
    }
    if count == 0 {
        return Err(Error::NoValidPairs("no valid pixels".into()));
    }
    Ok(reduce(parts, fixed_order) / count as f64)
}

/// Depth-weighted L1 point loss with the scene scale absorbed. Returns `(value, s*)`.
pub fn loss_points(preds: &[ViewPrediction], targets: &[ViewTarget]) -> Result<(f64, f64)> {
    let s = solve_scene_scale(preds, targets)?;
    Ok((points_at_scale(preds, targets, s, true)?, s))
}

/// Stencil of one normal: the pixels whose difference gives the u and v tangents.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    u_plus: usize,
    u_minus: usize,
    v_plus: usize,
    v_minus: usize,
}

fn stencil(height: usize, width: usize, v: usize, u: usize) -> Stencil {
    let (u_minus, u_plus) = if u == 0 { (0, 1) } else if u + 1 == width { (u - 1, u) } else { (u - 1, u + 1) };
    let (v_minus, v_plus) = if v == 0 { (0, 1) } else if v + 1 == height { (v - 1, v) } else { (v - 1, v + 1) };
    Stencil {
        u_plus: v * width + u_plus,
        u_minus: v * width + u_minus,
        v_plus: v_plus * width + u,
        v_minus: v_minus * width + u,
    }
}

/// Unnormalized normal `d_u × d_v` and the tangents it came from.
fn raw_normal(pm: &PointMap, st: &Stencil) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let du = pm.data[st.u_plus] - pm.data[st.u_minus];
    let dv = pm.data[st.v_plus] - pm.data[st.v_minus];
    (du.cross(&dv), du, dv)
}

/// Unit normals from central differences on the pixel grid (one-sided at
/// borders). A pixel is valid only when it and its whole stencil are valid
/// and the cross product is not degenerate.
pub fn grid_normals(pm: &PointMap, valid: &Mask) -> Result<(Grid<Vector3<f64>>, Mask)> {
    check_shape(pm, valid, "pointmap/mask")?;
    let (h, w) = (pm.height, pm.width);
    if h < 2 || w < 2 {
        return Err(Error::ShapeTooSmall { height: h, width: w });
    }
    let ok = |i: usize| valid.data[i] && pm.data[i].iter().all(|c| c.is_finite());
    let mut normals = Grid::filled(h, w, Vector3::zeros());
    let mut mask = Mask::filled(h, w, false);
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let st = stencil(h, w, v, u);
            if !(ok(i) && ok(st.u_plus) && ok(st.u_minus) && ok(st.v_plus) && ok(st.v_minus)) {
                continue;
            }
            let (c, _, _) = raw_normal(pm, &st);
            let norm = c.norm();
            if norm < MIN_NORMAL_NORM {
                continue;
            }
            normals.data[i] = c / norm;
            mask.data[i] = true;
        }
    }
    Ok((normals, mask))
}

/// Angle between two unit vectors, stable at both ends.
fn unit_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

struct NormalPair {
    pred: Grid<Vector3<f64>>,
    gt: Grid<Vector3<f64>>,
    joint: Mask,
}

fn normal_pairs(preds: &[ViewPrediction], targets: &[ViewTarget]) -> Result<Vec<NormalPair>> {
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let (gt, gt_mask) = grid_normals(&t.pointmap, &t.valid)?;
            let (pred, pred_mask) = grid_normals(&p.pointmap, &t.valid)?;
            let joint = Mask { height: gt_mask.height, width: gt_mask.width, data: gt_mask.data.iter().zip(&pred_mask.data).map(|(a, b)| *a && *b).collect() };
            Ok(NormalPair { pred, gt, joint })
        })
        .collect()
}

fn normal_from_pairs(pairs: &[NormalPair], fixed_order: bool) -> Result<f64> {
    let mut parts = Vec::with_capacity(pairs.len());
    let mut count = 0usize;
    for np in pairs {
        let mut sum = 0.0;
        for i in 0..np.joint.len() {
            if np.joint.data[i] {
                sum += unit_angle(&np.pred.data[i], &np.gt.data[i]);
                count += 1;
            }
        }
        parts.push(sum);
    }
    if count == 0 {
        return Err(Error::NoValidPairs("no jointly valid normals".into()));
    }
    Ok(reduce(parts, fixed_order) / count as f64)
}

/// Mean angle between predicted and ground-truth grid normals over jointly valid pixels.
///
/// The angle is `arccos(n̂·n)` evaluated as `atan2(|n̂×n|, n̂·n)`.
pub fn loss_normal(preds: &[ViewPrediction], targets: &[ViewTarget]) -> Result<f64> {
    check_views(preds, targets)?;
    normal_from_pairs(&normal_pairs(preds, targets)?, true)
}

fn pixel_error(p: &ViewPrediction, t: &ViewTarget, i: usize, s: f64) -> f64 {
    let b = &t.pointmap.data[i];
    (p.pointmap.data[i] * s - b).abs().sum() / b.z
}

/// Binary confidence targets: 1 where the scaled per-pixel L1 error is strictly below `epsilon`.
pub fn conf_targets(preds: &[ViewPrediction], targets: &[ViewTarget], s_star: f64, epsilon: f64) -> Vec<Mask> {
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| Mask {
            height: t.valid.height,
            width: t.valid.width,
            data: (0..t.valid.len()).map(|i| pixel_valid(t, p, i) && pixel_error(p, t, i, s_star) < epsilon).collect(),
        })
        .collect()
}

/// Numerically stable binary cross-entropy on a logit.
#[inline]
pub fn bce_with_logit(logit: f64, target: bool) -> f64 {
    let t = if target { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * t + (-logit.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conf_value(logits: &[&ConfidenceMap], labels: &[Mask], valid: &[Mask], fixed_order: bool) -> Result<f64> {
    let mut parts = Vec::with_capacity(logits.len());
    let mut count = 0usize;
    for ((l, t), m) in logits.iter().zip(labels).zip(valid) {
        check_shape(*l, t, "logits/targets")?;
        check_shape(*l, m, "logits/mask")?;
        let mut sum = 0.0;
        for i in 0..l.len() {
            if m.data[i] {
                sum += bce_with_logit(l.data[i], t.data[i]);
                count += 1;
            }
        }
        parts.push(sum);
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(reduce(parts, fixed_order) / count as f64)
}

/// Mean BCE over valid pixels of every view.
pub fn loss_conf(logits: &[ConfidenceMap], targets: &[Mask], valid: &[Mask]) -> Result<f64> {
    if logits.len() != targets.len() || logits.len() != valid.len() {
        return Err(Error::LengthMismatch(logits.len(), targets.len()));
    }
    let refs: Vec<&ConfidenceMap> = logits.iter().collect();
    conf_value(&refs, targets, valid, true)
}

fn loss_mask(preds: &[ViewPrediction], targets: &[ViewTarget]) -> Vec<Mask> {
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| Mask { height: t.valid.height, width: t.valid.width, data: (0..t.valid.len()).map(|i| pixel_valid(t, p, i)).collect() })
        .collect()
}

/// `H_δ(r)`: quadratic up to `δ`, linear beyond.
#[inline]
pub fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

fn cam_terms(pred: &[Pose], gt: &[Pose], s: f64, delta: f64) -> Vec<(f64, f64)> {
    let n = pred.len();
    let mut out = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let rg = relative_pose(&gt[i], &gt[j]);
            let rp = relative_pose(&pred[i], &pred[j]);
            let rot = geodesic_angle(&rg.rotation, &rp.rotation);
            let trans = huber((rp.translation * s - rg.translation).norm(), delta);
            out.push((rot, trans));
        }
    }
    out
}

fn cam_value(pred: &[Pose], gt: &[Pose], s: f64, delta: f64, fixed_order: bool) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() < 2 {
        return Err(Error::TooFewViews { needed: 2, got: pred.len() });
    }
    let terms = cam_terms(pred, gt, s, delta);
    let pairs = terms.len() as f64;
    let rot = reduce(terms.iter().map(|t| t.0).collect(), fixed_order) / pairs;
    let trans = reduce(terms.iter().map(|t| t.1).collect(), fixed_order) / pairs;
    Ok((rot, trans))
}

/// Relative-camera loss over all ordered pairs `i ≠ j`: returns the rotation
/// and the Huber translation components, each averaged over `N(N−1)` pairs.
pub fn loss_cam(pred_poses: &[Pose], gt_poses: &[Pose], s_star: f64, cfg: &LossConfig) -> Result<(f64, f64)> {
    if !(s_star > 0.0) {
        return Err(Error::DegenerateInput(format!("s_star must be positive, got {s_star}")));
    }
    cam_value(pred_poses, gt_poses, s_star, cfg.huber_delta, cfg.fixed_order)
}

/// All components evaluated at a given scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Components {
    pub points: f64,
    pub normal: f64,
    pub conf: f64,
    pub rot: f64,
    pub trans: f64,
}

/// Every loss component at a fixed scale `s` (confidence targets included).
pub fn components_at_scale(preds: &[ViewPrediction], targets: &[ViewTarget], cfg: &LossConfig, s: f64) -> Result<Components> {
    check_views(preds, targets)?;
    let points = points_at_scale(preds, targets, s, cfg.fixed_order)?;
    let normal = normal_from_pairs(&normal_pairs(preds, targets)?, cfg.fixed_order)?;
    let labels = conf_targets(preds, targets, s, cfg.conf_epsilon);
    let logits: Vec<&ConfidenceMap> = preds.iter().map(|p| &p.conf_logits).collect();
    let conf = conf_value(&logits, &labels, &loss_mask(preds, targets), cfg.fixed_order)?;
    let pred_poses: Vec<Pose> = preds.iter().map(|p| p.pose).collect();
    let gt_poses: Vec<Pose> = targets.iter().map(|t| t.pose).collect();
    let (rot, trans) = cam_value(&pred_poses, &gt_poses, s, cfg.huber_delta, cfg.fixed_order)?;
    Ok(Components { points, normal, conf, rot, trans })
}

/// Weighted total at a fixed scale; the objective that [`grad_total_loss`] differentiates.
pub fn total_at_scale(preds: &[ViewPrediction], targets: &[ViewTarget], cfg: &LossConfig, s: f64) -> Result<f64> {
    let c = components_at_scale(preds, targets, cfg, s)?;
    Ok(combine(cfg, c.points, c.normal, c.conf, c.rot, c.trans))
}

pub fn total_loss(preds: &[ViewPrediction], targets: &[ViewTarget], cfg: &LossConfig) -> Result<LossReport> {
    cfg.validate()?;
    let s = solve_scene_scale(preds, targets)?;
    let c = components_at_scale(preds, targets, cfg, s)?;
    Ok(LossReport {
        total: combine(cfg, c.points, c.normal, c.conf, c.rot, c.trans),
        points: c.points,
        normal: c.normal,
        conf: c.conf,
        cam_rot: c.rot,
        cam_trans: c.trans,
        s_star: s,
    })
}

/// Gradient of the total loss for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGradient {
    pub pointmap: Grid<Vector3<f64>>,
    pub conf_logits: Grid<f64>,
    pub translation: Vector3<f64>,
    /// With respect to `ω` in `R ↦ exp([ω]×)·R`, at `ω = 0`.
    pub rotation: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub views: Vec<ViewGradient>,
    pub s_star: f64,
}

impl LossGradients {
    pub fn max_abs(&self) -> f64 {
        self.views
            .iter()
            .flat_map(|v| {
                v.pointmap
                    .data
                    .iter()
                    .flat_map(|p| p.iter().copied())
                    .chain(v.conf_logits.data.iter().copied())
                    .chain(v.translation.iter().copied())
                    .chain(v.rotation.iter().copied())
            })
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `v` with `tr(M·[ω]×) = ω·v`.
fn trace_skew_vector(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(1, 2)] - m[(2, 1)], m[(2, 0)] - m[(0, 2)], m[(0, 1)] - m[(1, 0)])
}

fn non_smooth(what: String) -> Error {
    Error::NonSmoothPoint(what)
}

/// Analytic gradient of the total loss, with `s*` frozen at its solved value.
pub fn grad_total_loss(preds: &[ViewPrediction], targets: &[ViewTarget], cfg: &LossConfig) -> Result<LossGradients> {
    grad_total_loss_with_margin(preds, targets, cfg, SMOOTHNESS_MARGIN)
}

/// As [`grad_total_loss`], rejecting evaluation points within `margin` of any
/// kink: L1 residuals, normal and rotation angles near 0 or π, the Huber
/// knee, and the confidence threshold. Residuals that sit exactly on a kink's
/// minimum take the zero sub-gradient.
pub fn grad_total_loss_with_margin(preds: &[ViewPrediction], targets: &[ViewTarget], cfg: &LossConfig, margin: f64) -> Result<LossGradients> {
    cfg.validate()?;
    check_views(preds, targets)?;
    let s = solve_scene_scale(preds, targets)?;
    let n_views = preds.len();
    let mut grads: Vec<ViewGradient> = preds
        .iter()
        .map(|p| ViewGradient {
            pointmap: Grid::filled(p.pointmap.height, p.pointmap.width, Vector3::zeros()),
            conf_logits: Grid::filled(p.pointmap.height, p.pointmap.width, 0.0),
            translation: Vector3::zeros(),
            rotation: Vector3::zeros(),
        })
        .collect();

    // Point term and confidence term share the valid-pixel count.
    let count: usize = preds.iter().zip(targets).map(|(p, t)| (0..t.valid.len()).filter(|&i| pixel_valid(t, p, i)).count()).sum();
    if count == 0 {
        return Err(Error::NoValidPairs("no valid pixels".into()));
    }
    let inv_count = 1.0 / count as f64;
    for (k, (p, t)) in preds.iter().zip(targets).enumerate() {
        for i in 0..t.valid.len() {
            if !pixel_valid(t, p, i) {
                continue;
            }
            let (a, b) = (&p.pointmap.data[i], &t.pointmap.data[i]);
            let inv_z = 1.0 / b.z;
            let mut g = Vector3::zeros();
            for c in 0..3 {
                let r = s * a[c] - b[c];
                if r.abs() <= KINK_ZERO * (1.0 + b[c].abs()) {
                    continue;
                }
                if r.abs() < margin {
                    return Err(non_smooth(format!("view {k} pixel {i}: L1 residual {r:e}")));
                }
                g[c] = s * r.signum() * inv_z * inv_count;
            }
            grads[k].pointmap.data[i] += g;

            if cfg.lambda_conf > 0.0 {
                let err = pixel_error(p, t, i, s);
                if (err - cfg.conf_epsilon).abs() < margin {
                    return Err(non_smooth(format!("view {k} pixel {i}: confidence error at threshold")));
                }
                let label = if err < cfg.conf_epsilon { 1.0 } else { 0.0 };
                grads[k].conf_logits.data[i] = cfg.lambda_conf * (sigmoid(p.conf_logits.data[i]) - label) * inv_count;
            }
        }
    }

    if cfg.lambda_normal > 0.0 {
        let pairs = normal_pairs(preds, targets)?;
        let joint_count: usize = pairs.iter().map(|np| np.joint.count()).sum();
        if joint_count == 0 {
            return Err(Error::NoValidPairs("no jointly valid normals".into()));
        }
        let weight = cfg.lambda_normal / joint_count as f64;
        for (k, (np, p)) in pairs.iter().zip(preds).enumerate() {
            let (h, w) = (p.pointmap.height, p.pointmap.width);
            for i in 0..np.joint.len() {
                if !np.joint.data[i] {
                    continue;
                }
                let (nh, ng) = (&np.pred.data[i], &np.gt.data[i]);
                let theta = unit_angle(nh, ng);
                if theta < ANGLE_ZERO {
                    continue;
                }
                if 1.0 - nh.dot(ng).abs() < margin {
                    return Err(non_smooth(format!("view {k} pixel {i}: normal angle {theta:e} near 0 or pi")));
                }
                let st = stencil(h, w, i / w, i % w);
                let (c, du, dv) = raw_normal(&p.pointmap, &st);
                let g_n = -(ng - nh * nh.dot(ng)) / theta.sin();
                let g_c = (g_n - nh * nh.dot(&g_n)) / c.norm() * weight;
                let g_du = dv.cross(&g_c);
                let g_dv = g_c.cross(&du);
                let pg = &mut grads[k].pointmap.data;
                pg[st.u_plus] += g_du;
                pg[st.u_minus] -= g_du;
                pg[st.v_plus] += g_dv;
                pg[st.v_minus] -= g_dv;
            }
        }
    }

    if cfg.lambda_cam > 0.0 {
        if n_views < 2 {
            return Err(Error::TooFewViews { needed: 2, got: n_views });
        }
        let weight = cfg.lambda_cam / (n_views * (n_views - 1)) as f64;
        for i in 0..n_views {
            for j in 0..n_views {
                if i == j {
                    continue;
                }
                let (gi, gj) = (&targets[i].pose, &targets[j].pose);
                let (pi, pj) = (&preds[i].pose, &preds[j].pose);
                let rg = relative_pose(gi, gj);
                let rp = relative_pose(pi, pj);

                let cos_arg = ((rg.rotation.matrix().transpose() * rp.rotation.matrix()).trace() - 1.0) * 0.5;
                let theta = geodesic_angle(&rg.rotation, &rp.rotation);
                if theta >= ANGLE_ZERO {
                    if 1.0 - cos_arg.abs() < margin {
                        return Err(non_smooth(format!("pair ({i},{j}): rotation angle {theta:e} near 0 or pi")));
                    }
                    // θ = arccos((tr(Aᵀ R̂iᵀ R̂j) − 1)/2); left perturbations of R̂j and R̂i
                    // change the trace by ±tr(M[ω]×) with M = R̂j Aᵀ R̂iᵀ.
                    let m = pj.rotation.matrix() * rg.rotation.matrix().transpose() * pi.rotation.matrix().transpose();
                    let v = trace_skew_vector(&m) * (-0.5 / theta.sin()) * weight;
                    grads[j].rotation += v;
                    grads[i].rotation -= v;
                }

                let e = rp.translation * s - rg.translation;
                let r = e.norm();
                if (r - cfg.huber_delta).abs() < margin {
                    return Err(non_smooth(format!("pair ({i},{j}): Huber residual at the knee")));
                }
                let g_e = if r <= cfg.huber_delta { e } else if r > 0.0 { e * (cfg.huber_delta / r) } else { Vector3::zeros() };
                let g_e = g_e * (cfg.lambda_trans * weight);
                // t̂_rel = R̂iᵀ (t̂j − t̂i)
                let world = pi.rotation.apply(&g_e) * s;
                grads[j].translation += world;
                grads[i].translation -= world;
                let d = pj.translation - pi.translation;
                grads[i].rotation -= d.cross(&world);
            }
        }
    }

    Ok(LossGradients { views: grads, s_star: s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(h: usize, w: usize, z: f64) -> PointMap {
        PointMap::from_fn(h, w, |v, u| Vector3::new(u as f64, v as f64, z))
    }

    fn view(pm: PointMap, pose: Pose) -> (ViewPrediction, ViewTarget) {
        let (h, w) = (pm.height, pm.width);
        (
            ViewPrediction { pointmap: pm.clone(), conf_logits: Grid::filled(h, w, 50.0), pose },
            ViewTarget { pointmap: pm, valid: Mask::filled(h, w, true), pose },
        )
    }

    #[test]
    fn plane_normals_point_along_z() {
        let pm = plane(5, 6, 5.0);
        let (n, m) = grid_normals(&pm, &Mask::filled(5, 6, true)).unwrap();
        assert_eq!(m.count(), 30);
        for v in &n.data {
            assert!((v.z.abs() - 1.0).abs() < 1e-15 && v.x == 0.0 && v.y == 0.0);
        }
    }

    #[test]
    fn normals_reject_thin_grids_and_invalid_neighbors() {
        let pm = plane(1, 6, 1.0);
        assert!(matches!(grid_normals(&pm, &Mask::filled(1, 6, true)), Err(Error::ShapeTooSmall { .. })));
        let pm = plane(4, 4, 1.0);
        let mut mask = Mask::filled(4, 4, true);
        *mask.get_mut(1, 1) = false;
        let (_, m) = grid_normals(&pm, &mask).unwrap();
        assert!(!m.get(1, 1) && !*m.get(0, 1) && !*m.get(1, 2) && *m.get(3, 3));
    }

    #[test]
    fn sphere_normals_match_radial_direction() {
        // Ray-cast a radius-2 sphere at the origin from a camera at z = -6.
        let n = 64;
        let f = 60.0;
        let c = (n as f64 - 1.0) / 2.0;
        let mut mask = Mask::filled(n, n, false);
        let pm = PointMap::from_fn(n, n, |v, u| {
            let d = Vector3::new((u as f64 - c) / f, (v as f64 - c) / f, 1.0);
            let o = Vector3::new(0.0, 0.0, -6.0);
            let (a, b, cc) = (d.dot(&d), 2.0 * o.dot(&d), o.dot(&o) - 4.0);
            let disc = b * b - 4.0 * a * cc;
            if disc <= 0.0 {
                return Vector3::repeat(f64::NAN);
            }
            *mask.get_mut(v, u) = true;
            o + d * ((-b - disc.sqrt()) / (2.0 * a))
        });
        let (normals, valid) = grid_normals(&pm, &mask).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..pm.len() {
            if valid.data[i] {
                let radial = pm.data[i].normalize();
                total += normals.data[i].dot(&radial).abs().min(1.0).acos();
                count += 1;
            }
        }
        assert!(count > 1000);
        assert!((total / count as f64).to_degrees() < 1.0);
    }

    #[test]
    fn points_loss_examples() {
        let (p, t) = view(plane(3, 3, 2.0), Pose::identity());
        assert_eq!(loss_points(std::slice::from_ref(&p), std::slice::from_ref(&t)).unwrap(), (0.0, 1.0));
        let scaled = ViewPrediction { pointmap: p.pointmap.scaled(3.0), ..p };
        let (value, s) = loss_points(&[scaled], &[t]).unwrap();
        assert!(value < 1e-15 && (s - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn points_loss_hand_sized_views_match_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..2 {
            let gt = PointMap::from_fn(2, 2, |v, u| Vector3::new(u as f64 - 0.5, v as f64 - 0.5, 2.0 + u as f64));
            let pred = gt.map(|x| (x + Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2))) * 1.7);
            let (mut p, t) = view(gt, Pose::identity());
            p.pointmap = pred;
            preds.push(p);
            targets.push(t);
        }
        let (value, s) = loss_points(&preds, &targets).unwrap();
        let direct = |s: f64| {
            let mut sum = 0.0;
            for (p, t) in preds.iter().zip(&targets) {
                for (a, b) in p.pointmap.data.iter().zip(&t.pointmap.data) {
                    for c in 0..3 {
                        sum += (s * a[c] - b[c]).abs() / b.z;
                    }
                }
            }
            sum / 8.0
        };
        let grid_best = (0..200_000).map(|k| 0.3 + k as f64 * 1e-5).map(direct).fold(f64::INFINITY, f64::min);
        assert!((value - direct(s)).abs() < 1e-12);
        assert!(value <= grid_best + 1e-12);
    }

    #[test]
    fn normal_loss_examples() {
        let (p, t) = view(plane(4, 4, 3.0), Pose::identity());
        assert_eq!(loss_normal(std::slice::from_ref(&p), std::slice::from_ref(&t)).unwrap(), 0.0);
        // Rotate the plane about the x-axis by 90 degrees: normal z -> -y or y.
        let r = Rotation::about_x(std::f64::consts::FRAC_PI_2);
        let tilted = ViewPrediction { pointmap: p.pointmap.map(|x| r.apply(x)), ..p };
        let v = loss_normal(&[tilted], &[t]).unwrap();
        assert!((v - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
    }

    #[test]
    fn conf_targets_strict_threshold() {
        let (mut p, t) = view(plane(1, 2, 1.0), Pose::identity());
        assert!(conf_targets(&[p.clone()], std::slice::from_ref(&t), 1.0, 0.05)[0].data.iter().all(|&b| b));
        // Error exactly 0.25 at pixel 0 (z = 1), threshold 0.25.
        p.pointmap.data[0].x += 0.25;
        let labels = conf_targets(&[p], &[t], 1.0, 0.25);
        assert_eq!(labels[0].data, vec![false, true]);
    }

    #[test]
    fn conf_loss_examples() {
        let zeros = vec![Grid::filled(2, 3, 0.0)];
        let labels = vec![Mask::from_fn(2, 3, |v, u| (v + u) % 2 == 0)];
        let valid = vec![Mask::filled(2, 3, true)];
        let v = loss_conf(&zeros, &labels, &valid).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let sat = vec![labels[0].map(|&b| if b { 50.0 } else { -50.0 })];
        assert!(loss_conf(&sat, &labels, &valid).unwrap() < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = vec![Grid::from_fn(5, 5, |_, _| rng.random_range(-8.0f64..8.0))];
        let labels = vec![Mask::from_fn(5, 5, |_, _| rng.random_bool(0.5))];
        let valid = vec![Mask::from_fn(5, 5, |_, _| rng.random_bool(0.8))];
        let mut naive = 0.0;
        let mut n = 0.0;
        for i in 0..25 {
            if valid[0].data[i] {
                let p = 1.0 / (1.0 + (-logits[0].data[i]).exp());
                naive += if labels[0].data[i] { -p.ln() } else { -(1.0 - p).ln() };
                n += 1.0;
            }
        }
        assert!((loss_conf(&logits, &labels, &valid).unwrap() - naive / n).abs() < 1e-9);
    }

    #[test]
    fn huber_pieces() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(1.0, 1.0), 0.5);
        assert_eq!(huber(3.0, 1.0), 2.5);
    }

    #[test]
    fn cam_loss_examples() {
        let cfg = LossConfig::default();
        let gt = vec![Pose::identity(), Pose::new(Rotation::about_y(0.3), Vector3::new(1.0, 0.0, 0.0))];
        assert_eq!(loss_cam(&gt, &gt, 1.0, &cfg).unwrap(), (0.0, 0.0));
        assert!(matches!(loss_cam(&gt[..1], &gt[..1], 1.0, &cfg), Err(Error::TooFewViews { .. })));

        let g = Pose::new(Rotation::from_axis_angle(&Vector3::new(0.2, -0.4, 0.1)), Vector3::new(3.0, 1.0, -2.0));
        let moved: Vec<Pose> = gt.iter().map(|p| g.compose(p)).collect();
        let (r, t) = loss_cam(&moved, &gt, 1.0, &cfg).unwrap();
        assert!(r < 1e-7 && t < 1e-20);
    }

    #[test]
    fn cam_loss_single_pair_closed_form() {
        // View 1 sits at the origin; view 2's predicted relative rotation is off by
        // 10 degrees and its translation by one unit along an axis orthogonal to
        // the rotation so the two pair directions see the same errors.
        let cfg = LossConfig { huber_delta: 1.0, ..LossConfig::default() };
        let gt = vec![Pose::identity(), Pose::new(Rotation::identity(), Vector3::new(2.0, 0.0, 0.0))];
        let err = Rotation::about_z(10f64.to_radians());
        let pred = vec![Pose::identity(), Pose::new(err, Vector3::new(2.0, 0.0, 1.0))];
        let (rot, _) = loss_cam(&pred, &gt, 1.0, &cfg).unwrap();
        assert!((rot - 10f64.to_radians()).abs() < 1e-9);
        let terms = cam_terms(&pred, &gt, 1.0, 1.0);
        // Pair (0,1): relative translation error is exactly (0,0,1).
        assert!((terms[0].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let gt = vec![Pose::identity(), Pose::new(Rotation::about_y(0.2), Vector3::new(1.0, 0.0, 0.0))];
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for pose in gt {
            let pm = PointMap::from_fn(4, 4, |v, u| Vector3::new(u as f64 * 0.3, v as f64 * 0.2, 2.0 + 0.1 * (u * v) as f64));
            let (p, t) = view(pm, pose);
            preds.push(p);
            targets.push(t);
        }
        let cfg = LossConfig::default();
        let rep = total_loss(&preds, &targets, &cfg).unwrap();
        assert!(rep.total < 1e-6, "{rep:?}");
        let zero = LossConfig { lambda_normal: 0.0, lambda_conf: 0.0, lambda_cam: 0.0, ..cfg };
        let rep = total_loss(&preds, &targets, &zero).unwrap();
        assert_eq!(rep.total, rep.points);
    }

    #[test]
    fn zero_loss_gradient_is_zero() {
        let gt = vec![Pose::identity(), Pose::new(Rotation::about_y(0.2), Vector3::new(1.0, 0.0, 0.0))];
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for pose in gt {
            let pm = PointMap::from_fn(3, 3, |v, u| Vector3::new(u as f64 * 0.3, v as f64 * 0.2, 2.0 + 0.1 * (u * v) as f64));
            let (p, t) = view(pm, pose);
            preds.push(p);
            targets.push(t);
        }
        let g = grad_total_loss(&preds, &targets, &LossConfig { lambda_conf: 0.0, ..LossConfig::default() }).unwrap();
        assert!(g.max_abs() < 1e-9);
    }

    #[test]
    fn single_pixel_gradient_matches_sign_formula() {
        // 2x2 view, one valid pixel: points loss = (1/z)·Σ|s·a − b| with s frozen.
        let gt = PointMap::from_fn(2, 2, |_, _| Vector3::new(1.0, 2.0, 4.0));
        let mut valid = Mask::filled(2, 2, false);
        valid.data[0] = true;
        let mut pred = gt.clone();
        pred.data[0] = Vector3::new(1.5, 1.0, 4.0);
        let p = ViewPrediction { pointmap: pred, conf_logits: Grid::filled(2, 2, 0.0), pose: Pose::identity() };
        let t = ViewTarget { pointmap: gt, valid, pose: Pose::identity() };
        let cfg = LossConfig::default().points_only();
        let g = grad_total_loss(&[p], &[t], &cfg).unwrap();
        // Candidates: 1/1.5 (mass 1.5/4), 2 (mass 1/4), 1 (mass 1) -> s* = 1.
        assert_eq!(g.s_star, 1.0);
        let expected = Vector3::new(1.0 / 4.0, -1.0 / 4.0, 0.0);
        assert!((g.views[0].pointmap.data[0] - expected).norm() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { huber_delta: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { lambda_conf: -1.0, ..LossConfig::default() }.validate().is_err());
        let cfg: LossConfig = serde_json::from_str(r#"{"lambda_cam": 2.0}"#).unwrap();
        assert_eq!(cfg.lambda_cam, 2.0);
        assert_eq!(cfg.conf_epsilon, 0.05);
    }
}
