//! Evaluation metrics: relative pose accuracy (RRA/RTA/AUC), trajectory
//! errors (ATE/RPE), aligned depth errors, point-cloud accuracy/completion/
//! normal consistency, the camera-center spectrum, and the reference-swap
//! robustness statistic.
//!
//! Thresholds use strict inequality throughout: an error counts as accurate
//! at `τ` only when it is `< τ`.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::alignment::{solve_depth_scale, solve_depth_scale_shift, KdTree};
use crate::geometry::{covariance_rank, geodesic_angle, relative_pose, umeyama_sim3, Pose, Sim3};
use crate::grid::{check_shape, DepthMap, Mask};
use crate::{Error, Result};

/// Relative translations shorter than this have no direction.
const MIN_DIRECTION_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub rot_deg: f64,
    pub trans_deg: f64,
}

impl PairError {
    pub fn max(&self) -> f64 {
        self.rot_deg.max(self.trans_deg)
    }
}

fn direction_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    match (na < MIN_DIRECTION_NORM, nb < MIN_DIRECTION_NORM) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 90.0,
        (false, false) => (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees(),
    }
}

/// Angular errors of the relative rotation and relative translation direction
/// for every ordered pair `i ≠ j`, in row-major pair order.
pub fn pairwise_angular_errors(pred: &[Pose], gt: &[Pose]) -> Result<Vec<PairError>> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() < 2 {
        return Err(Error::TooFewViews { needed: 2, got: pred.len() });
    }
    let n = pred.len();
    let mut out = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let rp = relative_pose(&pred[i], &pred[j]);
            let rg = relative_pose(&gt[i], &gt[j]);
            out.push(PairError {
                rot_deg: geodesic_angle(&rp.rotation, &rg.rotation).to_degrees(),
                trans_deg: direction_angle_deg(&rp.translation, &rg.translation),
            });
        }
    }
    Ok(out)
}

fn fraction(errors: &[PairError], pred: impl Fn(&PairError) -> bool) -> f64 {
    errors.iter().filter(|e| pred(e)).count() as f64 / errors.len() as f64
}

/// Relative rotation accuracy: fraction of pairs with rotation error `< tau` degrees.
pub fn rra_at(errors: &[PairError], tau: f64) -> f64 {
    fraction(errors, |e| e.rot_deg < tau)
}

/// Relative translation accuracy: fraction of pairs with direction error `< tau` degrees.
pub fn rta_at(errors: &[PairError], tau: f64) -> f64 {
    fraction(errors, |e| e.trans_deg < tau)
}

/// Fraction of pairs accurate in both rotation and translation at `tau`.
pub fn joint_accuracy_at(errors: &[PairError], tau: f64) -> f64 {
    fraction(errors, |e| e.max() < tau)
}

/// Mean joint accuracy over integer thresholds `1..=max_deg`.
pub fn auc_at(errors: &[PairError], max_deg: u32) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyInput);
    }
    if max_deg == 0 {
        return Err(Error::InvalidConfig("max_deg must be >= 1".into()));
    }
    let mut maxes: Vec<f64> = errors.iter().map(PairError::max).collect();
    maxes.sort_by(f64::total_cmp);
    let n = maxes.len() as f64;
    let sum: f64 = (1..=max_deg).map(|tau| maxes.partition_point(|&e| e < tau as f64) as f64 / n).sum();
    Ok(sum / max_deg as f64)
}

/// Umeyama restricted to what a trajectory needs: collinear camera paths are
/// allowed (the rotation about the line is irrelevant to every residual).
fn trajectory_alignment(pred: &[Pose], gt: &[Pose]) -> Result<Sim3> {
    let src: Vec<_> = pred.iter().map(Pose::center).collect();
    let dst: Vec<_> = gt.iter().map(Pose::center).collect();
    match umeyama_sim3(&src, &dst, true) {
        Err(Error::RankDeficient { rank: 1 }) | Err(Error::DegenerateInput(_)) if covariance_rank(&src) == 1 => {
            collinear_alignment(&src, &dst)
        }
        other => other,
    }
}

/// Closed-form similarity for collinear sources: rotate the source line onto
/// the best-fit direction of the targets, then fit scale and offset along it.
fn collinear_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3> {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cross = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        cross += (d - mu_d) * (s - mu_s).transpose();
        var_s += (s - mu_s).norm_squared();
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateInput("SVD did not converge".into())),
    };
    let k = svd.singular_values.imax();
    let a: Vector3<f64> = v_t.row(k).transpose();
    let b: Vector3<f64> = u.column(k).into_owned();
    let rotation = crate::geometry::Rotation::from_axis_angle(&rotation_between(&a, &b));
    let scale = svd.singular_values[k] / var_s;
    if !(scale > 0.0) {
        return Err(Error::DegenerateInput("collinear trajectory alignment failed".into()));
    }
    let translation = mu_d - rotation.apply(&mu_s) * scale;
    Ok(Sim3 { scale, rotation, translation })
}

/// Axis-angle vector rotating unit `a` onto unit `b`.
fn rotation_between(a: &Vector3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
    let axis = a.cross(b);
    let s = axis.norm();
    let c = a.dot(b);
    if s < 1e-15 {
        if c > 0.0 {
            return Vector3::zeros();
        }
        let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        return a.cross(&helper).normalize() * std::f64::consts::PI;
    }
    axis / s * s.atan2(c)
}

/// Sim(3) aligning predicted camera centers onto ground truth.
pub fn ate_alignment(pred: &[Pose], gt: &[Pose]) -> Result<Sim3> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() < 3 {
        return Err(Error::TooFewViews { needed: 3, got: pred.len() });
    }
    trajectory_alignment(pred, gt)
}

/// Absolute trajectory error: RMSE of camera centers after Sim(3) alignment.
pub fn ate(pred: &[Pose], gt: &[Pose]) -> Result<f64> {
    let g = ate_alignment(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(p, q)| (g.apply(&p.center()) - q.center()).norm_squared()).sum();
    Ok((sum / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rpe {
    pub trans: f64,
    pub rot_deg: f64,
}

/// Scale that maps predicted path lengths to ground truth: the Sim(3)
/// alignment scale when it exists, else the ratio of center spreads.
fn rpe_scale(pred: &[Pose], gt: &[Pose]) -> f64 {
    if pred.len() >= 3 {
        if let Ok(g) = trajectory_alignment(pred, gt) {
            return g.scale;
        }
    }
    let spread = |poses: &[Pose]| {
        let mu = poses.iter().map(Pose::center).sum::<Vector3<f64>>() / poses.len() as f64;
        poses.iter().map(|p| (p.center() - mu).norm_squared()).sum::<f64>()
    };
    let (sp, sg) = (spread(pred), spread(gt));
    if sp > 0.0 && sg > 0.0 {
        (sg / sp).sqrt()
    } else {
        1.0
    }
}

/// Relative pose error over consecutive pairs, after applying the trajectory
/// alignment scale to predicted translations. The rigid part of the alignment
/// cancels in relative poses.
pub fn rpe(pred: &[Pose], gt: &[Pose]) -> Result<Rpe> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() < 2 {
        return Err(Error::TooFewViews { needed: 2, got: pred.len() });
    }
    let s = rpe_scale(pred, gt);
    let (mut t2, mut r2) = (0.0, 0.0);
    for k in 0..pred.len() - 1 {
        let mut pr = relative_pose(&pred[k], &pred[k + 1]);
        pr.translation *= s;
        let gr = relative_pose(&gt[k], &gt[k + 1]);
        let e = relative_pose(&gr, &pr);
        t2 += e.translation.norm_squared();
        r2 += geodesic_angle(&crate::geometry::Rotation::identity(), &e.rotation).to_degrees().powi(2);
    }
    let m = (pred.len() - 1) as f64;
    Ok(Rpe { trans: (t2 / m).sqrt(), rot_deg: (r2 / m).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthAlign {
    None,
    Scale,
    ScaleShift,
}

impl std::str::FromStr for DepthAlign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DepthAlign::None),
            "scale" => Ok(DepthAlign::Scale),
            "scale_shift" => Ok(DepthAlign::ScaleShift),
            other => Err(Error::InvalidConfig(format!("unknown depth alignment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta_125: f64,
    pub scale: f64,
    pub shift: f64,
}

/// Abs Rel and `δ < 1.25` over valid pixels after the chosen alignment.
/// Non-positive aligned depths fail the `δ` test.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: &Mask, align: DepthAlign) -> Result<DepthMetrics> {
    check_shape(pred, gt, "pred/gt depth")?;
    check_shape(pred, mask, "depth/mask")?;
    let valid: Vec<usize> = (0..gt.len())
        .filter(|&i| mask.data[i] && gt.data[i].is_finite() && gt.data[i] > 0.0 && pred.data[i].is_finite())
        .collect();
    if valid.is_empty() {
        return Err(Error::NoValidPairs("no valid depth pixels".into()));
    }
    let (scale, shift) = match align {
        DepthAlign::None => (1.0, 0.0),
        DepthAlign::Scale => (solve_depth_scale(pred, gt, mask)?, 0.0),
        DepthAlign::ScaleShift => solve_depth_scale_shift(pred, gt, mask)?,
    };
    let (mut rel, mut good) = (0.0, 0usize);
    for &i in &valid {
        let d = gt.data[i];
        let p = scale * pred.data[i] + shift;
        rel += (p - d).abs() / d;
        if p > 0.0 && (p / d).max(d / p) < 1.25 {
            good += 1;
        }
    }
    let n = valid.len() as f64;
    Ok(DepthMetrics { abs_rel: rel / n, delta_125: good as f64 / n, scale, shift })
}

/// Stacks several depth maps of equal width into one tall map, so a single
/// alignment covers a whole sequence.
pub fn stack_depths(maps: &[DepthMap], masks: &[Mask]) -> Result<(DepthMap, Mask)> {
    let first = maps.first().ok_or(Error::EmptyInput)?;
    let width = first.width;
    let mut depth = Vec::new();
    let mut mask = Vec::new();
    let mut height = 0;
    for (d, m) in maps.iter().zip(masks) {
        if d.width != width {
            return Err(Error::ShapeMismatch("depth maps differ in width".into()));
        }
        check_shape(d, m, "depth/mask")?;
        depth.extend_from_slice(&d.data);
        mask.extend_from_slice(&m.data);
        height += d.height;
    }
    Ok((DepthMap { height, width, data: depth }, Mask { height, width, data: mask }))
}

/// Points with optional per-point unit normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Option<Vector3<f64>>>,
}

impl Cloud {
    pub fn without_normals(points: Vec<Vector3<f64>>) -> Self {
        let normals = vec![None; points.len()];
        Cloud { points, normals }
    }

    pub fn transformed(&self, g: &Sim3) -> Cloud {
        Cloud {
            points: self.points.iter().map(|p| g.apply(p)).collect(),
            normals: self.normals.iter().map(|n| n.map(|n| g.rotation.apply(&n))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    /// `None` when no nearest pair carries normals on both sides.
    pub nc_mean: Option<f64>,
    pub nc_median: Option<f64>,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn one_way(from: &Cloud, to: &Cloud, tree: &KdTree, nc: &mut Vec<f64>) -> Vec<f64> {
    from.points
        .iter()
        .zip(&from.normals)
        .map(|(p, n)| {
            let (j, d) = tree.nearest(p);
            if let (Some(a), Some(b)) = (n, to.normals[j]) {
                nc.push(a.dot(&b).abs());
            }
            d
        })
        .collect()
}

/// Accuracy (pred→gt), completion (gt→pred) and absolute-dot normal
/// consistency pooled over both directions.
pub fn cloud_metrics(pred: &Cloud, gt: &Cloud) -> Result<CloudMetrics> {
    if pred.points.is_empty() || gt.points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if pred.normals.len() != pred.points.len() || gt.normals.len() != gt.points.len() {
        return Err(Error::ShapeMismatch("normals must be listed per point".into()));
    }
    let gt_tree = KdTree::build(&gt.points)?;
    let pred_tree = KdTree::build(&pred.points)?;
    let mut nc = Vec::new();
    let acc = one_way(pred, gt, &gt_tree, &mut nc);
    let comp = one_way(gt, pred, &pred_tree, &mut nc);
    Ok(CloudMetrics {
        acc_mean: mean(&acc),
        acc_median: median(&acc),
        comp_mean: mean(&comp),
        comp_median: median(&comp),
        nc_mean: (!nc.is_empty()).then(|| mean(&nc)),
        nc_median: (!nc.is_empty()).then(|| median(&nc)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Normalized eigenvalues, descending; all zero when `degenerate`.
    pub values: [f64; 3],
    /// All camera centers coincide.
    pub degenerate: bool,
}

/// Eigenvalues of the camera-center covariance, sorted and normalized to sum one.
pub fn pose_spectrum(poses: &[Pose]) -> Result<Spectrum> {
    if poses.len() < 2 {
        return Err(Error::TooFewViews { needed: 2, got: poses.len() });
    }
    let n = poses.len() as f64;
    let mu = poses.iter().map(Pose::center).sum::<Vector3<f64>>() / n;
    let cov = poses.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p.center() - mu;
        acc + d * d.transpose()
    }) / n;
    let mut values: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = values.iter().sum();
    let scale = poses.iter().map(|p| p.center().norm_squared()).sum::<f64>() / n;
    if !(total > 1e-30 * (1.0 + scale)) {
        return Ok(Spectrum { values: [0.0; 3], degenerate: true });
    }
    Ok(Spectrum { values: [values[0] / total, values[1] / total, values[2] / total], degenerate: false })
}

pub type MetricMap = BTreeMap<String, f64>;

/// Population standard deviation of each scalar metric over `N` runs, where
/// run `k` sees the views with view `k` swapped into the first position.
///
/// `run` receives the reordered views and `order`, where `order[p]` is the
/// original index of the view at position `p`, so it can report metrics in
/// the original indexing.
pub fn robustness_std<T, E, F>(views: &[T], mut run: F) -> std::result::Result<MetricMap, E>
where
    T: Clone,
    E: From<Error>,
    F: FnMut(&[T], &[usize]) -> std::result::Result<MetricMap, E>,
{
    if views.len() < 2 {
        return Err(Error::TooFewViews { needed: 2, got: views.len() }.into());
    }
    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for k in 0..views.len() {
        let mut order: Vec<usize> = (0..views.len()).collect();
        order.swap(0, k);
        let reordered: Vec<T> = order.iter().map(|&i| views[i].clone()).collect();
        for (name, value) in run(&reordered, &order)? {
            samples.entry(name).or_default().push(value);
        }
    }
    Ok(samples.into_iter().map(|(name, v)| (name, population_std(&v))).collect())
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mu = mean(values);
    (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / values.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            Rotation::from_axis_angle(&Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))),
            Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
        )
    }

    #[test]
    fn perfect_and_gauge_shifted_poses_have_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<_> = (0..5).map(|_| random_pose(&mut rng)).collect();
        assert!(pairwise_angular_errors(&gt, &gt).unwrap().iter().all(|e| e.rot_deg < 1e-5 && e.trans_deg < 1e-5));
        let g = random_pose(&mut rng);
        let moved: Vec<_> = gt.iter().map(|p| g.compose(p)).collect();
        assert!(pairwise_angular_errors(&moved, &gt).unwrap().iter().all(|e| e.max() < 1e-5));
        assert!(matches!(pairwise_angular_errors(&gt[..1], &gt[..1]), Err(Error::TooFewViews { .. })));
    }

    #[test]
    fn translation_direction_degeneracy() {
        assert_eq!(direction_angle_deg(&Vector3::zeros(), &Vector3::zeros()), 0.0);
        assert_eq!(direction_angle_deg(&Vector3::zeros(), &Vector3::x()), 90.0);
        assert!((direction_angle_deg(&Vector3::x(), &-Vector3::x()) - 180.0).abs() < 1e-12);
    }

    #[test]
    fn auc_edge_cases() {
        let zeros = vec![PairError { rot_deg: 0.0, trans_deg: 0.0 }; 4];
        assert_eq!(auc_at(&zeros, 30).unwrap(), 1.0);
        let big = vec![PairError { rot_deg: 31.0, trans_deg: 0.0 }; 4];
        assert_eq!(auc_at(&big, 30).unwrap(), 0.0);
        assert!(matches!(auc_at(&[], 30), Err(Error::EmptyInput)));
        // Exactly at a threshold does not count there.
        let at = vec![PairError { rot_deg: 5.0, trans_deg: 5.0 }];
        assert_eq!(joint_accuracy_at(&at, 5.0), 0.0);
        assert_eq!(joint_accuracy_at(&at, 6.0), 1.0);
    }

    #[test]
    fn auc_matches_threshold_sweep() {
        let errors: Vec<_> = [5.0, 15.0, 25.0].iter().map(|&e| PairError { rot_deg: e, trans_deg: e }).collect();
        // acc(τ) = #{e < τ}/3: zero for τ ≤ 5, 1/3 for 6..=15, 2/3 for 16..=25, 1 for 26..=30.
        let expected = (0.0 * 5.0 + (1.0 / 3.0) * 10.0 + (2.0 / 3.0) * 10.0 + 1.0 * 5.0) / 30.0;
        assert!((auc_at(&errors, 30).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ate_zero_for_similarity_transformed_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt: Vec<_> = (0..6).map(|_| random_pose(&mut rng)).collect();
        assert!(ate(&gt, &gt).unwrap() < 1e-12);
        let g = Sim3::new(2.5, Rotation::about_y(0.7), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let moved: Vec<_> = gt.iter().map(|p| g.apply_to_pose(p)).collect();
        assert!(ate(&moved, &gt).unwrap() < 1e-9);
        assert!(matches!(ate(&gt[..2], &gt[..2]), Err(Error::TooFewViews { .. })));
        assert!(matches!(ate(&gt[..4], &gt[..3]), Err(Error::LengthMismatch(4, 3))));
    }

    #[test]
    fn ate_on_collinear_trajectory() {
        let gt: Vec<_> = (0..5).map(|k| Pose::new(Rotation::identity(), Vector3::new(k as f64, 0.0, 0.0))).collect();
        assert!(ate(&gt, &gt).unwrap() < 1e-12);
        let g = Sim3::new(0.5, Rotation::about_z(1.0), Vector3::new(0.0, 4.0, 0.0)).unwrap();
        let moved: Vec<_> = gt.iter().map(|p| g.apply_to_pose(p)).collect();
        assert!(ate(&moved, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn rpe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt: Vec<_> = (0..5).map(|_| random_pose(&mut rng)).collect();
        let r = rpe(&gt, &gt).unwrap();
        assert!(r.trans < 1e-12 && r.rot_deg < 1e-5);
        let q = Pose::new(Rotation::about_x(0.9), Vector3::zeros());
        let rotated: Vec<_> = gt.iter().map(|p| q.compose(p)).collect();
        assert!(rpe(&rotated, &gt).unwrap().rot_deg < 1e-5);
    }

    #[test]
    fn depth_metric_examples() {
        let gt = DepthMap::from_fn(4, 4, |v, u| 1.0 + (v + u) as f64);
        let mask = Mask::filled(4, 4, true);
        for align in [DepthAlign::None, DepthAlign::Scale, DepthAlign::ScaleShift] {
            let m = depth_metrics(&gt, &gt, &mask, align).unwrap();
            assert!(m.abs_rel < 1e-12 && m.delta_125 == 1.0);
        }
        let scaled = gt.map(|d| 1.3 * d);
        let m = depth_metrics(&scaled, &gt, &mask, DepthAlign::Scale).unwrap();
        assert!(m.abs_rel < 1e-12 && m.delta_125 == 1.0);
        let m = depth_metrics(&scaled, &gt, &mask, DepthAlign::None).unwrap();
        assert!((m.abs_rel - 0.3).abs() < 1e-12 && m.delta_125 == 0.0);
        let empty = Mask::filled(4, 4, false);
        assert!(matches!(depth_metrics(&gt, &gt, &empty, DepthAlign::None), Err(Error::NoValidPairs(_))));
        assert_eq!("scale_shift".parse::<DepthAlign>().unwrap(), DepthAlign::ScaleShift);
    }

    #[test]
    fn cloud_metric_examples() {
        let pts: Vec<_> = (0..10).map(|k| Vector3::new(k as f64 * 10.0, 0.0, 0.0)).collect();
        let with_z = Cloud { points: pts.clone(), normals: vec![Some(Vector3::z()); 10] };
        let m = cloud_metrics(&with_z, &with_z).unwrap();
        assert_eq!((m.acc_mean, m.comp_mean, m.nc_mean), (0.0, 0.0, Some(1.0)));

        let shifted = Cloud { points: pts.iter().map(|p| p + Vector3::new(0.25, 0.0, 0.0)).collect(), normals: vec![Some(Vector3::x()); 10] };
        let m = cloud_metrics(&shifted, &with_z).unwrap();
        assert!((m.acc_mean - 0.25).abs() < 1e-12 && (m.comp_median - 0.25).abs() < 1e-12);
        assert_eq!(m.nc_mean, Some(0.0));

        let bare = Cloud::without_normals(pts);
        assert_eq!(cloud_metrics(&bare, &with_z).unwrap().nc_mean, None);
        assert!(matches!(cloud_metrics(&Cloud::default(), &with_z), Err(Error::EmptyCloud)));
    }

    #[test]
    fn spectrum_examples() {
        let planar: Vec<_> = (0..7).map(|k| Pose::new(Rotation::identity(), Vector3::new((k as f64).cos(), (k as f64 * 1.7).sin(), 0.0))).collect();
        assert!(pose_spectrum(&planar).unwrap().values[2] < 1e-9);
        let line: Vec<_> = (0..4).map(|k| Pose::new(Rotation::identity(), Vector3::new(1.0, 2.0, 3.0) * k as f64)).collect();
        let s = pose_spectrum(&line).unwrap();
        assert!((s.values[0] - 1.0).abs() < 1e-9 && s.values[1] < 1e-9 && s.values[2] < 1e-9);
        let same = vec![Pose::identity(); 3];
        assert!(pose_spectrum(&same).unwrap().degenerate);
        assert!(pose_spectrum(&same[..1]).is_err());
    }

    #[test]
    fn robustness_of_constant_run_is_zero() {
        let views = vec![1, 2, 3, 4];
        let mut calls = Vec::new();
        let stds = robustness_std::<_, Error, _>(&views, |v, order| {
            calls.push((v.to_vec(), order.to_vec()));
            Ok(MetricMap::from([("m".to_string(), 3.0)]))
        })
        .unwrap();
        assert_eq!(stds["m"], 0.0);
        assert_eq!(calls.len(), 4);
        assert_eq!(calls[2], (vec![3, 2, 1, 4], vec![2, 1, 0, 3]));
    }

    #[test]
    fn statistics_helpers() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(population_std(&[1.0, 3.0]), 1.0);
    }
}
