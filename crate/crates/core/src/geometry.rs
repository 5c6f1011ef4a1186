//! Rotation and pose algebra: SO(3), SE(3), Sim(3), nearest-rotation
//! orthogonalization of 9D outputs, geodesic distance, Umeyama alignment and
//! pinhole unprojection.
//!
//! Everything here is `f64`. Poses are camera-to-world.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::grid::{DepthMap, PointMap};
use crate::{Error, Result};

/// Smallest singular value accepted by [`rotation_from_9d`].
pub const MIN_SINGULAR_VALUE: f64 = 1e-12;

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix the caller guarantees to be in SO(3).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Rodrigues' formula for an axis-angle vector (radians).
    pub fn from_axis_angle(omega: &Vector3<f64>) -> Self {
        let theta = omega.norm();
        let k = skew(omega);
        if theta < 1e-12 {
            return Rotation(Matrix3::identity() + k);
        }
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Rotation(Matrix3::identity() + k * a + k * k * b)
    }

    pub fn about_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn about_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn about_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::new(0.0, 0.0, angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Max deviation of `mᵀm` from identity and of `det(m)` from one.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let e = (self.0.transpose() * self.0 - Matrix3::identity()).abs().max();
        (e, (self.0.determinant() - 1.0).abs())
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the rotation block and translation column; the caller vouches for the rotation block.
    pub fn from_matrix_unchecked(m: &Matrix4<f64>) -> Self {
        Pose {
            rotation: Rotation::from_matrix_unchecked(m.fixed_view::<3, 3>(0, 0).into_owned()),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt.apply(&self.translation)) }
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(p) + self.translation
    }

    /// Camera center in world coordinates (for camera-to-world poses).
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }
}

/// Similarity transform `p ↦ s·R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn identity() -> Self {
        Sim3 { scale: 1.0, rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn new(scale: f64, rotation: Rotation, translation: Vector3<f64>) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::DegenerateInput(format!("Sim3 scale must be positive, got {scale}")));
        }
        Ok(Sim3 { scale, rotation, translation })
    }

    pub fn from_pose(p: &Pose) -> Self {
        Sim3 { scale: 1.0, rotation: p.rotation, translation: p.translation }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(p) * self.scale + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * other.scale,
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) * self.scale + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        Sim3 { scale: inv_s, rotation: rt, translation: -(rt.apply(&self.translation) * inv_s) }
    }

    /// Maps a camera-to-world pose through this similarity: rotation is
    /// left-multiplied, the camera center is transformed as a point.
    pub fn apply_to_pose(&self, p: &Pose) -> Pose {
        Pose { rotation: self.rotation.compose(&p.rotation), translation: self.apply(&p.translation) }
    }
}

pub fn apply_sim3(g: &Sim3, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| g.apply(p)).collect()
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point with a given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Result<Self> {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(fx, fx, 0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0), width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Camera-frame ray with unit z through integer pixel `(u, v)`.
    pub fn ray(&self, u: usize, v: usize) -> Vector3<f64> {
        Vector3::new((u as f64 - self.cx) / self.fx, (v as f64 - self.cy) / self.fy, 1.0)
    }
}

/// Nearest rotation (Frobenius) to a row-major 3×3 matrix via SVD.
pub fn rotation_from_9d(m: &[f64; 9]) -> Result<Rotation> {
    let mat = Matrix3::from_row_slice(m);
    if !mat.iter().all(|x| x.is_finite()) {
        return Err(Error::DegenerateInput("non-finite 9D rotation input".into()));
    }
    let svd = mat.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateInput("SVD did not converge".into())),
    };
    let sv = svd.singular_values;
    let (min_idx, min_val) = sv
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    if min_val <= MIN_SINGULAR_VALUE {
        return Err(Error::DegenerateInput(format!(
            "rank-deficient 9D rotation input (smallest singular value {min_val:e})"
        )));
    }
    let d = (u * v_t).determinant().signum();
    let mut correction = Vector3::new(1.0, 1.0, 1.0);
    correction[min_idx] = d;
    Ok(Rotation(u * Matrix3::from_diagonal(&correction) * v_t))
}

/// Angle of `r1ᵀ r2` in radians, in `[0, π]`: `arccos((tr − 1)/2)`, evaluated
/// as `atan2(sin, cos)` so that it stays accurate near 0 and π.
pub fn geodesic_angle(r1: &Rotation, r2: &Rotation) -> f64 {
    let m = r1.0.transpose() * r2.0;
    let cos = (m.trace() - 1.0) * 0.5;
    let sin = 0.5 * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    sin.atan2(cos)
}

/// `T_i⁻¹ T_j`: maps view-j camera coordinates into view i.
pub fn relative_pose(ti: &Pose, tj: &Pose) -> Pose {
    ti.inverse().compose(tj)
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Numerical rank of the covariance of `points`.
pub fn covariance_rank(points: &[Vector3<f64>]) -> usize {
    let mu = centroid(points);
    let cov = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - mu;
        acc + d * d.transpose()
    }) / points.len() as f64;
    let eig = SymmetricEigen::new(cov).eigenvalues;
    let max = eig.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 1e-300 {
        return 0;
    }
    eig.iter().filter(|&&l| l > 1e-10 * max).count()
}

/// Closed-form least-squares similarity (or rigid, when `with_scale` is off)
/// minimizing `Σ‖s·R·src_k + t − dst_k‖²`.
pub fn umeyama_sim3(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Sim3> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateInput(format!("need at least 3 correspondences, got {}", src.len())));
    }
    let rank = covariance_rank(src);
    if rank < 2 {
        return Err(Error::RankDeficient { rank });
    }
    let n = src.len() as f64;
    let mu_s = centroid(src);
    let mu_d = centroid(dst);
    let mut cross = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let ds = s - mu_s;
        cross += (d - mu_d) * ds.transpose();
        var_s += ds.norm_squared();
    }
    cross /= n;
    var_s /= n;

    let svd = cross.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateInput("SVD did not converge".into())),
    };
    let sv = svd.singular_values;
    let min_idx = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).unwrap_or(2);
    let mut sign = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[min_idx] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&sign) * v_t;
    let scale = if with_scale { sv.dot(&sign) / var_s } else { 1.0 };
    if !(scale > 0.0) {
        return Err(Error::DegenerateInput(format!("non-positive Umeyama scale {scale}")));
    }
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Sim3 { scale, rotation: Rotation(rotation), translation })
}

/// Root-mean-square residual of `g(src) − dst`.
pub fn alignment_rmse(g: &Sim3, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    let sum: f64 = src.iter().zip(dst).map(|(s, d)| (g.apply(s) - d).norm_squared()).sum();
    (sum / src.len().max(1) as f64).sqrt()
}

/// `point(u,v) = depth(u,v)·((u−cx)/fx, (v−cy)/fy, 1)`. Non-finite or
/// non-positive depths yield NaN points.
pub fn unproject(depth: &DepthMap, k: &Intrinsics) -> PointMap {
    PointMap::from_fn(depth.height, depth.width, |v, u| {
        let d = *depth.get(v, u);
        if d.is_finite() && d > 0.0 {
            let x = (u as f64 - k.cx) / k.fx * d;
            let y = (v as f64 - k.cy) / k.fy * d;
            Vector3::new(x, y, d)
        } else {
            Vector3::repeat(f64::NAN)
        }
    })
}
