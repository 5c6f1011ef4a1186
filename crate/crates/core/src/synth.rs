//! Synthetic scenes with analytic ground truth, and seeded perturbation of
//! that ground truth into "predictions" with known error.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{unproject, Intrinsics, Pose, Rotation};
use crate::grid::{DepthMap, Grid, Mask, PointMap};
use crate::losses::{ViewPrediction, ViewTarget};
use crate::{Error, Result};

/// Procedurally shaded RGB image in `[0, 1]`.
pub type Image = Grid<[f32; 3]>;

const MIN_HIT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Surface {
    /// World plane `normal·x = offset`.
    Plane { normal: [f64; 3], offset: f64 },
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box centered at the origin with full side lengths `extents`.
    BoxRoom { extents: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Trajectory {
    /// Cameras evenly spaced on a circle around the origin, perpendicular to
    /// `axis`, each looking at the origin with `axis` as up.
    Orbit { radius: f64, n_views: usize, axis: [f64; 3] },
    /// Cameras at `start + k·step` with identity orientation (looking along world +z).
    Line { start: [f64; 3], step: [f64; 3], n_views: usize },
}

impl Trajectory {
    pub fn n_views(&self) -> usize {
        match self {
            Trajectory::Orbit { n_views, .. } | Trajectory::Line { n_views, .. } => *n_views,
        }
    }

    /// Camera-to-world poses.
    pub fn poses(&self) -> Result<Vec<Pose>> {
        match *self {
            Trajectory::Orbit { radius, n_views, axis } => {
                let axis = Vector3::from(axis);
                if !(radius > 0.0) || axis.norm() < 1e-12 {
                    return Err(Error::InvalidConfig("orbit needs positive radius and non-zero axis".into()));
                }
                let up = axis.normalize();
                let helper = if up.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
                let e1 = up.cross(&helper).normalize();
                let e2 = up.cross(&e1);
                Ok((0..n_views)
                    .map(|k| {
                        let angle = std::f64::consts::TAU * k as f64 / n_views as f64;
                        let center = (e1 * angle.cos() + e2 * angle.sin()) * radius;
                        look_at(&center, &Vector3::zeros(), &up)
                    })
                    .collect())
            }
            Trajectory::Line { start, step, n_views } => {
                let (start, step) = (Vector3::from(start), Vector3::from(step));
                Ok((0..n_views).map(|k| Pose::new(Rotation::identity(), start + step * k as f64)).collect())
            }
        }
    }
}

/// Camera-to-world pose at `eye` looking at `target` (x right, y down, z forward).
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Pose {
    let forward = (target - eye).normalize();
    let mut right = forward.cross(up);
    if right.norm() < 1e-9 {
        let alt = if forward.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        right = forward.cross(&alt);
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    Pose::new(Rotation::from_matrix_unchecked(Matrix3::from_columns(&[right, down, forward])), *eye)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub surface: Surface,
    pub trajectory: Trajectory,
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.trajectory.n_views() == 0 {
            return Err(Error::InvalidConfig("n_views must be >= 1".into()));
        }
        match self.surface {
            Surface::Plane { normal, .. } if Vector3::from(normal).norm() < 1e-12 => {
                Err(Error::InvalidConfig("plane normal must be non-zero".into()))
            }
            Surface::Sphere { radius, .. } if !(radius > 0.0) => Err(Error::InvalidConfig("sphere radius must be positive".into())),
            Surface::BoxRoom { extents } if extents.iter().any(|e| !(*e > 0.0)) => {
                Err(Error::InvalidConfig("box extents must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Sphere of radius 1.5 at the origin seen from an orbit of radius 5.
    pub fn sphere_orbit(n_views: usize, size: usize, seed: u64) -> Self {
        SceneSpec {
            surface: Surface::Sphere { center: [0.0; 3], radius: 1.5 },
            trajectory: Trajectory::Orbit { radius: 5.0, n_views, axis: [0.0, 0.0, 1.0] },
            intrinsics: Intrinsics::from_fov(size, size, 50.0).expect("valid default intrinsics"),
            seed,
        }
    }
}

impl Surface {
    /// Ray parameter of the first hit beyond `MIN_HIT`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match *self {
            Surface::Plane { normal, offset } => {
                let n = Vector3::from(normal);
                let denom = n.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - n.dot(origin)) / denom;
                (t > MIN_HIT).then_some(t)
            }
            Surface::Sphere { center, radius } => {
                let oc = origin - Vector3::from(center);
                let a = dir.dot(dir);
                let b = 2.0 * oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // Numerically stable pair of roots.
                let q = -0.5 * (b + b.signum() * sq);
                let (mut t0, mut t1) = (q / a, c / q);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > MIN_HIT {
                    Some(t0)
                } else if t1 > MIN_HIT {
                    Some(t1)
                } else {
                    None
                }
            }
            Surface::BoxRoom { extents } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for i in 0..3 {
                    let half = 0.5 * extents[i];
                    if dir[i].abs() < 1e-15 {
                        if origin[i].abs() > half {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half - origin[i]) / dir[i];
                    let b = (half - origin[i]) / dir[i];
                    t_near = t_near.max(a.min(b));
                    t_far = t_far.min(a.max(b));
                }
                if t_near > t_far {
                    None
                } else if t_near > MIN_HIT {
                    Some(t_near)
                } else if t_far > MIN_HIT {
                    Some(t_far)
                } else {
                    None
                }
            }
        }
    }

    /// Outward unit normal at a surface point.
    pub fn normal_at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match *self {
            Surface::Plane { normal, .. } => Vector3::from(normal).normalize(),
            Surface::Sphere { center, .. } => (p - Vector3::from(center)).normalize(),
            Surface::BoxRoom { extents } => {
                let rel = Vector3::new(p.x / extents[0], p.y / extents[1], p.z / extents[2]);
                let i = rel.iamax();
                let mut n = Vector3::zeros();
                n[i] = rel[i].signum();
                n
            }
        }
    }

    /// Signed distance-like residual: zero exactly on the surface.
    pub fn residual(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Surface::Plane { normal, offset } => {
                let n = Vector3::from(normal);
                (n.dot(p) - offset) / n.norm()
            }
            Surface::Sphere { center, radius } => (p - Vector3::from(center)).norm() - radius,
            Surface::BoxRoom { extents } => (0..3).map(|i| p[i].abs() - 0.5 * extents[i]).fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// A bundle of views with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub images: Vec<Image>,
    pub gt_poses: Vec<Pose>,
    pub gt_pointmaps: Vec<PointMap>,
    pub valid: Vec<Mask>,
    pub intrinsics: Intrinsics,
}

impl SceneSample {
    pub fn n_views(&self) -> usize {
        self.gt_poses.len()
    }

    pub fn targets(&self) -> Vec<ViewTarget> {
        self.gt_pointmaps
            .iter()
            .zip(&self.valid)
            .zip(&self.gt_poses)
            .map(|((pm, m), pose)| ViewTarget { pointmap: pm.clone(), valid: m.clone(), pose: *pose })
            .collect()
    }

    /// Ground truth as a prediction: saturated confident logits, invalid pixels
    /// filled with their unit-depth ray.
    pub fn as_predictions(&self) -> Vec<ViewPrediction> {
        let mut preds = perturb(self, &PerturbSpec::default(), 0);
        for (p, m) in preds.iter_mut().zip(&self.valid) {
            for (l, &ok) in p.conf_logits.data.iter_mut().zip(&m.data) {
                *l = if ok { 50.0 } else { -50.0 };
            }
        }
        preds
    }

    /// Views reordered so that position `k` holds original view `order[k]`.
    pub fn reordered(&self, order: &[usize]) -> SceneSample {
        SceneSample {
            images: order.iter().map(|&i| self.images[i].clone()).collect(),
            gt_poses: order.iter().map(|&i| self.gt_poses[i]).collect(),
            gt_pointmaps: order.iter().map(|&i| self.gt_pointmaps[i].clone()).collect(),
            valid: order.iter().map(|&i| self.valid[i].clone()).collect(),
            intrinsics: self.intrinsics,
        }
    }
}

fn hash_unit(cell: [i64; 3], salt: u64) -> f32 {
    // splitmix64 over the cell coordinates.
    let mut x = salt ^ 0x9E37_79B9_7F4A_7C15;
    for c in cell {
        x = x.wrapping_add(c as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
    }
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 29;
    (x >> 40) as f32 / (1u64 << 24) as f32
}

fn shade(surface: &Surface, p: &Vector3<f64>, seed: u64) -> [f32; 3] {
    let light = Vector3::new(0.3, -0.5, -0.8).normalize();
    let lambert = surface.normal_at(p).dot(&light).abs() as f32;
    let base = 0.25 + 0.75 * lambert;
    let cell = [(p.x * 4.0).floor() as i64, (p.y * 4.0).floor() as i64, (p.z * 4.0).floor() as i64];
    let mut rgb = [0.0f32; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let h = hash_unit(cell, seed.wrapping_add(c as u64 * 0x1234_5678));
        *out = (base * (0.5 + 0.5 * h)).clamp(0.0, 1.0);
    }
    rgb
}

/// Ray-casts the analytic surface for every view of the trajectory.
pub fn generate(spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let k = spec.intrinsics;
    let poses = spec.trajectory.poses()?;
    let mut sample = SceneSample { images: Vec::new(), gt_poses: poses.clone(), gt_pointmaps: Vec::new(), valid: Vec::new(), intrinsics: k };
    for (view, pose) in poses.iter().enumerate() {
        let mut image = Image::filled(k.height, k.width, [0.0; 3]);
        let depth = DepthMap::from_fn(k.height, k.width, |v, u| {
            let dir = pose.rotation.apply(&k.ray(u, v));
            match spec.surface.intersect(&pose.translation, &dir) {
                Some(t) => {
                    *image.get_mut(v, u) = shade(&spec.surface, &(pose.translation + dir * t), spec.seed);
                    t
                }
                None => f64::NAN,
            }
        });
        let valid = depth.map(|d| d.is_finite());
        if valid.count() == 0 {
            return Err(Error::NoIntersection(view));
        }
        sample.gt_pointmaps.push(unproject(&depth, &k));
        sample.valid.push(valid);
        sample.images.push(image);
    }
    Ok(sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSpec {
    /// Per-coordinate Gaussian point noise (scene units, camera frame).
    pub point_noise_sigma: f64,
    /// Standard deviation of the rotation-noise angle about a random axis.
    pub pose_rot_noise_deg: f64,
    /// Per-coordinate Gaussian camera-center noise.
    pub pose_trans_noise: f64,
    pub global_scale: f64,
    pub global_rigid: Option<Pose>,
    /// Threshold the emitted confidence logits are calibrated against.
    pub conf_epsilon: f64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            point_noise_sigma: 0.0,
            pose_rot_noise_deg: 0.0,
            pose_trans_noise: 0.0,
            global_scale: 1.0,
            global_rigid: None,
            conf_epsilon: 0.05,
        }
    }
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.point_noise_sigma >= 0.0
            && self.pose_rot_noise_deg >= 0.0
            && self.pose_trans_noise >= 0.0
            && self.global_scale > 0.0
            && self.conf_epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid perturbation {self:?}")))
        }
    }
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma is finite and non-negative")
}

/// Ground truth with seeded noise, then a global scale and optional rigid
/// transform applied to all views jointly.
///
/// Logits are +4 where the pixel's L1 error (in ground-truth scale) is below
/// `ε/2`, −4 above `2ε`, and 0 in between.
pub fn perturb(sample: &SceneSample, p: &PerturbSpec, seed: u64) -> Vec<ViewPrediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point_noise = normal(p.point_noise_sigma);
    let rot_noise = normal(p.pose_rot_noise_deg.to_radians());
    let trans_noise = normal(p.pose_trans_noise);
    let eps = p.conf_epsilon;
    let k = sample.intrinsics;
    let mut out = Vec::with_capacity(sample.n_views());
    for ((pm, mask), pose) in sample.gt_pointmaps.iter().zip(&sample.valid).zip(&sample.gt_poses) {
        let mut logits = Grid::filled(pm.height, pm.width, 0.0);
        let mut points = pm.clone();
        for v in 0..pm.height {
            for u in 0..pm.width {
                let i = pm.index(v, u);
                if !mask.data[i] {
                    points.data[i] = k.ray(u, v) * p.global_scale;
                    logits.data[i] = -4.0;
                    continue;
                }
                let delta = if p.point_noise_sigma > 0.0 {
                    Vector3::new(point_noise.sample(&mut rng), point_noise.sample(&mut rng), point_noise.sample(&mut rng))
                } else {
                    Vector3::zeros()
                };
                let err = delta.abs().sum() / pm.data[i].z;
                logits.data[i] = if err < 0.5 * eps {
                    4.0
                } else if err > 2.0 * eps {
                    -4.0
                } else {
                    0.0
                };
                points.data[i] = (pm.data[i] + delta) * p.global_scale;
            }
        }
        let mut rotation = pose.rotation;
        if p.pose_rot_noise_deg > 0.0 {
            let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
                .try_normalize(1e-12)
                .unwrap_or_else(Vector3::z);
            rotation = Rotation::from_axis_angle(&(axis * rot_noise.sample(&mut rng))).compose(&rotation);
        }
        let mut translation = pose.translation;
        if p.pose_trans_noise > 0.0 {
            translation += Vector3::new(trans_noise.sample(&mut rng), trans_noise.sample(&mut rng), trans_noise.sample(&mut rng));
        }
        let mut noisy = Pose::new(rotation, translation * p.global_scale);
        if let Some(g) = &p.global_rigid {
            noisy = g.compose(&noisy);
        }
        out.push(ViewPrediction { pointmap: points, conf_logits: logits, pose: noisy });
    }
    out
}
