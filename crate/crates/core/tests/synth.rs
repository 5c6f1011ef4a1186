mod common;

use common::*;
use equiview::geometry::{geodesic_angle, Intrinsics, Pose, Sim3};
use equiview::losses::{loss_cam, loss_points, LossConfig};
use equiview::metrics::{ate, pairwise_angular_errors};
use equiview::synth::*;
use equiview::Error;
use nalgebra::Vector3;

fn sphere_sdf(p: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> f64 {
    (p - c).norm() - r
}

fn box_sdf(p: &Vector3<f64>, e: &[f64; 3]) -> f64 {
    // Inside the room the nearest wall is at distance min(half − |p_i|).
    -(0..3).map(|i| 0.5 * e[i] - p[i].abs()).fold(f64::INFINITY, f64::min)
}

/// First sign change of `f` along the ray by marching, refined by bisection.
fn march(f: &dyn Fn(&Vector3<f64>) -> f64, o: &Vector3<f64>, d: &Vector3<f64>, t_max: f64) -> Option<f64> {
    let step = 1e-3;
    let s0 = f(o).signum();
    let mut t = step;
    while t < t_max {
        if f(&(o + d * t)).signum() != s0 {
            let (mut lo, mut hi) = (t - step, t);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if f(&(o + d * mid)).signum() == s0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        t += step;
    }
    None
}

fn check_against_marching(spec: &SceneSpec, f: &dyn Fn(&Vector3<f64>) -> f64) {
    let sample = generate(spec).unwrap();
    let k = spec.intrinsics;
    let mut agreed = 0;
    for (view, pose) in sample.gt_poses.iter().enumerate() {
        for v in 0..k.height {
            for u in 0..k.width {
                let dir = pose.rotation.apply(&k.ray(u, v));
                let oracle = march(f, &pose.translation, &dir, 20.0);
                let i = v * k.width + u;
                match oracle {
                    Some(t) => {
                        assert!(sample.valid[view].data[i], "view {view} pixel ({u},{v})");
                        assert!((sample.gt_pointmaps[view].data[i].z - t).abs() < 1e-9);
                        agreed += 1;
                    }
                    None => {
                        // Marching can step over a grazing hit; anything it misses must touch the surface only tangentially.
                        if sample.valid[view].data[i] {
                            let p = pose.transform_point(&sample.gt_pointmaps[view].data[i]);
                            let n = spec.surface.normal_at(&p);
                            assert!(n.dot(&dir.normalize()).abs() < 0.05);
                        }
                    }
                }
            }
        }
    }
    assert!(agreed > 0);
}

#[test]
fn sphere_depth_matches_ray_marching() {
    let spec = SceneSpec::sphere_orbit(3, 24, 0);
    check_against_marching(&spec, &|p| sphere_sdf(p, &Vector3::zeros(), 1.5));
    let off = SceneSpec { surface: Surface::Sphere { center: [0.3, -0.2, 0.1], radius: 1.0 }, ..spec };
    check_against_marching(&off, &|p| sphere_sdf(p, &Vector3::new(0.3, -0.2, 0.1), 1.0));
}

#[test]
fn plane_and_box_depth_match_ray_marching() {
    let k = Intrinsics::from_fov(20, 16, 70.0).unwrap();
    let n = Vector3::new(0.2, -0.1, 1.0);
    let plane = SceneSpec {
        surface: Surface::Plane { normal: [n.x, n.y, n.z], offset: 4.0 },
        trajectory: Trajectory::Line { start: [-0.5, 0.0, 0.0], step: [0.25, 0.1, 0.0], n_views: 4 },
        intrinsics: k,
        seed: 3,
    };
    check_against_marching(&plane, &|p| (n.dot(p) - 4.0) / n.norm());
    let e = [6.0, 4.0, 8.0];
    let room = SceneSpec {
        surface: Surface::BoxRoom { extents: e },
        trajectory: Trajectory::Orbit { radius: 1.0, n_views: 5, axis: [0.0, 1.0, 0.0] },
        intrinsics: k,
        seed: 3,
    };
    check_against_marching(&room, &|p| box_sdf(p, &e));
    let s = generate(&room).unwrap();
    assert!(s.valid.iter().all(|m| m.data.iter().all(|&b| b)));
}

#[test]
fn valid_points_lie_on_their_pixel_rays() {
    let spec = SceneSpec::sphere_orbit(4, 16, 2);
    let s = generate(&spec).unwrap();
    let k = s.intrinsics;
    for (pm, m) in s.gt_pointmaps.iter().zip(&s.valid) {
        for v in 0..k.height {
            for u in 0..k.width {
                let i = v * k.width + u;
                if m.data[i] {
                    let p = pm.data[i];
                    assert!((k.fx * p.x / p.z + k.cx - u as f64).abs() < 1e-9);
                    assert!((k.fy * p.y / p.z + k.cy - v as f64).abs() < 1e-9);
                    assert!(p.z > 0.0);
                } else {
                    assert!(pm.data[i].x.is_nan());
                }
            }
        }
    }
}

#[test]
fn orbit_poses_look_at_origin() {
    let t = Trajectory::Orbit { radius: 3.0, n_views: 7, axis: [1.0, 1.0, 0.0] };
    for p in t.poses().unwrap() {
        assert!((p.center().norm() - 3.0).abs() < 1e-12);
        let forward = p.rotation.apply(&Vector3::z());
        assert!((forward + p.center() / 3.0).norm() < 1e-12);
        assert!(p.center().dot(&Vector3::new(1.0, 1.0, 0.0)).abs() < 1e-12);
        let (orth, det) = p.rotation.orthonormality_error();
        assert!(orth < 1e-12 && det < 1e-12);
    }
}

#[test]
fn generation_is_deterministic_and_validated() {
    let spec = SceneSpec::sphere_orbit(3, 16, 9);
    // Background pixels hold NaN, so compare the debug rendering.
    assert_eq!(format!("{:?}", generate(&spec).unwrap()), format!("{:?}", generate(&spec).unwrap()));
    let other = generate(&SceneSpec { seed: 10, ..spec.clone() }).unwrap();
    assert_ne!(generate(&spec).unwrap().images, other.images);
    let bad = SceneSpec { surface: Surface::Sphere { center: [0.0; 3], radius: -1.0 }, ..spec.clone() };
    assert!(matches!(generate(&bad), Err(Error::InvalidConfig(_))));
    let away = SceneSpec { surface: Surface::Sphere { center: [0.0, 0.0, 100.0], radius: 0.1 }, ..spec.clone() };
    assert!(matches!(generate(&away), Err(Error::NoIntersection(0))));
    let none = SceneSpec { trajectory: Trajectory::Orbit { radius: 5.0, n_views: 0, axis: [0.0, 0.0, 1.0] }, ..spec };
    assert!(generate(&none).is_err());
}

#[test]
fn perturbation_noise_matches_requested_statistics() {
    let sample = generate(&SceneSpec::sphere_orbit(24, 32, 4)).unwrap();
    let spec = PerturbSpec { point_noise_sigma: 0.02, pose_rot_noise_deg: 3.0, pose_trans_noise: 0.1, ..PerturbSpec::default() };
    let preds = perturb(&sample, &spec, 11);
    let mut deltas = Vec::new();
    for ((p, g), m) in preds.iter().zip(&sample.gt_pointmaps).zip(&sample.valid) {
        for i in 0..m.len() {
            if m.data[i] {
                deltas.extend((p.pointmap.data[i] - g.data[i]).iter().copied());
            }
        }
    }
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 5.0 * 0.02 / n.sqrt());
    assert!((var.sqrt() - 0.02).abs() < 5.0 * 0.02 / (2.0 * n).sqrt());

    // Rotation and translation noise, pooled over many seeds.
    let (mut rot2, mut trans) = (Vec::new(), Vec::new());
    for seed in 0..200 {
        for (p, g) in perturb(&sample, &spec, seed).iter().zip(&sample.gt_poses) {
            rot2.push(geodesic_angle(&p.pose.rotation, &g.rotation).powi(2));
            trans.extend((p.pose.translation - g.translation).iter().copied());
        }
    }
    let sigma = 3f64.to_radians();
    let m = rot2.len() as f64;
    let ms = rot2.iter().sum::<f64>() / m;
    // θ ~ N(0, σ²): E θ² = σ², Var θ² = 2σ⁴.
    assert!((ms - sigma * sigma).abs() < 5.0 * (2.0f64).sqrt() * sigma * sigma / m.sqrt());
    let nt = trans.len() as f64;
    let sd = (trans.iter().map(|t| t * t).sum::<f64>() / nt).sqrt();
    assert!((sd - 0.1).abs() < 5.0 * 0.1 / (2.0 * nt).sqrt());
}

#[test]
fn perturbation_logits_follow_calibration_bands() {
    let sample = generate(&SceneSpec::sphere_orbit(4, 24, 5)).unwrap();
    let spec = PerturbSpec { point_noise_sigma: 0.1, ..PerturbSpec::default() };
    let preds = perturb(&sample, &spec, 3);
    let eps = spec.conf_epsilon;
    let mut seen = [0usize; 3];
    for ((p, g), m) in preds.iter().zip(&sample.gt_pointmaps).zip(&sample.valid) {
        for i in 0..m.len() {
            let l = p.conf_logits.data[i];
            if !m.data[i] {
                assert_eq!(l, -4.0);
                continue;
            }
            let e = (p.pointmap.data[i] - g.data[i]).abs().sum() / g.data[i].z;
            let expected = if e < 0.5 * eps { 4.0 } else if e > 2.0 * eps { -4.0 } else { 0.0 };
            assert_eq!(l, expected);
            seen[(expected as i32 / 4 + 1) as usize] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
}

#[test]
fn zero_noise_perturbation_is_exact_gauge() {
    let sample = generate(&SceneSpec::sphere_orbit(5, 20, 6)).unwrap();
    let mut rng = rng(6);
    for _ in 0..20 {
        let c = 10f64.powf(rand::Rng::random_range(&mut rng, -1.0..1.0));
        let g = random_pose(&mut rng, 4.0);
        let spec = PerturbSpec { global_scale: c, global_rigid: Some(g), ..PerturbSpec::default() };
        let preds = perturb(&sample, &spec, 1);
        for ((p, gt), m) in preds.iter().zip(&sample.gt_pointmaps).zip(&sample.valid) {
            for i in 0..m.len() {
                if m.data[i] {
                    assert!((p.pointmap.data[i] - gt.data[i] * c).norm() < 1e-12 * c * (1.0 + gt.data[i].norm()));
                }
            }
        }
        // Poses: T̂ = G·(R, c·t).
        for (p, t) in preds.iter().zip(&sample.gt_poses) {
            let expected = Sim3::from_pose(&g).apply_to_pose(&Pose::new(t.rotation, t.translation * c));
            assert!((pose_matrix(&p.pose) - pose_matrix(&expected)).abs().max() < 1e-9);
        }
        let (loss, s) = loss_points(&preds, &sample.targets()).unwrap();
        assert!(loss < 1e-12 && (s * c - 1.0).abs() < 1e-12);
        let pred_poses: Vec<_> = preds.iter().map(|p| p.pose).collect();
        let (rot, trans) = loss_cam(&pred_poses, &sample.gt_poses, s, &LossConfig::default()).unwrap();
        assert!(rot < 1e-7 && trans < 1e-9);
        assert!(pairwise_angular_errors(&pred_poses, &sample.gt_poses).unwrap().iter().all(|e| e.max() < 1e-5));
        assert!(ate(&pred_poses, &sample.gt_poses).unwrap() < 1e-9);
    }
}

#[test]
fn perturbation_is_seeded() {
    let sample = generate(&SceneSpec::sphere_orbit(3, 12, 0)).unwrap();
    let spec = PerturbSpec { point_noise_sigma: 0.01, pose_rot_noise_deg: 1.0, pose_trans_noise: 0.01, ..PerturbSpec::default() };
    assert_eq!(perturb(&sample, &spec, 5), perturb(&sample, &spec, 5));
    assert_ne!(perturb(&sample, &spec, 5), perturb(&sample, &spec, 6));
    assert!(PerturbSpec { global_scale: 0.0, ..spec }.validate().is_err());
}

#[test]
fn reordered_sample_permutes_every_field() {
    let sample = generate(&SceneSpec::sphere_orbit(4, 12, 0)).unwrap();
    let r = sample.reordered(&[2, 0, 3, 1]);
    assert_eq!(r.gt_poses[0], sample.gt_poses[2]);
    assert_eq!(r.images[3], sample.images[1]);
    assert_eq!(r.valid[1], sample.valid[0]);
    assert_eq!(format!("{:?}", r.reordered(&[1, 3, 0, 2])), format!("{sample:?}"));
}
