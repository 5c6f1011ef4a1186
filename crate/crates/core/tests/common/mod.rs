//! Independent reference implementations used by the integration and
//! acceptance tests. None of these call the decompositions the library uses.

#![allow(dead_code)]

use equiview::alignment::ScaleProblem;
use equiview::geometry::{Pose, Rotation};
use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = random_vec(rng, 1.0);
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Uniformly random rotation from a unit quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    let q = loop {
        let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0f64..1.0)];
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            break q.map(|x| x / n);
        }
    };
    Rotation::from_matrix_unchecked(quat_to_matrix(q))
}

pub fn random_pose(rng: &mut ChaCha8Rng, extent: f64) -> Pose {
    Pose::new(random_rotation(rng), random_vec(rng, extent))
}

/// `[w, x, y, z]` unit quaternion to a rotation matrix.
pub fn quat_to_matrix([w, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Shepperd's method.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let tr = m.trace();
    let q = if tr > m[(0, 0)].max(m[(1, 1)]).max(m[(2, 2)]) {
        let s = (1.0 + tr).sqrt() * 2.0;
        [0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s]
    } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s]
    } else if m[(1, 1)] >= m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [(m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s]
    };
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    q.map(|x| x / n)
}

/// Angle between two rotations through their quaternions.
pub fn quat_angle(a: &Rotation, b: &Rotation) -> f64 {
    let (p, q) = (matrix_to_quat(a.matrix()), matrix_to_quat(b.matrix()));
    // r = conj(p) * q
    let w = p[0] * q[0] + p[1] * q[1] + p[2] * q[2] + p[3] * q[3];
    let x = p[0] * q[1] - p[1] * q[0] - p[2] * q[3] + p[3] * q[2];
    let y = p[0] * q[2] + p[1] * q[3] - p[2] * q[0] - p[3] * q[1];
    let z = p[0] * q[3] - p[1] * q[2] + p[2] * q[1] - p[3] * q[0];
    2.0 * (x * x + y * y + z * z).sqrt().atan2(w.abs())
}

fn adjugate_inverse(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)];
    let cof = Matrix3::new(
        c(1, 1, 2, 2),
        -c(1, 0, 2, 2),
        c(1, 0, 2, 1),
        -c(0, 1, 2, 2),
        c(0, 0, 2, 2),
        -c(0, 0, 2, 1),
        c(0, 1, 1, 2),
        -c(0, 0, 1, 2),
        c(0, 0, 1, 1),
    );
    let det = m[(0, 0)] * cof[(0, 0)] + m[(0, 1)] * cof[(0, 1)] + m[(0, 2)] * cof[(0, 2)];
    cof.transpose() / det
}

/// Orthogonal polar factor by Higham's scaled Newton iteration.
pub fn polar_orthogonal(m: &Matrix3<f64>) -> Matrix3<f64> {
    let mut x = *m;
    for _ in 0..100 {
        let inv_t = adjugate_inverse(&x).transpose();
        let g = ((inv_t.norm()) / x.norm()).sqrt();
        let next = 0.5 * (x * g + inv_t / g);
        let done = (next - x).norm() < 1e-15 * next.norm();
        x = next;
        if done {
            break;
        }
    }
    // Two unscaled steps polish the fixed point.
    for _ in 0..2 {
        x = 0.5 * (x + adjugate_inverse(&x).transpose());
    }
    x
}

/// Eigenvalues (ascending) and eigenvectors (columns) by cyclic Jacobi rotations.
pub fn jacobi_eigen(a: &Matrix3<f64>) -> ([f64; 3], Matrix3<f64>) {
    let mut a = *a;
    let mut v = Matrix3::identity();
    for _ in 0..100 {
        let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        if off < 1e-300 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[(p, q)].abs() < 1e-300 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut j = Matrix3::identity();
            j[(p, p)] = c;
            j[(q, q)] = c;
            j[(p, q)] = s;
            j[(q, p)] = -s;
            a = j.transpose() * a * j;
            v *= j;
        }
    }
    let mut idx = [0, 1, 2];
    idx.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let vals = idx.map(|i| a[(i, i)]);
    let vecs = Matrix3::from_columns(&idx.map(|i| v.column(i).into_owned()));
    (vals, vecs)
}

/// Nearest rotation to `m` (Frobenius): the polar factor, with the direction
/// of the smallest singular value flipped when `det m < 0`.
pub fn nearest_rotation_oracle(m: &Matrix3<f64>) -> Matrix3<f64> {
    let q = polar_orthogonal(m);
    if q.determinant() > 0.0 {
        return q;
    }
    let h = q.transpose() * m;
    let h = 0.5 * (h + h.transpose());
    let (_, vecs) = jacobi_eigen(&h);
    let v = vecs.column(0).into_owned();
    q * (Matrix3::identity() - 2.0 * v * v.transpose())
}

pub fn pose_matrix(p: &Pose) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(p.rotation.matrix());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&p.translation);
    m
}

/// Neumaier-compensated sum.
pub fn accurate_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Weighted L1 objective evaluated with compensated summation.
pub fn scale_objective(p: &ScaleProblem, s: f64) -> f64 {
    accurate_sum(p.pred.iter().zip(&p.gt).zip(&p.weight).map(|((a, b), w)| w * (s * a - b).abs()))
}

/// Minimum of the objective over a log-spaced grid of `points` scales
/// spanning the positive ratio candidates. The grid is swept with prefix
/// sums, and the best few grid points are re-evaluated directly.
pub fn grid_minimum(p: &ScaleProblem, points: usize) -> (f64, f64) {
    let mut cands: Vec<(f64, f64)> = Vec::new();
    let mut constant = 0.0;
    for ((&a, &b), &w) in p.pred.iter().zip(&p.gt).zip(&p.weight) {
        if a.abs() <= 1e-12 {
            constant += w * b.abs();
        } else {
            cands.push((b / a, w * a.abs()));
        }
    }
    cands.sort_by(|x, y| x.0.total_cmp(&y.0));
    let positive: Vec<f64> = cands.iter().map(|c| c.0).filter(|&r| r > 0.0).collect();
    let lo = positive.first().copied().unwrap_or(1e-3) / 2.0;
    let hi = positive.last().copied().unwrap_or(1e3) * 2.0;
    let total_m: f64 = cands.iter().map(|c| c.1).sum();
    let total_rm: f64 = cands.iter().map(|c| c.0 * c.1).sum();
    let (mut below_m, mut below_rm, mut k) = (0.0, 0.0, 0);
    let mut scored: Vec<(f64, f64)> = Vec::with_capacity(points);
    for g in 0..points {
        let s = lo * (hi / lo).powf(g as f64 / (points - 1) as f64);
        while k < cands.len() && cands[k].0 < s {
            below_m += cands[k].1;
            below_rm += cands[k].0 * cands[k].1;
            k += 1;
        }
        let f = constant + s * below_m - below_rm + (total_rm - below_rm) - s * (total_m - below_m);
        scored.push((f, s));
    }
    scored.sort_by(|x, y| x.0.total_cmp(&y.0));
    scored
        .iter()
        .take(16)
        .map(|&(_, s)| (scale_objective(p, s), s))
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .unwrap()
}

/// Random problem with `n` terms, a true scale and a fraction of outliers.
pub fn random_scale_problem(rng: &mut ChaCha8Rng, n: usize, outlier_frac: f64) -> ScaleProblem {
    let truth = 10f64.powf(rng.random_range(-1.0..1.0));
    let mut pred = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    let mut weight = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.random_range(-2.0..2.0);
        let b = if rng.random::<f64>() < outlier_frac { rng.random_range(-20.0..20.0) } else { truth * a + rng.random_range(-0.05..0.05) };
        pred.push(a);
        gt.push(b);
        weight.push(rng.random_range(0.1..1.0));
    }
    ScaleProblem::new(pred, gt, weight).unwrap()
}

pub fn brute_nearest(query: &Vector3<f64>, target: &[Vector3<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, t) in target.iter().enumerate() {
        let d = (query - t).norm();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
