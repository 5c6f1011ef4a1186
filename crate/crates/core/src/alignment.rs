//! Gauge-removing solvers.
//!
//! - [`solve_scale_weighted_l1`]: the single scene scale minimizing the
//!   depth-weighted L1 distance between predicted and ground-truth points.
//! - [`solve_depth_scale`] / [`solve_depth_scale_shift`]: depth alignment for evaluation.
//! - [`icp_refine`]: point-to-point ICP after a coarse Umeyama Sim(3).
//!
//! Nearest neighbours come from [`KdTree`], an exact median-split tree.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{umeyama_sim3, Sim3};
use crate::grid::{check_shape, DepthMap, Mask};
use crate::{Error, Result};

/// Coordinates below this magnitude carry no scale information.
pub const MIN_COORD: f64 = 1e-12;

/// `min_{s>0} Σ w_k·|s·a_k − b_k|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleProblem {
    pub pred: Vec<f64>,
    pub gt: Vec<f64>,
    pub weight: Vec<f64>,
}

impl ScaleProblem {
    pub fn new(pred: Vec<f64>, gt: Vec<f64>, weight: Vec<f64>) -> Result<Self> {
        if pred.len() != gt.len() || pred.len() != weight.len() {
            return Err(Error::ShapeMismatch(format!(
                "scale problem lengths {} / {} / {}",
                pred.len(),
                gt.len(),
                weight.len()
            )));
        }
        if let Some(w) = weight.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidConfig(format!("weights must be finite and positive, got {w}")));
        }
        Ok(Self { pred, gt, weight })
    }

    /// Objective value at scale `s`, summed in index order.
    pub fn objective(&self, s: f64) -> f64 {
        self.pred
            .iter()
            .zip(&self.gt)
            .zip(&self.weight)
            .map(|((a, b), w)| w * (s * a - b).abs())
            .sum()
    }
}

/// Exact minimizer of [`ScaleProblem::objective`] over `s > 0`.
///
/// Each term with `|a_k| > MIN_COORD` contributes a breakpoint `r_k = b_k/a_k`
/// with mass `w_k·|a_k|`. Breakpoints at or below zero only push the slope up
/// on `s > 0`, so they sort first and their mass counts as already
/// accumulated; the answer is the lowest positive breakpoint where the
/// cumulative mass reaches half the total. If non-positive breakpoints hold
/// more than half the mass, the objective increases on all of `s > 0`, has no
/// minimizer there, and the problem is rejected with `NoValidPairs`.
///
/// Breakpoints are reduced in sorted `(r, mass)` order, so the result does not
/// depend on the order of the terms.
pub fn solve_scale_weighted_l1(p: &ScaleProblem) -> Result<f64> {
    let mut candidates: Vec<(f64, f64)> = p
        .pred
        .iter()
        .zip(&p.gt)
        .zip(&p.weight)
        .filter(|((a, b), _)| a.abs() > MIN_COORD && b.is_finite())
        .map(|((&a, &b), &w)| (b / a, w * a.abs()))
        .collect();
    if !candidates.iter().any(|c| c.0 > 0.0) {
        return Err(Error::NoValidPairs("no pair with a positive ratio b/a".into()));
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let total: f64 = candidates.iter().map(|c| c.1).sum();
    let half = 0.5 * total;
    let mut cum = 0.0;
    let mut last_positive = f64::NAN;
    for &(r, m) in &candidates {
        if r > 0.0 && cum > half {
            return Err(Error::NoValidPairs("non-positive ratios b/a hold more than half the mass".into()));
        }
        cum += m;
        if r > 0.0 {
            if cum >= half {
                return Ok(r);
            }
            last_positive = r;
        }
    }
    // Only reachable through rounding in the running sum.
    Ok(last_positive)
}

fn valid_depth_pairs(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<Vec<(f64, f64)>> {
    check_shape(pred, gt, "pred/gt depth")?;
    check_shape(pred, mask, "depth/mask")?;
    Ok(pred
        .data
        .iter()
        .zip(&gt.data)
        .zip(&mask.data)
        .filter(|((d, g), &m)| m && g.is_finite() && **g > 0.0 && d.is_finite())
        .map(|((d, g), _)| (*d, *g))
        .collect())
}

/// Scale-only depth alignment: weighted-median L1 with weight `1/gt`.
pub fn solve_depth_scale(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<f64> {
    let pairs = valid_depth_pairs(pred, gt, mask)?;
    if pairs.is_empty() {
        return Err(Error::NoValidPairs("no valid depth pixels".into()));
    }
    let problem = ScaleProblem {
        pred: pairs.iter().map(|p| p.0).collect(),
        gt: pairs.iter().map(|p| p.1).collect(),
        weight: pairs.iter().map(|p| 1.0 / p.1).collect(),
    };
    solve_scale_weighted_l1(&problem)
}

/// Least-squares `(s, b)` minimizing `Σ(s·pred + b − gt)²` over the mask.
pub fn solve_depth_scale_shift(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<(f64, f64)> {
    let pairs = valid_depth_pairs(pred, gt, mask)?;
    if pairs.len() < 2 {
        return Err(Error::DegenerateInput(format!("need at least 2 valid pixels, got {}", pairs.len())));
    }
    let n = pairs.len() as f64;
    let mean_p = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_g = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut spp = 0.0;
    let mut spg = 0.0;
    for &(p, g) in &pairs {
        spp += (p - mean_p) * (p - mean_p);
        spg += (p - mean_p) * (g - mean_g);
    }
    if !(spp > 1e-24 * n * (1.0 + mean_p * mean_p)) {
        return Err(Error::DegenerateInput("prediction is constant over the mask".into()));
    }
    let s = spg / spp;
    Ok((s, mean_g - s * mean_p))
}

const LEAF_SIZE: usize = 16;

#[derive(Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

/// Exact 3D nearest-neighbour index: median split on the widest axis,
/// leaves of at most 16 points. Immutable once built.
#[derive(Debug)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    root: Node,
}

#[inline]
fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::build_node(points, &mut order, 0);
        Ok(KdTree { points: points.to_vec(), order, root })
    }

    fn build_node(points: &[Vector3<f64>], order: &mut [usize], offset: usize) -> Node {
        let n = order.len();
        if n <= LEAF_SIZE {
            return Node::Leaf { start: offset, end: offset + n };
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in order.iter() {
            lo = lo.inf(&points[i]);
            hi = hi.sup(&points[i]);
        }
        let axis = (hi - lo).iamax();
        let mid = n / 2;
        order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = points[order[mid]][axis];
        let (left, right) = order.split_at_mut(mid);
        Node::Split {
            axis,
            value,
            left: Box::new(Self::build_node(points, left, offset)),
            right: Box::new(Self::build_node(points, right, offset + mid)),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and distance of the closest point; ties go to the smallest index.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(&self.root, q, &mut best);
        (best.0, best.1.sqrt())
    }

    fn search(&self, node: &Node, q: &Vector3<f64>, best: &mut (usize, f64)) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d = dist2(q, &self.points[i]);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                // Left holds coordinates <= value, right >= value.
                let diff = q[*axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// For every query point, the closest target point (smallest index on ties).
pub fn nearest_neighbors(query: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Vec<(usize, f64)>> {
    let tree = KdTree::build(target)?;
    Ok(query.iter().map(|q| tree.nearest(q)).collect())
}

/// Stopping rules for [`icp_refine`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    max_iterations: usize,
    convergence_tol: f64,
    max_correspondence_dist: Option<f64>,
}

impl IcpConfig {
    pub fn new(max_iterations: usize, convergence_tol: f64, max_correspondence_dist: Option<f64>) -> Result<Self> {
        if max_iterations == 0 {
            return Err(Error::InvalidConfig("ICP max_iterations must be >= 1".into()));
        }
        if !(convergence_tol > 0.0) {
            return Err(Error::InvalidConfig("ICP convergence_tol must be positive".into()));
        }
        if let Some(d) = max_correspondence_dist {
            if !(d > 0.0) {
                return Err(Error::InvalidConfig("ICP max_correspondence_dist must be positive".into()));
            }
        }
        Ok(Self { max_iterations, convergence_tol, max_correspondence_dist })
    }

    pub fn max_iterations(&self) -> usize {
        self.max_iterations
    }

    pub fn convergence_tol(&self) -> f64 {
        self.convergence_tol
    }

    pub fn max_correspondence_dist(&self) -> Option<f64> {
        self.max_correspondence_dist
    }
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iterations: 50, convergence_tol: 1e-10, max_correspondence_dist: None }
    }
}

#[derive(Debug, Clone)]
pub struct IcpOutcome {
    pub transform: Sim3,
    /// RMS correspondence distance of `init` followed by one entry per accepted iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl IcpOutcome {
    pub fn final_error(&self) -> f64 {
        *self.history.last().unwrap_or(&f64::NAN)
    }
}

struct Matches {
    src: Vec<Vector3<f64>>,
    dst: Vec<Vector3<f64>>,
    rms: f64,
}

fn correspond(tree: &KdTree, src: &[Vector3<f64>], g: &Sim3, max_dist: Option<f64>) -> Matches {
    let mut m = Matches { src: Vec::new(), dst: Vec::new(), rms: 0.0 };
    let mut sum = 0.0;
    for p in src {
        let (j, d) = tree.nearest(&g.apply(p));
        if max_dist.is_none_or(|md| d <= md) {
            m.src.push(*p);
            m.dst.push(tree.points[j]);
            sum += d * d;
        }
    }
    m.rms = if m.src.is_empty() { f64::INFINITY } else { (sum / m.src.len() as f64).sqrt() };
    m
}

/// Point-to-point ICP with the scale held at `init.scale`.
///
/// Each iteration matches `g(src)` to nearest `dst` points, then refits the
/// rigid part by Umeyama on the scaled source. The tracked error is the RMS
/// correspondence distance, which this scheme cannot increase; an iteration
/// that would increase it (round-off, correspondence gating) is rejected and
/// the loop stops.
pub fn icp_refine(src: &[Vector3<f64>], dst: &[Vector3<f64>], init: &Sim3, cfg: &IcpConfig) -> Result<IcpOutcome> {
    if src.len() < 3 || dst.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "ICP needs at least 3 points per cloud, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let tree = KdTree::build(dst)?;
    let scale = init.scale;
    let mut current = *init;
    let mut matches = correspond(&tree, src, &current, cfg.max_correspondence_dist);
    let mut history = vec![matches.rms];
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        if matches.src.len() < 3 {
            return Err(Error::DegenerateInput(format!("only {} ICP correspondences", matches.src.len())));
        }
        let scaled: Vec<_> = matches.src.iter().map(|p| p * scale).collect();
        let rigid = umeyama_sim3(&scaled, &matches.dst, false)?;
        let candidate = Sim3 { scale, rotation: rigid.rotation, translation: rigid.translation };
        let next = correspond(&tree, src, &candidate, cfg.max_correspondence_dist);
        iterations += 1;
        let prev = matches.rms;
        if next.rms > prev {
            break;
        }
        current = candidate;
        history.push(next.rms);
        matches = next;
        if matches.rms == 0.0 || (prev - matches.rms) <= cfg.convergence_tol * prev {
            break;
        }
    }
    Ok(IcpOutcome { transform: current, history, iterations })
}
