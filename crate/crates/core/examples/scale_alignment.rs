//! Robust scale recovery: the weighted-L1 solver shrugs off outliers that
//! drag a least-squares fit away from the true scale.

use equiview::alignment::{solve_depth_scale, solve_scale_weighted_l1, ScaleProblem};
use equiview::{DepthMap, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> equiview::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth = 2.5;
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for k in 0..1000 {
        let a: f64 = rng.random_range(0.5..3.0);
        let b = if k % 5 == 0 { rng.random_range(20.0..40.0) } else { truth * a + rng.random_range(-0.02..0.02) };
        pred.push(a);
        gt.push(b);
    }
    let least_squares = pred.iter().zip(&gt).map(|(a, b)| a * b).sum::<f64>() / pred.iter().map(|a| a * a).sum::<f64>();
    let problem = ScaleProblem::new(pred, gt, vec![1.0; 1000])?;
    let s = solve_scale_weighted_l1(&problem)?;
    println!("true scale {truth}, weighted L1 {s:.4}, least squares {least_squares:.4}");
    println!("objective at the solution {:.4}", problem.objective(s));

    let depth = DepthMap::from_fn(24, 32, |v, u| 2.0 + 0.05 * (u + v) as f64);
    let halved = depth.map(|d| d / 2.0);
    let mask = Mask::filled(24, 32, true);
    println!("depth scale for a half-size prediction: {}", solve_depth_scale(&halved, &depth, &mask)?);
    Ok(())
}
