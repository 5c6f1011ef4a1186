//! Score a jittered camera trajectory against ground truth. The metrics are
//! unaffected by the arbitrary similarity transform applied on top.

use equiview::eval::evaluate_poses;
use equiview::geometry::{Pose, Rotation, Sim3};
use equiview::synth::Trajectory;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> equiview::Result<()> {
    let gt = Trajectory::Orbit { radius: 4.0, n_views: 12, axis: [0.0, 1.0, 0.0] }.poses()?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut unit = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let jittered: Vec<Pose> = gt
        .iter()
        .map(|p| Pose::new(Rotation::from_axis_angle(&(unit() * 0.03)).compose(&p.rotation), p.center() + unit() * 0.1))
        .collect();
    let gauge = Sim3::new(0.3, Rotation::about_z(1.0), Vector3::new(5.0, -2.0, 1.0))?;
    let pred: Vec<Pose> = jittered.iter().map(|p| gauge.apply_to_pose(p)).collect();

    let report = evaluate_poses(&pred, &gt)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}
