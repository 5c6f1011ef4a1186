//! Normalized eigenvalues of the camera-center covariance for a few
//! trajectory shapes.

use equiview::geometry::Pose;
use equiview::metrics::pose_spectrum;
use equiview::synth::Trajectory;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> equiview::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scattered: Vec<Pose> = (0..30)
        .map(|_| Pose::new(equiview::Rotation::identity(), Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))))
        .collect();
    let shapes = [
        ("line", Trajectory::Line { start: [0.0, 0.0, 0.0], step: [0.2, 0.1, 0.0], n_views: 10 }.poses()?),
        ("orbit", Trajectory::Orbit { radius: 3.0, n_views: 10, axis: [0.0, 1.0, 0.0] }.poses()?),
        ("scattered", scattered),
    ];
    for (name, poses) in shapes {
        let s = pose_spectrum(&poses)?;
        println!("{name:>9}: [{:.4}, {:.4}, {:.4}]", s.values[0], s.values[1], s.values[2]);
    }
    Ok(())
}
