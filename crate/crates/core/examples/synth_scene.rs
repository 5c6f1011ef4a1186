//! Render a sphere seen from an orbit of cameras, then the inside of a box
//! room, and summarize each view.

use equiview::synth::{generate, SceneSpec, Surface, Trajectory};

fn main() -> equiview::Result<()> {
    let sphere = SceneSpec::sphere_orbit(6, 32, 7);
    let room = SceneSpec {
        surface: Surface::BoxRoom { extents: [8.0, 4.0, 8.0] },
        trajectory: Trajectory::Orbit { radius: 1.0, n_views: 4, axis: [0.0, 1.0, 0.0] },
        ..sphere.clone()
    };
    for (name, spec) in [("sphere", sphere), ("box room", room)] {
        println!("{name}:");
        summarize(&spec)?;
    }
    Ok(())
}

fn summarize(spec: &SceneSpec) -> equiview::Result<()> {
    let scene = generate(spec)?;
    for (k, (pose, (pm, valid))) in scene.gt_poses.iter().zip(scene.gt_pointmaps.iter().zip(&scene.valid)).enumerate() {
        let hits: Vec<f64> = pm.data.iter().zip(&valid.data).filter(|(_, v)| **v).map(|(p, _)| p.z).collect();
        let near = hits.iter().copied().fold(f64::INFINITY, f64::min);
        let far = hits.iter().copied().fold(0.0, f64::max);
        let c = pose.center();
        println!(
            "  view {k}: center ({:+.2}, {:+.2}, {:+.2})  coverage {:>5.1}%  depth {near:.3}..{far:.3}",
            c.x,
            c.y,
            c.z,
            100.0 * hits.len() as f64 / valid.len() as f64
        );
    }
    Ok(())
}
