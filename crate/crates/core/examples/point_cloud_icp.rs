//! Reconstruction accuracy of fused point clouds, before and after ICP.

use equiview::alignment::IcpConfig;
use equiview::eval::evaluate_points;
use equiview::synth::{generate, perturb, PerturbSpec, SceneSpec};

fn main() -> equiview::Result<()> {
    let scene = generate(&SceneSpec::sphere_orbit(6, 32, 3))?;
    let noise = PerturbSpec { point_noise_sigma: 0.01, pose_rot_noise_deg: 1.5, pose_trans_noise: 0.03, global_scale: 1.7, ..PerturbSpec::default() };
    let preds = perturb(&scene, &noise, 3);

    let plain = evaluate_points(&preds, &scene, None)?;
    let refined = evaluate_points(&preds, &scene, Some(&IcpConfig::new(30, 1e-9, None)?))?;
    for (name, r) in [("umeyama", &plain), ("umeyama+icp", &refined)] {
        println!(
            "{name:>12}: {} points, acc {:.4}/{:.4}  comp {:.4}/{:.4}  nc {:.4}",
            r.n_points,
            r.acc_mean,
            r.acc_median,
            r.comp_mean,
            r.comp_median,
            r.nc_mean.unwrap_or(f64::NAN)
        );
    }
    println!("icp rms history: {:?}", refined.icp_history.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>());
    Ok(())
}
