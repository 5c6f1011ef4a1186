//! Evaluate the training loss on a noisy, rescaled prediction and compare
//! its analytic gradient with finite differences.

use equiview::eval::gradient_check;
use equiview::losses::{grad_total_loss, total_loss, LossConfig};
use equiview::synth::{generate, perturb, PerturbSpec, SceneSpec};

fn main() -> equiview::Result<()> {
    let scene = generate(&SceneSpec::sphere_orbit(4, 16, 1))?;
    let targets = scene.targets();
    let noise = PerturbSpec { point_noise_sigma: 0.02, pose_rot_noise_deg: 2.0, pose_trans_noise: 0.05, global_scale: 3.0, ..PerturbSpec::default() };
    let preds = perturb(&scene, &noise, 9);
    let cfg = LossConfig::default();

    let report = total_loss(&preds, &targets, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    // The prediction was scaled by 3, so the optimal alignment scale is about 1/3.
    println!("s* = {:.4}", report.s_star);

    let grads = grad_total_loss(&preds, &targets, &cfg)?;
    println!("largest gradient entry {:.3e}", grads.max_abs());
    let check = gradient_check(&preds, &targets, &cfg, 40, 1e-5, 0)?;
    println!("gradcheck: {} checked, {} skipped near kinks, max relative error {:.2e}", check.checked, check.skipped, check.max_rel_error);
    Ok(())
}
