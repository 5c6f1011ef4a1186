//! How much do the metrics move when a different view is placed first?

use equiview::eval::evaluate_robustness;
use equiview::net::{init_model, Mode, NetConfig};
use equiview::synth::{generate, SceneSpec};

fn main() -> equiview::Result<()> {
    let scene = generate(&SceneSpec::sphere_orbit(5, 16, 6))?;
    for mode in [Mode::Equivariant, Mode::RefToken, Mode::RefEmbed] {
        let w = init_model(&NetConfig { dim: 32, depth: 2, decoder_depth: 2, mode, seed: 6, ..NetConfig::default() })?;
        let r = evaluate_robustness(&scene, &w)?;
        let worst = r.std.iter().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k.as_str()).unwrap_or("-");
        println!("{mode:?}: max std {:.3e} ({worst})", r.max_std);
    }
    Ok(())
}
