//! Write tensors to the binary container, read them back, and persist a
//! scene with its JSON manifest.

use equiview::io::{load_scene, manifest_path, read_container, save_scene, write_container, Tensor};
use equiview::synth::{generate, SceneSpec};

fn main() -> equiview::Result<()> {
    let tensors = vec![
        Tensor::from_f32("weights", vec![2, 3], &[0.5, -1.0, 2.0, 0.0, 1.5, 3.25]),
        Tensor::from_f64("poses", vec![1, 4, 4], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        Tensor::from_u8("mask", vec![4], &[1, 0, 1, 1]),
    ];
    let bytes = write_container(&tensors)?;
    let back = read_container(&bytes)?;
    assert_eq!(back, tensors);
    println!("{} tensors in {} bytes", back.len(), bytes.len());
    for t in &back {
        println!("  {:<8} {:?} {:?}", t.name, t.dtype, t.shape);
    }

    let dir = std::env::temp_dir().join("equiview-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("scene.bin");
    let scene = generate(&SceneSpec::sphere_orbit(3, 16, 0))?;
    save_scene(&path, &scene, serde_json::json!({"note": "example"}), 0)?;
    let (loaded, manifest) = load_scene(&path)?;
    println!("saved {} views to {}", loaded.n_views(), path.display());
    println!("{}", std::fs::read_to_string(manifest_path(&path))?.lines().take(8).collect::<Vec<_>>().join("\n"));
    println!("manifest kind {:?}, tool {}", manifest.kind, manifest.tool_version);
    Ok(())
}
