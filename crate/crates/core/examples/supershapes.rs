//! Generates a small supershapes dataset and prints what was produced.
//!
//! ```text
//! cargo run --release --example supershapes [-- <out-dir>]
//! ```

use std::path::PathBuf;

use bvib::shapegen::{
    build_dataset, superformula_radius, Dataset, DatasetConfig, Split, SupershapeParams,
};

fn main() -> bvib::Result<()> {
    // m = 4 with all exponents 2 is the unit sphere.
    let sphere = SupershapeParams::new(4, 2.0, 2.0, 2.0);
    let worst = (0..8)
        .map(|i| (superformula_radius(i as f64 * 0.7, &sphere).unwrap() - 1.0).abs())
        .fold(0.0, f64::max);
    println!("sphere radius deviation: {worst:.2e}");

    let tmp = tempfile::tempdir().expect("temp dir");
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().join("shapes"));
    let cfg = DatasetConfig {
        train: 20,
        val: 5,
        test: 5,
        dims: [16, 16, 16],
        num_points: 32,
        mesh_resolution: [32, 16],
        ..DatasetConfig::desk_scale()
    };
    let manifest = build_dataset(&cfg, &out)?;
    println!("dataset {} at {}", cfg.hash(), out.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("  {:<5} {}", split.as_str(), manifest.count(split));
    }

    let ds = Dataset::load(&out)?;
    for (s, img) in ds.manifest.samples.iter().zip(&ds.images).take(5) {
        println!(
            "{}  m={} n=({:.2}, {:.2}, {:.2})  blur {:.2}  mean intensity {:.3}",
            s.id, s.params.m, s.params.n1, s.params.n2, s.params.n3, s.blur_size, img.mean()
        );
    }
    let mesh = ds.mesh(0)?;
    println!(
        "first mesh: {} vertices, {} faces, area {:.1}, volume {:.1}",
        mesh.vertices.len(),
        mesh.faces.len(),
        mesh.surface_area(),
        mesh.signed_volume()
    );
    Ok(())
}
