//! PCA shape and image spaces and the outlier degree of each sample.
//!
//! ```text
//! cargo run --release --example outlier_degree
//! ```

use bvib::eval::{fit_pca, image_features, outlier_terms};
use bvib::shapegen::{build_dataset, Dataset, DatasetConfig, Split};

fn main() -> bvib::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let cfg = DatasetConfig {
        train: 60,
        val: 4,
        test: 10,
        dims: [16, 16, 16],
        num_points: 32,
        mesh_resolution: [32, 16],
        ..DatasetConfig::desk_scale()
    };
    build_dataset(&cfg, tmp.path())?;
    let ds = Dataset::load(tmp.path())?;
    let train = ds.indices(Split::Train);
    let shapes: Vec<Vec<f64>> = train.iter().map(|&i| ds.points[i].flatten()).collect();
    let images: Vec<Vec<f64>> = train.iter().map(|&i| image_features(&ds.images[i], 8)).collect();
    let shape_pca = fit_pca(&shapes, 0.95)?;
    let image_pca = fit_pca(&images, 0.95)?;
    for (name, p) in [("shape", &shape_pca), ("image", &image_pca)] {
        println!(
            "{name} space: {} of {} dims retain {:.1}% of the variance, residual eigenvalue {:.3e}",
            p.eigenvalues.len(),
            p.mean.len(),
            100.0 * p.retained_fraction,
            p.residual_eigenvalue
        );
    }

    let (w, o) = outlier_terms(&shape_pca.mean, &shape_pca)?;
    println!("training mean: within {w:.2e}, off {o:.2e}");

    println!("test sample  m   blur   shape (within + off)    image (within + off)");
    for pos in ds.indices(Split::Test) {
        let s = &ds.manifest.samples[pos];
        let (sw, so) = outlier_terms(&ds.points[pos].flatten(), &shape_pca)?;
        let (iw, io) = outlier_terms(&image_features(&ds.images[pos], 8), &image_pca)?;
        println!(
            "{}  {:>2}  {:>5.2}   {:>6.2} + {:>6.2}         {:>6.2} + {:>6.2}",
            s.id, s.params.m, s.blur_size, sw, so, iw, io
        );
    }
    Ok(())
}
