//! Saves a trained batch ensemble, reloads it and checks that predictions
//! are reproduced bit for bit.
//!
//! ```text
//! cargo run --release --example checkpoint
//! ```

use bvib::inference::{predict_samples, InferenceConfig, Predictor};
use bvib::model::{Checkpoint, ModelConfig, Variant};
use bvib::shapegen::{build_dataset, Dataset, DatasetConfig};
use bvib::training::{train, TrainConfig, TrainData, CHECKPOINT_FILE};

fn main() -> bvib::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let data_cfg = DatasetConfig {
        train: 12,
        val: 4,
        test: 2,
        dims: [12, 12, 12],
        num_points: 16,
        mesh_resolution: [16, 8],
        ..DatasetConfig::desk_scale()
    };
    let data_dir = tmp.path().join("data");
    build_dataset(&data_cfg, &data_dir)?;
    let ds = Dataset::load(&data_dir)?;
    let model = ModelConfig {
        input_dims: data_cfg.dims,
        num_points: data_cfg.num_points,
        latent_dim: 4,
        conv_channels: vec![4, 8],
        decoder_fc: vec![32],
        variant: Variant::BeCd,
        ensemble_size: 3,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        max_epochs: 40,
        ..TrainConfig::default()
    };
    let run_dir = tmp.path().join("run");
    let out = train(&model, &TrainData::from_dataset(&ds)?, &cfg, Some(&run_dir))?;

    let path = run_dir.join(CHECKPOINT_FILE);
    let loaded = Checkpoint::read(&path)?;
    println!(
        "{}: {} bytes, variant {}, epoch {}, {} parameters",
        path.display(),
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        loaded.network.variant(),
        loaded.epoch,
        loaded.network.num_params()
    );
    for entry in std::fs::read_dir(&run_dir).expect("run dir").flatten() {
        println!("  {}", entry.file_name().to_string_lossy());
    }

    let inf = InferenceConfig::default();
    let a = predict_samples(&Predictor::single(out.checkpoint.network), &ds.images[0], &inf)?;
    let b = predict_samples(&Predictor::single(loaded.network), &ds.images[0], &inf)?;
    println!("{} draws, identical after reload: {}", a.len(), a == b);
    Ok(())
}
