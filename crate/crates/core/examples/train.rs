//! Trains a small VIB regressor on generated supershapes and compares it
//! with the training-mean shape.
//!
//! ```text
//! cargo run --release --example train [-- <variant>]
//! ```

use bvib::model::{ModelConfig, Variant};
use bvib::objectives::LossConfig;
use bvib::shapegen::{build_dataset, Dataset, DatasetConfig};
use bvib::training::{dataset_rmse, point_predictions, train, TrainConfig, TrainData};

fn main() -> bvib::Result<()> {
    let variant: Variant = std::env::args().nth(1).as_deref().unwrap_or("VIB").parse()?;
    let tmp = tempfile::tempdir().expect("temp dir");
    let data_cfg = DatasetConfig {
        train: 48,
        val: 8,
        test: 8,
        dims: [16, 16, 16],
        num_points: 24,
        mesh_resolution: [24, 12],
        ..DatasetConfig::desk_scale()
    };
    build_dataset(&data_cfg, tmp.path())?;
    let ds = Dataset::load(tmp.path())?;
    let data = TrainData::from_dataset(&ds)?;

    let model = ModelConfig {
        input_dims: data_cfg.dims,
        num_points: data_cfg.num_points,
        latent_dim: 8,
        conv_channels: vec![6, 12, 24],
        decoder_fc: vec![64],
        variant,
        ensemble_size: 2,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 6,
        patience: 10,
        max_epochs: 60,
        loss: LossConfig {
            burnin_end: 10,
            dropout_burnin_end: 4,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = train(&model, &data, &cfg, Some(&tmp.path().join("run")))?;

    println!("epoch  phase          total loss    val RMSE   drop p");
    for r in out.history.iter().step_by(5) {
        println!(
            "{:>5}  {:<13}  {:>10.4}  {:>10.4}   {}",
            r.epoch,
            if r.eligible { "probabilistic" } else { "burn-in" },
            r.loss.total,
            r.val_rmse,
            r.mean_drop_p.map_or("-".into(), |p| format!("{p:.3}"))
        );
    }
    println!(
        "{variant}: best val RMSE {:.4} at epoch {} ({:?} after {} epochs)",
        out.best_val_rmse(),
        out.checkpoint.epoch,
        out.stop,
        out.epochs_run
    );

    let mean = {
        let n = data.train_y.len() as f64;
        let mut m = vec![0.0; data.train_y[0].len()];
        for y in &data.train_y {
            m.iter_mut().zip(y).for_each(|(a, b)| *a += b / n);
        }
        m
    };
    let net = &out.checkpoint.network;
    let baseline = bvib::eval::rmse(&data.val_y.concat(), &vec![mean; data.val_y.len()].concat())?;
    println!(
        "val RMSE: network {:.4}, training-mean shape {baseline:.4}",
        dataset_rmse(net, &data.val_x, &data.val_y)?
    );
    let first = &point_predictions(net, &data.val_x[..1])?[0];
    println!("first val prediction, point 0: {:.2?}", &first[..3]);
    Ok(())
}
