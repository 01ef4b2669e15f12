//! Splits predictive variance into epistemic and aleatoric parts, first on
//! a hand-made sample set and then for a trained concrete-dropout model.
//!
//! ```text
//! cargo run --release --example uncertainty
//! ```

use bvib::harness::predict_record;
use bvib::inference::{decompose_uncertainty, InferenceConfig, Predictor, SampleSet, SampleTag};
use bvib::model::{ModelConfig, Variant};
use bvib::objectives::LossConfig;
use bvib::shapegen::{build_dataset, Dataset, DatasetConfig, Split};
use bvib::training::{train, TrainConfig, TrainData};

fn main() -> bvib::Result<()> {
    // Three weight draws of a one-coordinate prediction: the spread of the
    // means is epistemic, the mean of the variances aleatoric.
    let tag = SampleTag { member: 0, mask_stream: None };
    let toy = SampleSet::new(
        vec![vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0], vec![3.0, 0.0, 0.0]],
        vec![vec![0.5, 0.1, 0.1], vec![0.5, 0.1, 0.1], vec![2.0, 0.1, 0.1]],
        vec![tag; 3],
    )?;
    let r = decompose_uncertainty(&toy)?;
    println!("toy: epistemic {:.4?}  aleatoric {:.4?}", r.epistemic, r.aleatoric);

    let tmp = tempfile::tempdir().expect("temp dir");
    let data_cfg = DatasetConfig {
        train: 48,
        val: 8,
        test: 6,
        dims: [16, 16, 16],
        num_points: 24,
        mesh_resolution: [24, 12],
        ..DatasetConfig::desk_scale()
    };
    build_dataset(&data_cfg, tmp.path())?;
    let ds = Dataset::load(tmp.path())?;
    let model = ModelConfig {
        input_dims: data_cfg.dims,
        num_points: data_cfg.num_points,
        latent_dim: 8,
        conv_channels: vec![6, 12, 24],
        decoder_fc: vec![64],
        variant: Variant::Cd,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        patience: 10,
        max_epochs: 40,
        loss: LossConfig {
            burnin_end: 10,
            dropout_burnin_end: 4,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = train(&model, &TrainData::from_dataset(&ds)?, &cfg, None)?;
    for d in out.checkpoint.network.drop_probabilities() {
        println!("learned drop probability {:<12} {:.3}", d.layer, d.p);
    }

    let predictor = Predictor::single(out.checkpoint.network);
    let inf = InferenceConfig::default();
    println!("{} weight draws per input", predictor.num_draws(&inf));
    println!("sample     blur   RMSE    epistemic  aleatoric  total");
    for pos in ds.indices(Split::Test) {
        let rec = predict_record(&predictor, &ds, pos, &inf)?;
        let err = bvib::eval::rmse(&rec.prediction, &ds.points[pos].flatten())?;
        let u = &rec.report;
        println!(
            "{}  {:>4.2}  {:>6.3}  {:>9.4}  {:>9.4}  {:>6.4}",
            rec.id, ds.manifest.samples[pos].blur_size, err, u.mean_epistemic, u.mean_aleatoric, u.mean_total
        );
    }
    Ok(())
}
