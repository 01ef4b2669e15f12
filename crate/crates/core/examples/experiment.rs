//! Runs a complete experiment from a TOML config: dataset, training of every
//! variant and run, prediction with uncertainty, evaluation and plots.
//!
//! ```text
//! cargo run --release --example experiment [-- configs/desk.toml]
//! ```

use bvib::harness::{run_experiment, ExperimentConfig};

fn main() -> bvib::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml").into());
    let cfg = ExperimentConfig::load(path.as_ref())?;
    let bundle = run_experiment(&cfg)?;
    let s = &bundle.summary;

    println!("experiment {} (dataset {})", bundle.dir.display(), s.dataset_hash);
    println!("training-mean baseline RMSE {:.4}", s.baseline_rmse);
    println!("variant  RMSE             r(error, total)   epistemic  aleatoric");
    for v in &s.variants {
        let stat = |k: &str| v.aggregate.get(k).map_or("n/a".into(), |x| format!("{:.4} ± {:.4}", x.mean, x.std));
        let mean = |k: &str| v.aggregate.get(k).map_or("n/a".into(), |x| format!("{:.4}", x.mean));
        println!(
            "{:<7}  {:<15}  {:<16}  {:<9}  {}",
            v.variant.as_str(),
            stat("test_rmse"),
            stat("r_error_total"),
            mean("mean_epistemic"),
            mean("mean_aleatoric")
        );
    }
    for f in &s.failures {
        println!("failed: {f:?}");
    }
    println!("{} plot files", bundle.plot_files.len());
    Ok(())
}
