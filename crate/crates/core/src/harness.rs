//! End-to-end experiments: dataset, training per variant and run, prediction
//! with uncertainty, evaluation, summary JSON and plots.
//!
//! Experiment directory layout (`<output_dir>/run-NNN/`, never reused):
//!
//! ```text
//! config.toml            resolved experiment config
//! manifest.json          dataset manifest as used (after any outlier split)
//! template.off           template connectivity for reconstructed meshes
//! summary.json           every reported number, including per-sample rows
//! <VARIANT>/run<r>/      checkpoint.bin, loss.csv, run.json, calibration.csv,
//!                        calibration_summary.json, uncertainty.csv
//! <NE variant>/pooled/   the same evaluation files for the pooled ensemble
//! plots/                 box plots and scatter plots (SVG)
//! heatmaps/<VARIANT>/    <id>.off, <id>.csv (per-point scalars), <id>.svg
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    build_calibration_table, fit_pca, image_features, reconstruct_mesh, rmse, surface_distance, CalibrationRow,
    CalibrationTable, PcaModel, PredictionRecord,
};
use crate::inference::{decompose_uncertainty, point_estimate, predict_samples, write_uncertainty_csv, InferenceConfig, Predictor};
use crate::model::{ModelConfig, Network, Variant};
use crate::shapegen::{
    build_dataset, sample_rng, Dataset, DatasetConfig, DatasetManifest, PointModel, Split, SurfaceMesh, MANIFEST_FILE,
};
use crate::training::{train, TrainConfig, TrainData, TrainOutcome};

pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const TEMPLATE_COPY: &str = "template.off";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Existing dataset directory, or where to generate one. Defaults to
    /// `data/` inside the experiment directory.
    pub path: Option<PathBuf>,
    /// Generate the dataset when `path` holds no manifest.
    pub generate: bool,
    pub generation: DatasetConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: None,
            generate: true,
            generation: DatasetConfig::desk_scale(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSplitConfig {
    pub shape_k: usize,
    pub image_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pca_variance: f64,
    pub surface_samples: usize,
    /// Largest axis of the downsampled images used for the image PCA.
    pub image_max_dim: usize,
    /// Fraction of samples with the largest shape outlier degree.
    pub outlier_top_fraction: f64,
    /// Fraction of samples with the smallest shape outlier degree.
    pub outlier_bottom_fraction: f64,
    pub blur_low: [f64; 2],
    pub blur_high: [f64; 2],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pca_variance: 0.95,
            surface_samples: 2000,
            image_max_dim: 16,
            outlier_top_fraction: 0.1,
            outlier_bottom_fraction: 0.5,
            blur_low: [1.0, 3.0],
            blur_high: [6.0, 8.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    pub enabled: bool,
    /// Test samples per variant exported as heatmaps.
    pub heatmap_samples: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            heatmap_samples: 2,
        }
    }
}

/// Whole-experiment configuration, read from TOML. `model.input_dims` and
/// `model.num_points` are taken from the dataset; training seeds are
/// `seed + run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub variants: Vec<Variant>,
    pub runs: usize,
    pub seed: u64,
    pub dataset: DatasetSection,
    pub outlier_split: Option<OutlierSplitConfig>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub plots: PlotConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("experiments"),
            variants: Variant::ALL.to_vec(),
            runs: 4,
            seed: 0,
            dataset: DatasetSection::default(),
            outlier_split: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            plots: PlotConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Runtime(format!("config serialization: {e}")))
    }

    /// The model config for one variant on a dataset.
    pub fn model_for(&self, data: &DatasetConfig, variant: Variant) -> ModelConfig {
        ModelConfig {
            input_dims: data.dims,
            num_points: data.num_points,
            variant,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        let mut seen = self.variants.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.variants.len() {
            return Err(Error::Config("variants listed twice".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if self.variants.iter().any(|v| v.is_naive_ensemble()) && self.runs < 2 {
            return Err(Error::Config("naive ensembles are built from the runs and need runs >= 2".into()));
        }
        self.dataset.generation.validate()?;
        for &v in &self.variants {
            self.model_for(&self.dataset.generation, v.member_variant()).validate()?;
        }
        self.train.validate()?;
        if self.inference.mc_samples == 0 || self.inference.latent_samples == 0 {
            return Err(Error::Config("inference sample counts must be >= 1".into()));
        }
        let e = &self.eval;
        if !(e.pca_variance > 0.0 && e.pca_variance <= 1.0) {
            return Err(Error::Config(format!("pca_variance {} outside (0, 1]", e.pca_variance)));
        }
        if e.surface_samples == 0 || e.image_max_dim == 0 {
            return Err(Error::Config("surface_samples and image_max_dim must be >= 1".into()));
        }
        for f in [e.outlier_top_fraction, e.outlier_bottom_fraction] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("outlier fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Mean and sample standard deviation over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Mean over evaluated samples of the per-sample RMSE.
    pub test_rmse: f64,
    pub surface_distance: f64,
    pub surface_distance_max: f64,
    pub mean_epistemic: f64,
    pub mean_aleatoric: f64,
    pub mean_total: f64,
    pub r_error_total: Option<f64>,
    pub r_image_outlier_aleatoric: Option<f64>,
    pub r_shape_outlier_epistemic: Option<f64>,
    pub r_blur_aleatoric: Option<f64>,
    /// Median epistemic over the samples with the largest shape outlier degree.
    pub epistemic_median_top_outliers: Option<f64>,
    /// Median epistemic over the samples with the smallest shape outlier degree.
    pub epistemic_median_bottom_outliers: Option<f64>,
    pub aleatoric_mean_high_blur: Option<f64>,
    pub aleatoric_mean_low_blur: Option<f64>,
}

/// Per-point fields of one evaluated sample, for mesh heatmaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub id: String,
    pub points: Vec<[f64; 3]>,
    pub error: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub total: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Run index; `None` for a naive ensemble pooled over runs.
    pub run: Option<usize>,
    pub seeds: Vec<u64>,
    pub best_epochs: Vec<usize>,
    pub epochs_run: Vec<usize>,
    pub metrics: RunMetrics,
    pub samples: Vec<CalibrationRow>,
    pub heatmaps: Vec<Heatmap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: Vec<RunSummary>,
    /// Mean and standard deviation of every scalar metric across runs.
    pub aggregate: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub variant: Variant,
    pub run: Option<usize>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub dataset_hash: String,
    pub split_counts: BTreeMap<String, usize>,
    pub evaluated_samples: usize,
    /// Mean per-sample RMSE of predicting the training-mean point model.
    pub baseline_rmse: f64,
    pub variants: Vec<VariantSummary>,
    pub failures: Vec<RunFailure>,
    pub complete: bool,
    pub flags: Vec<String>,
}

impl Summary {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Runtime(format!("summary serialization: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub summary: Summary,
    pub plot_files: Vec<PathBuf>,
}

/// First unused `run-NNN` directory under `base`, created empty.
pub fn versioned_dir(base: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
    for i in 1..100_000 {
        let d = base.join(format!("run-{i:03}"));
        match std::fs::create_dir(&d) {
            Ok(()) => return Ok(d),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&d, e)),
        }
    }
    Err(Error::Runtime(format!("no free experiment directory under {}", base.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the dataset at `path`, generating it first if allowed and absent.
pub fn prepare_dataset(section: &DatasetSection, path: &Path) -> Result<Dataset> {
    if !path.join(MANIFEST_FILE).exists() {
        if !section.generate {
            return Err(Error::Config(format!("no dataset at {} and generation disabled", path.display())));
        }
        log::info!("generating dataset in {}", path.display());
        build_dataset(&section.generation, path)?;
    }
    let ds = Dataset::load(path)?;
    if section.generate && ds.manifest.config != section.generation {
        log::warn!(
            "dataset at {} was generated with a different config than [dataset.generation]; using it as is",
            path.display()
        );
    }
    Ok(ds)
}

/// Training-split PCA models of the point models and the downsampled images.
pub fn fit_pca_models(ds: &Dataset, cfg: &EvalConfig) -> Result<(PcaModel, PcaModel)> {
    let train = ds.indices(Split::Train);
    let shapes: Vec<Vec<f64>> = train.iter().map(|&i| ds.points[i].flatten()).collect();
    let images: Vec<Vec<f64>> = train.iter().map(|&i| image_features(&ds.images[i], cfg.image_max_dim)).collect();
    Ok((fit_pca(&shapes, cfg.pca_variance)?, fit_pca(&images, cfg.pca_variance)?))
}

/// Labels the `shape_k` / `image_k` samples with the largest outlier degrees
/// as outlier splits and randomly re-splits the rest, keeping the train and
/// validation counts. A sample in both top sets is labelled a shape outlier
/// and flagged.
pub fn split_by_outlier(
    ds: &Dataset,
    pca_shape: &PcaModel,
    pca_image: &PcaModel,
    shape_k: usize,
    image_k: usize,
    image_max_dim: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut m = ds.manifest.clone();
    let n_test = m.count(Split::Test);
    if shape_k >= n_test || image_k >= n_test {
        return Err(Error::Config(format!(
            "outlier counts ({shape_k}, {image_k}) must be below the test pool size {n_test}"
        )));
    }
    if shape_k == 0 && image_k == 0 {
        m.flags.push("outlier split: k = 0, no samples relabelled".into());
        return Ok(m);
    }
    let n = m.samples.len();
    let mut shape_deg = Vec::with_capacity(n);
    let mut image_deg = Vec::with_capacity(n);
    for i in 0..n {
        shape_deg.push(crate::eval::outlier_degree(&ds.points[i].flatten(), pca_shape)?);
        image_deg.push(crate::eval::outlier_degree(&image_features(&ds.images[i], image_max_dim), pca_image)?);
    }
    let top = |deg: &[f64], k: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| deg[b].total_cmp(&deg[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    };
    let shape_top = top(&shape_deg, shape_k);
    let image_top = top(&image_deg, image_k);
    let n_train = m.count(Split::Train);
    let n_val = m.count(Split::Val);
    let mut rest = Vec::new();
    for i in 0..n {
        let is_shape = shape_top.contains(&i);
        let is_image = image_top.contains(&i);
        if is_shape && is_image {
            m.flags.push(format!("{} is both a shape and an image outlier; labelled shape_outlier", m.samples[i].id));
        }
        if is_shape {
            m.samples[i].split = Split::ShapeOutlier;
        } else if is_image {
            m.samples[i].split = Split::ImageOutlier;
        } else {
            rest.push(i);
        }
    }
    use rand::seq::SliceRandom;
    rest.shuffle(&mut sample_rng(seed, u64::MAX - 1));
    for (rank, &i) in rest.iter().enumerate() {
        m.samples[i].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(m)
}

fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Some(quantile_sorted(&s, 0.5))
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scalar metrics of one evaluated model from its calibration table.
pub fn run_metrics(table: &CalibrationTable, cfg: &EvalConfig) -> RunMetrics {
    let rows = &table.rows;
    let col = |f: fn(&CalibrationRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let n = rows.len();
    let mut by_shape: Vec<&CalibrationRow> = rows.iter().collect();
    by_shape.sort_by(|a, b| b.shape_outlier.total_cmp(&a.shape_outlier).then(a.id.cmp(&b.id)));
    let n_top = ((cfg.outlier_top_fraction * n as f64).ceil() as usize).clamp(1, n.max(1));
    let n_bottom = (cfg.outlier_bottom_fraction * n as f64).floor() as usize;
    let top: Vec<f64> = by_shape.iter().take(n_top).map(|r| r.epistemic).collect();
    let bottom: Vec<f64> = by_shape.iter().rev().take(n_bottom).map(|r| r.epistemic).collect();
    let in_range = |r: &CalibrationRow, [lo, hi]: [f64; 2]| r.blur_size >= lo && r.blur_size <= hi;
    let high: Vec<f64> = rows.iter().filter(|r| in_range(r, cfg.blur_high)).map(|r| r.aleatoric).collect();
    let low: Vec<f64> = rows.iter().filter(|r| in_range(r, cfg.blur_low)).map(|r| r.aleatoric).collect();
    let sd: Vec<f64> = rows.iter().filter_map(|r| r.surface_distance).collect();
    let sd_max: Vec<f64> = rows.iter().filter_map(|r| r.surface_distance_max).collect();
    RunMetrics {
        test_rmse: mean_of(&col(|r| r.rmse)).unwrap_or(f64::NAN),
        surface_distance: mean_of(&sd).unwrap_or(f64::NAN),
        surface_distance_max: sd_max.iter().cloned().fold(f64::NAN, f64::max),
        mean_epistemic: mean_of(&col(|r| r.epistemic)).unwrap_or(f64::NAN),
        mean_aleatoric: mean_of(&col(|r| r.aleatoric)).unwrap_or(f64::NAN),
        mean_total: mean_of(&col(|r| r.total)).unwrap_or(f64::NAN),
        r_error_total: table.summary.r_error_total,
        r_image_outlier_aleatoric: table.summary.r_image_outlier_aleatoric,
        r_shape_outlier_epistemic: table.summary.r_shape_outlier_epistemic,
        r_blur_aleatoric: crate::eval::pearson_r(&col(|r| r.blur_size), &col(|r| r.aleatoric)).ok(),
        epistemic_median_top_outliers: median(&top),
        epistemic_median_bottom_outliers: median(&bottom),
        aleatoric_mean_high_blur: mean_of(&high),
        aleatoric_mean_low_blur: mean_of(&low),
    }
}

/// Everything needed to evaluate a predictor on the test-like splits.
pub struct EvalContext<'a> {
    pub ds: &'a Dataset,
    pub positions: Vec<usize>,
    pub truths: Vec<Vec<f64>>,
    pub image_vecs: Vec<Vec<f64>>,
    pub gt_meshes: Vec<SurfaceMesh>,
    pub pca_shape: PcaModel,
    pub pca_image: PcaModel,
    pub cfg: EvalConfig,
}

impl<'a> EvalContext<'a> {
    /// Evaluates on every test, shape-outlier and image-outlier sample.
    pub fn new(ds: &'a Dataset, cfg: &EvalConfig) -> Result<Self> {
        let positions: Vec<usize> = (0..ds.manifest.samples.len())
            .filter(|&i| ds.manifest.samples[i].split.is_test_like())
            .collect();
        if positions.len() < 3 {
            return Err(Error::Domain(format!("need at least 3 test samples, got {}", positions.len())));
        }
        let (pca_shape, pca_image) = fit_pca_models(ds, cfg)?;
        Ok(Self {
            truths: positions.iter().map(|&i| ds.points[i].flatten()).collect(),
            image_vecs: positions.iter().map(|&i| image_features(&ds.images[i], cfg.image_max_dim)).collect(),
            gt_meshes: positions.iter().map(|&i| ds.mesh(i)).collect::<Result<_>>()?,
            positions,
            pca_shape,
            pca_image,
            cfg: cfg.clone(),
            ds,
        })
    }

    /// Mean per-sample RMSE of predicting the training-mean point model.
    pub fn baseline_rmse(&self) -> Result<f64> {
        let train = self.ds.indices(Split::Train);
        let f = self.truths[0].len();
        let mut mean = vec![0.0; f];
        for &i in &train {
            mean.iter_mut().zip(self.ds.points[i].flatten()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= train.len() as f64);
        let errs = self.truths.iter().map(|t| rmse(t, &mean)).collect::<Result<Vec<f64>>>()?;
        Ok(errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

pub struct PredictorEval {
    pub table: CalibrationTable,
    pub metrics: RunMetrics,
    pub heatmaps: Vec<Heatmap>,
    pub reports: Vec<(String, crate::inference::UncertaintyReport)>,
}

/// Predicts one sample with uncertainty; the draws use the stream
/// `inference.seed · 1000003 + sample index`.
pub fn predict_record(p: &Predictor, ds: &Dataset, pos: usize, inference: &InferenceConfig) -> Result<PredictionRecord> {
    let rec = &ds.manifest.samples[pos];
    let cfg = InferenceConfig {
        seed: inference.seed.wrapping_mul(1_000_003).wrapping_add(rec.index as u64),
        ..*inference
    };
    let set = predict_samples(p, &ds.images[pos], &cfg)?;
    Ok(PredictionRecord {
        id: rec.id.clone(),
        prediction: point_estimate(&set),
        report: decompose_uncertainty(&set)?,
        surface: None,
    })
}

/// Predictions for every test-like sample, in manifest order.
pub fn predict_dataset(p: &Predictor, ds: &Dataset, inference: &InferenceConfig) -> Result<Vec<PredictionRecord>> {
    (0..ds.manifest.samples.len())
        .filter(|&i| ds.manifest.samples[i].split.is_test_like())
        .map(|i| predict_record(p, ds, i, inference))
        .collect()
}

/// Scores predictions aligned with `ctx.positions`: fills surface
/// distances, builds the calibration table and the first `heatmaps` heatmaps.
pub fn score_predictions(ctx: &EvalContext, mut records: Vec<PredictionRecord>, heatmaps: usize) -> Result<PredictorEval> {
    if records.len() != ctx.positions.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} evaluation samples",
            records.len(),
            ctx.positions.len()
        )));
    }
    let mut maps = Vec::new();
    for (j, r) in records.iter_mut().enumerate() {
        let pm = PointModel::from_flat(&r.prediction)?;
        let mesh = reconstruct_mesh(&pm, &ctx.ds.template)?;
        r.surface = Some(surface_distance(&mesh, &ctx.gt_meshes[j], ctx.cfg.surface_samples)?);
        if j < heatmaps {
            let truth = &ctx.truths[j];
            maps.push(Heatmap {
                id: r.id.clone(),
                points: pm.points.clone(),
                error: (0..pm.len())
                    .map(|q| (0..3).map(|c| (r.prediction[3 * q + c] - truth[3 * q + c]).powi(2)).sum::<f64>().sqrt())
                    .collect(),
                epistemic: r.report.point_epistemic.clone(),
                aleatoric: r.report.point_aleatoric.clone(),
                total: r.report.point_total.clone(),
            });
        }
    }
    let samples: Vec<_> = ctx.positions.iter().map(|&i| &ctx.ds.manifest.samples[i]).collect();
    let table = build_calibration_table(&samples, &ctx.truths, &ctx.image_vecs, &records, &ctx.pca_shape, &ctx.pca_image)?;
    let metrics = run_metrics(&table, &ctx.cfg);
    let reports = records.into_iter().map(|r| (r.id, r.report)).collect();
    Ok(PredictorEval {
        table,
        metrics,
        heatmaps: maps,
        reports,
    })
}

/// Predicts every evaluation sample with uncertainty and scores it.
pub fn evaluate_predictor(p: &Predictor, ctx: &EvalContext, inference: &InferenceConfig, heatmaps: usize) -> Result<PredictorEval> {
    let records = ctx
        .positions
        .iter()
        .map(|&pos| predict_record(p, ctx.ds, pos, inference))
        .collect::<Result<Vec<_>>>()?;
    score_predictions(ctx, records, heatmaps)
}

/// Scores stored predictions against a dataset, matching them by sample id.
pub fn evaluate_predictions(ds: &Dataset, records: &[PredictionRecord], cfg: &EvalConfig) -> Result<PredictorEval> {
    let ctx = EvalContext::new(ds, cfg)?;
    let by_id: HashMap<&str, &PredictionRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let aligned = ctx
        .positions
        .iter()
        .map(|&i| {
            let id = &ds.manifest.samples[i].id;
            by_id
                .get(id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::Domain(format!("no prediction for evaluation sample {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    score_predictions(&ctx, aligned, 0)
}

pub const PREDICTIONS_FILE: &str = "predictions.json";

/// Writes `predictions.json`, the flat per-point `uncertainty.csv` and one
/// report JSON per sample under `reports/`.
pub fn write_predictions(dir: &Path, records: &[PredictionRecord]) -> Result<()> {
    let reports = dir.join("reports");
    std::fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    let json = serde_json::to_string(records).map_err(|e| Error::Runtime(e.to_string()))?;
    write_text(&dir.join(PREDICTIONS_FILE), &json)?;
    for r in records {
        crate::inference::write_report_json(&reports.join(format!("{}.json", r.id)), &r.report)?;
    }
    let rows: Vec<_> = records.iter().map(|r| (r.id.clone(), r.report.clone())).collect();
    write_uncertainty_csv(&dir.join("uncertainty.csv"), &rows)
}

pub fn read_predictions(dir: &Path) -> Result<Vec<PredictionRecord>> {
    let path = dir.join(PREDICTIONS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Writes `calibration.csv`, `calibration_summary.json` and `uncertainty.csv`.
pub fn write_eval_files(dir: &Path, e: &PredictorEval) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    e.table.write_csv(&dir.join("calibration.csv"))?;
    e.table.write_summary_json(&dir.join("calibration_summary.json"))?;
    write_uncertainty_csv(&dir.join("uncertainty.csv"), &e.reports)
}

fn aggregate(runs: &[RunSummary]) -> BTreeMap<String, Stat> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in runs {
        if let Ok(serde_json::Value::Object(m)) = serde_json::to_value(r.metrics) {
            for (k, v) in m {
                if let Some(x) = v.as_f64().filter(|x| x.is_finite()) {
                    cols.entry(k).or_default().push(x);
                }
            }
        }
    }
    cols.into_iter().filter_map(|(k, v)| Stat::of(&v).map(|s| (k, s))).collect()
}

/// Runs the configured experiment into a fresh versioned directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let dir = versioned_dir(&cfg.output_dir)?;
    log::info!("experiment directory {}", dir.display());
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml()?)?;
    let data_path = cfg.dataset.path.clone().unwrap_or_else(|| dir.join("data"));
    let mut ds = prepare_dataset(&cfg.dataset, &data_path)?;
    if let Some(o) = cfg.outlier_split {
        let (ps, pi) = fit_pca_models(&ds, &cfg.eval)?;
        ds.manifest = split_by_outlier(&ds, &ps, &pi, o.shape_k, o.image_k, cfg.eval.image_max_dim, cfg.seed)?;
    }
    write_text(&dir.join(MANIFEST_FILE), &ds.manifest.to_json())?;
    ds.template.write_off(&dir.join(TEMPLATE_COPY))?;

    let data = TrainData::from_dataset(&ds)?;
    let ctx = EvalContext::new(&ds, &cfg.eval)?;
    let mut trained: HashMap<(Variant, usize), std::result::Result<TrainOutcome, String>> = HashMap::new();
    let mut failures = Vec::new();
    let mut variants = Vec::new();

    let mut ensure = |member: Variant, run: usize| -> std::result::Result<TrainOutcome, String> {
        trained
            .entry((member, run))
            .or_insert_with(|| {
                let tc = TrainConfig {
                    seed: cfg.seed + run as u64,
                    ..cfg.train.clone()
                };
                let mc = cfg.model_for(&ds.manifest.config, member);
                let out = dir.join(member.as_str()).join(format!("run{run}"));
                log::info!("training {member} run {run}");
                train(&mc, &data, &tc, Some(&out)).map_err(|e| e.to_string())
            })
            .clone()
    };

    for &variant in &cfg.variants {
        let mut runs = Vec::new();
        if variant.is_naive_ensemble() {
            let member = variant.member_variant();
            let mut nets: Vec<Network> = Vec::new();
            let (mut seeds, mut best, mut ran) = (Vec::new(), Vec::new(), Vec::new());
            for r in 0..cfg.runs {
                match ensure(member, r) {
                    Ok(o) => {
                        seeds.push(cfg.seed + r as u64);
                        best.push(o.checkpoint.epoch);
                        ran.push(o.epochs_run);
                        nets.push(o.checkpoint.network);
                    }
                    Err(e) => failures.push(RunFailure {
                        variant: member,
                        run: Some(r),
                        error: e,
                    }),
                }
            }
            let evaluated = Predictor::naive_ensemble(variant, nets).and_then(|p| {
                log::info!("evaluating {variant} pooled over {} runs", p.networks.len());
                let inf = InferenceConfig {
                    seed: cfg.seed,
                    ..cfg.inference
                };
                evaluate_predictor(&p, &ctx, &inf, cfg.plots.heatmap_samples)
            });
            match evaluated {
                Ok(e) => {
                    write_eval_files(&dir.join(variant.as_str()).join("pooled"), &e)?;
                    runs.push(RunSummary {
                        run: None,
                        seeds,
                        best_epochs: best,
                        epochs_run: ran,
                        metrics: e.metrics,
                        samples: e.table.rows,
                        heatmaps: e.heatmaps,
                    });
                }
                Err(e) => failures.push(RunFailure {
                    variant,
                    run: None,
                    error: e.to_string(),
                }),
            }
        } else {
            for r in 0..cfg.runs {
                let outcome = match ensure(variant, r) {
                    Ok(o) => o,
                    Err(e) => {
                        failures.push(RunFailure {
                            variant,
                            run: Some(r),
                            error: e,
                        });
                        continue;
                    }
                };
                log::info!("evaluating {variant} run {r}");
                let inf = InferenceConfig {
                    seed: cfg.seed + r as u64,
                    ..cfg.inference
                };
                let p = Predictor::single(outcome.checkpoint.network.clone());
                match evaluate_predictor(&p, &ctx, &inf, cfg.plots.heatmap_samples) {
                    Ok(e) => {
                        write_eval_files(&dir.join(variant.as_str()).join(format!("run{r}")), &e)?;
                        runs.push(RunSummary {
                            run: Some(r),
                            seeds: vec![cfg.seed + r as u64],
                            best_epochs: vec![outcome.checkpoint.epoch],
                            epochs_run: vec![outcome.epochs_run],
                            metrics: e.metrics,
                            samples: e.table.rows,
                            heatmaps: e.heatmaps,
                        });
                    }
                    Err(e) => failures.push(RunFailure {
                        variant,
                        run: Some(r),
                        error: e.to_string(),
                    }),
                }
            }
        }
        let aggregate = aggregate(&runs);
        variants.push(VariantSummary {
            variant,
            runs,
            aggregate,
        });
    }

    let mut split_counts = BTreeMap::new();
    for s in &ds.manifest.samples {
        *split_counts.entry(s.split.as_str().to_string()).or_insert(0) += 1;
    }
    let summary = Summary {
        seed: cfg.seed,
        dataset_hash: ds.manifest.config_hash.clone(),
        split_counts,
        evaluated_samples: ctx.positions.len(),
        baseline_rmse: ctx.baseline_rmse()?,
        complete: failures.is_empty(),
        failures,
        variants,
        flags: ds.manifest.flags.clone(),
    };
    if !summary.complete {
        log::warn!("{} run(s) failed; the summary is incomplete", summary.failures.len());
    }
    write_text(&dir.join(SUMMARY_FILE), &summary.to_json()?)?;
    let plot_files = if cfg.plots.enabled {
        emit_plots(&summary, &ds.template, &dir)?
    } else {
        Vec::new()
    };
    Ok(ReportBundle {
        dir,
        summary,
        plot_files,
    })
}

/// Re-creates the plots of an existing experiment directory from its summary.
pub fn report(dir: &Path) -> Result<ReportBundle> {
    let summary = Summary::read(&dir.join(SUMMARY_FILE))?;
    let template = SurfaceMesh::read_off(&dir.join(TEMPLATE_COPY))?;
    let plot_files = emit_plots(&summary, &template, dir)?;
    Ok(ReportBundle {
        dir: dir.to_path_buf(),
        summary,
        plot_files,
    })
}

// ---- plots ----

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 60.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * hi.abs().max(1.0) {
        (lo - 0.5, hi + 0.5)
    } else {
        let m = 0.05 * (hi - lo);
        (lo - m, hi + m)
    }
}

fn axes(s: &mut String, xlabel: &str, ylabel: &str, (ylo, yhi): (f64, f64)) {
    s.push_str(&format!(
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - PAD,
        W - PAD / 2.0,
        H - PAD,
        H - PAD
    ));
    for i in 0..=4 {
        let v = ylo + (yhi - ylo) * i as f64 / 4.0;
        let y = H - PAD - (H - 2.0 * PAD) * i as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            PAD - 6.0,
            y + 4.0,
            fmt_tick(v)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        W / 2.0,
        H - 16.0,
        xml_escape(xlabel),
        H / 2.0,
        H / 2.0,
        xml_escape(ylabel)
    ));
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn y_to_px(v: f64, (lo, hi): (f64, f64)) -> f64 {
    H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD)
}

/// Box plot with one box per group: quartiles, median, whiskers at the most
/// extreme values within 1.5 IQR.
pub fn svg_box_plot(title: &str, ylabel: &str, groups: &[(String, Vec<f64>)]) -> String {
    let yr = range(groups.iter().flat_map(|g| g.1.iter().copied()));
    let mut s = svg_open(title);
    axes(&mut s, "variant", ylabel, yr);
    let slot = (W - 1.5 * PAD) / groups.len().max(1) as f64;
    for (gi, (name, vals)) in groups.iter().enumerate() {
        let cx = PAD + slot * (gi as f64 + 0.5);
        s.push_str(&format!(
            "<text class=\"group\" x=\"{cx:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            H - PAD + 16.0,
            xml_escape(name)
        ));
        if vals.is_empty() {
            continue;
        }
        let mut v = vals.clone();
        v.sort_by(f64::total_cmp);
        let (q1, q2, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.75));
        let iqr = q3 - q1;
        let lo = v.iter().copied().find(|&x| x >= q1 - 1.5 * iqr).unwrap_or(q1);
        let hi = v.iter().rev().copied().find(|&x| x <= q3 + 1.5 * iqr).unwrap_or(q3);
        let bw = (slot * 0.5).min(60.0);
        let (y1, y3) = (y_to_px(q1, yr), y_to_px(q3, yr));
        s.push_str(&format!(
            "<g class=\"box\" data-group=\"{}\" data-median=\"{q2}\">\n\
             <line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <rect x=\"{:.1}\" y=\"{y3:.1}\" width=\"{bw:.1}\" height=\"{:.1}\" fill=\"#9ecae1\" stroke=\"black\"/>\n\
             <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"2\"/>\n</g>\n",
            xml_escape(name),
            y_to_px(hi, yr),
            y_to_px(lo, yr),
            cx - bw / 2.0,
            (y1 - y3).max(0.5),
            cx - bw / 2.0,
            y_to_px(q2, yr),
            cx + bw / 2.0,
            y_to_px(q2, yr),
        ));
        for &x in v.iter().filter(|&&x| x < lo || x > hi) {
            s.push_str(&format!(
                "<circle cx=\"{cx:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"none\" stroke=\"black\"/>\n",
                y_to_px(x, yr)
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter plot annotated with its Pearson r (three decimals).
pub fn svg_scatter(title: &str, xlabel: &str, ylabel: &str, x: &[f64], y: &[f64], r: Option<f64>) -> String {
    let xr = range(x.iter().copied());
    let yr = range(y.iter().copied());
    let mut s = svg_open(title);
    axes(&mut s, xlabel, ylabel, yr);
    for i in 0..=4 {
        let v = xr.0 + (xr.1 - xr.0) * i as f64 / 4.0;
        let px = PAD + (W - 1.5 * PAD) * i as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{px:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            H - PAD + 16.0,
            fmt_tick(v)
        ));
    }
    for (a, b) in x.iter().zip(y) {
        let px = PAD + (a - xr.0) / (xr.1 - xr.0) * (W - 1.5 * PAD);
        s.push_str(&format!(
            "<circle cx=\"{px:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#3182bd\" fill-opacity=\"0.7\"/>\n",
            y_to_px(*b, yr)
        ));
    }
    let label = r.map(|r| format!("r = {r:.3}")).unwrap_or_else(|| "r = n/a".into());
    s.push_str(&format!(
        "<text class=\"r\" x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"14\">{label}</text>\n</svg>\n",
        W - PAD / 2.0,
        PAD - 10.0
    ));
    s
}

fn color(t: f64) -> String {
    // blue → red
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t) as u8;
    let b = (255.0 * (1.0 - t)) as u8;
    format!("#{r:02x}40{b:02x}")
}

/// Orthographic x–y view of a point model colored by a per-point scalar.
pub fn svg_point_heatmap(title: &str, points: &[[f64; 3]], values: &[f64]) -> String {
    let xr = range(points.iter().map(|p| p[0]));
    let yr = range(points.iter().map(|p| p[1]));
    let (vlo, vhi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if vhi > vlo { vhi - vlo } else { 1.0 };
    let mut s = svg_open(title);
    let scale = ((W - 2.0 * PAD) / (xr.1 - xr.0)).min((H - 2.0 * PAD) / (yr.1 - yr.0));
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a][2].total_cmp(&points[b][2]).then(a.cmp(&b)));
    for i in order {
        let p = points[i];
        s.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"5\" fill=\"{}\"/>\n",
            PAD + (p[0] - xr.0) * scale,
            H - PAD - (p[1] - yr.0) * scale,
            color((values[i] - vlo) / span)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{PAD}\" y=\"{}\">min {} (blue) / max {} (red)</text>\n</svg>\n",
        H - 16.0,
        fmt_tick(vlo),
        fmt_tick(vhi)
    ));
    s
}

fn sanitize(v: Variant) -> String {
    v.as_str().replace('-', "_")
}

/// Writes the box plots, scatter plots and heatmaps described by `summary`
/// under `dir/plots` and `dir/heatmaps`. Returns the files written.
pub fn emit_plots(summary: &Summary, template: &SurfaceMesh, dir: &Path) -> Result<Vec<PathBuf>> {
    if summary.variants.iter().all(|v| v.runs.is_empty()) {
        return Err(Error::Domain("nothing to plot: no evaluated runs".into()));
    }
    let mut files = Vec::new();
    let plots = dir.join("plots");
    let mut put = |path: PathBuf, text: String| -> Result<()> {
        write_text(&path, &text)?;
        files.push(path);
        Ok(())
    };
    type Getter = fn(&CalibrationRow) -> Option<f64>;
    let metrics: [(&str, &str, Getter); 2] = [
        ("rmse", "per-sample RMSE", |r| Some(r.rmse)),
        ("surface_distance", "surface-to-surface distance", |r| r.surface_distance),
    ];
    for (key, label, get) in metrics {
        let groups: Vec<(String, Vec<f64>)> = summary
            .variants
            .iter()
            .map(|v| {
                let vals = v.runs.iter().flat_map(|r| r.samples.iter().filter_map(get)).collect();
                (v.variant.as_str().to_string(), vals)
            })
            .collect();
        put(plots.join(format!("box_{key}.svg")), svg_box_plot(&format!("Test {label}"), label, &groups))?;
    }
    for v in &summary.variants {
        for run in &v.runs {
            let tag = match run.run {
                Some(r) => format!("{}_run{r}", sanitize(v.variant)),
                None => format!("{}_pooled", sanitize(v.variant)),
            };
            let col = |f: fn(&CalibrationRow) -> f64| run.samples.iter().map(f).collect::<Vec<f64>>();
            let m = &run.metrics;
            let panels: [(&str, &str, &str, Vec<f64>, Vec<f64>, Option<f64>); 3] = [
                ("error_total", "total uncertainty", "RMSE", col(|r| r.total), col(|r| r.rmse), m.r_error_total),
                (
                    "shape_epistemic",
                    "shape outlier degree",
                    "epistemic uncertainty",
                    col(|r| r.shape_outlier),
                    col(|r| r.epistemic),
                    m.r_shape_outlier_epistemic,
                ),
                (
                    "image_aleatoric",
                    "image outlier degree",
                    "aleatoric uncertainty",
                    col(|r| r.image_outlier),
                    col(|r| r.aleatoric),
                    m.r_image_outlier_aleatoric,
                ),
            ];
            for (name, xl, yl, x, y, r) in panels {
                put(
                    plots.join(format!("scatter_{name}_{tag}.svg")),
                    svg_scatter(&format!("{} {}", v.variant, name.replace('_', " vs ")), xl, yl, &x, &y, r),
                )?;
            }
        }
        if let Some(run) = v.runs.first() {
            for h in &run.heatmaps {
                let base = dir.join("heatmaps").join(sanitize(v.variant));
                let mesh = reconstruct_mesh(&PointModel { points: h.points.clone() }, template)?;
                put(base.join(format!("{}.off", h.id)), mesh.to_off())?;
                let mut csv = String::from("point_id,error,epistemic,aleatoric,total\n");
                for i in 0..h.points.len() {
                    csv.push_str(&format!(
                        "{i},{:e},{:e},{:e},{:e}\n",
                        h.error[i], h.epistemic[i], h.aleatoric[i], h.total[i]
                    ));
                }
                put(base.join(format!("{}.csv", h.id)), csv)?;
                put(
                    base.join(format!("{}.svg", h.id)),
                    svg_point_heatmap(&format!("{} {}: total uncertainty", v.variant, h.id), &h.points, &h.total),
                )?;
            }
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, rmse: f64, total: f64, shape: f64, blur: f64) -> CalibrationRow {
        CalibrationRow {
            id: format!("s{i}"),
            split: Split::Test,
            blur_size: blur,
            rmse,
            surface_distance: Some(rmse * 2.0),
            surface_distance_max: Some(rmse * 3.0),
            epistemic: shape * 0.1,
            aleatoric: blur * 0.01,
            total,
            shape_outlier: shape,
            image_outlier: blur,
        }
    }

    fn table() -> CalibrationTable {
        CalibrationTable::from_rows(
            (0..20)
                .map(|i| row(i, 0.1 + i as f64 * 0.01, 0.2 + i as f64 * 0.03, i as f64, 1.0 + (i % 8) as f64))
                .collect(),
        )
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.runs, 4);
        assert_eq!(c.variants.len(), 6);
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        let parsed = ExperimentConfig::from_toml("variants = [\"VIB\", \"BE-CD\"]\nruns = 1\n").unwrap();
        assert_eq!(parsed.variants, vec![Variant::Vib, Variant::BeCd]);
        assert_eq!(parsed.train, TrainConfig::default());
        for bad in [
            "variants = []",
            "runs = 0",
            "variants = [\"NE\"]\nruns = 1",
            "variants = [\"VIB\", \"VIB\"]",
            "bogus = 1",
            "variants = [\"XYZ\"]",
            "[train]\nlearning_rate = -1.0",
        ] {
            assert!(ExperimentConfig::from_toml(bad).unwrap_err().is_config(), "{bad}");
        }
    }

    #[test]
    fn metrics_from_table() {
        let t = table();
        let m = run_metrics(&t, &EvalConfig::default());
        assert!((m.test_rmse - (0.1 + 0.095)).abs() < 1e-12);
        assert!((m.r_error_total.unwrap() - 1.0).abs() < 1e-12);
        // top 10% of 20 = 2 rows (shape 19, 18); bottom 50% = shape 0..9
        assert!((m.epistemic_median_top_outliers.unwrap() - 1.85).abs() < 1e-12);
        assert!((m.epistemic_median_bottom_outliers.unwrap() - 0.45).abs() < 1e-12);
        assert!(m.aleatoric_mean_high_blur.unwrap() > m.aleatoric_mean_low_blur.unwrap());
    }

    #[test]
    fn stat_examples() {
        let s = Stat::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.n), (2.0, 2));
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[5.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    fn summary_with(variants: &[Variant]) -> Summary {
        let t = table();
        let m = run_metrics(&t, &EvalConfig::default());
        Summary {
            seed: 0,
            dataset_hash: "h".into(),
            split_counts: BTreeMap::new(),
            evaluated_samples: 20,
            baseline_rmse: 1.0,
            variants: variants
                .iter()
                .map(|&v| VariantSummary {
                    variant: v,
                    runs: vec![RunSummary {
                        run: Some(0),
                        seeds: vec![0],
                        best_epochs: vec![1],
                        epochs_run: vec![2],
                        metrics: m,
                        samples: t.rows.clone(),
                        heatmaps: vec![Heatmap {
                            id: "s0".into(),
                            points: vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, -1.0, -1.0]],
                            error: vec![0.1, 0.2, 0.3, 0.4],
                            epistemic: vec![0.0; 4],
                            aleatoric: vec![1.0; 4],
                            total: vec![1.0, 2.0, 3.0, 4.0],
                        }],
                    }],
                    aggregate: BTreeMap::new(),
                })
                .collect(),
            failures: vec![],
            complete: true,
            flags: vec![],
        }
    }

    #[test]
    fn plots_follow_summary() {
        let dir = tempfile::tempdir().unwrap();
        let s = summary_with(&[Variant::Vib, Variant::Cd]);
        let template = crate::shapegen::template_mesh(4).unwrap();
        let files = emit_plots(&s, &template, dir.path()).unwrap();
        let box_rmse = std::fs::read_to_string(dir.path().join("plots/box_rmse.svg")).unwrap();
        assert_eq!(box_rmse.matches("class=\"box\"").count(), 2);
        let sc = std::fs::read_to_string(dir.path().join("plots/scatter_error_total_CD_run0.svg")).unwrap();
        let want = format!("r = {:.3}", s.variants[1].runs[0].metrics.r_error_total.unwrap());
        assert!(sc.contains(&want));
        let csv = std::fs::read_to_string(dir.path().join("heatmaps/VIB/s0.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4);
        let mesh = SurfaceMesh::read_off(&dir.path().join("heatmaps/VIB/s0.off")).unwrap();
        assert_eq!(mesh.vertices.len(), 4);
        assert!(files.iter().all(|f| f.exists()));
        let empty = Summary {
            variants: vec![],
            ..s
        };
        assert!(emit_plots(&empty, &template, dir.path()).is_err());
    }

    #[test]
    fn versioned_dirs_never_reuse() {
        let d = tempfile::tempdir().unwrap();
        let a = versioned_dir(d.path()).unwrap();
        let b = versioned_dir(d.path()).unwrap();
        assert_ne!(a, b);
        assert!(a.ends_with("run-001") && b.ends_with("run-002"));
    }

    fn tiny_dataset(dir: &Path) -> Dataset {
        let cfg = DatasetConfig {
            train: 12,
            val: 3,
            test: 6,
            dims: [12, 12, 12],
            num_points: 16,
            mesh_resolution: [16, 8],
            ..DatasetConfig::desk_scale()
        };
        build_dataset(&cfg, dir).unwrap();
        Dataset::load(dir).unwrap()
    }

    #[test]
    fn outlier_split_properties() {
        let d = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(d.path());
        let (ps, pi) = fit_pca_models(&ds, &EvalConfig::default()).unwrap();
        let same = split_by_outlier(&ds, &ps, &pi, 0, 0, 16, 3).unwrap();
        assert_eq!(same.samples, ds.manifest.samples);
        assert_eq!(same.flags.len(), 1);
        let m = split_by_outlier(&ds, &ps, &pi, 1, 2, 16, 3).unwrap();
        assert_eq!(m.count(Split::ShapeOutlier), 1);
        assert!(m.count(Split::ImageOutlier) + m.flags.len() == 2);
        assert_eq!(m.count(Split::Train), 12);
        assert_eq!(m.count(Split::Val), 3);
        let deg: Vec<f64> = (0..ds.points.len())
            .map(|i| crate::eval::outlier_degree(&ds.points[i].flatten(), &ps).unwrap())
            .collect();
        let argmax = (0..deg.len()).max_by(|&a, &b| deg[a].total_cmp(&deg[b])).unwrap();
        assert_eq!(m.samples[argmax].split, Split::ShapeOutlier);
        assert_eq!(split_by_outlier(&ds, &ps, &pi, 1, 2, 16, 3).unwrap(), m);
        assert!(split_by_outlier(&ds, &ps, &pi, 6, 0, 16, 3).is_err());
    }
}
