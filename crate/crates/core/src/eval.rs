//! Accuracy metrics, PCA outlier degree and uncertainty calibration.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::UncertaintyReport;
use crate::shapegen::{add, norm, point_triangle_distance, scale, sub, PointModel, SampleRecord, Split, SurfaceMesh, Vec3, Volume};

/// Default area-uniform samples per mesh for surface distances.
pub const SURFACE_SAMPLES: usize = 10_000;

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::Shape(format!("rmse of lengths {} and {}", y.len(), y_hat.len())));
    }
    Ok((y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt())
}

/// Predicted points as vertices of the fixed template connectivity.
pub fn reconstruct_mesh(p: &PointModel, template: &SurfaceMesh) -> Result<SurfaceMesh> {
    if p.len() != template.vertices.len() {
        return Err(Error::Shape(format!(
            "{} points for a template with {} vertices",
            p.len(),
            template.vertices.len()
        )));
    }
    Ok(SurfaceMesh {
        vertices: p.points.clone(),
        faces: template.faces.clone(),
    })
}

/// Symmetric surface distance: mean of the two directed mean distances, plus
/// the largest sampled distance in either direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistance {
    pub mean: f64,
    pub max: f64,
}

/// Area-uniform points on the surface; the sampler is seeded by a constant so
/// a mesh always gets the same samples.
pub fn sample_surface(mesh: &SurfaceMesh, n: usize) -> Result<Vec<Vec3>> {
    mesh.validate_indices()?;
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cum.push(acc);
    }
    if mesh.faces.is_empty() || !(acc > 0.0) {
        return Err(Error::Mesh("cannot sample an empty or zero-area mesh".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    Ok((0..n)
        .map(|_| {
            let t = rng.gen_range(0.0..acc);
            let f = cum.partition_point(|&c| c <= t).min(mesh.faces.len() - 1);
            let [a, b, c] = mesh.triangle(f);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            add(add(scale(a, 1.0 - s), scale(b, s * (1.0 - r2))), scale(c, s * r2))
        })
        .collect())
}

struct TriangleIndex {
    tris: Vec<[Vec3; 3]>,
    centers: Vec<Vec3>,
    radii: Vec<f64>,
}

impl TriangleIndex {
    fn new(mesh: &SurfaceMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let centers: Vec<Vec3> = tris.iter().map(|[a, b, c]| scale(add(add(*a, *b), *c), 1.0 / 3.0)).collect();
        let radii = tris
            .iter()
            .zip(&centers)
            .map(|(t, c)| t.iter().map(|v| norm(sub(*v, *c))).fold(0.0, f64::max))
            .collect();
        Self { tris, centers, radii }
    }

    fn distance(&self, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.tris.len() {
            if norm(sub(p, self.centers[i])) - self.radii[i] >= best {
                continue;
            }
            let [a, b, c] = self.tris[i];
            best = best.min(point_triangle_distance(p, a, b, c));
        }
        best
    }
}

fn directed(samples: &[Vec3], target: &SurfaceMesh) -> (f64, f64) {
    let idx = TriangleIndex::new(target);
    let d: Vec<f64> = samples.par_iter().map(|&p| idx.distance(p)).collect();
    (d.iter().sum::<f64>() / d.len() as f64, d.iter().cloned().fold(0.0, f64::max))
}

pub fn surface_distance(a: &SurfaceMesh, b: &SurfaceMesh, n_samples: usize) -> Result<SurfaceDistance> {
    if n_samples == 0 {
        return Err(Error::Domain("surface distance needs at least one sample".into()));
    }
    let sa = sample_surface(a, n_samples)?;
    let sb = sample_surface(b, n_samples)?;
    let (ab, ab_max) = directed(&sa, b);
    let (ba, ba_max) = directed(&sb, a);
    Ok(SurfaceDistance {
        mean: 0.5 * (ab + ba),
        max: ab_max.max(ba_max),
    })
}

pub fn surface_to_surface(a: &SurfaceMesh, b: &SurfaceMesh, n_samples: usize) -> Result<f64> {
    surface_distance(a, b, n_samples).map(|d| d.mean)
}

/// Principal subspace of a data matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Retained unit directions, one per row.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub retained_fraction: f64,
    /// Mean eigenvalue of the discarded directions within the numerical rank
    /// (0 when nothing is discarded).
    pub residual_eigenvalue: f64,
    pub total_variance: f64,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn scores(&self, v: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.components
            .iter()
            .map(|d| d.iter().zip(&c).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn reconstruct(&self, v: &[f64]) -> Vec<f64> {
        let s = self.scores(v);
        let mut r = self.mean.clone();
        for (d, sc) in self.components.iter().zip(&s) {
            r.iter_mut().zip(d).for_each(|(a, b)| *a += sc * b);
        }
        r
    }
}

/// PCA keeping the fewest components whose cumulative variance reaches
/// `variance_fraction`. Uses the N×N Gram matrix when N < F.
pub fn fit_pca(data: &[Vec<f64>], variance_fraction: f64) -> Result<PcaModel> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Domain(format!("PCA needs at least 2 rows, got {n}")));
    }
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(Error::Config(format!("variance fraction {variance_fraction} outside (0, 1]")));
    }
    let f = data[0].len();
    if f == 0 || data.iter().any(|r| r.len() != f) {
        return Err(Error::Shape("PCA rows must share a positive length".into()));
    }
    let mut mean = vec![0.0; f];
    for r in data {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, f, |i, j| data[i][j] - mean[j]);
    let denom = (n - 1) as f64;
    let (vals, dirs): (Vec<f64>, Vec<Vec<f64>>) = if n < f {
        let gram = (&x * x.transpose()) / denom;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order
            .into_iter()
            .map(|i| {
                let lam = eig.eigenvalues[i].max(0.0);
                let u = eig.eigenvectors.column(i);
                let v = x.transpose() * u;
                let nv = v.norm();
                let dir = if nv > 0.0 { (v / nv).iter().copied().collect() } else { vec![0.0; f] };
                (lam, dir)
            })
            .unzip()
    } else {
        let cov = (x.transpose() * &x) / denom;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..f).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order
            .into_iter()
            .map(|i| (eig.eigenvalues[i].max(0.0), eig.eigenvectors.column(i).iter().copied().collect()))
            .unzip()
    };
    let total: f64 = vals.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Domain("data has zero variance (rank 0)".into()));
    }
    let tol = vals[0] * 1e-10;
    let rank = vals.iter().take_while(|&&v| v > tol).count();
    let target = variance_fraction * total * (1.0 - 1e-12);
    let mut cum = 0.0;
    let mut k = rank;
    for (i, v) in vals.iter().take(rank).enumerate() {
        cum += v;
        if cum >= target {
            k = i + 1;
            break;
        }
    }
    let kept: f64 = vals[..k].iter().sum();
    let residual_eigenvalue = if rank > k {
        vals[k..rank].iter().sum::<f64>() / (rank - k) as f64
    } else {
        0.0
    };
    Ok(PcaModel {
        mean,
        components: dirs[..k].to_vec(),
        eigenvalues: vals[..k].to_vec(),
        retained_fraction: kept / total,
        residual_eigenvalue,
        total_variance: total,
    })
}

/// Within-subspace Mahalanobis term and normalized off-subspace term.
pub fn outlier_terms(v: &[f64], pca: &PcaModel) -> Result<(f64, f64)> {
    if v.len() != pca.dim() {
        return Err(Error::Shape(format!("vector of {} vs PCA dim {}", v.len(), pca.dim())));
    }
    let s = pca.scores(v);
    let within = s.iter().zip(&pca.eigenvalues).map(|(s, l)| s * s / l).sum::<f64>().sqrt();
    let rec = pca.reconstruct(v);
    let resid = v.iter().zip(&rec).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let off = if pca.residual_eigenvalue > 0.0 {
        resid / pca.residual_eigenvalue.sqrt()
    } else {
        let scale = pca.total_variance.sqrt().max(1.0);
        if resid <= 1e-9 * scale {
            0.0
        } else {
            return Err(Error::Domain(format!(
                "off-subspace residual {resid} with no discarded variance to normalize it"
            )));
        }
    };
    Ok((within, off))
}

/// Sum of the within- and off-subspace terms, in standard-deviation units.
pub fn outlier_degree(v: &[f64], pca: &PcaModel) -> Result<f64> {
    outlier_terms(v, pca).map(|(a, b)| a + b)
}

pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::Domain(format!("correlation needs at least 3 values, got {}", a.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Domain("correlation of a zero-variance input".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Flattened image features for the image-space PCA, downsampled so the
/// largest axis is at most `max_dim`.
pub fn image_features(v: &Volume, max_dim: usize) -> Vec<f64> {
    let largest = v.dims.iter().copied().max().unwrap_or(1);
    v.downsample(largest.div_ceil(max_dim.max(1))).data
}

/// Prediction for one evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub prediction: Vec<f64>,
    pub report: UncertaintyReport,
    pub surface: Option<SurfaceDistance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub id: String,
    pub split: Split,
    pub blur_size: f64,
    pub rmse: f64,
    pub surface_distance: Option<f64>,
    pub surface_distance_max: Option<f64>,
    pub epistemic: f64,
    pub aleatoric: f64,
    pub total: f64,
    pub shape_outlier: f64,
    pub image_outlier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub r_error_total: Option<f64>,
    pub r_image_outlier_aleatoric: Option<f64>,
    pub r_shape_outlier_epistemic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub rows: Vec<CalibrationRow>,
    pub summary: CalibrationSummary,
}

impl CalibrationTable {
    pub fn from_rows(rows: Vec<CalibrationRow>) -> Self {
        let col = |f: fn(&CalibrationRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
        let r = |a: &[f64], b: &[f64]| pearson_r(a, b).ok();
        let summary = CalibrationSummary {
            r_error_total: r(&col(|r| r.rmse), &col(|r| r.total)),
            r_image_outlier_aleatoric: r(&col(|r| r.image_outlier), &col(|r| r.aleatoric)),
            r_shape_outlier_epistemic: r(&col(|r| r.shape_outlier), &col(|r| r.epistemic)),
        };
        Self { rows, summary }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Runtime(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record([
            "id",
            "split",
            "blur_size",
            "rmse",
            "surface_distance",
            "surface_distance_max",
            "epistemic",
            "aleatoric",
            "total",
            "shape_outlier",
            "image_outlier",
        ])
        .map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                r.split.as_str().to_string(),
                format!("{:e}", r.blur_size),
                format!("{:e}", r.rmse),
                opt(r.surface_distance),
                opt(r.surface_distance_max),
                format!("{:e}", r.epistemic),
                format!("{:e}", r.aleatoric),
                format!("{:e}", r.total),
                format!("{:e}", r.shape_outlier),
                format!("{:e}", r.image_outlier),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.summary).map_err(|e| Error::Runtime(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// One row per evaluated sample with error, uncertainty and both outlier
/// degrees; `truths[i]` and `image_vecs[i]` belong to `samples[i]`.
pub fn build_calibration_table(
    samples: &[&SampleRecord],
    truths: &[Vec<f64>],
    image_vecs: &[Vec<f64>],
    predictions: &[PredictionRecord],
    pca_shape: &PcaModel,
    pca_image: &PcaModel,
) -> Result<CalibrationTable> {
    if samples.len() != predictions.len() || truths.len() != samples.len() || image_vecs.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} samples, {} truths, {} images, {} predictions",
            samples.len(),
            truths.len(),
            image_vecs.len(),
            predictions.len()
        )));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for i in 0..samples.len() {
        let (s, p) = (samples[i], &predictions[i]);
        if s.id != p.id {
            return Err(Error::Domain(format!("prediction id {} does not match sample {}", p.id, s.id)));
        }
        rows.push(CalibrationRow {
            id: s.id.clone(),
            split: s.split,
            blur_size: s.blur_size,
            rmse: rmse(&truths[i], &p.prediction)?,
            surface_distance: p.surface.map(|d| d.mean),
            surface_distance_max: p.surface.map(|d| d.max),
            epistemic: p.report.mean_epistemic,
            aleatoric: p.report.mean_aleatoric,
            total: p.report.mean_total,
            shape_outlier: outlier_degree(&truths[i], pca_shape)?,
            image_outlier: outlier_degree(&image_vecs[i], pca_image)?,
        });
    }
    Ok(CalibrationTable::from_rows(rows))
}
