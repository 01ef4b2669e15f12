//! Posterior-predictive sampling over weight draws and the split of
//! predictive variance into epistemic and aleatoric parts.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, GateDraw, Mode, Network, Variant};
use crate::shapegen::Volume;

/// Weight-draw bookkeeping for one row of a [`SampleSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTag {
    /// Ensemble member (batch-ensemble member or naive-ensemble network).
    pub member: usize,
    /// RNG stream of the dropout mask, if one was drawn.
    pub mask_stream: Option<u64>,
}

/// T predictions (ŷ_t, σ̂²_t) from T weight draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub y_hat: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
    pub tags: Vec<SampleTag>,
}

impl SampleSet {
    pub fn new(y_hat: Vec<Vec<f64>>, sigma2: Vec<Vec<f64>>, tags: Vec<SampleTag>) -> Result<Self> {
        let s = Self { y_hat, sigma2, tags };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.y_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_hat.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.y_hat.first().map_or(0, |r| r.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.y_hat.is_empty() {
            return Err(Error::Domain("sample set is empty".into()));
        }
        if self.sigma2.len() != self.y_hat.len() || self.tags.len() != self.y_hat.len() {
            return Err(Error::Shape(format!(
                "{} predictions, {} variances, {} tags",
                self.y_hat.len(),
                self.sigma2.len(),
                self.tags.len()
            )));
        }
        let f = self.dim();
        for (y, s) in self.y_hat.iter().zip(&self.sigma2) {
            if y.len() != f || s.len() != f {
                return Err(Error::Shape(format!("row lengths {} / {} vs {f}", y.len(), s.len())));
            }
            if y.iter().any(|v| !v.is_finite()) || s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Domain("sample set has non-finite values or non-positive variance".into()));
            }
        }
        Ok(())
    }

    /// Pools another set (naive-ensemble members).
    pub fn extend(&mut self, other: SampleSet) {
        self.y_hat.extend(other.y_hat);
        self.sigma2.extend(other.sigma2);
        self.tags.extend(other.tags);
    }
}

/// Per-coordinate variance decomposition for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub epistemic: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub total: Vec<f64>,
    /// Sums over x, y, z for each point.
    pub point_epistemic: Vec<f64>,
    pub point_aleatoric: Vec<f64>,
    pub point_total: Vec<f64>,
    /// Means of the per-point sums.
    pub mean_epistemic: f64,
    pub mean_aleatoric: f64,
    pub mean_total: f64,
    pub samples: usize,
}

impl UncertaintyReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Runtime(format!("report json: {e}")))
    }
}

fn per_point(v: &[f64]) -> Vec<f64> {
    v.chunks(3).map(|c| c.iter().sum()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Elementwise mean of ŷ over the samples.
pub fn point_estimate(s: &SampleSet) -> Vec<f64> {
    let t = s.len() as f64;
    let mut m = vec![0.0; s.dim()];
    for y in &s.y_hat {
        m.iter_mut().zip(y).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= t);
    m
}

/// `(1/T)Σŷ² − ((1/T)Σŷ)²`, the algebraic one-pass form of the epistemic term.
pub fn epistemic_one_pass(s: &SampleSet) -> Vec<f64> {
    let t = s.len() as f64;
    let m = point_estimate(s);
    let mut sq = vec![0.0; s.dim()];
    for y in &s.y_hat {
        sq.iter_mut().zip(y).for_each(|(a, b)| *a += b * b);
    }
    sq.iter().zip(&m).map(|(q, m)| q / t - m * m).collect()
}

/// Epistemic = variance of ŷ over draws (two-pass), aleatoric = mean σ̂².
pub fn decompose_uncertainty(s: &SampleSet) -> Result<UncertaintyReport> {
    s.validate()?;
    let t = s.len() as f64;
    let m = point_estimate(s);
    let mut epi = vec![0.0; s.dim()];
    let mut ale = vec![0.0; s.dim()];
    for (y, v) in s.y_hat.iter().zip(&s.sigma2) {
        for c in 0..epi.len() {
            epi[c] += (y[c] - m[c]).powi(2);
            ale[c] += v[c];
        }
    }
    for c in 0..epi.len() {
        epi[c] /= t;
        ale[c] /= t;
        debug_assert!(epi[c] >= -1e-12);
        epi[c] = epi[c].max(0.0);
    }
    let total: Vec<f64> = epi.iter().zip(&ale).map(|(a, b)| a + b).collect();
    let (pe, pa, pt) = (per_point(&epi), per_point(&ale), per_point(&total));
    Ok(UncertaintyReport {
        mean_epistemic: mean(&pe),
        mean_aleatoric: mean(&pa),
        mean_total: mean(&pt),
        point_epistemic: pe,
        point_aleatoric: pa,
        point_total: pt,
        epistemic: epi,
        aleatoric: ale,
        total,
        samples: s.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Dropout masks per ensemble member.
    pub mc_samples: usize,
    /// Latent draws J per weight draw for the aleatoric term.
    pub latent_samples: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mc_samples: 30,
            latent_samples: 16,
            seed: 0,
        }
    }
}

/// A trained model ready for prediction: one network, or K networks for a
/// naive ensemble.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub variant: Variant,
    pub networks: Vec<Network>,
}

impl Predictor {
    pub fn single(network: Network) -> Self {
        Self {
            variant: network.config.variant,
            networks: vec![network],
        }
    }

    pub fn naive_ensemble(variant: Variant, networks: Vec<Network>) -> Result<Self> {
        let p = Self { variant, networks };
        p.validate()?;
        Ok(p)
    }

    pub fn from_checkpoints(variant: Variant, checkpoints: Vec<Checkpoint>) -> Result<Self> {
        let p = Self {
            variant,
            networks: checkpoints.into_iter().map(|c| c.network).collect(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.networks.is_empty() {
            return Err(Error::Runtime("no model loaded".into()));
        }
        let want = self.variant.member_variant();
        if let Some(n) = self.networks.iter().find(|n| n.config.variant != want) {
            return Err(Error::Config(format!(
                "checkpoint variant {} does not match requested {}",
                n.config.variant, self.variant
            )));
        }
        if self.variant.is_naive_ensemble() != (self.networks.len() > 1) {
            return Err(Error::Config(format!(
                "{} with {} networks",
                self.variant,
                self.networks.len()
            )));
        }
        Ok(())
    }

    /// Weight draws T for this predictor.
    pub fn num_draws(&self, cfg: &InferenceConfig) -> usize {
        let k = match self.variant {
            v if v.is_batch_ensemble() => self.networks[0].config.ensemble_size,
            _ => self.networks.len(),
        };
        if self.variant.uses_dropout() {
            k * cfg.mc_samples
        } else {
            k
        }
    }
}

struct Draw {
    network: usize,
    member: Option<usize>,
    stream: Option<u64>,
}

fn plan(p: &Predictor, cfg: &InferenceConfig) -> Vec<Draw> {
    let be = p.variant.is_batch_ensemble();
    let k = if be { p.networks[0].config.ensemble_size } else { p.networks.len() };
    let masks = if p.variant.uses_dropout() { cfg.mc_samples } else { 1 };
    let mut out = Vec::with_capacity(k * masks);
    for m in 0..k {
        for j in 0..masks {
            out.push(Draw {
                network: if be { 0 } else { m },
                member: be.then_some(m),
                stream: p.variant.uses_dropout().then_some((m * masks + j) as u64),
            });
        }
    }
    out
}

/// T weight draws for one input. Each draw decodes the latent mean for ŷ_t;
/// its σ̂²_t is the mean decoder variance over J latent draws plus the
/// variance of the decoded means across those draws.
pub fn predict_samples(p: &Predictor, x: &Volume, cfg: &InferenceConfig) -> Result<SampleSet> {
    p.validate()?;
    if p.variant.uses_dropout() && cfg.mc_samples == 0 {
        return Err(Error::Config("dropout variants need at least one mask sample".into()));
    }
    let draws = plan(p, cfg);
    let rows: Vec<Result<(Vec<f64>, Vec<f64>, SampleTag)>> = draws
        .par_iter()
        .map(|d| {
            let net = &p.networks[d.network];
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(d.stream.unwrap_or(u64::MAX - d.network as u64));
            let (gates, mode) = match d.stream {
                Some(_) => (net.draw_gates(1, &mut rng), Mode::Sample),
                None => (GateDraw::none(), Mode::Eval),
            };
            let latent = net.encode_with(x, mode, d.member, &gates)?;
            let l = latent.dim();
            let j = cfg.latent_samples;
            let mut z = Array2::zeros((1 + j, l));
            z.row_mut(0).assign(&ndarray::ArrayView1::from(&latent.mu));
            for r in 1..=j {
                for c in 0..l {
                    let e: f64 = rng.sample(StandardNormal);
                    z[[r, c]] = latent.mu[c] + (0.5 * latent.log_var[c]).exp() * e;
                }
            }
            let preds = net.decode_with(&z, d.member, &gates)?;
            let y_hat = preds[0].y_hat.clone();
            let f = y_hat.len();
            let sigma2 = if j == 0 {
                preds[0].variance()
            } else {
                let lat = &preds[1..];
                (0..f)
                    .map(|c| {
                        let m = lat.iter().map(|s| s.y_hat[c]).sum::<f64>() / j as f64;
                        let spread = lat.iter().map(|s| (s.y_hat[c] - m).powi(2)).sum::<f64>() / j as f64;
                        let dv = lat.iter().map(|s| s.log_var_y[c].exp()).sum::<f64>() / j as f64;
                        dv + spread
                    })
                    .collect()
            };
            Ok((
                y_hat,
                sigma2,
                SampleTag {
                    member: d.member.unwrap_or(d.network),
                    mask_stream: d.stream,
                },
            ))
        })
        .collect();
    let mut y = Vec::with_capacity(rows.len());
    let mut s = Vec::with_capacity(rows.len());
    let mut t = Vec::with_capacity(rows.len());
    for r in rows {
        let (a, b, c) = r?;
        y.push(a);
        s.push(b);
        t.push(c);
    }
    SampleSet::new(y, s, t)
}

/// Flat per-point table: sample id, point id, epistemic, aleatoric, total.
pub fn write_uncertainty_csv(path: &Path, rows: &[(String, UncertaintyReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Runtime(format!("{}: {e}", path.display()));
    w.write_record(["sample_id", "point_id", "epistemic", "aleatoric", "total"]).map_err(err)?;
    for (id, r) in rows {
        for i in 0..r.point_total.len() {
            w.write_record([
                id.clone(),
                i.to_string(),
                format!("{:e}", r.point_epistemic[i]),
                format!("{:e}", r.point_aleatoric[i]),
                format!("{:e}", r.point_total[i]),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report_json(path: &Path, report: &UncertaintyReport) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(report.to_json()?.as_bytes()).map_err(|e| Error::io(path, e))
}
