//! Training objectives: deterministic L2, the VIB evidence bound, the fully
//! Bayesian bound with its weight-space KL, and the burn-in schedule that
//! blends between the deterministic and probabilistic losses.
//!
//! Every loss here also has an analytic gradient helper; the network's
//! backward pass is driven by those.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GateDraw, LatentDist, Network, PredictiveSample, StepCache, StepOutput, Variant};
use crate::nn::Grid5;

/// Default KL weight.
pub const DEFAULT_BETA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub burnin_start: usize,
    pub burnin_end: usize,
    /// Epochs (from 0) during which dropout gates are off and drop
    /// probabilities frozen.
    pub dropout_burnin_end: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            burnin_start: 0,
            burnin_end: 30,
            dropout_burnin_end: 10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if self.burnin_start > self.burnin_end {
            return Err(Error::Config(format!(
                "burn-in start {} after end {}",
                self.burnin_start, self.burnin_end
            )));
        }
        Ok(())
    }

    /// Dropout burn-in applies only to dropout variants.
    pub fn gates_off(&self, epoch: usize, variant: Variant) -> bool {
        variant.uses_dropout() && epoch < self.dropout_burnin_end
    }
}

/// Per-term decomposition of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub latent_kl: f64,
    pub weight_kl: f64,
    pub l2: f64,
    pub burnin_alpha: f64,
}

impl LossBreakdown {
    /// `(1−α)·l2 + α·(nll + β·latent_kl) + weight_kl`
    pub fn compose(l2: f64, nll: f64, latent_kl: f64, weight_kl: f64, beta: f64, alpha: f64) -> Self {
        Self {
            total: (1.0 - alpha) * l2 + alpha * (nll + beta * latent_kl) + weight_kl,
            nll,
            latent_kl,
            weight_kl,
            l2,
            burnin_alpha: alpha,
        }
    }

    /// Running sum for averaging over a batch.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.nll += other.nll;
        self.latent_kl += other.latent_kl;
        self.weight_kl += other.weight_kl;
        self.l2 += other.l2;
        self.burnin_alpha = other.burnin_alpha;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.total *= s;
        self.nll *= s;
        self.latent_kl *= s;
        self.weight_kl *= s;
        self.l2 *= s;
        self
    }
}

/// Mean over coordinates of `½(log σ² + (y − ŷ)²/σ²)`; the `½ log 2π`
/// constant is dropped.
pub fn gaussian_nll(y: &[f64], y_hat: &[f64], log_var: &[f64]) -> f64 {
    debug_assert!(y.len() == y_hat.len() && y.len() == log_var.len());
    let n = y.len() as f64;
    y.iter()
        .zip(y_hat)
        .zip(log_var)
        .map(|((y, m), lv)| 0.5 * (lv + (y - m).powi(2) * (-lv).exp()))
        .sum::<f64>()
        / n
}

/// Gradients of [`gaussian_nll`] with respect to ŷ and log σ².
pub fn gaussian_nll_grad(y: &[f64], y_hat: &[f64], log_var: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = y.len() as f64;
    y.iter()
        .zip(y_hat)
        .zip(log_var)
        .map(|((y, m), lv)| {
            let inv = (-lv).exp();
            let r = m - y;
            (r * inv / n, 0.5 * (1.0 - r * r * inv) / n)
        })
        .unzip()
}

/// KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1).
pub fn kl_gauss_std_normal(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

pub fn kl_gauss_std_normal_grad(mu: &[f64], log_var: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        mu.to_vec(),
        log_var.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect(),
    )
}

/// Mean squared error over coordinates.
pub fn l2_loss(y: &[f64], y_hat: &[f64]) -> f64 {
    y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}

pub fn l2_loss_grad(y: &[f64], y_hat: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    y.iter().zip(y_hat).map(|(a, b)| 2.0 * (b - a) / n).collect()
}

/// 0 before `burnin_start`, 1 from `burnin_end`, linear in between.
pub fn burnin_alpha(epoch: usize, cfg: &LossConfig) -> f64 {
    if epoch < cfg.burnin_start {
        0.0
    } else if epoch >= cfg.burnin_end {
        1.0
    } else {
        (epoch - cfg.burnin_start) as f64 / (cfg.burnin_end - cfg.burnin_start) as f64
    }
}

/// VIB objective for one target: NLL averaged over the latent samples, the
/// latent KL weighted by β, blended with L2 on the mean prediction via α.
pub fn vib_loss(
    y: &[f64],
    samples: &[PredictiveSample],
    latent: &LatentDist,
    beta: f64,
    alpha: f64,
) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::Domain("vib_loss needs at least one predictive sample".into()));
    }
    let t = samples.len() as f64;
    let mut nll = 0.0;
    let mut l2 = 0.0;
    for s in samples {
        if s.y_hat.len() != y.len() || s.log_var_y.len() != y.len() {
            return Err(Error::Shape(format!(
                "prediction length {} vs target {}",
                s.y_hat.len(),
                y.len()
            )));
        }
        nll += gaussian_nll(y, &s.y_hat, &s.log_var_y);
        l2 += l2_loss(y, &s.y_hat);
    }
    let kl = kl_gauss_std_normal(&latent.mu, &latent.log_var);
    Ok(LossBreakdown::compose(l2 / t, nll / t, kl, 0.0, beta, alpha))
}

/// Fully Bayesian objective: the VIB objective under one weight draw plus
/// the weight-space KL supplied by the variant.
pub fn bvib_loss(
    y: &[f64],
    samples: &[PredictiveSample],
    latent: &LatentDist,
    beta: f64,
    alpha: f64,
    weight_kl: f64,
) -> Result<LossBreakdown> {
    let v = vib_loss(y, samples, latent, beta, alpha)?;
    Ok(LossBreakdown::compose(v.l2, v.nll, v.latent_kl, weight_kl, beta, alpha))
}

/// The randomness of one stochastic training step, fixed up front so the
/// step can be re-evaluated exactly (finite differences, replay).
#[derive(Debug, Clone)]
pub struct StepDraws {
    pub members: Vec<usize>,
    pub gates: GateDraw,
    pub eps: Array2<f64>,
}

impl StepDraws {
    /// Round-robin members, fresh gates (unless `gates_off`) and latent noise.
    pub fn sample<R: Rng + ?Sized>(net: &Network, rows: usize, gates_off: bool, rng: &mut R) -> Self {
        let k = net.config.members();
        let gates = if gates_off || !net.has_gates() {
            GateDraw::none()
        } else {
            net.draw_gates(rows, rng)
        };
        let l = net.config.latent_dim;
        let eps = Array2::from_shape_simple_fn((rows, l), || rng.sample(StandardNormal));
        Self {
            members: (0..rows).map(|i| i % k).collect(),
            gates,
            eps,
        }
    }
}

/// Batch objective in normalized units: mean over rows of the blended
/// per-row loss, plus the network's weight KL.
pub fn step_objective(
    net: &Network,
    x: &Grid5,
    y: &Array2<f64>,
    draws: &StepDraws,
    beta: f64,
    alpha: f64,
    bn_train: bool,
) -> Result<(LossBreakdown, StepOutput, StepCache)> {
    if y.nrows() != x.n || y.ncols() != net.config.output_dim() {
        return Err(Error::Shape(format!(
            "targets {:?} for {} inputs and {} outputs",
            y.dim(),
            x.n,
            net.config.output_dim()
        )));
    }
    let (out, cache) = net.forward_step(x, &draws.members, &draws.gates, &draws.eps, bn_train)?;
    let mut acc = LossBreakdown::default();
    for i in 0..x.n {
        let yi = y.row(i);
        let yi = yi.as_slice().expect("contiguous");
        let yh = out.y_hat.row(i).to_vec();
        let lvy = out.log_var_y.row(i).to_vec();
        let l2 = l2_loss(yi, &yh);
        let nll = gaussian_nll(yi, &yh, &lvy);
        let kl = kl_gauss_std_normal(&out.mu.row(i).to_vec(), &out.log_var.row(i).to_vec());
        acc.accumulate(&LossBreakdown::compose(l2, nll, kl, 0.0, beta, alpha));
    }
    let mean = acc.scaled(1.0 / x.n as f64);
    let wkl = net.weight_kl();
    Ok((
        LossBreakdown::compose(mean.l2, mean.nll, mean.latent_kl, wkl, beta, alpha),
        out,
        cache,
    ))
}

/// Accumulates the gradient of [`step_objective`] into the network.
pub fn backprop_objective(
    net: &mut Network,
    cache: &StepCache,
    out: &StepOutput,
    y: &Array2<f64>,
    beta: f64,
    alpha: f64,
) {
    let n = y.nrows();
    let inv = 1.0 / n as f64;
    let mut d_y = Array2::zeros(out.y_hat.dim());
    let mut d_lvy = Array2::zeros(out.y_hat.dim());
    let mut d_mu = Array2::zeros(out.mu.dim());
    let mut d_lv = Array2::zeros(out.mu.dim());
    for i in 0..n {
        let yi = y.row(i).to_vec();
        let yh = out.y_hat.row(i).to_vec();
        let lvy = out.log_var_y.row(i).to_vec();
        let g2 = l2_loss_grad(&yi, &yh);
        let (gm, glv) = gaussian_nll_grad(&yi, &yh, &lvy);
        for c in 0..yi.len() {
            d_y[[i, c]] = inv * ((1.0 - alpha) * g2[c] + alpha * gm[c]);
            d_lvy[[i, c]] = inv * alpha * glv[c];
        }
        let (km, klv) = kl_gauss_std_normal_grad(&out.mu.row(i).to_vec(), &out.log_var.row(i).to_vec());
        for l in 0..km.len() {
            d_mu[[i, l]] = inv * alpha * beta * km[l];
            d_lv[[i, l]] = inv * alpha * beta * klv[l];
        }
    }
    net.backward_step(cache, &d_y, &d_lvy, &d_mu, &d_lv);
    if net.has_gates() {
        net.accumulate_weight_kl_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nll_examples() {
        assert_eq!(gaussian_nll(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0]), 0.0);
        assert_eq!(gaussian_nll(&[1.0, 2.0], &[2.0, 3.0], &[0.0, 0.0]), 0.5);
        let (y, m, lv) = ([0.3, -1.2, 2.0], [0.1, -1.0, 2.5], [0.2, -0.7, 1.1]);
        let want = (0.5 * (0.2 + 0.04 * (-0.2f64).exp())
            + 0.5 * (-0.7 + 0.04 * 0.7f64.exp())
            + 0.5 * (1.1 + 0.25 * (-1.1f64).exp()))
            / 3.0;
        assert!((gaussian_nll(&y, &m, &lv) - want).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_gauss_std_normal(&[0.0; 4], &[0.0; 4]), 0.0);
        assert_eq!(kl_gauss_std_normal(&[1.0], &[0.0]), 0.5);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(l2_loss(&[1.0, 2.0], &[2.0, 1.0]), 1.0);
        assert!((l2_loss(&[0.5, -1.0, 3.0], &[1.0, 1.0, 1.0]) - (0.25 + 4.0 + 4.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_schedule() {
        let cfg = LossConfig {
            burnin_start: 10,
            burnin_end: 20,
            ..Default::default()
        };
        assert_eq!(burnin_alpha(0, &cfg), 0.0);
        assert_eq!(burnin_alpha(15, &cfg), 0.5);
        assert_eq!(burnin_alpha(20, &cfg), 1.0);
        assert_eq!(burnin_alpha(500, &cfg), 1.0);
        let instant = LossConfig {
            burnin_start: 5,
            burnin_end: 5,
            ..Default::default()
        };
        assert_eq!(burnin_alpha(4, &instant), 0.0);
        assert_eq!(burnin_alpha(5, &instant), 1.0);
    }

    fn sample(y_hat: Vec<f64>, lv: Vec<f64>) -> PredictiveSample {
        PredictiveSample { y_hat, log_var_y: lv }
    }

    #[test]
    fn vib_loss_examples() {
        let y = [0.5, -0.5, 1.0];
        let s = vec![sample(vec![0.4, -0.2, 1.3], vec![0.1, -0.3, 0.2])];
        let latent = LatentDist {
            mu: vec![0.3, -0.8],
            log_var: vec![-0.5, 0.4],
        };
        let pure = vib_loss(&y, &s, &latent, 0.0, 1.0).unwrap();
        assert_eq!(pure.total, gaussian_nll(&y, &s[0].y_hat, &s[0].log_var_y));

        let std = LatentDist {
            mu: vec![0.0; 2],
            log_var: vec![0.0; 2],
        };
        assert_eq!(vib_loss(&y, &s, &std, 0.7, 1.0).unwrap().latent_kl, 0.0);

        let b = vib_loss(&y, &s, &latent, 0.01, 1.0).unwrap();
        let by_hand = gaussian_nll(&y, &s[0].y_hat, &s[0].log_var_y)
            + 0.01 * kl_gauss_std_normal(&latent.mu, &latent.log_var);
        assert!((b.total - by_hand).abs() < 1e-15);
        assert_eq!(b.weight_kl, 0.0);
        assert!(vib_loss(&y, &[], &latent, 0.01, 1.0).is_err());
    }

    #[test]
    fn bvib_reduces_to_vib() {
        let y = [0.5, -0.5];
        let s = vec![sample(vec![0.4, -0.2], vec![0.1, -0.3]), sample(vec![0.6, -0.1], vec![0.0, 0.2])];
        let latent = LatentDist {
            mu: vec![0.3],
            log_var: vec![-0.5],
        };
        let v = vib_loss(&y, &s, &latent, 0.01, 0.4).unwrap();
        let b = bvib_loss(&y, &s, &latent, 0.01, 0.4, 0.0).unwrap();
        assert_eq!(v, b);
        let c = bvib_loss(&y, &s, &latent, 0.01, 0.4, 0.25).unwrap();
        assert!((c.total - v.total - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nll_grad_matches_finite_difference() {
        let (y, m, lv) = ([0.3, -1.2, 2.0], [0.1, -1.0, 2.5], [0.2, -0.7, 1.1]);
        let (gm, glv) = gaussian_nll_grad(&y, &m, &lv);
        let h = 1e-6;
        for i in 0..3 {
            let mut mp = m;
            mp[i] += h;
            let mut mm = m;
            mm[i] -= h;
            let fd = (gaussian_nll(&y, &mp, &lv) - gaussian_nll(&y, &mm, &lv)) / (2.0 * h);
            assert!((fd - gm[i]).abs() < 1e-8);
            let mut lp = lv;
            lp[i] += h;
            let mut lm = lv;
            lm[i] -= h;
            let fd = (gaussian_nll(&y, &m, &lp) - gaussian_nll(&y, &m, &lm)) / (2.0 * h);
            assert!((fd - glv[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_only_at_standard(
            mu in proptest::collection::vec(-5.0f64..5.0, 1..6),
            lv in proptest::collection::vec(-5.0f64..5.0, 1..6),
        ) {
            let n = mu.len().min(lv.len());
            let kl = kl_gauss_std_normal(&mu[..n], &lv[..n]);
            prop_assert!(kl >= 0.0);
            let at_origin = mu[..n].iter().chain(&lv[..n]).all(|&v| v == 0.0);
            if !at_origin {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn blending_identity(
            l2 in 0.0f64..10.0, nll in -5.0f64..5.0, kl in 0.0f64..10.0,
            wkl in -1.0f64..1.0, beta in 0.0f64..1.0, alpha in 0.0f64..=1.0,
        ) {
            let b = LossBreakdown::compose(l2, nll, kl, wkl, beta, alpha);
            prop_assert_eq!(b.total, (1.0 - alpha) * l2 + alpha * (nll + beta * kl) + wkl);
        }

        #[test]
        fn larger_beta_larger_loss(
            mu in proptest::collection::vec(-3.0f64..3.0, 2),
            beta in 0.0f64..0.5, bump in 0.01f64..0.5,
        ) {
            let y = [0.1, 0.2];
            let s = vec![PredictiveSample { y_hat: vec![0.0, 0.3], log_var_y: vec![0.0, -0.1] }];
            let latent = LatentDist { mu: mu.clone(), log_var: vec![0.3, -0.2] };
            let a = vib_loss(&y, &s, &latent, beta, 1.0).unwrap();
            let b = vib_loss(&y, &s, &latent, beta + bump, 1.0).unwrap();
            prop_assert!(a.latent_kl > 0.0);
            prop_assert!(b.total > a.total);
        }
    }
}
