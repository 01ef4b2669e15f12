use serde::{Deserialize, Serialize};

use super::param::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with per-parameter step counters, so frozen parameters keep
/// their moments untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[&Param]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            steps: vec![0; params.len()],
        }
    }

    /// Updates every parameter whose `frozen` flag is false.
    pub fn step(&mut self, params: &mut [&mut Param], frozen: &[bool]) {
        let c = self.cfg;
        for (i, p) in params.iter_mut().enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.value.len() {
                let g = p.grad[k] + c.weight_decay * p.value[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p.value[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = max_norm / total;
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::from_vec(&[2], vec![1.0, -1.0]);
        p.grad = vec![0.5, -3.0];
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &[&p],
        );
        opt.step(&mut [&mut p], &[false]);
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut p = Param::from_vec(&[1], vec![1.0]);
        p.grad = vec![1.0];
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        opt.step(&mut [&mut p], &[true]);
        assert_eq!(p.value[0], 1.0);
        assert_eq!(opt.steps[0], 0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut p = Param::from_vec(&[2], vec![0.0, 0.0]);
        p.grad = vec![30.0, 40.0];
        let n = clip_grad_norm(&mut [&mut p], 10.0);
        assert_eq!(n, 50.0);
        assert!((p.grad[0] - 6.0).abs() < 1e-12 && (p.grad[1] - 8.0).abs() < 1e-12);
    }
}
