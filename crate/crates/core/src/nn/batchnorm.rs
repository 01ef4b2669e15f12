use super::grid::Grid5;
use super::param::Param;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over (batch, depth, height, width).
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

pub struct BnCache {
    xhat: Grid5,
    inv_std: Vec<f64>,
    train: bool,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    count: f64,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Training mode normalizes with batch statistics; evaluation mode with
    /// the running estimates.
    pub fn forward(&self, x: &Grid5, train: bool) -> (Grid5, BnCache) {
        let c = x.c;
        let count = (x.n * x.spatial()) as f64;
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..x.n {
                    s += x.channel(b, ch).iter().sum::<f64>();
                }
                let m = s / count;
                let mut v = 0.0;
                for b in 0..x.n {
                    v += x.channel(b, ch).iter().map(|a| (a - m) * (a - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.clone();
        let mut out = x.clone();
        for b in 0..x.n {
            for ch in 0..c {
                let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                let xh = xhat.channel_mut(b, ch);
                for v in xh.iter_mut() {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
                let o = out.channel_mut(b, ch);
                for (dst, &h) in o.iter_mut().zip(xh.iter()) {
                    *dst = g * h + bt;
                }
            }
        }
        (
            out,
            BnCache {
                xhat,
                inv_std,
                train,
                batch_mean: mean,
                batch_var: var,
                count,
            },
        )
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// estimates (unbiased variance).
    pub fn update_running(&mut self, cache: &BnCache) {
        if !cache.train {
            return;
        }
        let n = cache.count;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for ch in 0..self.running_mean.len() {
            self.running_mean[ch] =
                (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * cache.batch_mean[ch];
            self.running_var[ch] = (1.0 - BN_MOMENTUM) * self.running_var[ch]
                + BN_MOMENTUM * cache.batch_var[ch] * unbias;
        }
    }

    pub fn backward(&mut self, cache: &BnCache, d_out: &Grid5) -> Grid5 {
        let c = d_out.c;
        let count = (d_out.n * d_out.spatial()) as f64;
        let mut d_in = d_out.clone();
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for b in 0..d_out.n {
                for (g, h) in d_out.channel(b, ch).iter().zip(cache.xhat.channel(b, ch)) {
                    sum_g += g;
                    sum_gx += g * h;
                }
            }
            self.beta.grad[ch] += sum_g;
            self.gamma.grad[ch] += sum_gx;
            let gamma = self.gamma.value[ch];
            let inv = cache.inv_std[ch];
            for b in 0..d_out.n {
                let xh = cache.xhat.channel(b, ch).to_vec();
                let di = d_in.channel_mut(b, ch);
                for (d, h) in di.iter_mut().zip(&xh) {
                    *d = if cache.train {
                        gamma * inv * (*d - sum_g / count - h * sum_gx / count)
                    } else {
                        gamma * inv * *d
                    };
                }
            }
        }
        d_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalizes_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bn = BatchNorm3d::new(2);
        let mut x = Grid5::zeros(3, 2, [2, 2, 2]);
        x.data.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..5.0));
        let (y, cache) = bn.forward(&x, true);
        bn.update_running(&cache);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.channel(b, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn train_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm3d::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        let mut x = Grid5::zeros(2, 2, [2, 1, 2]);
        x.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let mut c = x.clone();
        c.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let (_, cache) = bn.forward(&x, true);
        let d = bn.backward(&cache, &c);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let f = |dx: f64| {
                let mut xp = x.clone();
                xp.data[i] += dx;
                let (y, _) = bn.forward(&xp, true);
                y.data.iter().zip(&c.data).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - d.data[i]).abs() < 1e-6, "{i}: {fd} vs {}", d.data[i]);
        }
    }
}
