//! Weight-uncertainty mechanisms: concrete dropout with learnable drop
//! probabilities, and batch-ensemble rank-1 fast weights.
//!
//! Concrete dropout relaxes the Bernoulli drop mask to
//!
//! `z̃ = sigmoid((log p − log(1−p) + log u − log(1−u)) / t)`, u ~ U(0, 1)
//!
//! and scales a layer's input by `(1 − z̃)/(1 − p)`. Its weight-space KL is
//! realized per layer as
//!
//! `ℓ²(1−p)/(2N)·‖W‖² − (K/N)·H(p)`
//!
//! with K the layer's input-unit count and H the Bernoulli entropy.
//!
//! A batch-ensemble member k uses `W_k = W ⊙ (r_k s_kᵀ)`, evaluated without
//! materializing W_k as `r_k ⊙ (W (s_k ⊙ x))`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;

/// Default relaxation temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Default length scale of the weight prior.
pub const DEFAULT_LENGTH_SCALE: f64 = 1e-3;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Bernoulli entropy H(p) = −p log p − (1−p) log(1−p).
pub fn bernoulli_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Relaxed drop gate in (0, 1); values near 1 mean "dropped".
pub fn concrete_gate(p: f64, u: f64, t: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("drop probability {p} outside (0, 1)")));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("uniform draw {u} outside (0, 1)")));
    }
    if !(t > 0.0) {
        return Err(Error::Domain(format!("temperature {t} must be positive")));
    }
    Ok(gate_from_logit(logit(p), u, t))
}

#[inline]
fn gate_from_logit(logit_p: f64, u: f64, t: f64) -> f64 {
    sigmoid((logit_p + u.ln() - (1.0 - u).ln()) / t)
}

/// Learnable drop probability of one layer, p = sigmoid(logit_p).
#[derive(Debug, Clone)]
pub struct ConcreteDropout {
    pub logit_p: Param,
    pub temperature: f64,
    pub length_scale: f64,
    pub dataset_size: usize,
    /// Number of independently gated input units (channels for convolutions).
    pub units: usize,
}

impl ConcreteDropout {
    pub fn new(units: usize, p0: f64, temperature: f64, length_scale: f64, dataset_size: usize) -> Result<Self> {
        if !(p0 > 0.0 && p0 < 1.0) {
            return Err(Error::Config(format!("initial drop probability {p0} outside (0, 1)")));
        }
        if !(temperature > 0.0 && temperature <= 1.0) {
            return Err(Error::Config(format!("temperature {temperature} outside (0, 1]")));
        }
        if !(length_scale > 0.0) {
            return Err(Error::Config(format!("length scale {length_scale} must be positive")));
        }
        if dataset_size == 0 {
            return Err(Error::Config("dataset size must be at least 1".into()));
        }
        Ok(Self {
            logit_p: Param::filled(&[1], logit(p0)),
            temperature,
            length_scale,
            dataset_size,
            units,
        })
    }

    pub fn p(&self) -> f64 {
        sigmoid(self.logit_p.value[0])
    }

    /// Multiplicative input masks `(1 − z̃)/(1 − p)` for the given uniform
    /// draws, with their derivatives with respect to `logit_p`.
    pub fn masks(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let lp = self.logit_p.value[0];
        let p = sigmoid(lp);
        let t = self.temperature;
        let keep = 1.0 - p;
        u.iter()
            .map(|&u| {
                let z = gate_from_logit(lp, u, t);
                let m = (1.0 - z) / keep;
                // d/dθ of (1−z)/(1−p) with dz/dθ = z(1−z)/t and d(1−p)/dθ = −p(1−p)
                let dm = -z * (1.0 - z) / (t * keep) + (1.0 - z) * p / keep;
                (m, dm)
            })
            .unzip()
    }

    /// The layer's KL contribution given its weights.
    pub fn regularizer(&self, weights: &[f64]) -> f64 {
        cd_regularizer(self, weights)
    }

    /// Adds dR/dW into `weight_grad` and dR/dlogit_p into the logit gradient.
    pub fn accumulate_regularizer_grad(&mut self, weights: &[f64], weight_grad: &mut [f64]) {
        let p = self.p();
        let n = self.dataset_size as f64;
        let l2 = self.length_scale * self.length_scale;
        let coef = l2 * (1.0 - p) / n;
        for (g, w) in weight_grad.iter_mut().zip(weights) {
            *g += coef * w;
        }
        let sq: f64 = weights.iter().map(|w| w * w).sum();
        // dH/dp = log((1−p)/p)
        let d_p = -l2 * sq / (2.0 * n) - self.units as f64 / n * ((1.0 - p) / p).ln();
        self.logit_p.grad[0] += d_p * p * (1.0 - p);
    }
}

/// Per-layer KL term `ℓ²(1−p)/(2N)·‖W‖² − (K/N)·H(p)`.
pub fn cd_regularizer(cd: &ConcreteDropout, weights: &[f64]) -> f64 {
    let p = cd.p();
    let n = cd.dataset_size as f64;
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    cd.length_scale * cd.length_scale * (1.0 - p) / (2.0 * n) * sq
        - cd.units as f64 / n * bernoulli_entropy(p)
}

/// Affine layer `x ⊙ (1 − z̃)/(1 − p) · Wᵀ + b` with one fresh gate per row
/// and input unit.
pub fn cd_layer_forward<R: Rng + ?Sized>(
    x: &Array2<f64>,
    w: ArrayView2<'_, f64>,
    b: ArrayView1<'_, f64>,
    cd: &ConcreteDropout,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if x.ncols() != w.ncols() || w.nrows() != b.len() {
        return Err(Error::Shape(format!(
            "input {:?}, weight {:?}, bias {}",
            x.dim(),
            w.dim(),
            b.len()
        )));
    }
    let u: Vec<f64> = (0..x.len()).map(|_| rng.sample(Open01)).collect();
    let (masks, _) = cd.masks(&u);
    let mut xm = x.clone();
    xm.iter_mut().zip(&masks).for_each(|(v, m)| *v *= m);
    Ok(xm.dot(&w.t()) + b)
}

/// Rank-1 fast weights of one layer for all ensemble members, stored
/// member-major: `r[k*out + o]`, `s[k*in + i]`.
#[derive(Debug, Clone)]
pub struct FastWeights {
    pub members: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub r: Param,
    pub s: Param,
}

impl FastWeights {
    /// Random ±1 initialization.
    pub fn random_signs<R: Rng + ?Sized>(members: usize, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            members,
            in_dim,
            out_dim,
            r: Param::random_signs(&[members, out_dim], rng),
            s: Param::random_signs(&[members, in_dim], rng),
        }
    }

    pub fn ones(members: usize, in_dim: usize, out_dim: usize) -> Self {
        Self {
            members,
            in_dim,
            out_dim,
            r: Param::filled(&[members, out_dim], 1.0),
            s: Param::filled(&[members, in_dim], 1.0),
        }
    }

    #[inline]
    pub fn r_row(&self, k: usize) -> &[f64] {
        &self.r.value[k * self.out_dim..(k + 1) * self.out_dim]
    }

    #[inline]
    pub fn s_row(&self, k: usize) -> &[f64] {
        &self.s.value[k * self.in_dim..(k + 1) * self.in_dim]
    }
}

/// A dense batch-ensemble layer in plain arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEnsembleState {
    /// out × in
    pub shared: Array2<f64>,
    pub bias: Array1<f64>,
    /// K × out
    pub r: Array2<f64>,
    /// K × in
    pub s: Array2<f64>,
}

impl BatchEnsembleState {
    pub fn members(&self) -> usize {
        self.r.nrows()
    }
}

/// `W_k = W ⊙ (r sᵀ)`.
pub fn be_materialize(
    shared: ArrayView2<'_, f64>,
    r: ArrayView1<'_, f64>,
    s: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    if shared.nrows() != r.len() || shared.ncols() != s.len() {
        return Err(Error::Shape(format!(
            "shared weight {:?} vs r {} / s {}",
            shared.dim(),
            r.len(),
            s.len()
        )));
    }
    let mut w = shared.to_owned();
    for ((o, i), v) in w.indexed_iter_mut() {
        *v *= r[o] * s[i];
    }
    Ok(w)
}

/// Row i is mapped by member `members[i]`, without materializing W_k.
pub fn be_layer_forward(
    x: &Array2<f64>,
    members: &[usize],
    state: &BatchEnsembleState,
) -> Result<Array2<f64>> {
    if members.len() != x.nrows() {
        return Err(Error::Shape(format!(
            "{} member indices for {} rows",
            members.len(),
            x.nrows()
        )));
    }
    if x.ncols() != state.shared.ncols() {
        return Err(Error::Shape(format!(
            "input width {} vs layer input {}",
            x.ncols(),
            state.shared.ncols()
        )));
    }
    let k = state.members();
    if let Some(&bad) = members.iter().find(|&&m| m >= k) {
        return Err(Error::Domain(format!("member index {bad} out of range (K = {k})")));
    }
    let mut xs = x.clone();
    for (i, mut row) in xs.rows_mut().into_iter().enumerate() {
        row *= &state.s.row(members[i]);
    }
    let mut y = xs.dot(&state.shared.t());
    for (i, mut row) in y.rows_mut().into_iter().enumerate() {
        row *= &state.r.row(members[i]);
        row += &state.bias;
    }
    Ok(y)
}

/// Xavier-initialized shared weights with ±1 fast weights.
pub fn be_init<R: Rng + ?Sized>(
    members: usize,
    in_dim: usize,
    out_dim: usize,
    rng: &mut R,
) -> Result<BatchEnsembleState> {
    if members < 2 {
        return Err(Error::Config(format!("batch ensemble needs K >= 2, got {members}")));
    }
    let w = Param::xavier(&[out_dim, in_dim], in_dim, out_dim, rng);
    let fast = FastWeights::random_signs(members, in_dim, out_dim, rng);
    Ok(BatchEnsembleState {
        shared: Array2::from_shape_vec((out_dim, in_dim), w.value).expect("shape"),
        bias: Array1::zeros(out_dim),
        r: Array2::from_shape_vec((members, out_dim), fast.r.value).expect("shape"),
        s: Array2::from_shape_vec((members, in_dim), fast.s.value).expect("shape"),
    })
}

/// Layer-wise learned drop probabilities, for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropSummary {
    pub layer: String,
    pub p: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cd(units: usize, p: f64) -> ConcreteDropout {
        ConcreteDropout::new(units, p, 0.1, 1e-3, 100).unwrap()
    }

    #[test]
    fn gate_examples() {
        assert_eq!(concrete_gate(0.5, 0.5, 0.37).unwrap(), 0.5);
        assert!((concrete_gate(0.8, 0.5, 0.01).unwrap() - 1.0).abs() < 1e-6);
        assert!(concrete_gate(0.0, 0.5, 0.1).is_err());
        assert!(concrete_gate(1.0, 0.5, 0.1).is_err());
        assert!(concrete_gate(0.5, 0.0, 0.1).is_err());
        assert!(concrete_gate(0.5, 1.0, 0.1).is_err());
    }

    #[test]
    fn gate_mean_approaches_p_at_low_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in [0.1, 0.3, 0.5, 0.8] {
            let n = 100_000;
            let mean: f64 = (0..n)
                .map(|_| concrete_gate(p, rng.sample(Open01), 0.01).unwrap())
                .sum::<f64>()
                / n as f64;
            assert!((mean - p).abs() < 0.01, "p {p}: mean {mean}");
        }
    }

    #[test]
    fn gate_monotone_in_p() {
        for &u in &[0.05, 0.3, 0.5, 0.77, 0.99] {
            let mut prev = 0.0;
            for i in 1..100 {
                let z = concrete_gate(i as f64 / 100.0, u, 0.1).unwrap();
                assert!(z >= prev);
                prev = z;
            }
        }
    }

    #[test]
    fn regularizer_examples() {
        let c = cd(8, 0.5);
        let r = cd_regularizer(&c, &[0.0; 12]);
        assert!((r + 8.0 / 100.0 * 2f64.ln()).abs() < 1e-15);

        let small = cd(8, 1e-15);
        let w = [0.5, -1.5, 2.0];
        let r = cd_regularizer(&small, &w);
        let weight_only = 1e-6 * 6.5 / 200.0;
        assert!((r - weight_only).abs() < 1e-12, "{r} vs {weight_only}");
    }

    #[test]
    fn regularizer_matches_scalar_transcription() {
        let c = cd(3, 0.23);
        let w = [0.3, -0.1, 0.7, 1.1, -0.4, 0.05];
        let p: f64 = 0.23;
        let sq: f64 = w.iter().map(|v| v * v).sum();
        let want = 1e-6 * (1.0 - p) / 200.0 * sq - 3.0 / 100.0 * (-p * p.ln() - (1.0 - p) * (1.0 - p).ln());
        assert!((cd_regularizer(&c, &w) - want).abs() < 1e-14);
    }

    #[test]
    fn entropy_term_peaks_at_half() {
        let best = (1..100)
            .map(|i| i as f64 / 100.0)
            .max_by(|a, b| bernoulli_entropy(*a).total_cmp(&bernoulli_entropy(*b)))
            .unwrap();
        assert_eq!(best, 0.5);
    }

    #[test]
    fn regularizer_gradient_matches_finite_difference() {
        let w = vec![0.3, -0.1, 0.7, 1.1];
        let mut c = ConcreteDropout::new(5, 0.2, 0.1, 0.7, 10).unwrap();
        let mut gw = vec![0.0; 4];
        c.accumulate_regularizer_grad(&w, &mut gw);
        let h = 1e-6;
        let f = |lp: f64, w: &[f64]| {
            let mut q = c.clone();
            q.logit_p.value[0] = lp;
            cd_regularizer(&q, w)
        };
        let lp = c.logit_p.value[0];
        let fd = (f(lp + h, &w) - f(lp - h, &w)) / (2.0 * h);
        let an = c.logit_p.grad[0];
        assert!(((fd - an) / an).abs() < 1e-5, "{fd} vs {an}");
        for i in 0..4 {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (f(lp, &wp) - f(lp, &wm)) / (2.0 * h);
            assert!(((fd - gw[i]) / gw[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn mask_derivative_matches_finite_difference() {
        let c = cd(1, 0.3);
        let u = [0.2, 0.5, 0.9];
        let (_, dm) = c.masks(&u);
        let h = 1e-6;
        let at = |lp: f64| {
            let mut q = c.clone();
            q.logit_p.value[0] = lp;
            q.masks(&u).0
        };
        let lp = c.logit_p.value[0];
        let (up, dn) = (at(lp + h), at(lp - h));
        for k in 0..3 {
            let fd = (up[k] - dn[k]) / (2.0 * h);
            assert!((fd - dm[k]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn cd_layer_limits_and_expectation() {
        let w = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let b = array![0.1, -0.2];
        let x = array![[1.0, 2.0, -1.0]];
        let plain = x.dot(&w.t()) + &b;
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let tiny = ConcreteDropout::new(3, 1e-9, 0.1, 1e-3, 10).unwrap();
        let y = cd_layer_forward(&x, w.view(), b.view(), &tiny, &mut rng).unwrap();
        for (a, e) in y.iter().zip(plain.iter()) {
            assert!((a - e).abs() < 1e-6);
        }

        let c = ConcreteDropout::new(3, 0.3, 0.1, 1e-3, 10).unwrap();
        let n = 10_000;
        let mut acc = Array2::<f64>::zeros((1, 2));
        for _ in 0..n {
            acc += &cd_layer_forward(&x, w.view(), b.view(), &c, &mut rng).unwrap();
        }
        acc /= n as f64;
        // per-draw spread is O(|w||x|) ≈ 3; 1e4 draws put the MC error near 0.03
        for (a, e) in acc.iter().zip(plain.iter()) {
            assert!((a - e).abs() < 0.15, "{a} vs {e}");
        }

        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            cd_layer_forward(&x, w.view(), b.view(), &c, &mut r1).unwrap(),
            cd_layer_forward(&x, w.view(), b.view(), &c, &mut r2).unwrap()
        );
    }

    #[test]
    fn materialize_examples() {
        let w = array![[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0], [9.0, 10.0, 11.0, 12.0]];
        let ones3 = Array1::ones(3);
        let ones4 = Array1::ones(4);
        assert_eq!(be_materialize(w.view(), ones3.view(), ones4.view()).unwrap(), w);
        let neg = -Array1::ones(3);
        assert_eq!(be_materialize(w.view(), neg.view(), ones4.view()).unwrap(), -&w);
        let r = array![0.5, -2.0, 3.0];
        let s = array![1.0, -1.0, 0.25, 2.0];
        let m = be_materialize(w.view(), r.view(), s.view()).unwrap();
        for o in 0..3 {
            for i in 0..4 {
                assert_eq!(m[[o, i]], w[[o, i]] * r[o] * s[i]);
            }
        }
        assert!(be_materialize(w.view(), s.view(), r.view()).is_err());
    }

    #[test]
    fn be_forward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = be_init(3, 4, 2, &mut rng).unwrap();
        let x = array![[1.0, 0.5, -1.0, 2.0], [0.0, 1.0, 1.0, 1.0]];
        assert!(be_layer_forward(&x, &[0, 3], &st).is_err());
        assert!(be_layer_forward(&x, &[0], &st).is_err());

        st.r.fill(1.0);
        st.s.fill(1.0);
        let y = be_layer_forward(&x, &[0, 2], &st).unwrap();
        let plain = x.dot(&st.shared.t()) + &st.bias;
        assert_eq!(y, plain);

        let single = BatchEnsembleState {
            shared: st.shared.clone(),
            bias: array![0.3, -0.3],
            r: Array2::ones((1, 2)),
            s: Array2::ones((1, 4)),
        };
        let y = be_layer_forward(&x, &[0, 0], &single).unwrap();
        assert_eq!(y, x.dot(&single.shared.t()) + &single.bias);
    }

    #[test]
    fn be_init_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let st = be_init(4, 1250, 1250, &mut rng).unwrap();
        let all: Vec<f64> = st.r.iter().chain(st.s.iter()).copied().collect();
        assert!(all.iter().all(|&v| v == 1.0 || v == -1.0));
        let n = all.len() as f64;
        let frac = all.iter().filter(|&&v| v == 1.0).count() as f64 / n;
        assert!((frac - 0.5).abs() < 3.0 / n.sqrt());
        let other = be_init(4, 1250, 1250, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_ne!(st.r, other.r);
        assert!(be_init(1, 3, 3, &mut rng).is_err());
    }
}
