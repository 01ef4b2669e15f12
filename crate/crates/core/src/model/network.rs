use ndarray::{s, Array2, Axis};
use rand::distributions::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Variant};
use crate::bayes::{cd_regularizer, ConcreteDropout, DropSummary, FastWeights};
use crate::error::{Error, Result};
use crate::nn::{
    clamp_backward, clamp_forward, relu_backward, relu_inplace, BatchNorm3d, BnCache, Conv3d, ConvCache, Dense,
    DenseCache, Grid5, PRelu, Param,
};
use crate::shapegen::Volume;

pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussian over the latent code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDist {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentDist {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.log_var.len() {
            return Err(Error::Shape(format!("mu {} vs log_var {}", self.mu.len(), self.log_var.len())));
        }
        if self.mu.iter().chain(&self.log_var).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite latent parameters".into()));
        }
        Ok(())
    }
}

/// One decoded prediction: point coordinates and their log-variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSample {
    pub y_hat: Vec<f64>,
    pub log_var_y: Vec<f64>,
}

impl PredictiveSample {
    pub fn variance(&self) -> Vec<f64> {
        self.log_var_y.iter().map(|v| v.exp()).collect()
    }
}

/// `z = μ + exp(log σ²/2) ⊙ ε` for a given noise vector.
pub fn reparameterize_with(d: &LatentDist, eps: &[f64]) -> Vec<f64> {
    d.mu.iter()
        .zip(&d.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

pub fn reparameterize<R: Rng + ?Sized>(d: &LatentDist, rng: &mut R) -> Vec<f64> {
    let eps: Vec<f64> = (0..d.dim()).map(|_| rng.sample(StandardNormal)).collect();
    reparameterize_with(d, &eps)
}

/// Train: batch-norm batch statistics and sampled gates. Eval: running
/// statistics, gates off. Sample: running statistics with sampled gates
/// (Monte Carlo dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Sample,
}

impl Mode {
    pub fn bn_train(self) -> bool {
        self == Mode::Train
    }

    pub fn gates(self) -> bool {
        matches!(self, Mode::Train | Mode::Sample)
    }
}

/// Affine normalization of images (global scalar) and targets (per-coordinate
/// mean, global scale), fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_mean: f64,
    pub x_std: f64,
    pub y_mean: Vec<f64>,
    pub y_scale: f64,
}

impl Normalizer {
    pub fn identity(out_dim: usize) -> Self {
        Self {
            x_mean: 0.0,
            x_std: 1.0,
            y_mean: vec![0.0; out_dim],
            y_scale: 1.0,
        }
    }

    pub fn fit(images: &[&[f64]], targets: &[&[f64]]) -> Result<Self> {
        if images.is_empty() || targets.is_empty() {
            return Err(Error::Domain("normalizer needs at least one sample".into()));
        }
        let n: usize = images.iter().map(|x| x.len()).sum();
        let x_mean = images.iter().flat_map(|x| x.iter()).sum::<f64>() / n as f64;
        let x_var = images.iter().flat_map(|x| x.iter()).map(|v| (v - x_mean).powi(2)).sum::<f64>() / n as f64;
        let f = targets[0].len();
        let mut y_mean = vec![0.0; f];
        for t in targets {
            if t.len() != f {
                return Err(Error::Shape(format!("target length {} vs {f}", t.len())));
            }
            y_mean.iter_mut().zip(t.iter()).for_each(|(m, v)| *m += v);
        }
        y_mean.iter_mut().for_each(|m| *m /= targets.len() as f64);
        let ss: f64 = targets
            .iter()
            .flat_map(|t| t.iter().zip(&y_mean).map(|(v, m)| (v - m).powi(2)))
            .sum();
        let y_scale = (ss / (targets.len() * f) as f64).sqrt();
        Ok(Self {
            x_mean,
            x_std: if x_var > 0.0 { x_var.sqrt() } else { 1.0 },
            y_mean,
            y_scale: if y_scale > 0.0 { y_scale } else { 1.0 },
        })
    }

    pub fn normalize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| (v - self.x_mean) / self.x_std).collect()
    }

    pub fn normalize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.y_mean).map(|(v, m)| (v - m) / self.y_scale).collect()
    }

    pub fn denormalize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.y_mean).map(|(v, m)| m + v * self.y_scale).collect()
    }

    pub fn denormalize_log_var(&self, lv: &[f64]) -> Vec<f64> {
        let shift = 2.0 * self.y_scale.ln();
        lv.iter().map(|v| v + shift).collect()
    }
}

/// Uniform draws for every active dropout gate, one row per batch row (or a
/// single row shared by the whole batch).
#[derive(Debug, Clone, Default)]
pub struct GateDraw {
    pub u: Vec<Option<Array2<f64>>>,
}

impl GateDraw {
    pub fn none() -> Self {
        Self::default()
    }

    fn slot(&self, i: usize) -> Option<&Array2<f64>> {
        self.u.get(i).and_then(|u| u.as_ref())
    }
}

struct GateCache {
    masks: Array2<f64>,
    dmasks: Array2<f64>,
}

fn gate_masks(cd: &ConcreteDropout, u: &Array2<f64>, rows: usize) -> GateCache {
    let units = u.ncols();
    let (m, dm) = cd.masks(u.as_slice().expect("contiguous draws"));
    let m = Array2::from_shape_vec((u.nrows(), units), m).expect("mask shape");
    let dm = Array2::from_shape_vec((u.nrows(), units), dm).expect("mask shape");
    if u.nrows() == rows {
        GateCache { masks: m, dmasks: dm }
    } else {
        GateCache {
            masks: m.broadcast((rows, units)).expect("broadcast").to_owned(),
            dmasks: dm.broadcast((rows, units)).expect("broadcast").to_owned(),
        }
    }
}

fn gate_grid(x: &Grid5, g: &GateCache) -> Grid5 {
    let mut out = x.clone();
    for b in 0..x.n {
        for ch in 0..x.c {
            let m = g.masks[[b, ch]];
            out.channel_mut(b, ch).iter_mut().for_each(|v| *v *= m);
        }
    }
    out
}

/// Returns d/d(input) and accumulates d/d(logit p).
fn gate_grid_backward(input: &Grid5, g: &GateCache, d: &Grid5, cd: &mut ConcreteDropout) -> Grid5 {
    let mut d_in = d.clone();
    let mut dl = 0.0;
    for b in 0..d.n {
        for ch in 0..d.c {
            let dot: f64 = d.channel(b, ch).iter().zip(input.channel(b, ch)).map(|(a, x)| a * x).sum();
            dl += dot * g.dmasks[[b, ch]];
            let m = g.masks[[b, ch]];
            d_in.channel_mut(b, ch).iter_mut().for_each(|v| *v *= m);
        }
    }
    cd.logit_p.grad[0] += dl;
    d_in
}

fn gate_rows_backward(input: &Array2<f64>, g: &GateCache, d: &Array2<f64>, cd: &mut ConcreteDropout) -> Array2<f64> {
    cd.logit_p.grad[0] += (d * input * &g.dmasks).sum();
    d * &g.masks
}

struct ConvStep {
    gate: Option<(GateCache, Grid5)>,
    conv: ConvCache,
    bn: BnCache,
    out: Grid5,
}

struct DenseStep {
    gate: Option<(GateCache, Array2<f64>)>,
    dense: DenseCache,
    /// Pre-activation (decoder, for PReLU) or post-ReLU output (encoder).
    act: Array2<f64>,
}

pub struct EncodeCache {
    conv: Vec<ConvStep>,
    fc: Vec<DenseStep>,
    head_gate: Option<(GateCache, Array2<f64>)>,
    mu: DenseCache,
    lv: DenseCache,
    lv_inside: Vec<bool>,
    feature: (usize, [usize; 3]),
}

pub struct DecodeCache {
    layers: Vec<DenseStep>,
    lv_inside: Vec<bool>,
}

/// Batched outputs of one stochastic forward pass, in normalized units.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
    pub z: Array2<f64>,
    pub y_hat: Array2<f64>,
    pub log_var_y: Array2<f64>,
}

pub struct StepCache {
    enc: EncodeCache,
    dec: DecodeCache,
    eps: Array2<f64>,
    log_var: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    pub convs: Vec<Conv3d>,
    pub norms: Vec<BatchNorm3d>,
    pub enc_fc: Vec<Dense>,
    pub mu_head: Dense,
    pub lv_head: Dense,
    /// Hidden layers followed by the 2·3M output layer.
    pub dec: Vec<Dense>,
    pub dec_act: Vec<PRelu>,
    /// One slot per layer, gating that layer's input.
    pub gates: Vec<Option<ConcreteDropout>>,
    feature_dims: [usize; 3],
}

impl Network {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut dims = config.input_dims;
        let mut cin = 1;
        for &c in &config.conv_channels {
            let conv = Conv3d::new(cin, c, k, 2, rng);
            dims = conv.out_dims(dims);
            convs.push(conv);
            norms.push(BatchNorm3d::new(c));
            cin = c;
        }
        let mut width = cin * dims.iter().product::<usize>();
        let mut enc_fc = Vec::new();
        for &w in &config.encoder_fc {
            enc_fc.push(Dense::new(width, w, rng));
            width = w;
        }
        let l = config.latent_dim;
        let mu_head = Dense::new(width, l, rng);
        let lv_head = Dense::new(width, l, rng);
        let mut dec = Vec::new();
        let mut w_in = l;
        for &w in &config.decoder_fc {
            dec.push(Dense::new(w_in, w, rng));
            w_in = w;
        }
        dec.push(Dense::new(w_in, 2 * config.output_dim(), rng));
        let dec_act = vec![PRelu::default(); config.decoder_fc.len()];
        let normalizer = Normalizer::identity(config.output_dim());
        let mut net = Self {
            config,
            normalizer,
            convs,
            norms,
            enc_fc,
            mu_head,
            lv_head,
            dec,
            dec_act,
            gates: Vec::new(),
            feature_dims: dims,
        };
        if net.config.variant.is_batch_ensemble() {
            let kk = net.config.ensemble_size;
            for c in &mut net.convs {
                c.fast = Some(FastWeights::random_signs(kk, c.cin, c.cout, rng));
            }
            for d in net.dense_layers_mut() {
                d.fast = Some(FastWeights::random_signs(kk, d.input, d.output, rng));
            }
        }
        net.gates = net.build_gates()?;
        Ok(net)
    }

    fn build_gates(&self) -> Result<Vec<Option<ConcreteDropout>>> {
        let c = &self.config;
        let units = self.slot_units();
        let dec_start = self.decoder_slot(0);
        units
            .into_iter()
            .enumerate()
            .map(|(slot, u)| {
                if c.variant.uses_dropout() && slot != 0 && slot != dec_start {
                    ConcreteDropout::new(u, c.init_drop, c.temperature, c.length_scale, c.dataset_size).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    }

    /// Input width of each gate slot (channels for convolutions).
    fn slot_units(&self) -> Vec<usize> {
        let mut u: Vec<usize> = self.convs.iter().map(|c| c.cin).collect();
        u.extend(self.enc_fc.iter().map(|d| d.input));
        u.push(self.mu_head.input);
        u.extend(self.dec.iter().map(|d| d.input));
        u
    }

    fn head_slot(&self) -> usize {
        self.convs.len() + self.enc_fc.len()
    }

    fn decoder_slot(&self, l: usize) -> usize {
        self.head_slot() + 1 + l
    }

    fn dense_layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut v: Vec<&mut Dense> = self.enc_fc.iter_mut().collect();
        v.push(&mut self.mu_head);
        v.push(&mut self.lv_head);
        v.extend(self.dec.iter_mut());
        v
    }

    fn dense_layers(&self) -> Vec<&Dense> {
        let mut v: Vec<&Dense> = self.enc_fc.iter().collect();
        v.push(&self.mu_head);
        v.push(&self.lv_head);
        v.extend(self.dec.iter());
        v
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// (input, output) sizes of every affine layer; conv sizes are channels.
    pub fn layer_sizes(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = self.convs.iter().map(|c| (c.cin, c.cout)).collect();
        v.extend(self.dense_layers().iter().map(|d| (d.input, d.output)));
        v
    }

    /// Extra parameters a batch ensemble of `k` members adds to this
    /// architecture: `k · Σ (in + out)`.
    pub fn batch_ensemble_overhead(&self, k: usize) -> usize {
        k * self.layer_sizes().iter().map(|(i, o)| i + o).sum::<usize>()
    }

    pub fn feature_dims(&self) -> [usize; 3] {
        self.feature_dims
    }

    // ---- parameters ----

    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out: Vec<(String, &Param)> = Vec::new();
        for (i, (c, b)) in self.convs.iter().zip(&self.norms).enumerate() {
            out.push((format!("conv{i}.weight"), &c.weight));
            out.push((format!("conv{i}.bias"), &c.bias));
            if let Some(f) = &c.fast {
                out.push((format!("conv{i}.fast_r"), &f.r));
                out.push((format!("conv{i}.fast_s"), &f.s));
            }
            out.push((format!("bn{i}.gamma"), &b.gamma));
            out.push((format!("bn{i}.beta"), &b.beta));
        }
        for (name, d) in self.named_dense() {
            out.push((format!("{name}.weight"), &d.weight));
            out.push((format!("{name}.bias"), &d.bias));
            if let Some(f) = &d.fast {
                out.push((format!("{name}.fast_r"), &f.r));
                out.push((format!("{name}.fast_s"), &f.s));
            }
        }
        for (i, a) in self.dec_act.iter().enumerate() {
            out.push((format!("prelu{i}.slope"), &a.slope));
        }
        for (i, g) in self.gates.iter().enumerate() {
            if let Some(g) = g {
                out.push((format!("gate{i}.logit_p"), &g.logit_p));
            }
        }
        out
    }

    fn named_dense(&self) -> Vec<(String, &Dense)> {
        let mut v: Vec<(String, &Dense)> = self.enc_fc.iter().enumerate().map(|(i, d)| (format!("enc{i}"), d)).collect();
        v.push(("mu_head".into(), &self.mu_head));
        v.push(("lv_head".into(), &self.lv_head));
        v.extend(self.dec.iter().enumerate().map(|(i, d)| (format!("dec{i}"), d)));
        v
    }

    /// Same order and names as [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = Vec::new();
        for (i, (c, b)) in self.convs.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            out.push((format!("conv{i}.weight"), &mut c.weight));
            out.push((format!("conv{i}.bias"), &mut c.bias));
            if let Some(f) = &mut c.fast {
                out.push((format!("conv{i}.fast_r"), &mut f.r));
                out.push((format!("conv{i}.fast_s"), &mut f.s));
            }
            out.push((format!("bn{i}.gamma"), &mut b.gamma));
            out.push((format!("bn{i}.beta"), &mut b.beta));
        }
        let mut dense: Vec<(String, &mut Dense)> =
            self.enc_fc.iter_mut().enumerate().map(|(i, d)| (format!("enc{i}"), d)).collect();
        dense.push(("mu_head".into(), &mut self.mu_head));
        dense.push(("lv_head".into(), &mut self.lv_head));
        dense.extend(self.dec.iter_mut().enumerate().map(|(i, d)| (format!("dec{i}"), d)));
        for (name, d) in dense {
            out.push((format!("{name}.weight"), &mut d.weight));
            out.push((format!("{name}.bias"), &mut d.bias));
            if let Some(f) = &mut d.fast {
                out.push((format!("{name}.fast_r"), &mut f.r));
                out.push((format!("{name}.fast_s"), &mut f.s));
            }
        }
        for (i, a) in self.dec_act.iter_mut().enumerate() {
            out.push((format!("prelu{i}.slope"), &mut a.slope));
        }
        for (i, g) in self.gates.iter_mut().enumerate() {
            if let Some(g) = g {
                out.push((format!("gate{i}.logit_p"), &mut g.logit_p));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Sets every fast weight to 1, which makes each member equal to the
    /// shared network.
    pub fn set_unit_fast_weights(&mut self) {
        for (name, p) in self.params_mut() {
            if name.ends_with(".fast_r") || name.ends_with(".fast_s") {
                p.value.fill(1.0);
            }
        }
    }

    /// Copy with fast weights removed, i.e. the shared single network.
    pub fn shared_network(&self) -> Network {
        let mut n = self.clone();
        n.config.variant = if self.config.variant.uses_dropout() {
            Variant::Cd
        } else {
            Variant::Vib
        };
        for c in &mut n.convs {
            c.fast = None;
        }
        for d in n.dense_layers_mut() {
            d.fast = None;
        }
        n
    }

    // ---- dropout ----

    pub fn has_gates(&self) -> bool {
        self.gates.iter().any(|g| g.is_some())
    }

    pub fn draw_gates<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> GateDraw {
        GateDraw {
            u: self
                .gates
                .iter()
                .map(|g| {
                    g.as_ref()
                        .map(|g| Array2::from_shape_simple_fn((rows, g.units), || rng.sample(Open01)))
                })
                .collect(),
        }
    }

    pub fn drop_probabilities(&self) -> Vec<DropSummary> {
        let names = self.slot_names();
        self.gates
            .iter()
            .zip(names)
            .filter_map(|(g, layer)| g.as_ref().map(|g| DropSummary { layer, p: g.p() }))
            .collect()
    }

    fn slot_names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.convs.len()).map(|i| format!("conv{i}")).collect();
        v.extend((0..self.enc_fc.len()).map(|i| format!("enc{i}")));
        v.push("heads".into());
        v.extend((0..self.dec.len()).map(|i| format!("dec{i}")));
        v
    }

    /// Weights regularized by the gate in `slot` (the gated layer's kernel).
    fn gated_weights(&self, slot: usize) -> Vec<f64> {
        let nc = self.convs.len();
        let ne = self.enc_fc.len();
        if slot < nc {
            self.convs[slot].weight.value.clone()
        } else if slot < nc + ne {
            self.enc_fc[slot - nc].weight.value.clone()
        } else if slot == nc + ne {
            let mut w = self.mu_head.weight.value.clone();
            w.extend_from_slice(&self.lv_head.weight.value);
            w
        } else {
            self.dec[slot - nc - ne - 1].weight.value.clone()
        }
    }

    /// Sum of the dropout regularizers over all gated layers; 0 without gates.
    pub fn weight_kl(&self) -> f64 {
        self.gates
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| cd_regularizer(g, &self.gated_weights(i))))
            .sum()
    }

    pub fn accumulate_weight_kl_grad(&mut self) {
        let nc = self.convs.len();
        let ne = self.enc_fc.len();
        for slot in 0..self.gates.len() {
            if self.gates[slot].is_none() {
                continue;
            }
            let w = self.gated_weights(slot);
            let mut g = vec![0.0; w.len()];
            self.gates[slot].as_mut().expect("gate").accumulate_regularizer_grad(&w, &mut g);
            let add = |p: &mut Param, g: &[f64]| p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            if slot < nc {
                add(&mut self.convs[slot].weight, &g);
            } else if slot < nc + ne {
                add(&mut self.enc_fc[slot - nc].weight, &g);
            } else if slot == nc + ne {
                let split = self.mu_head.weight.len();
                add(&mut self.mu_head.weight, &g[..split]);
                add(&mut self.lv_head.weight, &g[split..]);
            } else {
                add(&mut self.dec[slot - nc - ne - 1].weight, &g);
            }
        }
    }

    // ---- batched passes in normalized units ----

    /// Stacks normalized images into a batch grid.
    pub fn input_grid(&self, images: &[&[f64]]) -> Result<Grid5> {
        let dims = self.config.input_dims;
        let len = dims.iter().product::<usize>();
        let mut g = Grid5::zeros(images.len(), 1, dims);
        for (b, x) in images.iter().enumerate() {
            if x.len() != len {
                return Err(Error::Shape(format!("image has {} voxels, model expects {dims:?}", x.len())));
            }
            g.sample_mut(b).copy_from_slice(x);
        }
        Ok(g)
    }

    fn check_members(&self, members: &[usize], rows: usize) -> Result<()> {
        if members.len() != rows {
            return Err(Error::Shape(format!("{} member indices for {rows} rows", members.len())));
        }
        let k = self.config.members();
        if let Some(&m) = members.iter().find(|&&m| m >= k) {
            return Err(Error::Domain(format!("member index {m} out of range (K = {k})")));
        }
        Ok(())
    }

    pub fn encode_batch(
        &self,
        x: &Grid5,
        members: &[usize],
        gates: &GateDraw,
        bn_train: bool,
    ) -> Result<(Array2<f64>, Array2<f64>, EncodeCache)> {
        if x.c != 1 || x.dims != self.config.input_dims {
            return Err(Error::Shape(format!(
                "input {:?}x{} vs model {:?}",
                x.dims, x.c, self.config.input_dims
            )));
        }
        self.check_members(members, x.n)?;
        let n = x.n;
        let mut h = x.clone();
        let mut conv_steps = Vec::with_capacity(self.convs.len());
        for (i, (conv, bn)) in self.convs.iter().zip(&self.norms).enumerate() {
            let gate = match (&self.gates[i], gates.slot(i)) {
                (Some(cd), Some(u)) => Some((gate_masks(cd, u, n), h.clone())),
                _ => None,
            };
            let input = match &gate {
                Some((g, raw)) => gate_grid(raw, g),
                None => h,
            };
            let (c_out, cc) = conv.forward(&input, members);
            let (mut b_out, bc) = bn.forward(&c_out, bn_train);
            relu_inplace(&mut b_out.data);
            conv_steps.push(ConvStep {
                gate,
                conv: cc,
                bn: bc,
                out: b_out.clone(),
            });
            h = b_out;
        }
        let feature = (h.c, h.dims);
        let mut f = Array2::from_shape_vec((n, h.sample_len()), h.data).expect("flatten");
        let nc = self.convs.len();
        let mut fc_steps = Vec::with_capacity(self.enc_fc.len());
        for (j, d) in self.enc_fc.iter().enumerate() {
            let gate = match (&self.gates[nc + j], gates.slot(nc + j)) {
                (Some(cd), Some(u)) => Some((gate_masks(cd, u, n), f.clone())),
                _ => None,
            };
            let input = match &gate {
                Some((g, raw)) => raw * &g.masks,
                None => f,
            };
            let (mut y, dc) = d.forward(&input, members);
            relu_inplace(y.as_slice_mut().expect("contiguous"));
            fc_steps.push(DenseStep {
                gate,
                dense: dc,
                act: y.clone(),
            });
            f = y;
        }
        let hs = self.head_slot();
        let head_gate = match (&self.gates[hs], gates.slot(hs)) {
            (Some(cd), Some(u)) => Some((gate_masks(cd, u, n), f.clone())),
            _ => None,
        };
        let input = match &head_gate {
            Some((g, raw)) => raw * &g.masks,
            None => f,
        };
        let (mu, mu_c) = self.mu_head.forward(&input, members);
        let (mut lv, lv_c) = self.lv_head.forward(&input, members);
        let lv_inside = clamp_forward(lv.as_slice_mut().expect("contiguous"), LOG_VAR_MIN, LOG_VAR_MAX);
        Ok((
            mu,
            lv,
            EncodeCache {
                conv: conv_steps,
                fc: fc_steps,
                head_gate,
                mu: mu_c,
                lv: lv_c,
                lv_inside,
                feature,
            },
        ))
    }

    pub fn decode_batch(
        &self,
        z: &Array2<f64>,
        members: &[usize],
        gates: &GateDraw,
    ) -> Result<(Array2<f64>, Array2<f64>, DecodeCache)> {
        if z.ncols() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent width {} vs model {}",
                z.ncols(),
                self.config.latent_dim
            )));
        }
        self.check_members(members, z.nrows())?;
        let n = z.nrows();
        let mut h = z.clone();
        let mut steps = Vec::with_capacity(self.dec.len());
        for (l, d) in self.dec.iter().enumerate() {
            let slot = self.decoder_slot(l);
            let gate = match (&self.gates[slot], gates.slot(slot)) {
                (Some(cd), Some(u)) => Some((gate_masks(cd, u, n), h.clone())),
                _ => None,
            };
            let input = match &gate {
                Some((g, raw)) => raw * &g.masks,
                None => h,
            };
            let (pre, dc) = d.forward(&input, members);
            h = match self.dec_act.get(l) {
                Some(a) => a.forward(&pre),
                None => pre.clone(),
            };
            steps.push(DenseStep { gate, dense: dc, act: pre });
        }
        let out_dim = self.config.output_dim();
        let y = h.slice(s![.., ..out_dim]).to_owned();
        let mut lv = h.slice(s![.., out_dim..]).to_owned();
        let lv_inside = clamp_forward(lv.as_slice_mut().expect("contiguous"), LOG_VAR_MIN, LOG_VAR_MAX);
        Ok((y, lv, DecodeCache { layers: steps, lv_inside }))
    }

    /// Backpropagates into the decoder and returns d/dz.
    pub fn decode_backward(&mut self, cache: &DecodeCache, d_y: &Array2<f64>, d_lv: &Array2<f64>) -> Array2<f64> {
        let mut d_lv = d_lv.clone();
        clamp_backward(&cache.lv_inside, d_lv.as_slice_mut().expect("contiguous"));
        let mut d = ndarray::concatenate(Axis(1), &[d_y.view(), d_lv.view()]).expect("concat");
        for l in (0..self.dec.len()).rev() {
            let step = &cache.layers[l];
            if l < self.dec_act.len() {
                d = self.dec_act[l].backward(&step.act, &d);
            }
            d = self.dec[l].backward(&step.dense, &d);
            if let Some((g, raw)) = &step.gate {
                let slot = self.decoder_slot(l);
                d = gate_rows_backward(raw, g, &d, self.gates[slot].as_mut().expect("gate"));
            }
        }
        d
    }

    /// Backpropagates into the encoder.
    pub fn encode_backward(&mut self, cache: &EncodeCache, d_mu: &Array2<f64>, d_lv: &Array2<f64>) {
        let mut d_lv = d_lv.clone();
        clamp_backward(&cache.lv_inside, d_lv.as_slice_mut().expect("contiguous"));
        let mut d = self.mu_head.backward(&cache.mu, d_mu) + self.lv_head.backward(&cache.lv, &d_lv);
        if let Some((g, raw)) = &cache.head_gate {
            let hs = self.head_slot();
            d = gate_rows_backward(raw, g, &d, self.gates[hs].as_mut().expect("gate"));
        }
        let nc = self.convs.len();
        for j in (0..self.enc_fc.len()).rev() {
            let step = &cache.fc[j];
            relu_backward(step.act.as_slice().expect("contiguous"), d.as_slice_mut().expect("contiguous"));
            d = self.enc_fc[j].backward(&step.dense, &d);
            if let Some((g, raw)) = &step.gate {
                d = gate_rows_backward(raw, g, &d, self.gates[nc + j].as_mut().expect("gate"));
            }
        }
        let (c, dims) = cache.feature;
        let n = d.nrows();
        let mut dg = Grid5 {
            n,
            c,
            dims,
            data: d.as_standard_layout().iter().copied().collect(),
        };
        for i in (0..nc).rev() {
            let step = &cache.conv[i];
            relu_backward(&step.out.data, &mut dg.data);
            dg = self.norms[i].backward(&step.bn, &dg);
            dg = self.convs[i].backward(&step.conv, &dg);
            if let Some((g, raw)) = &step.gate {
                dg = gate_grid_backward(raw, g, &dg, self.gates[i].as_mut().expect("gate"));
            }
        }
    }

    /// Encode, reparameterize with the given noise, decode.
    pub fn forward_step(
        &self,
        x: &Grid5,
        members: &[usize],
        gates: &GateDraw,
        eps: &Array2<f64>,
        bn_train: bool,
    ) -> Result<(StepOutput, StepCache)> {
        let (mu, log_var, enc) = self.encode_batch(x, members, gates, bn_train)?;
        if eps.dim() != mu.dim() {
            return Err(Error::Shape(format!("noise {:?} vs latent {:?}", eps.dim(), mu.dim())));
        }
        let z = &mu + &(log_var.mapv(|v| (0.5 * v).exp()) * eps);
        let (y_hat, log_var_y, dec) = self.decode_batch(&z, members, gates)?;
        Ok((
            StepOutput {
                mu,
                log_var: log_var.clone(),
                z,
                y_hat,
                log_var_y,
            },
            StepCache {
                enc,
                dec,
                eps: eps.clone(),
                log_var,
            },
        ))
    }

    /// Accumulates parameter gradients given output gradients; `d_mu` and
    /// `d_lv` carry any direct latent terms (the KL).
    pub fn backward_step(
        &mut self,
        cache: &StepCache,
        d_y: &Array2<f64>,
        d_lvy: &Array2<f64>,
        d_mu: &Array2<f64>,
        d_lv: &Array2<f64>,
    ) {
        let d_z = self.decode_backward(&cache.dec, d_y, d_lvy);
        let d_mu = d_mu + &d_z;
        let sd = cache.log_var.mapv(|v| 0.5 * (0.5 * v).exp());
        let d_lv = d_lv + &(d_z * &cache.eps * sd);
        self.encode_backward(&cache.enc, &d_mu, &d_lv);
    }

    /// Folds batch-norm statistics of a training pass into the running estimates.
    pub fn update_running_stats(&mut self, cache: &StepCache) {
        for (bn, step) in self.norms.iter_mut().zip(&cache.enc.conv) {
            bn.update_running(&step.bn);
        }
    }

    // ---- single-sample API in data units ----

    fn resolve_member(&self, member: Option<usize>) -> Result<usize> {
        match (self.config.variant.is_batch_ensemble(), member) {
            (true, Some(m)) if m < self.config.ensemble_size => Ok(m),
            (true, Some(m)) => Err(Error::Domain(format!(
                "member index {m} out of range (K = {})",
                self.config.ensemble_size
            ))),
            (true, None) => Err(Error::Domain(format!("{} requires a member index", self.config.variant))),
            (false, None) => Ok(0),
            (false, Some(_)) => Err(Error::Domain(format!(
                "{} takes no member index",
                self.config.variant
            ))),
        }
    }

    fn mode_gates<R: Rng + ?Sized>(&self, mode: Mode, rng: &mut R) -> GateDraw {
        if mode.gates() && self.has_gates() {
            self.draw_gates(1, rng)
        } else {
            GateDraw::none()
        }
    }

    /// Latent distribution for one image under a fixed gate draw.
    pub fn encode_with(&self, x: &Volume, mode: Mode, member: Option<usize>, gates: &GateDraw) -> Result<LatentDist> {
        if x.dims != self.config.input_dims {
            return Err(Error::Shape(format!("volume {:?} vs model {:?}", x.dims, self.config.input_dims)));
        }
        let m = self.resolve_member(member)?;
        let xn = self.normalizer.normalize_x(&x.data);
        let grid = self.input_grid(&[&xn])?;
        let (mu, lv, _) = self.encode_batch(&grid, &[m], gates, mode.bn_train())?;
        Ok(LatentDist {
            mu: mu.row(0).to_vec(),
            log_var: lv.row(0).to_vec(),
        })
    }

    pub fn encode<R: Rng + ?Sized>(&self, x: &Volume, mode: Mode, member: Option<usize>, rng: &mut R) -> Result<LatentDist> {
        let g = self.mode_gates(mode, rng);
        self.encode_with(x, mode, member, &g)
    }

    /// Decodes latent rows under a fixed gate draw; outputs in data units.
    pub fn decode_with(&self, z: &Array2<f64>, member: Option<usize>, gates: &GateDraw) -> Result<Vec<PredictiveSample>> {
        let m = self.resolve_member(member)?;
        let (y, lv, _) = self.decode_batch(z, &vec![m; z.nrows()], gates)?;
        Ok(y.rows()
            .into_iter()
            .zip(lv.rows())
            .map(|(y, lv)| PredictiveSample {
                y_hat: self.normalizer.denormalize_y(y.as_slice().expect("contiguous")),
                log_var_y: self.normalizer.denormalize_log_var(lv.as_slice().expect("contiguous")),
            })
            .collect())
    }

    pub fn decode<R: Rng + ?Sized>(&self, z: &[f64], mode: Mode, member: Option<usize>, rng: &mut R) -> Result<PredictiveSample> {
        let g = self.mode_gates(mode, rng);
        let z = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        Ok(self.decode_with(&z, member, &g)?.remove(0))
    }

    /// Encodes once, then decodes `n_latent` reparameterized draws under one
    /// gate draw; with `use_mean` and one sample, decodes μ directly.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Volume,
        n_latent: usize,
        use_mean: bool,
        mode: Mode,
        member: Option<usize>,
        rng: &mut R,
    ) -> Result<Vec<PredictiveSample>> {
        if n_latent == 0 {
            return Err(Error::Domain("at least one latent sample is required".into()));
        }
        let g = self.mode_gates(mode, rng);
        let d = self.encode_with(x, mode, member, &g)?;
        let l = d.dim();
        let mut z = Array2::zeros((n_latent, l));
        for mut row in z.rows_mut() {
            let v = if use_mean && n_latent == 1 {
                d.mu.clone()
            } else {
                reparameterize(&d, rng)
            };
            row.assign(&ndarray::ArrayView1::from(&v));
        }
        self.decode_with(&z, member, &g)
    }
}
