//! Optimization loop: burn-in, dropout burn-in, early stopping on
//! validation RMSE, batch-ensemble routing and naive-ensemble orchestration.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, GateDraw, ModelConfig, Network, Normalizer, Variant};
use crate::nn::{clip_grad_norm, Adam, AdamConfig};
use crate::objectives::{backprop_objective, burnin_alpha, step_objective, LossBreakdown, LossConfig, StepDraws};
use crate::shapegen::{Dataset, Split, Volume};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const RUN_METADATA_FILE: &str = "run.json";

/// Consecutive non-finite steps tolerated before training aborts.
pub const NAN_STREAK_LIMIT: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without a new best validation RMSE before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm cap.
    pub clip_norm: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 6,
            patience: 50,
            max_epochs: 2000,
            seed: 0,
            clip_norm: 10.0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be > 0", self.clip_norm)));
        }
        self.loss.validate()?;
        if self.max_epochs <= self.loss.burnin_end {
            return Err(Error::Config(format!(
                "max epochs {} leaves no epoch after burn-in (ends at {})",
                self.max_epochs, self.loss.burnin_end
            )));
        }
        Ok(())
    }
}

/// In-memory training and validation pairs, in data units.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train_x: Vec<Volume>,
    pub train_y: Vec<Vec<f64>>,
    pub val_x: Vec<Volume>,
    pub val_y: Vec<Vec<f64>>,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let take = |split: Split| -> (Vec<Volume>, Vec<Vec<f64>>) {
            ds.indices(split)
                .into_iter()
                .map(|i| (ds.images[i].clone(), ds.points[i].flatten()))
                .unzip()
        };
        let (train_x, train_y) = take(Split::Train);
        let (val_x, val_y) = take(Split::Val);
        let d = Self {
            train_x,
            train_y,
            val_x,
            val_y,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_x.is_empty() || self.val_x.is_empty() {
            return Err(Error::Domain(format!(
                "need training and validation samples, got {} and {}",
                self.train_x.len(),
                self.val_x.len()
            )));
        }
        if self.train_x.len() != self.train_y.len() || self.val_x.len() != self.val_y.len() {
            return Err(Error::Shape("image and target counts differ".into()));
        }
        let dims = self.train_x[0].dims;
        let f = self.train_y[0].len();
        if self.train_x.iter().chain(&self.val_x).any(|v| v.dims != dims)
            || self.train_y.iter().chain(&self.val_y).any(|y| y.len() != f)
        {
            return Err(Error::Shape("inconsistent image dims or target lengths".into()));
        }
        Ok(())
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's finite steps.
    pub loss: LossBreakdown,
    pub val_rmse: f64,
    pub mean_drop_p: Option<f64>,
    /// Whether this epoch could be selected by early stopping.
    pub eligible: bool,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_rmse: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
    nan_streak: usize,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            epoch: 0,
            best_val_rmse: None,
            best_epoch: None,
            since_improvement: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            history: Vec::new(),
            nan_streak: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best-validation network and its optimizer state.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
    pub epochs_run: usize,
}

impl TrainOutcome {
    pub fn best_val_rmse(&self) -> f64 {
        self.checkpoint.best_val_rmse.unwrap_or(f64::NAN)
    }
}

/// Member of each row in a training batch.
pub fn be_batch_routing(batch: usize, k: usize) -> Vec<usize> {
    (0..batch).map(|i| i % k.max(1)).collect()
}

/// `(input, member)` pairs for inference: every input once per member.
pub fn be_inference_routing(inputs: usize, k: usize) -> Vec<(usize, usize)> {
    (0..inputs).flat_map(|i| (0..k.max(1)).map(move |m| (i, m))).collect()
}

/// Deterministic point predictions in data units: latent mean, no dropout,
/// running batch-norm statistics, averaged over batch-ensemble members.
pub fn point_predictions(net: &Network, images: &[Volume]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 16;
    let k = net.config.members();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let xs: Vec<Vec<f64>> = chunk.iter().map(|v| net.normalizer.normalize_x(&v.data)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let grid = net.input_grid(&refs)?;
        let mut acc = Array2::<f64>::zeros((chunk.len(), net.config.output_dim()));
        for m in 0..k {
            let members = vec![m; chunk.len()];
            let (mu, _, _) = net.encode_batch(&grid, &members, &GateDraw::none(), false)?;
            let (y, _, _) = net.decode_batch(&mu, &members, &GateDraw::none())?;
            acc += &y;
        }
        acc /= k as f64;
        for row in acc.rows() {
            out.push(net.normalizer.denormalize_y(row.as_slice().expect("contiguous")));
        }
    }
    Ok(out)
}

/// RMSE over all coordinates of all samples.
pub fn dataset_rmse(net: &Network, images: &[Volume], targets: &[Vec<f64>]) -> Result<f64> {
    let pred = point_predictions(net, images)?;
    let (mut ss, mut n) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(targets) {
        ss += p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        n += t.len();
    }
    Ok((ss / n as f64).sqrt())
}

fn mean_drop_p(net: &Network) -> Option<f64> {
    let ps: Vec<f64> = net.gates.iter().flatten().map(|g| g.p()).collect();
    (!ps.is_empty()).then(|| ps.iter().sum::<f64>() / ps.len() as f64)
}

fn gate_param_mask(net: &Network) -> Vec<bool> {
    net.params()
        .iter()
        .map(|(n, _)| n.starts_with("gate") && n.ends_with(".logit_p"))
        .collect()
}

/// Trains one network. The returned checkpoint is the epoch with the lowest
/// validation RMSE among epochs after the loss burn-in. The model's
/// `dataset_size` is set to the training-split size. When `out_dir` is
/// given, the checkpoint, loss CSV and run metadata are written there.
pub fn train(model_cfg: &ModelConfig, data: &TrainData, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let mut mc = model_cfg.clone();
    mc.dataset_size = data.train_x.len();
    if mc.input_dims != data.train_x[0].dims {
        return Err(Error::Config(format!(
            "model input dims {:?} differ from data {:?}",
            mc.input_dims, data.train_x[0].dims
        )));
    }
    if mc.output_dim() != data.train_y[0].len() {
        return Err(Error::Config(format!(
            "model predicts {} values, targets have {}",
            mc.output_dim(),
            data.train_y[0].len()
        )));
    }
    mc.validate()?;
    if mc.variant.is_naive_ensemble() {
        return Err(Error::Config(format!("{} is trained with train_naive_ensemble", mc.variant)));
    }
    let started = Instant::now();
    let mut state = TrainState::new(cfg.seed);
    let mut net = Network::new(mc, &mut state.rng)?;
    let xs: Vec<&[f64]> = data.train_x.iter().map(|v| v.data.as_slice()).collect();
    let ys: Vec<&[f64]> = data.train_y.iter().map(|y| y.as_slice()).collect();
    net.normalizer = Normalizer::fit(&xs, &ys)?;
    let tx: Vec<Vec<f64>> = data.train_x.iter().map(|v| net.normalizer.normalize_x(&v.data)).collect();
    let ty: Vec<Vec<f64>> = data.train_y.iter().map(|y| net.normalizer.normalize_y(y)).collect();
    let f = net.config.output_dim();

    let adam_cfg = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut opt = {
        let ps: Vec<&crate::nn::Param> = net.params().into_iter().map(|(_, p)| p).collect();
        Adam::new(adam_cfg, &ps)
    };
    let gate_mask = gate_param_mask(&net);
    let no_freeze = vec![false; gate_mask.len()];
    let variant = net.variant();
    let mut best: Option<(Network, Adam)> = None;
    let mut order: Vec<usize> = (0..tx.len()).collect();
    let mut stop = StopReason::MaxEpochs;

    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch;
        let alpha = burnin_alpha(epoch, &cfg.loss);
        let gates_off = cfg.loss.gates_off(epoch, variant);
        let frozen = if gates_off { &gate_mask } else { &no_freeze };
        order.shuffle(&mut state.rng);
        let mut acc = LossBreakdown::default();
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&[f64]> = batch.iter().map(|&i| tx[i].as_slice()).collect();
            let grid = net.input_grid(&refs)?;
            let y = Array2::from_shape_fn((batch.len(), f), |(r, c)| ty[batch[r]][c]);
            let draws = StepDraws::sample(&net, batch.len(), gates_off, &mut state.rng);
            let (lb, out, cache) = step_objective(&net, &grid, &y, &draws, cfg.loss.beta, alpha, true)?;
            if !lb.total.is_finite() {
                state.nan_streak += 1;
                log::warn!("epoch {epoch}: non-finite loss ({} in a row)", state.nan_streak);
                if state.nan_streak >= NAN_STREAK_LIMIT {
                    return Err(Error::Diverged(format!(
                        "loss non-finite for {NAN_STREAK_LIMIT} consecutive steps at epoch {epoch}"
                    )));
                }
                continue;
            }
            state.nan_streak = 0;
            net.zero_grad();
            backprop_objective(&mut net, &cache, &out, &y, cfg.loss.beta, alpha);
            {
                let mut ps: Vec<&mut crate::nn::Param> = net.params_mut().into_iter().map(|(_, p)| p).collect();
                clip_grad_norm(&mut ps, cfg.clip_norm);
                opt.step(&mut ps, frozen);
            }
            net.update_running_stats(&cache);
            acc.accumulate(&lb);
            steps += 1;
        }
        let loss = if steps > 0 { acc.scaled(1.0 / steps as f64) } else { acc };
        let val_rmse = dataset_rmse(&net, &data.val_x, &data.val_y)?;
        let eligible = alpha >= 1.0;
        state.history.push(EpochRecord {
            epoch,
            loss,
            val_rmse,
            mean_drop_p: mean_drop_p(&net),
            eligible,
        });
        log::debug!("epoch {epoch}: loss {:.5} val rmse {val_rmse:.5}", loss.total);
        state.epoch += 1;
        if eligible {
            if state.best_val_rmse.is_none_or(|b| val_rmse < b) {
                state.best_val_rmse = Some(val_rmse);
                state.best_epoch = Some(epoch);
                state.since_improvement = 0;
                best = Some((net.clone(), opt.clone()));
            } else {
                state.since_improvement += 1;
                if state.since_improvement >= cfg.patience {
                    stop = StopReason::Patience;
                    break;
                }
            }
        }
    }

    let (best_net, best_opt) = best.ok_or_else(|| Error::Runtime("no epoch finished after burn-in".into()))?;
    let checkpoint = Checkpoint {
        network: best_net,
        optimizer: Some(best_opt),
        epoch: state.best_epoch.unwrap_or(0),
        best_val_rmse: state.best_val_rmse,
        metadata: serde_json::json!({
            "seed": cfg.seed,
            "variant": variant.as_str(),
            "epochs_run": state.epoch,
            "stop": stop,
        }),
    };
    let outcome = TrainOutcome {
        checkpoint,
        history: state.history,
        stop,
        epochs_run: state.epoch,
    };
    if let Some(dir) = out_dir {
        write_run(dir, &outcome, cfg, started.elapsed().as_secs_f64())?;
    }
    Ok(outcome)
}

/// Writes the checkpoint, loss CSV and run metadata into `dir`.
pub fn write_run(dir: &Path, outcome: &TrainOutcome, cfg: &TrainConfig, wall_seconds: f64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.checkpoint.write(&dir.join(CHECKPOINT_FILE))?;
    write_loss_csv(&dir.join(LOSS_FILE), &outcome.history)?;
    let meta = serde_json::json!({
        "model": outcome.checkpoint.network.config,
        "train": cfg,
        "git_hash": git_hash(),
        "wall_seconds": wall_seconds,
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.checkpoint.epoch,
        "best_val_rmse": outcome.checkpoint.best_val_rmse,
        "stop": outcome.stop,
    });
    let path = dir.join(RUN_METADATA_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Runtime(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::from("epoch,total,nll,latent_kl,weight_kl,l2,burnin_alpha,val_rmse,mean_drop_p,eligible\n");
    for r in history {
        let l = &r.loss;
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{},{:e},{},{}\n",
            r.epoch,
            l.total,
            l.nll,
            l.latent_kl,
            l.weight_kl,
            l.l2,
            l.burnin_alpha,
            r.val_rmse,
            r.mean_drop_p.map(|p| format!("{p:e}")).unwrap_or_default(),
            r.eligible
        ));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Trains `k` independent single networks with seeds `seed + 0..k`, each as
/// the ensemble's member variant. Member `i` writes to `out_dir/member{i}`.
pub fn train_naive_ensemble(
    model_cfg: &ModelConfig,
    data: &TrainData,
    cfg: &TrainConfig,
    k: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<TrainOutcome>> {
    if k < 2 {
        return Err(Error::Config(format!("a naive ensemble needs K >= 2, got {k}")));
    }
    let mut mc = model_cfg.clone();
    mc.variant = model_cfg.variant.member_variant();
    (0..k)
        .map(|i| {
            let c = TrainConfig {
                seed: cfg.seed + i as u64,
                ..cfg.clone()
            };
            let dir: Option<PathBuf> = out_dir.map(|d| d.join(format!("member{i}")));
            train(&mc, data, &c, dir.as_deref()).map_err(|e| Error::Member {
                member: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Variant tag for a trained network (naive ensembles report the pooled tag).
pub fn ensemble_variant(member: Variant) -> Variant {
    match member {
        Variant::Vib => Variant::Ne,
        Variant::Cd => Variant::NeCd,
        v => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_model(variant: Variant) -> ModelConfig {
        ModelConfig {
            input_dims: [8, 8, 8],
            latent_dim: 2,
            num_points: 4,
            conv_channels: vec![3, 4],
            encoder_fc: vec![],
            decoder_fc: vec![16],
            variant,
            ensemble_size: 2,
            ..ModelConfig::default()
        }
    }

    /// Images are blurred balls whose radius and center drive the targets.
    fn synthetic(n: usize, seed: u64) -> (Vec<Volume>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let r: f64 = rng.gen_range(1.5..3.5);
                let c: f64 = rng.gen_range(3.0..5.0);
                let mut v = Volume::zeros([8, 8, 8]);
                for i in 0..8 {
                    for j in 0..8 {
                        for k in 0..8 {
                            let d = ((i as f64 - c).powi(2) + (j as f64 - 3.5).powi(2) + (k as f64 - 3.5).powi(2)).sqrt();
                            let idx = v.index(i, j, k);
                            v.data[idx] = if d < r { 1.0 } else { 0.0 };
                        }
                    }
                }
                let y = (0..12).map(|q| if q % 3 == 0 { c + r } else { r * (q as f64 / 12.0) }).collect();
                (v, y)
            })
            .unzip()
    }

    fn tiny_data(n_train: usize, n_val: usize) -> TrainData {
        let (train_x, train_y) = synthetic(n_train, 1);
        let (val_x, val_y) = synthetic(n_val, 2);
        TrainData {
            train_x,
            train_y,
            val_x,
            val_y,
        }
    }

    fn quick(max_epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 6,
            patience: 5,
            max_epochs,
            seed: 7,
            clip_norm: 10.0,
            loss: LossConfig {
                burnin_end: 3,
                dropout_burnin_end: 2,
                ..LossConfig::default()
            },
        }
    }

    #[test]
    fn defaults_and_validation() {
        let d = TrainConfig::default();
        assert_eq!(d.learning_rate, 5e-5);
        assert_eq!(d.batch_size, 6);
        assert_eq!(d.patience, 50);
        assert_eq!(d.loss.beta, 0.01);
        d.validate().unwrap();
        for bad in [
            TrainConfig { learning_rate: 0.0, ..d.clone() },
            TrainConfig { batch_size: 0, ..d.clone() },
            TrainConfig { patience: 0, ..d.clone() },
            TrainConfig { max_epochs: 30, ..d.clone() },
        ] {
            assert!(bad.validate().unwrap_err().is_config());
        }
    }

    #[test]
    fn routing_examples() {
        assert_eq!(be_batch_routing(6, 4), vec![0, 1, 2, 3, 0, 1]);
        let r = be_inference_routing(3, 4);
        assert_eq!(r.len(), 12);
        assert!((0..3).all(|i| r.iter().filter(|p| p.0 == i).count() == 4));
        assert_eq!(be_batch_routing(6, 4), be_batch_routing(6, 4));
        let net = Network::new(tiny_model(Variant::Be), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let draws = StepDraws::sample(&net, 5, false, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(draws.members, be_batch_routing(5, 2));
    }

    #[test]
    fn two_sample_overfit() {
        let (x, y) = synthetic(2, 3);
        let data = TrainData {
            train_x: x.clone(),
            train_y: y.clone(),
            val_x: x,
            val_y: y,
        };
        let model = tiny_model(Variant::Vib);
        let init = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut net = Network::new(model.clone(), &mut rng).unwrap();
            let xs: Vec<&[f64]> = data.train_x.iter().map(|v| v.data.as_slice()).collect();
            let ys: Vec<&[f64]> = data.train_y.iter().map(|v| v.as_slice()).collect();
            net.normalizer = Normalizer::fit(&xs, &ys).unwrap();
            dataset_rmse(&net, &data.train_x, &data.train_y).unwrap()
        };
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            patience: 500,
            max_epochs: 500,
            seed: 11,
            ..quick(500)
        };
        let out = train(&model, &data, &cfg, None).unwrap();
        let fin = dataset_rmse(&out.checkpoint.network, &data.train_x, &data.train_y).unwrap();
        assert!(fin < 0.05 * init, "{fin} vs initial {init}");
    }

    #[test]
    fn same_seed_same_result() {
        let data = tiny_data(8, 3);
        for v in [Variant::Vib, Variant::BeCd] {
            let a = train(&tiny_model(v), &data, &quick(6), None).unwrap();
            let b = train(&tiny_model(v), &data, &quick(6), None).unwrap();
            assert_eq!(a.best_val_rmse(), b.best_val_rmse());
            assert_eq!(a.history, b.history);
        }
    }

    #[test]
    fn best_checkpoint_is_history_minimum() {
        let data = tiny_data(8, 3);
        let out = train(&tiny_model(Variant::Cd), &data, &quick(12), None).unwrap();
        let min = out
            .history
            .iter()
            .filter(|r| r.eligible)
            .map(|r| r.val_rmse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_rmse(), min);
        let again = dataset_rmse(&out.checkpoint.network, &data.val_x, &data.val_y).unwrap();
        assert_eq!(again, min);
        let last = out.history.last().unwrap().epoch;
        assert!(out.stop == StopReason::MaxEpochs || last - out.checkpoint.epoch == 5);
    }

    #[test]
    fn drop_probabilities_frozen_during_dropout_burn_in() {
        let data = tiny_data(8, 3);
        let mut cfg = quick(6);
        cfg.loss.dropout_burnin_end = 4;
        let out = train(&tiny_model(Variant::Cd), &data, &cfg, None).unwrap();
        let p: Vec<f64> = out.history.iter().map(|r| r.mean_drop_p.unwrap()).collect();
        let p0 = tiny_model(Variant::Cd).init_drop;
        assert!(p[..4].iter().all(|&x| x.to_bits() == p[0].to_bits()));
        assert!((p[0] - p0).abs() < 1e-12);
        assert_ne!(p[4].to_bits(), p[3].to_bits());
    }

    #[test]
    fn files_written() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(6, 2);
        let out = train(&tiny_model(Variant::Vib), &data, &quick(5), Some(dir.path())).unwrap();
        let ck = Checkpoint::read(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.best_val_rmse, out.checkpoint.best_val_rmse);
        let csv = std::fs::read_to_string(dir.path().join(LOSS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), out.history.len() + 1);
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(RUN_METADATA_FILE)).unwrap()).unwrap();
        assert!(meta["git_hash"].is_string());
        assert!(meta["wall_seconds"].as_f64().unwrap() >= 0.0);
    }

    #[test]
    fn naive_ensemble_members_differ() {
        let data = tiny_data(6, 2);
        let outs = train_naive_ensemble(&tiny_model(Variant::Ne), &data, &quick(5), 2, None).unwrap();
        assert_eq!(outs.len(), 2);
        assert!(outs.iter().all(|o| o.checkpoint.network.variant() == Variant::Vib));
        let w = |o: &TrainOutcome| o.checkpoint.network.params()[0].1.value.clone();
        assert_ne!(w(&outs[0]), w(&outs[1]));
        assert!(train_naive_ensemble(&tiny_model(Variant::Ne), &data, &quick(5), 1, None).is_err());
        let mut bad = quick(5);
        bad.learning_rate = f64::NAN;
        match train_naive_ensemble(&tiny_model(Variant::Ne), &data, &bad, 2, None).unwrap_err() {
            Error::Member { member, .. } => assert_eq!(member, 0),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn divergence_guard_trips() {
        let mut data = tiny_data(6, 2);
        // a non-finite target makes every step's loss NaN
        data.train_y[0][0] = f64::NAN;
        data.train_y[1][0] = f64::NAN;
        let cfg = TrainConfig {
            batch_size: 6,
            ..quick(5)
        };
        let err = train(&tiny_model(Variant::Vib), &data, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)) || matches!(err, Error::Domain(_)), "{err}");
    }
}
