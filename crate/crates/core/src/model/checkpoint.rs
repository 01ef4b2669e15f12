//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 8 bytes   magic "BVIBCKPT"
//! u32       format version
//! u64       header length H
//! H bytes   UTF-8 JSON header
//! ...       f64 tensor blobs, at the offsets (in values) listed in the header
//! ```
//!
//! The header holds the model config, normalizer, epoch counter and the
//! tensor table. Tensors are the trainable parameters (including fast
//! weights and drop-probability logits), batch-norm running statistics and,
//! when present, the Adam moments (`adam.m.<name>`, `adam.v.<name>`).

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::{Network, Normalizer};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BVIBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
    pub best_val_rmse: Option<f64>,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    cfg: AdamConfig,
    steps: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    normalizer: Normalizer,
    epoch: usize,
    best_val_rmse: Option<f64>,
    optimizer: Option<OptimizerHeader>,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Self {
            network,
            optimizer: None,
            epoch: 0,
            best_val_rmse: None,
            metadata: serde_json::Value::Null,
        }
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let net = &self.network;
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = net
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.shape.clone(), p.value.clone()))
            .collect();
        for (i, bn) in net.norms.iter().enumerate() {
            let c = bn.running_mean.len();
            out.push((format!("bn{i}.running_mean"), vec![c], bn.running_mean.clone()));
            out.push((format!("bn{i}.running_var"), vec![c], bn.running_var.clone()));
        }
        if let Some(opt) = &self.optimizer {
            let names: Vec<(String, Vec<usize>)> =
                net.params().into_iter().map(|(n, p)| (n, p.shape.clone())).collect();
            for (i, (name, shape)) in names.iter().enumerate() {
                out.push((format!("adam.m.{name}"), shape.clone(), opt.m[i].clone()));
                out.push((format!("adam.v.{name}"), shape.clone(), opt.v[i].clone()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, shape, v) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: v.len(),
            });
            offset += v.len();
        }
        let header = Header {
            config: self.network.config.clone(),
            normalizer: self.network.normalizer.clone(),
            epoch: self.epoch,
            best_val_rmse: self.best_val_rmse,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                cfg: o.cfg,
                steps: o.steps.clone(),
            }),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Runtime(format!("checkpoint header: {e}")))?;
        let mut buf = Vec::with_capacity(20 + json.len() + offset * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, _, v) in &tensors {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(&format!("header: {e}")))?;
        let blob = &bytes[body..];
        let mut table: HashMap<&str, (&TensorEntry, Vec<f64>)> = HashMap::new();
        for t in &header.tensors {
            let start = t.offset * 8;
            let end = start + t.len * 8;
            if end > blob.len() || t.shape.iter().product::<usize>() != t.len {
                return Err(bad(&format!("tensor {} out of bounds or mis-shaped", t.name)));
            }
            let v = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            table.insert(t.name.as_str(), (t, v));
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let (t, v) = table.remove(name).ok_or_else(|| bad(&format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(bad(&format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
            }
            Ok(v)
        };
        let mut network = Network::new(header.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        network.normalizer = header.normalizer;
        let names: Vec<(String, Vec<usize>)> =
            network.params().into_iter().map(|(n, p)| (n, p.shape.clone())).collect();
        for ((name, p), (_, shape)) in network.params_mut().into_iter().zip(&names) {
            p.value = take(&name, shape)?;
        }
        for (i, bn) in network.norms.iter_mut().enumerate() {
            let c = bn.running_mean.len();
            bn.running_mean = take(&format!("bn{i}.running_mean"), &[c])?;
            bn.running_var = take(&format!("bn{i}.running_var"), &[c])?;
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                if o.steps.len() != names.len() {
                    return Err(bad("optimizer state does not match parameter list"));
                }
                let mut m = Vec::with_capacity(names.len());
                let mut v = Vec::with_capacity(names.len());
                for (name, shape) in &names {
                    m.push(take(&format!("adam.m.{name}"), shape)?);
                    v.push(take(&format!("adam.v.{name}"), shape)?);
                }
                Some(Adam {
                    cfg: o.cfg,
                    m,
                    v,
                    steps: o.steps,
                })
            }
            None => None,
        };
        Ok(Self {
            network,
            optimizer,
            epoch: header.epoch,
            best_val_rmse: header.best_val_rmse,
            metadata: header.metadata,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, Variant};
    use crate::shapegen::Volume;
    use rand::Rng;

    fn config(variant: Variant) -> ModelConfig {
        ModelConfig {
            input_dims: [4, 4, 4],
            latent_dim: 2,
            num_points: 3,
            conv_channels: vec![2],
            encoder_fc: vec![4],
            decoder_fc: vec![5],
            variant,
            ensemble_size: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_preserves_predictions_and_optimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in [Variant::Vib, Variant::BeCd] {
            let mut net = Network::new(config(v), &mut rng).unwrap();
            net.norms[0].running_mean = vec![0.3, -0.2];
            net.normalizer.y_scale = 2.5;
            // Arbitrary doubles must survive the JSON header bit for bit.
            net.normalizer.x_mean = rng.gen_range(0.0..1.0);
            net.normalizer.y_mean.iter_mut().for_each(|v| *v = rng.gen_range(-30.0..30.0));
            net.gates.iter_mut().flatten().for_each(|g| g.logit_p.value[0] = -1.7);
            let params: Vec<&crate::nn::Param> = net.params().into_iter().map(|(_, p)| p).collect();
            let mut opt = Adam::new(AdamConfig::default(), &params);
            opt.m[0][0] = 0.125;
            opt.steps[1] = 7;
            let ck = Checkpoint {
                network: net.clone(),
                optimizer: Some(opt.clone()),
                epoch: 12,
                best_val_rmse: Some(0.5),
                metadata: serde_json::json!({"seed": 3}),
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem")).unwrap();
            assert_eq!(back.epoch, 12);
            assert_eq!(back.optimizer.unwrap(), opt);
            assert_eq!(back.network.normalizer, net.normalizer);
            let a: Vec<_> = net.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
            let b: Vec<_> = back.network.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
            assert_eq!(a, b);
            let x = Volume::from_data([4, 4, 4], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            let member = v.is_batch_ensemble().then_some(1);
            let p1 = net.forward(&x, 1, true, Mode::Eval, member, &mut rng).unwrap();
            let p2 = back.network.forward(&x, 1, true, Mode::Eval, member, &mut rng).unwrap();
            assert_eq!(p1, p2);
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::new(config(Variant::Vib), &mut rng).unwrap();
        let bytes = Checkpoint::new(net).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], Path::new("x")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong, Path::new("x")).is_err());
        let mut ver = bytes;
        ver[8] = 9;
        assert!(Checkpoint::from_bytes(&ver, Path::new("x")).is_err());
    }
}
