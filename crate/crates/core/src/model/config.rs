use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight treatment of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "VIB")]
    Vib,
    #[serde(rename = "CD")]
    Cd,
    #[serde(rename = "BE")]
    Be,
    #[serde(rename = "NE")]
    Ne,
    #[serde(rename = "NE-CD")]
    NeCd,
    #[serde(rename = "BE-CD")]
    BeCd,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Vib,
        Variant::Cd,
        Variant::Be,
        Variant::Ne,
        Variant::NeCd,
        Variant::BeCd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vib => "VIB",
            Variant::Cd => "CD",
            Variant::Be => "BE",
            Variant::Ne => "NE",
            Variant::NeCd => "NE-CD",
            Variant::BeCd => "BE-CD",
        }
    }

    pub fn uses_dropout(self) -> bool {
        matches!(self, Variant::Cd | Variant::NeCd | Variant::BeCd)
    }

    /// Rank-1 fast weights inside one network.
    pub fn is_batch_ensemble(self) -> bool {
        matches!(self, Variant::Be | Variant::BeCd)
    }

    /// Independently trained networks pooled at prediction time.
    pub fn is_naive_ensemble(self) -> bool {
        matches!(self, Variant::Ne | Variant::NeCd)
    }

    pub fn is_ensemble(self) -> bool {
        self.is_batch_ensemble() || self.is_naive_ensemble()
    }

    /// Anything with a weight posterior, i.e. not the plain VIB baseline.
    pub fn is_bayesian(self) -> bool {
        self != Variant::Vib
    }

    /// The single-network variant each naive-ensemble member is trained as.
    pub fn member_variant(self) -> Variant {
        match self {
            Variant::Ne => Variant::Vib,
            Variant::NeCd => Variant::Cd,
            v => v,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == up)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (expected one of VIB, CD, BE, NE, NE-CD, BE-CD)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dims: [usize; 3],
    pub latent_dim: usize,
    pub num_points: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    /// Hidden widths between the flattened conv features and the latent heads.
    pub encoder_fc: Vec<usize>,
    /// Hidden widths of the decoder; the output layer (2·3M) is implicit.
    pub decoder_fc: Vec<usize>,
    pub variant: Variant,
    pub ensemble_size: usize,
    pub temperature: f64,
    pub init_drop: f64,
    pub length_scale: f64,
    /// Training-set size used to scale the dropout regularizer.
    pub dataset_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dims: [32, 32, 32],
            latent_dim: 32,
            num_points: 64,
            conv_channels: vec![12, 24, 48, 96, 192],
            kernel: 3,
            encoder_fc: Vec::new(),
            decoder_fc: vec![256, 512],
            variant: Variant::Vib,
            ensemble_size: 4,
            temperature: 0.1,
            init_drop: 0.1,
            length_scale: 1e-3,
            dataset_size: 300,
        }
    }
}

impl ModelConfig {
    pub fn output_dim(&self) -> usize {
        3 * self.num_points
    }

    /// Members inside one network: K for batch ensembles, 1 otherwise.
    pub fn members(&self) -> usize {
        if self.variant.is_batch_ensemble() {
            self.ensemble_size
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims.contains(&0) {
            return Err(Error::Config(format!("input dims {:?} must be positive", self.input_dims)));
        }
        if self.num_points == 0 {
            return Err(Error::Config("point count must be positive".into()));
        }
        if self.latent_dim == 0 || 4 * self.latent_dim > 3 * self.num_points {
            return Err(Error::Config(format!(
                "latent dim {} must be in [1, 3M/4 = {}]",
                self.latent_dim,
                3 * self.num_points / 4
            )));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config(format!("conv channels {:?} must be non-empty and positive", self.conv_channels)));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.encoder_fc.contains(&0) || self.decoder_fc.contains(&0) {
            return Err(Error::Config("fully connected widths must be positive".into()));
        }
        if self.variant.is_ensemble() && self.ensemble_size < 2 {
            return Err(Error::Config(format!(
                "{} needs ensemble size >= 2, got {}",
                self.variant, self.ensemble_size
            )));
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::Config(format!("temperature {} outside (0, 1]", self.temperature)));
        }
        if !(self.init_drop > 0.0 && self.init_drop <= 0.5) {
            return Err(Error::Config(format!("initial drop probability {} outside (0, 0.5]", self.init_drop)));
        }
        if !(self.length_scale > 0.0) {
            return Err(Error::Config(format!("length scale {} must be positive", self.length_scale)));
        }
        if self.dataset_size == 0 {
            return Err(Error::Config("dataset size must be positive".into()));
        }
        Ok(())
    }
}
