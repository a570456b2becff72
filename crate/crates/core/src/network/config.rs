use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NetworkError;
use crate::quantizer::{ScaleSchedule, DEFAULT_BETA, DEFAULT_CODEBOOK_SIZE};
use crate::tensor::AdamConfig;

/// Architecture hyperparameters. The parameter layout is a pure function of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the cubic input volume.
    pub input_side: usize,
    /// Positional-encoding frequencies; the input carries `2 * pe_levels + 1` channels.
    pub pe_levels: usize,
    pub latent_channels: usize,
    /// Feature widths of the stride-2 stages of the first encoder, shallowest first.
    pub widths: Vec<usize>,
    /// Perception scales per level, finest level first.
    pub schedules: Vec<ScaleSchedule>,
    pub codebook_size: usize,
    pub groups: usize,
    /// Residual blocks per encoder/decoder stage.
    pub res_blocks: usize,
    pub conditional: bool,
    pub beta: f64,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    /// 32^3 inputs, latent sides 8 and 4.
    pub fn desk() -> Self {
        Self {
            input_side: 32,
            pe_levels: 10,
            latent_channels: 32,
            widths: vec![16, 32],
            schedules: vec![
                ScaleSchedule::new(vec![1, 4, 8]).expect("valid"),
                ScaleSchedule::new(vec![1, 2, 4]).expect("valid"),
            ],
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            groups: 8,
            res_blocks: 1,
            conditional: true,
            beta: DEFAULT_BETA,
            init_seed: 0,
        }
    }

    /// 64^3 inputs, latent sides 16 and 8.
    pub fn full() -> Self {
        Self {
            input_side: 64,
            latent_channels: 64,
            widths: vec![32, 64],
            schedules: vec![
                ScaleSchedule::new(vec![1, 4, 6, 8, 10, 12, 14, 16]).expect("valid"),
                ScaleSchedule::new(vec![1, 2, 4, 8]).expect("valid"),
            ],
            res_blocks: 2,
            ..Self::desk()
        }
    }

    pub fn input_channels(&self) -> usize {
        1 + 2 * self.pe_levels
    }

    pub fn levels(&self) -> usize {
        self.schedules.len()
    }

    /// Side of the level-`k` latent grid (0-based, finest first).
    pub fn latent_side(&self, k: usize) -> usize {
        self.schedules[k].side()
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::Config(m));
        if self.schedules.is_empty() {
            return bad("at least one level is required".into());
        }
        if self.widths.is_empty() {
            return bad("at least one encoder stage is required".into());
        }
        if self.pe_levels == 0 {
            return bad("pe_levels must be >= 1".into());
        }
        if self.groups == 0 {
            return bad("groups must be >= 1".into());
        }
        for &w in self.widths.iter().chain([&self.latent_channels]) {
            if w == 0 || w % self.groups != 0 {
                return bad(format!("width {w} is not a positive multiple of {} groups", self.groups));
            }
        }
        if self.input_side != self.latent_side(0) << self.widths.len() {
            return bad(format!(
                "input side {} must equal the level-1 latent side {} times 2^{}",
                self.input_side,
                self.latent_side(0),
                self.widths.len()
            ));
        }
        for k in 1..self.levels() {
            if self.latent_side(k) * 2 != self.latent_side(k - 1) {
                return bad(format!("level {} latent side must halve the level above", k + 1));
            }
        }
        if self.codebook_size == 0 || self.codebook_size > 1 << 16 {
            return bad(format!("codebook size {} out of range", self.codebook_size));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} must be finite and non-negative", self.beta));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seed for shuffling.
    pub seed: u64,
    /// Worker threads for per-item gradients; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 8,
            epochs: 200,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(NetworkError::Config(format!("learning rate {} must be finite and positive", self.lr)));
        }
        if self.epochs == 0 {
            return Err(NetworkError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NetworkError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}
