//! Run configuration: one TOML document, partially overridable, with flags applied last.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use swanvox::ingest::Split;
use swanvox::network::{ModelConfig, TrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Full => ModelConfig::full(),
        }
    }
}

/// Where training and evaluation volumes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest; volume paths inside are relative to its directory.
    pub manifest: Option<PathBuf>,
    /// Procedural shape count used when no manifest is given. The same set serves as validation.
    pub synthetic: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: 8,
            synthetic_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Binarization threshold for IoU/F1; unset picks it per volume.
    pub threshold: Option<f64>,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: None,
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurateConfig {
    pub weight_min: f64,
    pub weight_max: f64,
    pub methods: Vec<String>,
    /// Target voxel spacing in Å.
    pub apix: f64,
    pub size: usize,
    pub rotations: usize,
    pub dilation: usize,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub offline: bool,
    pub cache_dir: Option<PathBuf>,
    pub workers: usize,
}

impl Default for CurateConfig {
    fn default() -> Self {
        Self {
            weight_min: 100.0,
            weight_max: 1500.0,
            methods: vec!["SPA".into(), "STA".into()],
            apix: 4.0,
            size: 64,
            rotations: 5,
            dilation: swanvox::ingest::DEFAULT_DILATION,
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
            offline: false,
            cache_dir: None,
            workers: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Parent of the per-run directories.
    pub root: PathBuf,
    /// Keep `epoch_NNNN.ckpt` every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("runs"),
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub curate: CurateConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn with_preset(preset: Preset) -> Self {
        Self {
            preset,
            model: preset.model(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            curate: CurateConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// Parse a TOML document. Tables may be partial; missing keys keep the preset defaults.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Parse(format!("config: {e}")))?;
        let preset = match user.get("preset") {
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| CliError::Parse(format!("config preset: {e}")))?,
            None => Preset::default(),
        };
        let mut base = toml::Table::try_from(Self::with_preset(preset)).expect("defaults serialize");
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Parse(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the resolved document.
    pub fn short_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Parse(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Parse(e.to_string()))?;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `<root>/<UTC timestamp>-<hash>`.
pub fn run_dir(root: &Path, hash: &str) -> PathBuf {
    root.join(format!("{}-{hash}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_keep_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 3\n[model]\ncodebook_size = 64\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.model.codebook_size, 64);
        assert_eq!(cfg.model.latent_channels, ModelConfig::desk().latent_channels);
    }

    #[test]
    fn preset_switches_model() {
        let cfg = RunConfig::from_toml("preset = \"full\"\n").unwrap();
        assert_eq!(cfg.model, ModelConfig::full());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nepoch = 3\n"), Err(CliError::Parse(_))));
        assert!(matches!(RunConfig::from_toml("[train\n"), Err(CliError::Parse(_))));
    }

    #[test]
    fn run_dir_names_carry_the_hash() {
        let d = run_dir(Path::new("runs"), "abc123");
        let name = d.file_name().unwrap().to_str().unwrap();
        assert!(name.ends_with("Z-abc123"));
        assert_eq!(name.len(), "20240101T000000Z-abc123".len());
    }

    #[test]
    fn resolved_document_round_trips() {
        let cfg = RunConfig::with_preset(Preset::Desk);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.short_hash().len(), 12);
    }
}
