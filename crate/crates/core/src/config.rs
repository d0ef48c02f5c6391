//! Experiment configuration files.
//!
//! Configurations are TOML documents with one table per concern (channel,
//! model, training, data, evaluation, paths) plus a global seed. Every
//! artifact produced from a configuration is stamped with its hash, which
//! covers everything except the `paths` table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{kmh_to_mps, ChannelSpec};
use crate::error::{Error, Result};
use crate::io::Provenance;
use crate::link::{Alphabet, BerOptions};
use crate::modnet::ModNetArch;
use crate::optim::AdamConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub carrier_freq_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub num_subcarriers: usize,
    pub prefix_len: usize,
    pub ue_speed_kmh: f64,
    pub num_paths: usize,
    pub max_delay_grid: usize,
}

impl ChannelConfig {
    pub fn spec(&self) -> ChannelSpec {
        ChannelSpec {
            carrier_freq_hz: self.carrier_freq_hz,
            subcarrier_spacing_hz: self.subcarrier_spacing_hz,
            num_subcarriers: self.num_subcarriers,
            prefix_len: self.prefix_len,
            ue_speed_mps: kmh_to_mps(self.ue_speed_kmh),
            num_paths: self.num_paths,
            max_delay_grid: self.max_delay_grid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_kernel: usize,
    /// Output channels of each of the convolutions.
    pub conv_widths: Vec<usize>,
    /// Widths of the hidden dense layers; defaults to two layers of `4 M_L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_widths: Option<Vec<usize>>,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_snr_db: f64,
    pub alpha: f64,
    pub clip_norm: f64,
    #[serde(default)]
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Mobility and path count of a test set; the frame geometry comes from the
/// channel table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub ue_speed_kmh: f64,
    pub num_paths: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub snr_db: Vec<f64>,
    pub alphabets: Vec<Alphabet>,
    pub trials_per_channel: usize,
    pub stop_errors: u64,
    pub min_bits: u64,
    /// The first scenario matches the training statistics.
    pub scenarios: Vec<Scenario>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Default directory for pipeline outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub channel: ChannelConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

/// Dataset splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Argument(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(format!("config {} does not exist", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.channel_spec().validate()?;
        self.arch().validate()?;
        self.train_config().validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        let d = &self.data;
        if d.train == 0 || d.val == 0 || d.test == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if self.training.batch_size > d.train {
            return bad(format!(
                "batch size {} exceeds the training set size {}",
                self.training.batch_size, d.train
            ));
        }
        if d.train < 2 {
            return bad("the siamese phase needs at least 2 training samples".into());
        }
        let e = &self.evaluation;
        if e.snr_db.is_empty() || e.snr_db.iter().any(|v| !v.is_finite()) {
            return bad("evaluation SNR grid must be non-empty and finite".into());
        }
        if e.alphabets.is_empty() {
            return bad("at least one alphabet is required".into());
        }
        if e.trials_per_channel == 0 {
            return bad("trials per channel must be positive".into());
        }
        if e.scenarios.is_empty() {
            return bad("at least one evaluation scenario is required".into());
        }
        for (i, s) in e.scenarios.iter().enumerate() {
            if s.name.is_empty() || s.name.contains([',', '\n', '"']) {
                return bad(format!("scenario name {:?} must be non-empty and CSV-safe", s.name));
            }
            if e.scenarios[..i].iter().any(|o| o.name == s.name) {
                return bad(format!("duplicate scenario {:?}", s.name));
            }
            self.scenario_spec(s).validate()?;
        }
        Ok(())
    }

    pub fn channel_spec(&self) -> ChannelSpec {
        self.channel.spec()
    }

    pub fn scenario_spec(&self, s: &Scenario) -> ChannelSpec {
        ChannelSpec {
            ue_speed_mps: kmh_to_mps(s.ue_speed_kmh),
            num_paths: s.num_paths,
            ..self.channel_spec()
        }
    }

    pub fn scenario(&self, name: &str) -> Result<&Scenario> {
        self.evaluation.scenarios.iter().find(|s| s.name == name).ok_or_else(|| {
            Error::Argument(format!(
                "unknown scenario {name:?}; configured: {}",
                self.evaluation
                    .scenarios
                    .iter()
                    .map(|s| s.name.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })
    }

    pub fn arch(&self) -> ModNetArch {
        let c = &self.channel;
        let m = &self.model;
        let mut arch = ModNetArch::new(c.num_subcarriers, c.prefix_len);
        arch.conv_kernel = m.conv_kernel;
        arch.conv_channels = m.conv_widths.clone();
        if let Some(hidden) = &m.hidden_widths {
            let out = arch.output_count();
            arch.fc_widths = hidden.iter().copied().chain([out]).collect();
        }
        arch.leaky_slope = m.leaky_slope;
        arch.bn_eps = m.bn_eps;
        arch.bn_momentum = m.bn_momentum;
        arch
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            adam: t.adam.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            train_snr_db: t.train_snr_db,
            alpha: t.alpha,
            seed: self.derive_seed("training"),
            clip_norm: t.clip_norm,
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn ber_options(&self) -> BerOptions {
        let e = &self.evaluation;
        BerOptions {
            trials_per_channel: e.trials_per_channel,
            stop_errors: e.stop_errors,
            min_bits: e.min_bits,
            seed: self.derive_seed("ber"),
        }
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.data.train,
            Split::Val => self.data.val,
            Split::Test => self.data.test,
        }
    }

    /// Independent sub-seed for a named purpose.
    pub fn derive_seed(&self, purpose: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(purpose.as_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }

    /// SHA-256 of the canonical serialization with the `paths` table removed.
    pub fn hash(&self) -> [u8; 32] {
        let canonical = ExperimentConfig {
            paths: PathsConfig::default(),
            ..self.clone()
        };
        Sha256::digest(canonical.to_toml().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.seed,
            config_hash: self.hash(),
        }
    }
}
