//! Run configuration: named profiles overlaid by an optional TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::featencode::{EncoderConfig, Period};
use crate::model::ModelConfig;
use crate::objectives::{HeadConfig, LossConfig};
use crate::perturb::PerturbConfig;
use crate::schema::ValPlacement;
use crate::synthgen::GenConfig;
use crate::train::OptimConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown profile {0:?} (expected desk or paper)")]
    UnknownProfile(String),
    #[error("config file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_frac: f64,
    pub val_frac: f64,
    pub val_placement: ValPlacement,
    /// Plant inserted-visit anomalies on the test partition when generating.
    pub benchmark: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.9,
            val_frac: 0.2,
            val_placement: ValPlacement::Head,
            benchmark: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoocConfig {
    pub min_overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lr_factor: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr_factor: 0.5,
            max_epochs: 200,
            patience: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    /// Worker threads for data preparation and scoring; 0 defers to
    /// `MESES_THREADS` or the machine.
    pub threads: usize,
    pub data: DataConfig,
    pub gen: GenConfig,
    pub perturb: PerturbConfig,
    pub encoder: EncoderConfig,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub heads: HeadConfig,
    pub optim: OptimConfig,
    pub finetune: FinetuneConfig,
    pub cooc: CoocConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RunConfig {
    /// Full-scale settings.
    pub fn paper() -> Self {
        Self {
            profile: "paper".into(),
            seed: 0,
            threads: 0,
            data: DataConfig::default(),
            gen: GenConfig::default(),
            perturb: PerturbConfig::default(),
            encoder: EncoderConfig {
                ns: 32,
                lambda_min: 1e-6,
                lambda_max: 2.0,
                period: Period::Daily,
                h: 32,
                drop_entity_token: false,
            },
            backbone: BackboneConfig {
                d: 1040,
                blocks: 6,
                heads: 4,
                clique: 8,
                window: 32,
                d_ff: 0,
                bypass_cooc: false,
            },
            loss: LossConfig::default(),
            heads: HeadConfig::default(),
            optim: OptimConfig::default(),
            finetune: FinetuneConfig::default(),
            cooc: CoocConfig::default(),
        }
    }

    /// Single-CPU settings for the synthetic corpus.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.profile = "desk".into();
        c.encoder.ns = 16;
        c.encoder.lambda_min = 0.01;
        c.encoder.lambda_max = 2.0;
        c.encoder.h = 4;
        c.backbone = BackboneConfig {
            d: 40,
            blocks: 2,
            heads: 2,
            clique: 4,
            window: 16,
            d_ff: 0,
            bypass_cooc: false,
        };
        c.loss.h_proj = 40;
        c.heads.n_neg = 32;
        c.optim.peak_lr = 2e-3;
        c.optim.max_epochs = 30;
        c.optim.patience = 5;
        c.finetune.max_epochs = 40;
        c.finetune.patience = 5;
        c
    }

    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(ConfigError::UnknownProfile(other.into())),
        }
    }

    /// Resolves a profile (explicit argument, else the file's `profile`
    /// key, else desk) and overlays the file's keys on top of it.
    pub fn resolve(file: Option<&str>, profile: Option<&str>) -> Result<Self, ConfigError> {
        let overlay: toml::Table = match file {
            Some(text) => text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?,
            None => toml::Table::new(),
        };
        let name = profile
            .map(str::to_string)
            .or_else(|| overlay.get("profile").and_then(|v| v.as_str()).map(str::to_string))
            .unwrap_or_else(|| "desk".into());
        let base = Self::profile(&name)?;
        let mut merged = serde_json::to_value(&base).expect("config serializes");
        let overlay = serde_json::to_value(&overlay).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut merged, overlay);
        merged["profile"] = serde_json::Value::String(name);
        serde_json::from_value(merged).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: Option<&Path>, profile: Option<&str>) -> Result<Self, ConfigError> {
        let text = path.map(std::fs::read_to_string).transpose()?;
        Self::resolve(text.as_deref(), profile)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            backbone: self.backbone.clone(),
            loss: self.loss.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The config with execution-only settings (`threads`) cleared, as
    /// stored in checkpoints.
    pub fn canonical(&self) -> Self {
        Self { threads: 0, ..self.clone() }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.canonical()).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Worker count: the configured value, else `MESES_THREADS`, else the
    /// available parallelism.
    pub fn worker_threads(&self) -> usize {
        if self.threads > 0 {
            return self.threads;
        }
        std::env::var("MESES_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|&n: &usize| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
