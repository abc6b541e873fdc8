//! TOML configuration file: model shape, sharing preset, training and
//! decoding settings, and default data paths. Command-line flags override
//! whatever the file says.

use std::path::{Path, PathBuf};

use ape_core::decoding::BeamConfig;
use ape_core::model::{ModelConfig, SharingPreset};
use ape_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    /// One of the decoder sharing presets, e.g. `"tied-context"`.
    pub preset: Option<String>,
    pub train: TrainSection,
    pub decode: BeamConfig,
    pub data: DataSection,
}

/// Model shape: a named template with optional per-field overrides. The
/// vocabulary size always comes from the vocabulary file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `"base"` or `"toy"`.
    pub template: String,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub feed_forward: Option<usize>,
    pub max_positions: Option<usize>,
    pub dropout: Option<f64>,
    pub attn_dropout: Option<f64>,
    pub layer_norm_eps: Option<f64>,
    pub init_std: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            template: "base".into(),
            hidden: None,
            layers: None,
            heads: None,
            feed_forward: None,
            max_positions: None,
            dropout: None,
            attn_dropout: None,
            layer_norm_eps: None,
            init_std: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize) -> Result<ModelConfig, String> {
        let mut cfg = match self.template.as_str() {
            "base" => ModelConfig::base(vocab_size),
            "toy" => ModelConfig::toy(vocab_size),
            other => return Err(format!("unknown model template {other:?} (use base or toy)")),
        };
        if let Some(v) = self.hidden {
            cfg.hidden = v;
        }
        if let Some(v) = self.layers {
            cfg.layers = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.feed_forward {
            cfg.feed_forward = v;
        }
        if let Some(v) = self.max_positions {
            cfg.max_positions = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.attn_dropout {
            cfg.attn_dropout = v;
        }
        if let Some(v) = self.layer_norm_eps {
            cfg.layer_norm_eps = v;
        }
        if let Some(v) = self.init_std {
            cfg.init_std = v;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

/// The training knobs plus the builder seed for fresh models.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    /// Seed for the initial weights (the optimizer uses `config.seed`).
    pub init_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            config: TrainConfig::default(),
            init_seed: 1,
        }
    }
}

/// Default file locations, each overridable from the command line.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }

    pub fn preset(&self) -> Result<SharingPreset, String> {
        match &self.preset {
            None => Ok(SharingPreset::Transformer),
            Some(name) => SharingPreset::parse(name).map_err(|e| e.to_string()),
        }
    }
}
