//! Model hyperparameters and decoder parameter-sharing strategies.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("hidden size {hidden} is not divisible by {heads} heads")]
    HiddenHeads { hidden: usize, heads: usize },
    #[error("{0} must be nonzero")]
    ZeroField(&'static str),
    #[error("vocabulary of {0} cannot hold the 5 reserved tokens")]
    VocabTooSmall(usize),
    #[error("unknown sharing preset {0:?}")]
    UnknownPreset(String),
}

/// Transformer dimensions and regularization knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Model width H.
    pub hidden: usize,
    /// Encoder depth; the decoder mirrors it.
    pub layers: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Feed-forward inner width.
    pub feed_forward: usize,
    /// Size of the learned position table.
    pub max_positions: usize,
    /// Dropout on embeddings and sublayer outputs.
    pub dropout: f64,
    /// Dropout on attention probabilities.
    pub attn_dropout: f64,
    /// Layer norm stabilizer.
    pub layer_norm_eps: f64,
    /// Std of the truncated normal initializer.
    pub init_std: f64,
}

impl ModelConfig {
    /// Full-size configuration: 12 layers, width 768, 12 heads.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 768,
            layers: 12,
            heads: 12,
            feed_forward: 3072,
            max_positions: 512,
            dropout: 0.1,
            attn_dropout: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    /// Desk-scale configuration for tests and fixtures.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 64,
            layers: 2,
            heads: 4,
            feed_forward: 256,
            max_positions: 128,
            dropout: 0.1,
            attn_dropout: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.vocab_size < 5 {
            return Err(ConfigError::VocabTooSmall(self.vocab_size));
        }
        for (value, name) in [
            (self.hidden, "hidden"),
            (self.heads, "heads"),
            (self.feed_forward, "feed_forward"),
            (self.max_positions, "max_positions"),
        ] {
            if value == 0 {
                return Err(ConfigError::ZeroField(name));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(ConfigError::HiddenHeads {
                hidden: self.hidden,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

/// How decoder parameters relate to encoder parameters.
///
/// Initialization fields copy values once at build time; sharing fields make
/// the named matrices the same storage, so one gradient update moves both
/// views. Sharing covers the query/key/value/output projections (weights and
/// biases) of an attention block, or the two linear maps of a feed-forward
/// block; layer norms always stay per-block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingConfig {
    /// Initialize decoder self-attention, feed-forward, and their norms from
    /// the encoder's (possibly pretrained) values.
    pub decoder_init_from_encoder: bool,
    /// Initialize context attention from the decoder self-attention values.
    pub context_init_from_self: bool,
    /// Decoder self-attention shares storage with encoder self-attention.
    pub share_self_attn: bool,
    /// Context attention shares storage with decoder self-attention.
    pub share_context_attn: bool,
    /// Decoder feed-forward shares storage with encoder feed-forward.
    pub share_feed_forward: bool,
}

/// The six decoder configurations the ablation sweeps, each adding one
/// relationship on top of the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SharingPreset {
    /// Random decoder, nothing shared.
    Transformer,
    /// Decoder blocks initialized from the encoder.
    DecoderInit,
    /// + context attention initialized from self-attention.
    ContextInit,
    /// + decoder self-attention tied to encoder self-attention.
    TiedSelf,
    /// + context attention tied to decoder self-attention.
    TiedContext,
    /// + decoder feed-forward tied to encoder feed-forward.
    TiedFeedForward,
}

impl SharingPreset {
    /// All presets in ablation order (least to most shared).
    pub const ALL: [SharingPreset; 6] = [
        SharingPreset::Transformer,
        SharingPreset::DecoderInit,
        SharingPreset::ContextInit,
        SharingPreset::TiedSelf,
        SharingPreset::TiedContext,
        SharingPreset::TiedFeedForward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SharingPreset::Transformer => "transformer",
            SharingPreset::DecoderInit => "decoder-init",
            SharingPreset::ContextInit => "context-init",
            SharingPreset::TiedSelf => "tied-self",
            SharingPreset::TiedContext => "tied-context",
            SharingPreset::TiedFeedForward => "tied-ff",
        }
    }

    pub fn parse(name: &str) -> Result<Self, ConfigError> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))
    }

    pub fn config(self) -> SharingConfig {
        let step = Self::ALL.iter().position(|p| *p == self).unwrap();
        SharingConfig {
            decoder_init_from_encoder: step >= 1,
            context_init_from_self: step >= 2,
            share_self_attn: step >= 3,
            share_context_attn: step >= 4,
            share_feed_forward: step >= 5,
        }
    }
}

impl std::fmt::Display for SharingPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SharingPreset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}
