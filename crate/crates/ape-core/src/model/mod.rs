//! Dual-input transformer: a deep bidirectional encoder over the
//! source/draft pair and a mirrored decoder whose parameters can be
//! initialized from, or tied to, the encoder's.
//!
//! All parameters live in a [`ParameterStore`]; ties are aliases onto the
//! same slot. Canonical names follow the module path, e.g.
//! `encoder.3.attn.q.weight` or `decoder.0.context_attn.norm.gain`, with
//! `embeddings.*` shared by both sides and `output.weight` aliasing the word
//! embedding.

pub mod config;
mod eval;
mod forward;
mod store;

pub use config::{ConfigError, ModelConfig, SharingConfig, SharingPreset};
pub use eval::DecoderCache;
pub use forward::TapeParams;
pub use store::{ParameterStore, StoreError};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("pretrained tensor {name:?} has shape {found:?} but the model expects {expected:?}")]
    PretrainedShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("pretrained tensor {0:?} does not name an embedding or encoder parameter")]
    PretrainedName(String),
}

/// The model: configuration plus named parameter storage.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    cfg: ModelConfig,
    sharing: SharingConfig,
    store: ParameterStore<S>,
}

/// The four attention projections, in registration order.
const PROJS: [&str; 4] = ["q", "k", "v", "out"];

fn trunc_normal<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let x = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break S::of_f64(x);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// How freshly inserted weight matrices get their values. `Zero` builds a
/// skeleton whose every parameter a checkpoint payload will overwrite.
enum Init {
    Random(ChaCha8Rng),
    Zero,
}

impl Init {
    fn tensor<S: Scalar>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<S> {
        match self {
            Init::Random(rng) => trunc_normal(rng, shape, std),
            Init::Zero => Tensor::zeros(shape),
        }
    }
}

impl<S: Scalar> Model<S> {
    /// Builds a randomly initialized model.
    pub fn build(cfg: ModelConfig, sharing: SharingConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build_with_pretrained(cfg, sharing, seed, None)
    }

    /// Builds a model, overwriting embedding and encoder parameters with
    /// `pretrained` values (by canonical name) before the decoder is derived
    /// from them. With pretrained values present, weight decay is enabled on
    /// every non-bias, non-norm parameter.
    pub fn build_with_pretrained(
        cfg: ModelConfig,
        sharing: SharingConfig,
        seed: u64,
        pretrained: Option<&[(String, Tensor<S>)]>,
    ) -> Result<Self, ModelError> {
        let init = Init::Random(ChaCha8Rng::seed_from_u64(seed));
        Self::build_inner(cfg, sharing, init, pretrained)
    }

    /// Builds an all-zeros skeleton with the same slot layout, aliases, and
    /// names as a random build — the starting point for loading a
    /// checkpoint payload.
    pub(crate) fn build_zeroed(cfg: ModelConfig, sharing: SharingConfig) -> Result<Self, ModelError> {
        Self::build_inner(cfg, sharing, Init::Zero, None)
    }

    fn build_inner(
        cfg: ModelConfig,
        sharing: SharingConfig,
        mut init: Init,
        pretrained: Option<&[(String, Tensor<S>)]>,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut m = Self {
            cfg,
            sharing,
            store: ParameterStore::new(),
        };

        m.init_embeddings(&mut init)?;
        for i in 0..m.cfg.layers {
            m.insert_attn(&mut init, &format!("encoder.{i}.attn"))?;
            m.insert_norm(&format!("encoder.{i}.attn.norm"))?;
            m.insert_ff(&mut init, &format!("encoder.{i}.ff"))?;
            m.insert_norm(&format!("encoder.{i}.ff.norm"))?;
        }

        if let Some(values) = pretrained {
            m.overwrite_pretrained(values)?;
        }

        for i in 0..m.cfg.layers {
            let enc_attn = format!("encoder.{i}.attn");
            let enc_ff = format!("encoder.{i}.ff");
            let self_attn = format!("decoder.{i}.self_attn");
            let ctx_attn = format!("decoder.{i}.context_attn");
            let dec_ff = format!("decoder.{i}.ff");

            if m.sharing.share_self_attn {
                m.alias_attn(&enc_attn, &self_attn)?;
            } else if m.sharing.decoder_init_from_encoder {
                m.copy_attn(&enc_attn, &self_attn)?;
            } else {
                m.insert_attn(&mut init, &self_attn)?;
            }
            if m.sharing.decoder_init_from_encoder {
                m.copy_norm(&format!("{enc_attn}.norm"), &format!("{self_attn}.norm"))?;
            } else {
                m.insert_norm(&format!("{self_attn}.norm"))?;
            }

            if m.sharing.share_context_attn {
                m.alias_attn(&self_attn, &ctx_attn)?;
            } else if m.sharing.context_init_from_self {
                m.copy_attn(&self_attn, &ctx_attn)?;
            } else {
                m.insert_attn(&mut init, &ctx_attn)?;
            }
            m.insert_norm(&format!("{ctx_attn}.norm"))?;

            if m.sharing.share_feed_forward {
                m.alias_ff(&enc_ff, &dec_ff)?;
            } else if m.sharing.decoder_init_from_encoder {
                m.copy_ff(&enc_ff, &dec_ff)?;
            } else {
                m.insert_ff(&mut init, &dec_ff)?;
            }
            if m.sharing.decoder_init_from_encoder {
                m.copy_norm(&format!("{enc_ff}.norm"), &format!("{dec_ff}.norm"))?;
            } else {
                m.insert_norm(&format!("{dec_ff}.norm"))?;
            }
        }

        for name in [
            "word",
            "position",
            "segment",
            "norm.gain",
            "norm.bias",
        ] {
            m.store
                .alias(format!("decoder.embeddings.{name}"), &format!("embeddings.{name}"))?;
        }
        m.store.alias("output.weight", "embeddings.word")?;

        if pretrained.is_some() {
            for idx in 0..m.store.num_slots() {
                let name = m.store.canonical_names()[idx];
                let decay = !name.ends_with(".bias") && !name.contains(".norm.");
                m.store.set_decay(idx, decay);
            }
        }
        Ok(m)
    }

    fn init_embeddings(&mut self, init: &mut Init) -> Result<(), ModelError> {
        let (v, h, p) = (self.cfg.vocab_size, self.cfg.hidden, self.cfg.max_positions);
        let std = self.cfg.init_std;
        self.store
            .insert("embeddings.word", init.tensor(vec![v, h], std), false)?;
        self.store.insert(
            "embeddings.position",
            init.tensor(vec![p, h], std),
            false,
        )?;
        self.store.insert(
            "embeddings.segment",
            init.tensor(vec![2, h], std),
            false,
        )?;
        self.insert_norm("embeddings.norm")?;
        Ok(())
    }

    fn insert_attn(&mut self, init: &mut Init, prefix: &str) -> Result<(), ModelError> {
        let h = self.cfg.hidden;
        for p in PROJS {
            self.store.insert(
                format!("{prefix}.{p}.weight"),
                init.tensor(vec![h, h], self.cfg.init_std),
                false,
            )?;
            self.store
                .insert(format!("{prefix}.{p}.bias"), Tensor::zeros(vec![h]), false)?;
        }
        Ok(())
    }

    fn insert_ff(&mut self, init: &mut Init, prefix: &str) -> Result<(), ModelError> {
        let (h, f) = (self.cfg.hidden, self.cfg.feed_forward);
        let std = self.cfg.init_std;
        self.store.insert(
            format!("{prefix}.inner.weight"),
            init.tensor(vec![f, h], std),
            false,
        )?;
        self.store
            .insert(format!("{prefix}.inner.bias"), Tensor::zeros(vec![f]), false)?;
        self.store.insert(
            format!("{prefix}.outer.weight"),
            init.tensor(vec![h, f], std),
            false,
        )?;
        self.store
            .insert(format!("{prefix}.outer.bias"), Tensor::zeros(vec![h]), false)?;
        Ok(())
    }

    fn insert_norm(&mut self, prefix: &str) -> Result<(), ModelError> {
        let h = self.cfg.hidden;
        self.store.insert(
            format!("{prefix}.gain"),
            Tensor::vector(vec![S::one(); h]),
            false,
        )?;
        self.store
            .insert(format!("{prefix}.bias"), Tensor::zeros(vec![h]), false)?;
        Ok(())
    }

    fn copy_attn(&mut self, from: &str, to: &str) -> Result<(), ModelError> {
        for p in PROJS {
            for leaf in ["weight", "bias"] {
                let t = self.store.get(&format!("{from}.{p}.{leaf}"))?.clone();
                self.store.insert(format!("{to}.{p}.{leaf}"), t, false)?;
            }
        }
        Ok(())
    }

    fn alias_attn(&mut self, target: &str, alias: &str) -> Result<(), ModelError> {
        for p in PROJS {
            for leaf in ["weight", "bias"] {
                self.store
                    .alias(format!("{alias}.{p}.{leaf}"), &format!("{target}.{p}.{leaf}"))?;
            }
        }
        Ok(())
    }

    fn copy_ff(&mut self, from: &str, to: &str) -> Result<(), ModelError> {
        for part in ["inner", "outer"] {
            for leaf in ["weight", "bias"] {
                let t = self.store.get(&format!("{from}.{part}.{leaf}"))?.clone();
                self.store.insert(format!("{to}.{part}.{leaf}"), t, false)?;
            }
        }
        Ok(())
    }

    fn alias_ff(&mut self, target: &str, alias: &str) -> Result<(), ModelError> {
        for part in ["inner", "outer"] {
            for leaf in ["weight", "bias"] {
                self.store.alias(
                    format!("{alias}.{part}.{leaf}"),
                    &format!("{target}.{part}.{leaf}"),
                )?;
            }
        }
        Ok(())
    }

    fn copy_norm(&mut self, from: &str, to: &str) -> Result<(), ModelError> {
        for leaf in ["gain", "bias"] {
            let t = self.store.get(&format!("{from}.{leaf}"))?.clone();
            self.store.insert(format!("{to}.{leaf}"), t, false)?;
        }
        Ok(())
    }

    fn overwrite_pretrained(&mut self, values: &[(String, Tensor<S>)]) -> Result<(), ModelError> {
        for (name, tensor) in values {
            let slot = self
                .store
                .slot_of(name)
                .map_err(|_| ModelError::PretrainedName(name.clone()))?;
            let expected = self.store.slot(slot).shape().to_vec();
            if tensor.shape() != expected.as_slice() {
                return Err(ModelError::PretrainedShape {
                    name: name.clone(),
                    expected,
                    found: tensor.shape().to_vec(),
                });
            }
            self.store
                .slot_mut(slot)
                .data_mut()
                .copy_from_slice(tensor.data());
        }
        Ok(())
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn sharing(&self) -> &SharingConfig {
        &self.sharing
    }

    pub fn store(&self) -> &ParameterStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<S> {
        &mut self.store
    }

    /// Distinct trainable scalars; tied parameters count once.
    pub fn count_parameters(&self) -> usize {
        self.store.count_parameters()
    }

    /// Reassembles a model from parts, validating the configuration.
    pub fn from_parts(
        cfg: ModelConfig,
        sharing: SharingConfig,
        store: ParameterStore<S>,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            sharing,
            store,
        })
    }
}

/// Dropout noise source used by the training path.
pub type TrainRng = ChaCha8Rng;

/// Convenience constructor for the training RNG.
pub fn train_rng(seed: u64) -> TrainRng {
    TrainRng::seed_from_u64(seed)
}
