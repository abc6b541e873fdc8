//! Beam-search decoding.
//!
//! Decoding runs on the incremental evaluation path: one `DecoderCache` per
//! live hypothesis, cloned when a hypothesis branches. Scores are cumulative
//! log-probabilities kept in double precision, and finished hypotheses are
//! ranked by length-normalized score (cumulative log-probability divided by
//! the number of emitted tokens, the closing separator included).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DecoderCache, Model};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor, TensorError};
use crate::tokenizer::{detokenize_ids, encode_pair, Detokenized, TokenizerError, Vocab};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("beam width must be positive")]
    ZeroBeam,
    #[error("maximum decode length must be positive")]
    ZeroMaxLen,
    #[error("vocabulary has {vocab} entries but the model expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
}

/// Beam-search settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    /// Number of live hypotheses kept after each step.
    pub beam: usize,
    /// Hard cap on emitted tokens; hypotheses reaching it finish without a
    /// closing separator.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 8,
            max_len: 100,
        }
    }
}

/// A finished decode.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, the closing separator included when one was produced.
    pub tokens: Vec<usize>,
    /// Cumulative log-probability of the emitted tokens.
    pub cum_logp: f64,
    /// Whether the hypothesis ended on a separator rather than the length cap.
    pub ended_by_sep: bool,
}

impl Hypothesis {
    /// Cumulative log-probability per emitted token.
    pub fn normalized(&self) -> f64 {
        self.cum_logp / self.tokens.len() as f64
    }
}

/// One still-growing beam entry.
struct Live<S: Scalar> {
    cache: DecoderCache<S>,
    tokens: Vec<usize>,
    cum_logp: f64,
    next_logp: Vec<f64>,
}

fn log_probs<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let xs: Vec<f64> = logits.iter().map(|&x| x.as_f64()).collect();
    let mut out = vec![0.0; xs.len()];
    ops::log_softmax_row(&xs, &mut out);
    out
}

/// Decodes one encoded input into a pool of finished hypotheses, best first.
///
/// Reserved tokens other than the separator are never proposed. The search
/// stops once the pool holds at least `beam` hypotheses whose `beam`-th best
/// normalized score nothing live can beat: extensions only lower a
/// cumulative log-probability, so a live entry's score is bounded by its
/// cumulative log-probability over the longest possible length.
pub fn beam_search<S: Scalar>(
    model: &Model<S>,
    enc: &Tensor<S>,
    vocab: &Vocab,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    if cfg.beam == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    if cfg.max_len == 0 {
        return Err(DecodeError::ZeroMaxLen);
    }
    if vocab.len() != model.cfg().vocab_size {
        return Err(DecodeError::VocabMismatch {
            vocab: vocab.len(),
            model: model.cfg().vocab_size,
        });
    }

    let mut cache = model.begin_decode(enc)?;
    let first = model.decode_step(&mut cache, vocab.cls_id())?;
    let mut live = vec![Live {
        cache,
        tokens: Vec::new(),
        cum_logp: 0.0,
        next_logp: log_probs(&first),
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        // Score every single-token extension of the live set. A separator
        // finishes the hypothesis; other reserved tokens are skipped.
        let mut grow: Vec<(usize, usize, f64)> = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            for token in 0..vocab.len() {
                let score = hyp.cum_logp + hyp.next_logp[token];
                if token == vocab.sep_id() {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(token);
                    pool.push(Hypothesis {
                        tokens,
                        cum_logp: score,
                        ended_by_sep: true,
                    });
                } else if !vocab.is_reserved_id(token) {
                    grow.push((parent, token, score));
                }
            }
        }

        // All live entries share one length, so cumulative scores compare
        // fairly. Ties resolve by parent then token id for determinism.
        grow.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .expect("beam score is NaN")
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        grow.truncate(cfg.beam);

        let mut next = Vec::with_capacity(grow.len());
        for (parent, token, score) in grow {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(token);
            if tokens.len() >= cfg.max_len {
                pool.push(Hypothesis {
                    tokens,
                    cum_logp: score,
                    ended_by_sep: false,
                });
                continue;
            }
            let mut cache = live[parent].cache.clone();
            let logits = model.decode_step(&mut cache, token)?;
            next.push(Live {
                cache,
                tokens,
                cum_logp: score,
                next_logp: log_probs(&logits),
            });
        }
        live = next;

        if pool.len() >= cfg.beam && !live.is_empty() {
            let bound = live
                .iter()
                .map(|h| h.cum_logp / cfg.max_len as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut norms: Vec<f64> = pool.iter().map(Hypothesis::normalized).collect();
            norms.sort_by(|a, b| b.partial_cmp(a).expect("pool score is NaN"));
            if norms[cfg.beam - 1] >= bound {
                break;
            }
        }
    }

    pool.sort_by(|a, b| {
        b.normalized()
            .partial_cmp(&a.normalized())
            .expect("pool score is NaN")
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(pool)
}

/// Post-edits one raw (source, translation) pair into plain text.
pub fn translate_pair<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    src: &str,
    mt: &str,
    cfg: &BeamConfig,
) -> Result<Detokenized, DecodeError> {
    let src_ids = vocab.tokenize(src);
    let mt_ids = vocab.tokenize(mt);
    let pair = encode_pair(&src_ids, &mt_ids, vocab, model.cfg().max_positions)?;
    let enc = model.encode_values(&pair.ids, &pair.segments, &pair.positions)?;
    let pool = beam_search(model, &enc, vocab, cfg)?;
    // The pool is never empty: the first round always scores a bare
    // separator, and any live entries hitting the length cap finish too.
    let best = pool.first().expect("empty beam pool");
    Ok(detokenize_ids(&best.tokens, vocab)?)
}

/// One corpus item's decode result.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    /// Post-edited text; empty when the item failed.
    pub text: String,
    /// Anything suspicious seen while detokenizing.
    pub warnings: Vec<String>,
    /// Why the item failed, if it did.
    pub error: Option<String>,
}

/// Post-edits a corpus of raw (source, translation) pairs in parallel.
///
/// A failing item yields an empty text and carries its error; it never takes
/// the rest of the corpus down.
pub fn translate_corpus<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    items: &[(String, String)],
    cfg: &BeamConfig,
) -> Vec<Translation> {
    items
        .par_iter()
        .map(|(src, mt)| match translate_pair(model, vocab, src, mt, cfg) {
            Ok(d) => Translation {
                text: d.text,
                warnings: d.warnings,
                error: None,
            },
            Err(e) => Translation {
                text: String::new(),
                warnings: Vec::new(),
                error: Some(e.to_string()),
            },
        })
        .collect()
}
