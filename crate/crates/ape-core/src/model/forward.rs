//! Training-time forward passes, built on the gradient tape.
//!
//! Each batch gets one tape: parameters are pushed once (tied parameters
//! share a single tape variable, so their gradients accumulate together),
//! examples run row by row at their unpadded lengths, and the per-example
//! loss sums combine into one mean over non-padding target tokens.

use rand::Rng;

use crate::data::Batch;
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{AttnMask, TensorError};
use crate::tokenizer::Segment;

use super::Model;

/// Tape variables for every parameter slot, in slot order.
pub struct TapeParams {
    by_slot: Vec<Var>,
}

impl TapeParams {
    /// The tape variable carrying a given slot.
    pub fn var(&self, slot: usize) -> Var {
        self.by_slot[slot]
    }

    pub fn len(&self) -> usize {
        self.by_slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_slot.is_empty()
    }
}

fn segment_ids(segments: &[Segment]) -> Vec<usize> {
    segments.iter().map(|s| s.index()).collect()
}

impl<S: Scalar> Model<S> {
    /// Pushes every parameter slot onto the tape once.
    pub fn params_on_tape(&self, tape: &mut Tape<S>) -> TapeParams {
        TapeParams {
            by_slot: (0..self.store.num_slots())
                .map(|i| tape.leaf(self.store.slot(i).clone()))
                .collect(),
        }
    }

    fn v(&self, p: &TapeParams, name: &str) -> Var {
        p.by_slot[self.store.slot_of(name).expect("parameter registered at build")]
    }

    fn linear(
        &self,
        tape: &mut Tape<S>,
        p: &TapeParams,
        prefix: &str,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = self.v(p, &format!("{prefix}.weight"));
        let b = self.v(p, &format!("{prefix}.bias"));
        let y = tape.matmul_nt(x, w)?;
        tape.add_bias(y, b)
    }

    fn norm(
        &self,
        tape: &mut Tape<S>,
        p: &TapeParams,
        prefix: &str,
        x: Var,
    ) -> Result<Var, TensorError> {
        let gain = self.v(p, &format!("{prefix}.gain"));
        let bias = self.v(p, &format!("{prefix}.bias"));
        tape.layer_norm(x, gain, bias, self.cfg.layer_norm_eps)
    }

    /// Word + position + segment embeddings, layer-normed and dropped out.
    pub fn embed_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        p: &TapeParams,
        ids: &[usize],
        segments: &[Segment],
        positions: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let word = tape.embed(self.v(p, "embeddings.word"), ids)?;
        let pos = tape.embed(self.v(p, "embeddings.position"), positions)?;
        let seg = tape.embed(self.v(p, "embeddings.segment"), &segment_ids(segments))?;
        let sum = tape.add(word, pos)?;
        let sum = tape.add(sum, seg)?;
        let normed = self.norm(tape, p, "embeddings.norm", sum)?;
        tape.dropout(normed, self.cfg.dropout, training, rng)
    }

    /// Multi-head attention: `q_in` provides queries, `kv_in` keys/values.
    fn attention<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        p: &TapeParams,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        mask: &AttnMask,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let q = self.linear(tape, p, &format!("{prefix}.q"), q_in)?;
        let k = self.linear(tape, p, &format!("{prefix}.k"), kv_in)?;
        let v = self.linear(tape, p, &format!("{prefix}.v"), kv_in)?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, from, to)?;
            let kh = tape.slice_cols(k, from, to)?;
            let vh = tape.slice_cols(v, from, to)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.masked_softmax_rows(scores, mask)?;
            let probs = tape.dropout(probs, self.cfg.attn_dropout, training, rng)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        self.linear(tape, p, &format!("{prefix}.out"), ctx)
    }

    /// Attention sublayer with residual connection and post-norm.
    fn attn_block<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        p: &TapeParams,
        prefix: &str,
        x: Var,
        kv: Var,
        mask: &AttnMask,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let h = self.attention(tape, p, prefix, x, kv, mask, training, rng)?;
        let h = tape.dropout(h, self.cfg.dropout, training, rng)?;
        let sum = tape.add(x, h)?;
        self.norm(tape, p, &format!("{prefix}.norm"), sum)
    }

    /// Feed-forward sublayer with residual connection and post-norm.
    fn ff_block<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        p: &TapeParams,
        prefix: &str,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let inner = self.linear(tape, p, &format!("{prefix}.inner"), x)?;
        let act = tape.gelu(inner);
        let outer = self.linear(tape, p, &format!("{prefix}.outer"), act)?;
        let h = tape.dropout(outer, self.cfg.dropout, training, rng)?;
        let sum = tape.add(x, h)?;
        self.norm(tape, p, &format!("{prefix}.norm"), sum)
    }

    /// Runs the encoder over one unpadded example, returning `[T, H]`.
    pub fn encode_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        p: &TapeParams,
        ids: &[usize],
        segments: &[Segment],
        positions: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let mut x = self.embed_on_tape(tape, p, ids, segments, positions, training, rng)?;
        let mask = AttnMask::none(ids.len(), ids.len());
        for i in 0..self.cfg.layers {
            x = self.attn_block(tape, p, &format!("encoder.{i}.attn"), x, x, &mask, training, rng)?;
            x = self.ff_block(tape, p, &format!("encoder.{i}.ff"), x, training, rng)?;
        }
        Ok(x)
    }

    /// Runs the decoder over one unpadded target prefix, returning hidden
    /// states `[T, H]`. Self-attention is causal; context attention sees the
    /// whole encoded input.
    pub fn decode_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        p: &TapeParams,
        enc: Var,
        ids: &[usize],
        segments: &[Segment],
        positions: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let enc_len = tape.tensor(enc).dims2()?.0;
        let mut x = self.embed_on_tape(tape, p, ids, segments, positions, training, rng)?;
        let causal = AttnMask::causal(ids.len());
        let cross = AttnMask::none(ids.len(), enc_len);
        for i in 0..self.cfg.layers {
            x = self.attn_block(
                tape,
                p,
                &format!("decoder.{i}.self_attn"),
                x,
                x,
                &causal,
                training,
                rng,
            )?;
            x = self.attn_block(
                tape,
                p,
                &format!("decoder.{i}.context_attn"),
                x,
                enc,
                &cross,
                training,
                rng,
            )?;
            x = self.ff_block(tape, p, &format!("decoder.{i}.ff"), x, training, rng)?;
        }
        Ok(x)
    }

    /// Vocabulary logits through the embedding-tied output projection.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape<S>,
        p: &TapeParams,
        hidden: Var,
    ) -> Result<Var, TensorError> {
        tape.matmul_nt(hidden, self.v(p, "output.weight"))
    }

    /// Smoothed cross-entropy over one batch: the mean over all non-padding
    /// gold tokens, plus that token count.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        p: &TapeParams,
        batch: &Batch,
        label_smoothing: f64,
        pad_id: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, usize), TensorError> {
        let mut sums = Vec::with_capacity(batch.rows());
        let mut total = 0usize;
        for r in 0..batch.rows() {
            let el = batch.enc_lens[r];
            let dl = batch.dec_lens[r];
            let enc = self.encode_on_tape(
                tape,
                p,
                &batch.enc_ids[r][..el],
                &batch.enc_segments[r][..el],
                &batch.enc_positions[r][..el],
                training,
                rng,
            )?;
            let hidden = self.decode_on_tape(
                tape,
                p,
                enc,
                &batch.dec_ids[r][..dl],
                &batch.dec_segments[r][..dl],
                &batch.dec_positions[r][..dl],
                training,
                rng,
            )?;
            let logits = self.logits_on_tape(tape, p, hidden)?;
            let (sum, count) = tape.cross_entropy_label_smoothed_sum(
                logits,
                &batch.gold[r][..dl],
                label_smoothing,
                pad_id,
            )?;
            sums.push(sum);
            total += count;
        }
        let sum = tape.add_n(&sums)?;
        let loss = tape.scale(sum, 1.0 / total as f64);
        Ok((loss, total))
    }
}
