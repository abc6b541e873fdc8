//! Evaluation-time forward passes on plain values (no tape, no dropout).
//!
//! Two decoder paths exist: a full teacher-forced pass over a whole target
//! prefix, and an incremental step that reuses cached keys and values. Both
//! are built from the same row kernels the tape uses, and masked softmax
//! writes exact zeros for blocked positions, so the incremental path
//! reproduces the full pass bit for bit.

use crate::scalar::Scalar;
use crate::tensor::{ops, AttnMask, Tensor, TensorError};
use crate::tokenizer::Segment;

use super::Model;

/// Per-layer cached state for incremental decoding.
#[derive(Clone)]
struct LayerCache<S: Scalar> {
    /// Self-attention keys over the generated prefix, `[t, H]` flat.
    self_k: Vec<S>,
    /// Self-attention values over the generated prefix, `[t, H]` flat.
    self_v: Vec<S>,
    /// Context keys over the encoded input, `[T_enc, H]` flat.
    ctx_k: Vec<S>,
    /// Context values over the encoded input, `[T_enc, H]` flat.
    ctx_v: Vec<S>,
}

/// Incremental decoder state: encoder projections computed once, generated
/// prefix keys/values appended step by step.
#[derive(Clone)]
pub struct DecoderCache<S: Scalar> {
    layers: Vec<LayerCache<S>>,
    enc_len: usize,
    len: usize,
}

impl<S: Scalar> DecoderCache<S> {
    /// Tokens consumed so far; also the position id of the next token.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn add_rows<S: Scalar>(x: &[S], h: &[S]) -> Vec<S> {
    x.iter().zip(h).map(|(&a, &b)| a + b).collect()
}

impl<S: Scalar> Model<S> {
    fn weight(&self, name: &str) -> &Tensor<S> {
        self.store.get(name).expect("parameter registered at build")
    }

    /// `x (rows x in) * W^T + b` with `W` stored `[out, in]`.
    fn linear_values(&self, prefix: &str, x: &[S], rows: usize) -> Vec<S> {
        let w = self.weight(&format!("{prefix}.weight"));
        let b = self.weight(&format!("{prefix}.bias"));
        let (out_dim, in_dim) = w.dims2().expect("projection weights are matrices");
        let mut y = ops::matmul_nt(x, w.data(), rows, in_dim, out_dim);
        for r in 0..rows {
            for (o, &bv) in y[r * out_dim..(r + 1) * out_dim].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        y
    }

    fn norm_values(&self, prefix: &str, x: &[S], rows: usize) -> Vec<S> {
        let gain = self.weight(&format!("{prefix}.gain"));
        let bias = self.weight(&format!("{prefix}.bias"));
        let h = gain.numel();
        let eps = S::of_f64(self.cfg.layer_norm_eps);
        let mut out = vec![S::zero(); rows * h];
        for r in 0..rows {
            ops::layer_norm_row(
                &x[r * h..(r + 1) * h],
                gain.data(),
                bias.data(),
                eps,
                &mut out[r * h..(r + 1) * h],
            );
        }
        out
    }

    fn check_embed_inputs(
        &self,
        ids: &[usize],
        segments: &[Segment],
        positions: &[usize],
    ) -> Result<(), TensorError> {
        if ids.len() != segments.len() || ids.len() != positions.len() {
            return Err(TensorError::ShapeMismatch {
                lhs: vec![ids.len()],
                rhs: vec![segments.len(), positions.len()],
            });
        }
        for &id in ids {
            if id >= self.cfg.vocab_size {
                return Err(TensorError::IndexOutOfRange {
                    index: id,
                    bound: self.cfg.vocab_size,
                });
            }
        }
        for &pos in positions {
            if pos >= self.cfg.max_positions {
                return Err(TensorError::IndexOutOfRange {
                    index: pos,
                    bound: self.cfg.max_positions,
                });
            }
        }
        Ok(())
    }

    fn embed_values(
        &self,
        ids: &[usize],
        segments: &[Segment],
        positions: &[usize],
    ) -> Result<Vec<S>, TensorError> {
        self.check_embed_inputs(ids, segments, positions)?;
        let h = self.cfg.hidden;
        let word = self.weight("embeddings.word");
        let pos_table = self.weight("embeddings.position");
        let seg_table = self.weight("embeddings.segment");
        let mut sums = vec![S::zero(); ids.len() * h];
        for t in 0..ids.len() {
            ops::sum3_row(
                word.row(ids[t]),
                pos_table.row(positions[t]),
                seg_table.row(segments[t].index()),
                &mut sums[t * h..(t + 1) * h],
            );
        }
        Ok(self.norm_values("embeddings.norm", &sums, ids.len()))
    }

    /// Multi-head attention over values. `q_in` is `[q_rows, H]`; keys and
    /// values come pre-projected as `[kv_rows, H]`.
    fn attention_values(
        &self,
        prefix: &str,
        q_in: &[S],
        q_rows: usize,
        k: &[S],
        v: &[S],
        kv_rows: usize,
        mask: &AttnMask,
    ) -> Vec<S> {
        let h = self.cfg.hidden;
        let dh = self.cfg.head_dim();
        let scale = S::of_f64(1.0 / (dh as f64).sqrt());
        let q = self.linear_values(&format!("{prefix}.q"), q_in, q_rows);
        let mut ctx = vec![S::zero(); q_rows * h];
        let mut qh = vec![S::zero(); q_rows * dh];
        let mut kh = vec![S::zero(); kv_rows * dh];
        let mut vh = vec![S::zero(); kv_rows * dh];
        let mut probs = vec![S::zero(); kv_rows];
        for head in 0..self.cfg.heads {
            let from = head * dh;
            for r in 0..q_rows {
                qh[r * dh..(r + 1) * dh].copy_from_slice(&q[r * h + from..r * h + from + dh]);
            }
            for r in 0..kv_rows {
                kh[r * dh..(r + 1) * dh].copy_from_slice(&k[r * h + from..r * h + from + dh]);
                vh[r * dh..(r + 1) * dh].copy_from_slice(&v[r * h + from..r * h + from + dh]);
            }
            for r in 0..q_rows {
                let q_row = &qh[r * dh..(r + 1) * dh];
                let mut scores = vec![S::zero(); kv_rows];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = ops::dot(q_row, &kh[j * dh..(j + 1) * dh]) * scale;
                }
                ops::softmax_row_masked(&scores, Some(mask.row(r)), &mut probs);
                let out_row = &mut ctx[r * h + from..r * h + from + dh];
                ops::matmul_row(&probs, &vh, dh, out_row);
            }
        }
        self.linear_values(&format!("{prefix}.out"), &ctx, q_rows)
    }

    fn attn_block_values(
        &self,
        prefix: &str,
        x: &[S],
        q_rows: usize,
        k: &[S],
        v: &[S],
        kv_rows: usize,
        mask: &AttnMask,
    ) -> Vec<S> {
        let h = self.attention_values(prefix, x, q_rows, k, v, kv_rows, mask);
        let sum = add_rows(x, &h);
        self.norm_values(&format!("{prefix}.norm"), &sum, q_rows)
    }

    fn ff_block_values(&self, prefix: &str, x: &[S], rows: usize) -> Vec<S> {
        let mut inner = self.linear_values(&format!("{prefix}.inner"), x, rows);
        for a in inner.iter_mut() {
            *a = ops::gelu(*a);
        }
        let outer = self.linear_values(&format!("{prefix}.outer"), &inner, rows);
        let sum = add_rows(x, &outer);
        self.norm_values(&format!("{prefix}.norm"), &sum, rows)
    }

    /// Encodes one source/draft pair, returning hidden states `[T, H]`.
    pub fn encode_values(
        &self,
        ids: &[usize],
        segments: &[Segment],
        positions: &[usize],
    ) -> Result<Tensor<S>, TensorError> {
        let mut x = self.embed_values(ids, segments, positions)?;
        let t = ids.len();
        let mask = AttnMask::none(t, t);
        for i in 0..self.cfg.layers {
            let prefix = format!("encoder.{i}.attn");
            let k = self.linear_values(&format!("{prefix}.k"), &x, t);
            let v = self.linear_values(&format!("{prefix}.v"), &x, t);
            x = self.attn_block_values(&prefix, &x, t, &k, &v, t, &mask);
            x = self.ff_block_values(&format!("encoder.{i}.ff"), &x, t);
        }
        Tensor::new(vec![t, self.cfg.hidden], x)
    }

    /// Teacher-forced decoder pass over a whole target prefix, returning
    /// vocabulary logits `[T, V]`.
    pub fn decode_logits_values(
        &self,
        enc: &Tensor<S>,
        ids: &[usize],
        segments: &[Segment],
        positions: &[usize],
    ) -> Result<Tensor<S>, TensorError> {
        let (enc_len, enc_h) = enc.dims2()?;
        if enc_h != self.cfg.hidden {
            return Err(TensorError::ShapeMismatch {
                lhs: enc.shape().to_vec(),
                rhs: vec![enc_len, self.cfg.hidden],
            });
        }
        let t = ids.len();
        let mut x = self.embed_values(ids, segments, positions)?;
        let causal = AttnMask::causal(t);
        let cross = AttnMask::none(t, enc_len);
        for i in 0..self.cfg.layers {
            let sa = format!("decoder.{i}.self_attn");
            let k = self.linear_values(&format!("{sa}.k"), &x, t);
            let v = self.linear_values(&format!("{sa}.v"), &x, t);
            x = self.attn_block_values(&sa, &x, t, &k, &v, t, &causal);
            let ca = format!("decoder.{i}.context_attn");
            let k = self.linear_values(&format!("{ca}.k"), enc.data(), enc_len);
            let v = self.linear_values(&format!("{ca}.v"), enc.data(), enc_len);
            x = self.attn_block_values(&ca, &x, t, &k, &v, enc_len, &cross);
            x = self.ff_block_values(&format!("decoder.{i}.ff"), &x, t);
        }
        self.output_logits(&x, t)
    }

    fn output_logits(&self, hidden: &[S], rows: usize) -> Result<Tensor<S>, TensorError> {
        let word = self.weight("output.weight");
        let (v, h) = word.dims2()?;
        let logits = ops::matmul_nt(hidden, word.data(), rows, h, v);
        Tensor::new(vec![rows, v], logits)
    }

    /// Prepares incremental decoding against an encoded input: projects the
    /// encoder states through every layer's context attention once.
    pub fn begin_decode(&self, enc: &Tensor<S>) -> Result<DecoderCache<S>, TensorError> {
        let (enc_len, enc_h) = enc.dims2()?;
        if enc_h != self.cfg.hidden {
            return Err(TensorError::ShapeMismatch {
                lhs: enc.shape().to_vec(),
                rhs: vec![enc_len, self.cfg.hidden],
            });
        }
        let layers = (0..self.cfg.layers)
            .map(|i| {
                let ca = format!("decoder.{i}.context_attn");
                LayerCache {
                    self_k: Vec::new(),
                    self_v: Vec::new(),
                    ctx_k: self.linear_values(&format!("{ca}.k"), enc.data(), enc_len),
                    ctx_v: self.linear_values(&format!("{ca}.v"), enc.data(), enc_len),
                }
            })
            .collect();
        Ok(DecoderCache {
            layers,
            enc_len,
            len: 0,
        })
    }

    /// Feeds one token (position = tokens so far, segment B) and returns the
    /// next-token logits. Bit-identical to the matching row of
    /// [`Model::decode_logits_values`].
    pub fn decode_step(
        &self,
        cache: &mut DecoderCache<S>,
        token: usize,
    ) -> Result<Vec<S>, TensorError> {
        let pos = cache.len;
        let mut x = self.embed_values(&[token], &[Segment::B], &[pos])?;
        let prefix_len = pos + 1;
        for (i, layer) in cache.layers.iter_mut().enumerate() {
            let sa = format!("decoder.{i}.self_attn");
            let k_t = self.linear_values(&format!("{sa}.k"), &x, 1);
            let v_t = self.linear_values(&format!("{sa}.v"), &x, 1);
            layer.self_k.extend_from_slice(&k_t);
            layer.self_v.extend_from_slice(&v_t);
            let visible = AttnMask::none(1, prefix_len);
            x = self.attn_block_values(
                &sa,
                &x,
                1,
                &layer.self_k,
                &layer.self_v,
                prefix_len,
                &visible,
            );
            let ca = format!("decoder.{i}.context_attn");
            let cross = AttnMask::none(1, cache.enc_len);
            x = self.attn_block_values(&ca, &x, 1, &layer.ctx_k, &layer.ctx_v, cache.enc_len, &cross);
            x = self.ff_block_values(&format!("decoder.{i}.ff"), &x, 1);
        }
        cache.len = prefix_len;
        Ok(self.output_logits(&x, 1)?.data().to_vec())
    }
}
