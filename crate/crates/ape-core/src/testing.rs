//! Test-support oracles: finite differences, gradient comparison, and
//! brute-force searches.
//!
//! Everything here is deliberately independent of the code it checks: the
//! gradient helpers only evaluate user-supplied closures, and the exhaustive
//! searches reimplement their rules from scratch, so they stay valid
//! cross-checks rather than mirrors of the implementation.

use std::collections::HashSet;

use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};
use crate::tokenizer::{Segment, Vocab};

/// Central-difference gradient of `loss` with respect to `params`.
///
/// `params` is restored to its original contents before returning.
pub fn fd_grad<F>(params: &mut [f64], mut loss: F, h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let x0 = params[i];
        params[i] = x0 + h;
        let plus = loss(params);
        params[i] = x0 - h;
        let minus = loss(params);
        params[i] = x0;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error between two gradients: `||a - b|| / max(||a||, ||b||)`,
/// guarded so that two all-zero gradients compare as equal.
pub fn grad_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let mut diff2 = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff2 += (x - y) * (x - y);
        na2 += x * x;
        nb2 += y * y;
    }
    let scale = na2.sqrt().max(nb2.sqrt());
    if scale == 0.0 {
        return if diff2 == 0.0 { 0.0 } else { f64::INFINITY };
    }
    diff2.sqrt() / scale
}

/// Plain full-matrix Levenshtein distance over words.
fn levenshtein(a: &[String], b: &[String]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j - 1] + cost)
                .min(d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Minimal translation edit count (shifts each costing one, plus remaining
/// word edits) found by trying every legal shift sequence breadth-first.
///
/// A legal shift moves a contiguous block of at most 10 words that matches
/// the reference exactly at its destination and contains at least one word
/// that differs from the reference at its current position; the block is
/// reinserted at the destination index clamped to the remaining length.
pub fn exhaustive_ter_edits(hyp: &str, reference: &str) -> usize {
    let reference: Vec<String> = reference.split_whitespace().map(str::to_string).collect();
    let start: Vec<String> = hyp.split_whitespace().map(str::to_string).collect();
    let mut best = levenshtein(&start, &reference);
    let mut frontier = vec![start.clone()];
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    seen.insert(start);
    let mut shifts = 0usize;
    while !frontier.is_empty() {
        shifts += 1;
        if shifts >= best {
            break; // further shifts cannot beat the current total
        }
        let mut next = Vec::new();
        for state in &frontier {
            for s in 0..state.len() {
                for l in 1..=10usize.min(state.len() - s).min(reference.len()) {
                    let block = &state[s..s + l];
                    let moved = (s..s + l)
                        .any(|i| i >= reference.len() || state[i] != reference[i]);
                    if !moved {
                        continue;
                    }
                    for dest in 0..=(reference.len() - l) {
                        if &reference[dest..dest + l] != block {
                            continue;
                        }
                        let mut rest: Vec<String> = Vec::with_capacity(state.len());
                        rest.extend_from_slice(&state[..s]);
                        rest.extend_from_slice(&state[s + l..]);
                        let at = dest.min(rest.len());
                        let mut cand = Vec::with_capacity(state.len());
                        cand.extend_from_slice(&rest[..at]);
                        cand.extend_from_slice(block);
                        cand.extend_from_slice(&rest[at..]);
                        if seen.insert(cand.clone()) {
                            best = best.min(shifts + levenshtein(&cand, &reference));
                            next.push(cand);
                        }
                    }
                }
            }
        }
        frontier = next;
    }
    best
}

/// Scores one emitted sequence by teacher-forcing the full (non-incremental)
/// decoder pass: feed `[CLS]` plus all but the last emitted token, then sum
/// the log-probability each logits row assigns to the corresponding token.
fn sequence_logp<S: Scalar>(
    model: &Model<S>,
    enc: &Tensor<S>,
    seq: &[usize],
    vocab: &Vocab,
) -> f64 {
    let mut input = Vec::with_capacity(seq.len());
    input.push(vocab.cls_id());
    input.extend_from_slice(&seq[..seq.len() - 1]);
    let segments = vec![Segment::B; input.len()];
    let positions: Vec<usize> = (0..input.len()).collect();
    let logits = model
        .decode_logits_values(enc, &input, &segments, &positions)
        .expect("oracle decode failed");
    let mut cum = 0.0;
    for (i, &tok) in seq.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).iter().map(|&x| x.as_f64()).collect();
        let mut logp = vec![0.0; row.len()];
        ops::log_softmax_row(&row, &mut logp);
        cum += logp[tok];
    }
    cum
}

/// Calls `f` on every sequence of `len` draws from `pool`, in counting order.
fn for_each_tuple(pool: &[usize], len: usize, f: &mut dyn FnMut(&[usize])) {
    let mut idx = vec![0usize; len];
    let mut seq = vec![0usize; len];
    loop {
        for (s, &i) in seq.iter_mut().zip(&idx) {
            *s = pool[i];
        }
        f(&seq);
        let mut k = len;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < pool.len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Brute-force best decode: enumerates every emittable sequence up to
/// `max_len` tokens and returns the one with the highest length-normalized
/// log-probability (ties go to the lexicographically smaller sequence).
///
/// Legal sequences mirror what decoding can emit: non-reserved tokens with a
/// final separator, or exactly `max_len` non-reserved tokens with none. The
/// scoring path is the batch decoder, not the incremental one, so the two
/// sides of any comparison stay independent.
pub fn exhaustive_best_decode<S: Scalar>(
    model: &Model<S>,
    enc: &Tensor<S>,
    vocab: &Vocab,
    max_len: usize,
) -> (Vec<usize>, f64) {
    assert!(max_len > 0, "max_len must be positive");
    let eligible: Vec<usize> = (0..vocab.len())
        .filter(|&t| !vocab.is_reserved_id(t))
        .collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut consider = |seq: Vec<usize>| {
        let norm = sequence_logp(model, enc, &seq, vocab) / seq.len() as f64;
        let better = match &best {
            None => true,
            Some((toks, bn)) => norm > *bn || (norm == *bn && seq < *toks),
        };
        if better {
            best = Some((seq, norm));
        }
    };
    for body_len in 0..max_len {
        for_each_tuple(&eligible, body_len, &mut |body| {
            let mut seq = body.to_vec();
            seq.push(vocab.sep_id());
            consider(seq);
        });
    }
    for_each_tuple(&eligible, max_len, &mut |body| consider(body.to_vec()));
    best.expect("no sequence considered")
}
