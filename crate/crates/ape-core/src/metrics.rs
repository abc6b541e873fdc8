//! Translation quality metrics: TER and corpus BLEU.
//!
//! TER counts word edits (substitutions, insertions, deletions) plus block
//! shifts, each shift costing one edit, normalized by reference length. The
//! shift search is greedy: among all legal shifts it repeatedly applies the
//! one that most reduces the remaining edit distance, stopping when no shift
//! reduces it. A legal shift moves a contiguous block of up to
//! [`MAX_SHIFT_LEN`] words that matches the reference exactly at its
//! destination and contains at least one currently misaligned word.

use std::collections::HashMap;

/// Longest block a single shift may move.
pub const MAX_SHIFT_LEN: usize = 10;

/// Word-level Levenshtein distance (substitution, insertion, deletion).
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let (n, m) = (hyp.len(), reference.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// One block shift: words `[start, start + len)` moved so the block sits at
/// reference position `dest`.
fn apply_shift(words: &[String], start: usize, len: usize, dest: usize) -> Vec<String> {
    let mut rest: Vec<String> = Vec::with_capacity(words.len());
    rest.extend_from_slice(&words[..start]);
    rest.extend_from_slice(&words[start + len..]);
    let insert_at = dest.min(rest.len());
    let mut out = Vec::with_capacity(words.len());
    out.extend_from_slice(&rest[..insert_at]);
    out.extend_from_slice(&words[start..start + len]);
    out.extend_from_slice(&rest[insert_at..]);
    out
}

fn misaligned(words: &[String], reference: &[String], i: usize) -> bool {
    i >= reference.len() || words[i] != reference[i]
}

/// All legal shifts of `words` toward `reference`.
fn legal_shifts(words: &[String], reference: &[String]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for start in 0..words.len() {
        let max_len = MAX_SHIFT_LEN.min(words.len() - start).min(reference.len());
        for len in 1..=max_len {
            // A block already aligned everywhere has no reason to move.
            if !(start..start + len).any(|i| misaligned(words, reference, i)) {
                continue;
            }
            let block = &words[start..start + len];
            for dest in 0..=(reference.len() - len) {
                if reference[dest..dest + len] == *block {
                    out.push((start, len, dest));
                }
            }
        }
    }
    out
}

/// Edit and shift counts for one sentence pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TerCounts {
    pub edits: usize,
    pub ref_len: usize,
}

impl TerCounts {
    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            if self.edits == 0 {
                0.0
            } else {
                self.edits as f64
            }
        } else {
            self.edits as f64 / self.ref_len as f64
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Total edits (including shifts) and reference length for one pair.
pub fn ter_counts(hyp: &str, reference: &str) -> TerCounts {
    let reference = words(reference);
    let mut current = words(hyp);
    let mut shifts = 0usize;
    let mut dist = edit_distance(&current, &reference);
    loop {
        let mut best: Option<(usize, Vec<String>)> = None;
        for (start, len, dest) in legal_shifts(&current, &reference) {
            let shifted = apply_shift(&current, start, len, dest);
            let d = edit_distance(&shifted, &reference);
            if d < dist && best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, shifted));
            }
        }
        match best {
            Some((d, shifted)) => {
                shifts += 1;
                dist = d;
                current = shifted;
            }
            None => break,
        }
    }
    TerCounts {
        edits: shifts + dist,
        ref_len: reference.len(),
    }
}

/// Sentence TER: edits over reference length.
pub fn ter(hyp: &str, reference: &str) -> f64 {
    ter_counts(hyp, reference).rate()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=(tokens.len() - n) {
            *counts.entry(&tokens[i..i + n]).or_default() += 1;
        }
    }
    counts
}

/// Corpus BLEU with up to 4-gram precision, no smoothing, expressed in
/// percent. Clipped n-gram matches and totals are summed over the corpus
/// before the geometric mean; brevity penalty uses total lengths.
pub fn bleu_corpus(pairs: &[(&str, &str)]) -> f64 {
    let tokenized: Vec<(Vec<String>, Vec<String>)> = pairs
        .iter()
        .map(|(h, r)| (words(h), words(r)))
        .collect();
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    for (hyp, reference) in &tokenized {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let hyp_grams = ngram_counts(hyp, n);
            let ref_grams = ngram_counts(reference, n);
            for (gram, &count) in &hyp_grams {
                total[n - 1] += count;
                matched[n - 1] += count.min(ref_grams.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_precision = 0.0f64;
    for n in 0..4 {
        if matched[n] == 0 || total[n] == 0 {
            return 0.0;
        }
        log_precision += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * (log_precision / 4.0).exp()
}

/// Sentence BLEU (a corpus of one pair).
pub fn bleu(hyp: &str, reference: &str) -> f64 {
    bleu_corpus(&[(hyp, reference)])
}

/// Corpus-level scores in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusScores {
    pub ter: f64,
    pub bleu: f64,
}

impl CorpusScores {
    /// Two-decimal `TER<TAB>BLEU` report line.
    pub fn report(&self) -> String {
        format!("{:.2}\t{:.2}", self.ter, self.bleu)
    }
}

/// Scores a corpus: TER aggregates edit and reference-length totals before
/// dividing; BLEU is corpus BLEU.
pub fn score_corpus(hyps: &[String], refs: &[String]) -> CorpusScores {
    assert_eq!(hyps.len(), refs.len(), "one hypothesis per reference");
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        let c = ter_counts(h, r);
        edits += c.edits;
        ref_len += c.ref_len;
    }
    let ter = if ref_len == 0 {
        if edits == 0 {
            0.0
        } else {
            100.0
        }
    } else {
        100.0 * edits as f64 / ref_len as f64
    };
    let pairs: Vec<(&str, &str)> = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| (h.as_str(), r.as_str()))
        .collect();
    CorpusScores {
        ter,
        bleu: bleu_corpus(&pairs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::exhaustive_ter_edits;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edit_distance_handles_all_three_operations() {
        let h: Vec<&str> = vec!["a", "b", "c"];
        assert_eq!(edit_distance(&h, &["a", "b", "c"]), 0);
        assert_eq!(edit_distance(&h, &["a", "x", "c"]), 1);
        assert_eq!(edit_distance(&h, &["a", "b"]), 1);
        assert_eq!(edit_distance(&h, &["a", "b", "c", "d"]), 1);
        assert_eq!(edit_distance::<&str>(&[], &[]), 0);
        assert_eq!(edit_distance(&h, &[]), 3);
    }

    #[test]
    fn single_substitution_scores_a_quarter() {
        assert_eq!(ter("a b c d", "a x c d"), 0.25);
    }

    #[test]
    fn one_shift_beats_two_edits() {
        // Moving "c" to the back turns 2 edits into 1 shift + 0 edits.
        let t = ter("c a b", "a b c");
        assert!((t - 1.0 / 3.0).abs() < 1e-12, "{t}");
    }

    #[test]
    fn identical_sentences_have_zero_ter() {
        assert_eq!(ter("the quick fox", "the quick fox"), 0.0);
        assert_eq!(ter("", ""), 0.0);
    }

    #[test]
    fn empty_against_nonempty_counts_every_word() {
        assert_eq!(ter("", "a b"), 1.0);
        assert_eq!(ter_counts("a b", "").edits, 2);
    }

    #[test]
    fn shifts_only_move_blocks_that_match_the_reference() {
        // "b a" vs "a b": shifting either single word fixes both positions.
        let c = ter_counts("b a", "a b");
        assert_eq!(c.edits, 1);
        // No block of "x y" appears in "a b", so only plain edits count.
        assert_eq!(ter_counts("x y", "a b").edits, 2);
    }

    #[test]
    fn shift_length_cap_forces_a_second_shift() {
        // Swapping two 10-word halves fits in one shift; two 11-word halves
        // exceed the cap and need two.
        let halves = |n: usize| -> (String, String) {
            let x: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
            let y: Vec<String> = (0..n).map(|i| format!("y{i}")).collect();
            (
                [x.clone(), y.clone()].concat().join(" "),
                [y, x].concat().join(" "),
            )
        };
        let (hyp10, ref10) = halves(10);
        assert_eq!(ter_counts(&hyp10, &ref10).edits, 1);
        let (hyp11, ref11) = halves(11);
        assert_eq!(ter_counts(&hyp11, &ref11).edits, 2);
    }

    #[test]
    fn greedy_matches_exhaustive_on_most_small_cases() {
        let lexicon = ["a", "b", "c", "d"];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut agree = 0;
        let cases = 200;
        for _ in 0..cases {
            let len_h = rng.gen_range(0..=6);
            let len_r = rng.gen_range(1..=6);
            let hyp: Vec<&str> = (0..len_h).map(|_| lexicon[rng.gen_range(0..4)]).collect();
            let reference: Vec<&str> =
                (0..len_r).map(|_| lexicon[rng.gen_range(0..4)]).collect();
            let hyp = hyp.join(" ");
            let reference = reference.join(" ");
            let greedy = ter_counts(&hyp, &reference).edits;
            let exact = exhaustive_ter_edits(&hyp, &reference);
            assert!(greedy >= exact, "greedy undercounts {hyp:?} vs {reference:?}");
            if greedy == exact {
                agree += 1;
            }
        }
        assert!(
            agree * 10 >= cases * 9,
            "greedy agreed on only {agree}/{cases} cases"
        );
    }

    #[test]
    fn repeated_words_get_clipped_in_bleu() {
        assert_eq!(bleu("the the the", "the cat"), 0.0);
    }

    #[test]
    fn perfect_match_scores_one_hundred() {
        let b = bleu("the cat sat on the mat", "the cat sat on the mat");
        assert!((b - 100.0).abs() < 1e-9, "{b}");
    }

    #[test]
    fn bleu_brevity_penalty_applies_only_to_short_hypotheses() {
        // 4 of 5 reference words, all n-grams matching a prefix.
        let short = bleu_corpus(&[("a b c d", "a b c d e")]);
        let exact = bleu_corpus(&[("a b c d e", "a b c d e")]);
        assert!(short < exact);
        let expected_bp = (1.0f64 - 5.0 / 4.0).exp();
        let p4 = (1.0f64 * (3.0 / 3.0) * (2.0 / 2.0) * (1.0 / 1.0)).powf(0.25);
        assert!((short - 100.0 * expected_bp * p4).abs() < 1e-9);
    }

    #[test]
    fn corpus_ter_divides_total_edits_by_total_reference_length() {
        // (1 edit, 4 ref words) + (0 edits, 6 ref words) => 10.00.
        let hyps = vec!["a x c d".to_string(), "e f g h i j".to_string()];
        let refs = vec!["a b c d".to_string(), "e f g h i j".to_string()];
        let scores = score_corpus(&hyps, &refs);
        assert_eq!(scores.report().split('\t').next().unwrap(), "10.00");
    }

    #[test]
    fn report_is_tab_separated_with_two_decimals() {
        let hyps = vec!["a b c d".to_string()];
        let refs = vec!["a b c d".to_string()];
        let line = score_corpus(&hyps, &refs).report();
        assert_eq!(line, "0.00\t100.00");
    }

    #[test]
    fn hypotheses_shorter_than_four_words_score_zero_bleu() {
        // No 4-grams exist, and there is no smoothing to paper over that.
        assert_eq!(bleu("a b", "a b"), 0.0);
    }
}
