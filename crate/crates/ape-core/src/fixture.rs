//! A tiny synthetic post-editing corpus for smoke tests and demos.
//!
//! Each draft sentence is a short string of filler words with one or two
//! scripted mistakes planted in it: the word `kot` (which the editor must
//! rewrite to `cat`) and the word `void` (which the editor must delete).
//! The post-edit applies exactly those rules and the source sentence mirrors
//! the post-edit in a disjoint `s`-prefixed vocabulary. A model that learns
//! to copy the draft while fixing the planted mistakes solves the corpus.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::Triplet;
use crate::tokenizer::{Vocab, RESERVED};

/// Words that pass through editing unchanged.
const PLAIN: [&str; 12] = [
    "red", "blue", "green", "stone", "river", "cloud", "light", "dark", "wind", "leaf", "sand",
    "snow",
];

/// Draft word the editor must rewrite.
const SUBST_FROM: &str = "kot";
/// Its corrected form.
const SUBST_TO: &str = "cat";
/// Draft word the editor must delete.
const DELETE: &str = "void";

/// Applies the scripted corrections to a draft sentence.
pub fn scripted_edit(mt: &str) -> String {
    mt.split_whitespace()
        .filter(|w| *w != DELETE)
        .map(|w| if w == SUBST_FROM { SUBST_TO } else { w })
        .collect::<Vec<_>>()
        .join(" ")
}

fn mirror(pe: &str) -> String {
    pe.split_whitespace()
        .map(|w| format!("s{w}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Every token the corpus can produce, one line per id.
pub fn vocab_lines() -> Vec<String> {
    let mut lines: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    lines.extend(PLAIN.iter().map(|s| s.to_string()));
    lines.extend([SUBST_FROM, SUBST_TO, DELETE].map(str::to_string));
    lines.extend(PLAIN.iter().map(|s| format!("s{s}")));
    lines.push(format!("s{SUBST_TO}"));
    lines
}

/// The fixture vocabulary.
pub fn vocab() -> Vocab {
    Vocab::from_lines(vocab_lines()).expect("fixture vocabulary is well formed")
}

/// Generates `n` deterministic copy-edit triplets.
pub fn copy_edit_corpus(n: usize, seed: u64) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let base_len = rng.gen_range(3..=6);
            let mut words: Vec<&str> = (0..base_len)
                .map(|_| PLAIN[rng.gen_range(0..PLAIN.len())])
                .collect();
            let edits = rng.gen_range(1..=2);
            for _ in 0..edits {
                let trigger = if rng.gen_bool(0.5) { SUBST_FROM } else { DELETE };
                let at = rng.gen_range(0..=words.len());
                words.insert(at, trigger);
            }
            let mt = words.join(" ");
            let pe = scripted_edit(&mt);
            Triplet {
                src: mirror(&pe),
                mt,
                pe,
            }
        })
        .collect()
}
