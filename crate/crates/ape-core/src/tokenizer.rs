//! WordPiece vocabulary and the dual-segment input encoding.
//!
//! Inputs to the encoder concatenate a source sentence and its draft
//! translation as `[CLS] src [SEP] mt [SEP]`. The source region uses segment
//! A, everything after the first `[SEP]` uses segment B, and position ids
//! restart from zero at the start of the second region so each sentence
//! carries its own positional frame.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

/// The five ids every vocabulary must define.
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Words longer than this many characters become `[UNK]` outright.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("reading vocabulary: {0}")]
    Io(String),
    #[error("vocabulary line {line}: duplicate token {token:?} (first at line {first})")]
    DuplicateToken {
        token: String,
        first: usize,
        line: usize,
    },
    #[error("vocabulary line {line} is empty")]
    EmptyToken { line: usize },
    #[error("vocabulary is missing reserved token {0}")]
    MissingReserved(String),
    #[error("source token sequence is empty")]
    EmptySource,
    #[error("sequence needs {needed} positions but the position table has {available}")]
    TooLong { needed: usize, available: usize },
    #[error("id {id} out of range for vocabulary of {size}")]
    UnknownId { id: usize, size: usize },
}

/// Token vocabulary with id = line number.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pad: usize,
    unk: usize,
    cls: usize,
    sep: usize,
    mask: usize,
}

impl Vocab {
    /// Builds a vocabulary from one token per line.
    pub fn from_lines<I, T>(lines: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (i, line) in lines.into_iter().enumerate() {
            let token: String = line.into();
            if token.is_empty() {
                return Err(TokenizerError::EmptyToken { line: i + 1 });
            }
            if let Some(&first) = index.get(&token) {
                return Err(TokenizerError::DuplicateToken {
                    token,
                    first: first + 1,
                    line: i + 1,
                });
            }
            index.insert(token.clone(), i);
            tokens.push(token);
        }
        let mut reserved_ids = [0usize; 5];
        for (slot, name) in reserved_ids.iter_mut().zip(RESERVED) {
            *slot = *index
                .get(name)
                .ok_or_else(|| TokenizerError::MissingReserved(name.to_string()))?;
        }
        let [pad, unk, cls, sep, mask] = reserved_ids;
        Ok(Self {
            tokens,
            index,
            pad,
            unk,
            cls,
            sep,
            mask,
        })
    }

    /// Reads a vocabulary file, one token per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| TokenizerError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_lines(text.lines().map(str::to_string))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str, TokenizerError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(TokenizerError::UnknownId {
                id,
                size: self.tokens.len(),
            })
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn cls_id(&self) -> usize {
        self.cls
    }

    pub fn sep_id(&self) -> usize {
        self.sep
    }

    pub fn mask_id(&self) -> usize {
        self.mask
    }

    pub fn is_reserved_id(&self, id: usize) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }

    /// Greedy longest-match-first subword split of a single word.
    ///
    /// Continuation pieces carry the `##` prefix. A word with no
    /// decomposition, or longer than [`MAX_WORD_CHARS`] characters, becomes
    /// a single `[UNK]`.
    pub fn wordpiece(&self, word: &str) -> Vec<usize> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        if chars.len() > MAX_WORD_CHARS {
            return vec![self.unk];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut piece: String = if start > 0 { "##".to_string() } else { String::new() };
                piece.extend(&chars[start..end]);
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![self.unk],
            }
        }
        pieces
    }

    /// Whitespace-splits a line and wordpieces every word.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .flat_map(|w| self.wordpiece(w))
            .collect()
    }
}

/// Which of the two input sentences a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    A,
    B,
}

impl Segment {
    pub fn index(self) -> usize {
        match self {
            Segment::A => 0,
            Segment::B => 1,
        }
    }
}

/// Encoder input: ids, segment ids, and region-reset position ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub ids: Vec<usize>,
    pub segments: Vec<Segment>,
    pub positions: Vec<usize>,
}

impl EncodedPair {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Decoder input and shifted gold sequence for one post-edited sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetEncoding {
    pub input_ids: Vec<usize>,
    pub segments: Vec<Segment>,
    pub positions: Vec<usize>,
    pub gold: Vec<usize>,
}

impl TargetEncoding {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }
}

/// Lays out `[CLS] src [SEP] mt [SEP]` with segments and reset positions.
///
/// Positions count `0..=|src|+1` over the `[CLS] src [SEP]` region, then
/// restart at `0` for the first draft-translation token and continue through
/// the final `[SEP]`. The draft may be empty; the source may not.
pub fn encode_pair(
    src: &[usize],
    mt: &[usize],
    vocab: &Vocab,
    max_positions: usize,
) -> Result<EncodedPair, TokenizerError> {
    if src.is_empty() {
        return Err(TokenizerError::EmptySource);
    }
    let a_needed = src.len() + 2; // positions 0..=|src|+1
    let b_needed = mt.len() + 1; // positions 0..=|mt|
    let needed = a_needed.max(b_needed);
    if needed > max_positions {
        return Err(TokenizerError::TooLong {
            needed,
            available: max_positions,
        });
    }
    let total = src.len() + mt.len() + 3;
    let mut ids = Vec::with_capacity(total);
    let mut segments = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);

    ids.push(vocab.cls_id());
    segments.push(Segment::A);
    positions.push(0);
    for (i, &t) in src.iter().enumerate() {
        ids.push(t);
        segments.push(Segment::A);
        positions.push(i + 1);
    }
    ids.push(vocab.sep_id());
    segments.push(Segment::A);
    positions.push(src.len() + 1);

    for (i, &t) in mt.iter().enumerate() {
        ids.push(t);
        segments.push(Segment::B);
        positions.push(i);
    }
    ids.push(vocab.sep_id());
    segments.push(Segment::B);
    positions.push(mt.len());

    Ok(EncodedPair {
        ids,
        segments,
        positions,
    })
}

/// Builds the decoder view of a post-edited sentence: input `[CLS] pe`,
/// gold `pe [SEP]`, all segment B, positions counted from zero.
pub fn encode_target(
    pe: &[usize],
    vocab: &Vocab,
    max_positions: usize,
) -> Result<TargetEncoding, TokenizerError> {
    let needed = pe.len() + 1;
    if needed > max_positions {
        return Err(TokenizerError::TooLong {
            needed,
            available: max_positions,
        });
    }
    let mut input_ids = Vec::with_capacity(pe.len() + 1);
    input_ids.push(vocab.cls_id());
    input_ids.extend_from_slice(pe);
    let mut gold = pe.to_vec();
    gold.push(vocab.sep_id());
    Ok(TargetEncoding {
        segments: vec![Segment::B; input_ids.len()],
        positions: (0..input_ids.len()).collect(),
        input_ids,
        gold,
    })
}

/// Plain text plus anything suspicious seen while producing it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detokenized {
    pub text: String,
    pub warnings: Vec<String>,
}

/// Joins subword tokens back into words.
///
/// `##` continuations merge onto the previous word, reserved tokens are
/// dropped, and a continuation with nothing before it keeps its suffix and
/// is reported as a warning.
pub fn detokenize<T: AsRef<str>>(tokens: &[T]) -> Detokenized {
    let mut words: Vec<String> = Vec::new();
    let mut warnings = Vec::new();
    for token in tokens {
        let token = token.as_ref();
        if RESERVED.contains(&token) {
            continue;
        }
        if let Some(rest) = token.strip_prefix("##") {
            match words.last_mut() {
                Some(w) => w.push_str(rest),
                None => {
                    warnings.push(format!("continuation {token:?} with no preceding word"));
                    words.push(rest.to_string());
                }
            }
        } else {
            words.push(token.to_string());
        }
    }
    Detokenized {
        text: words.join(" "),
        warnings,
    }
}

/// Maps ids to tokens and detokenizes.
pub fn detokenize_ids(ids: &[usize], vocab: &Vocab) -> Result<Detokenized, TokenizerError> {
    let tokens: Vec<&str> = ids
        .iter()
        .map(|&id| vocab.token(id))
        .collect::<Result<_, _>>()?;
    Ok(detokenize(&tokens))
}
