//! Toy data generation, tiny-corpus parsing, vocabulary construction,
//! and batch assembly.
//!
//! Tokenization is whitespace-only. Vocabulary ids 0–3 are reserved for
//! PAD/UNK/BOS/EOS. Batches are length-bucketed groups of unpadded
//! sentence pairs under a token budget.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::SentencePair;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Display forms of the reserved ids.
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

// ── vocabulary ───────────────────────────────────────────────────────

/// Token ↔ id bijection with dense ids and fixed reserved slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Build from non-reserved tokens in final id order (ids start at 4).
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Vocabulary {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    /// Id of a token, or [`UNK`] when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Whitespace-tokenize and map to ids.
    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-join the tokens of the given ids (reserved ids included
    /// verbatim).
    pub fn decode(&self, ids: &[usize]) -> String {
        let parts: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        parts.join(" ")
    }

    /// Serialize the non-reserved tokens, one per line (line number =
    /// id − 4).
    pub fn to_lines(&self) -> String {
        self.tokens[4..].join("\n")
    }

    pub fn from_lines(text: &str) -> Vocabulary {
        Vocabulary::from_tokens(text.lines().map(|l| l.to_string()))
    }
}

/// Frequency-ranked vocabulary over a pair list; ties break
/// lexicographically; at most `max_size` ids total (reserved included).
pub fn build_vocab(pairs: &[(String, String)], max_size: usize) -> Vocabulary {
    let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
    for (src, tgt) in pairs {
        for tok in src.split_whitespace().chain(tgt.split_whitespace()) {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let budget = max_size.saturating_sub(4);
    Vocabulary::from_tokens(ranked.into_iter().take(budget).map(|(t, _)| t.to_string()))
}

// ── corpus formats ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CorpusError {
    /// A line without a tab separator; `line` is 1-based.
    MissingTab { line: usize },
    EmptySide { line: usize },
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusError::MissingTab { line } => {
                write!(f, "line {line}: expected tab-separated source and target")
            }
            CorpusError::EmptySide { line } => {
                write!(f, "line {line}: empty source or target side")
            }
        }
    }
}

/// Parse TSV text: one pair per line, tab-separated, whitespace-tokenized.
/// Blank lines are skipped.
pub fn parse_tsv(text: &str) -> Result<Vec<(String, String)>, CorpusError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let (src, tgt) = raw.split_once('\t').ok_or(CorpusError::MissingTab { line: i + 1 })?;
        if src.split_whitespace().next().is_none() || tgt.split_whitespace().next().is_none() {
            return Err(CorpusError::EmptySide { line: i + 1 });
        }
        pairs.push((src.trim().to_string(), tgt.trim().to_string()));
    }
    Ok(pairs)
}

// ── toy tasks ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyTask {
    Copy,
    Reverse,
    Sort,
}

impl ToyTask {
    pub fn parse(s: &str) -> Option<ToyTask> {
        match s {
            "copy" => Some(ToyTask::Copy),
            "reverse" => Some(ToyTask::Reverse),
            "sort" => Some(ToyTask::Sort),
            _ => None,
        }
    }
}

impl fmt::Display for ToyTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyTask::Copy => "copy",
            ToyTask::Reverse => "reverse",
            ToyTask::Sort => "sort",
        })
    }
}

/// Deterministic paired sequences for a toy task. `vocab_size` counts
/// the 4 reserved ids, so the payload alphabet is the numerals
/// `0 .. vocab_size−4`; lengths are uniform in `len_range` (inclusive).
pub fn gen_toy(
    task: ToyTask,
    vocab_size: usize,
    len_range: (usize, usize),
    count: usize,
    seed: u64,
) -> Vec<(String, String)> {
    assert!(vocab_size > 4, "no payload symbols");
    assert!(len_range.0 >= 1 && len_range.0 <= len_range.1);
    let symbols = vocab_size - 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(len_range.0..=len_range.1);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..symbols)).collect();
            let mut tgt = src.clone();
            match task {
                ToyTask::Copy => {}
                ToyTask::Reverse => tgt.reverse(),
                ToyTask::Sort => tgt.sort_unstable(),
            }
            let join = |v: &[usize]| {
                let parts: Vec<String> = v.iter().map(|n| format!("{n}")).collect();
                parts.join(" ")
            };
            (join(&src), join(&tgt))
        })
        .collect()
}

// ── batching ─────────────────────────────────────────────────────────

/// A group of unpadded sentence pairs under a shared token budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub pairs: Vec<SentencePair>,
    pub src_tokens: usize,
    pub tgt_tokens: usize,
}

/// Encode string pairs with a vocabulary.
pub fn encode_pairs(pairs: &[(String, String)], vocab: &Vocabulary) -> Vec<SentencePair> {
    pairs
        .iter()
        .map(|(s, t)| SentencePair { src: vocab.encode(s), tgt: vocab.encode(t) })
        .collect()
}

/// Length-bucketed batches: pairs are grouped by source-length buckets of
/// width 4, shuffled within an epoch by `seed`, and greedily packed so
/// that `max(src tokens, tgt tokens) ≤ tokens_per_batch` (single oversize
/// pairs still get their own batch). The union of all batches equals the
/// input multiset.
pub fn make_batches(pairs: &[SentencePair], tokens_per_batch: usize, seed: u64) -> Vec<Batch> {
    assert!(tokens_per_batch > 0);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        buckets.entry(p.src.len() / 4).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    let mut current = Batch { pairs: Vec::new(), src_tokens: 0, tgt_tokens: 0 };
    for idx in buckets.values_mut() {
        // Fisher-Yates within the bucket
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        for &i in idx.iter() {
            let p = &pairs[i];
            let s = current.src_tokens + p.src.len();
            let t = current.tgt_tokens + p.tgt.len();
            if !current.pairs.is_empty() && s.max(t) > tokens_per_batch {
                batches.push(core::mem::replace(
                    &mut current,
                    Batch { pairs: Vec::new(), src_tokens: 0, tgt_tokens: 0 },
                ));
            }
            current.src_tokens += p.src.len();
            current.tgt_tokens += p.tgt.len();
            current.pairs.push(p.clone());
        }
    }
    if !current.pairs.is_empty() {
        batches.push(current);
    }
    // shuffle batch order for the epoch
    for i in (1..batches.len()).rev() {
        batches.swap(i, rng.gen_range(0..=i));
    }
    batches
}
