//! Vocabulary, whitespace tokenization, MLM masking and batching.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supernet::MlmBatch;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token ids below this are specials and are never masked or sampled.
pub const FIRST_REGULAR_ID: usize = SPECIALS.len();

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// The `vocab_size - 5` most frequent whitespace tokens of `text`
    /// (ties broken lexicographically) after the five specials.
    pub fn build(text: &str, vocab_size: usize) -> Result<Self> {
        if vocab_size <= FIRST_REGULAR_ID {
            return Err(Error::Config(format!(
                "vocab size {vocab_size} leaves no room beyond the {} specials",
                FIRST_REGULAR_ID
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for tok in text.split_whitespace() {
            if !SPECIALS.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("corpus has no tokens".into()));
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(ranked.into_iter().map(|(t, _)| t))
            .take(vocab_size)
            .map(str::to_string)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Parses the one-token-per-line file format.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() <= FIRST_REGULAR_ID || tokens[..FIRST_REGULAR_ID] != SPECIALS {
            return Err(Error::Data(format!(
                "vocab must start with the specials {SPECIALS:?} and hold at least one more token"
            )));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Data("vocab has duplicate tokens".into()));
        }
        if let Some(bad) = vocab.tokens.iter().find(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(Error::Data(format!("vocab token {bad:?} is empty or has whitespace")));
        }
        Ok(vocab)
    }

    /// One token per line, line number = id, trailing newline.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }
}

/// Tokenized documents, one per non-empty input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    docs: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn from_text(text: &str, vocab: &Vocab) -> Self {
        Corpus {
            docs: text
                .lines()
                .map(|l| vocab.encode(l))
                .filter(|d| !d.is_empty())
                .collect(),
        }
    }

    pub fn docs(&self) -> &[Vec<usize>] {
        &self.docs
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    /// Cuts the document stream (each document followed by `[SEP]`) into
    /// windows of `seq_len - 1` tokens, each prefixed with `[CLS]`. A trailing
    /// partial window is dropped, so no padding is ever needed.
    pub fn sequences(&self, seq_len: usize) -> Result<Vec<Vec<usize>>> {
        if seq_len < 2 {
            return Err(Error::Config("sequence length must be at least 2".into()));
        }
        let body = seq_len - 1;
        let mut out = Vec::new();
        let mut cur = vec![CLS_ID];
        for tok in self.docs.iter().flat_map(|d| d.iter().copied().chain([SEP_ID])) {
            cur.push(tok);
            if cur.len() == body + 1 {
                out.push(std::mem::replace(&mut cur, vec![CLS_ID]));
            }
        }
        if out.is_empty() {
            return Err(Error::Data(format!(
                "corpus of {} tokens is shorter than one sequence of {seq_len}",
                self.num_tokens()
            )));
        }
        Ok(out)
    }

    /// Deterministic split: every `k`-th document (by position) is held out.
    pub fn split_every(&self, k: usize) -> (Corpus, Corpus) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, d) in self.docs.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                held.push(d.clone());
            } else {
                train.push(d.clone());
            }
        }
        (Corpus { docs: train }, Corpus { docs: held })
    }
}

/// BERT-style masking probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingPolicy {
    pub mask_prob: f64,
    pub mask_token_prob: f64,
    pub random_token_prob: f64,
    pub keep_prob: f64,
    pub mask_token_id: usize,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            mask_prob: 0.15,
            mask_token_prob: 0.8,
            random_token_prob: 0.1,
            keep_prob: 0.1,
            mask_token_id: MASK_ID,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.mask_token_prob, self.random_token_prob, self.keep_prob];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("masking sub-probabilities must sum to 1".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::Config(format!("mask_prob {} outside (0, 1]", self.mask_prob)));
        }
        Ok(())
    }
}

/// Masks `batch_size` sequences of `seq_len` tokens (flattened row-major).
///
/// Each non-special position is selected with `mask_prob`; a selected
/// position becomes `[MASK]`, a random regular token, or stays, and its
/// label is the original token.
pub fn mask_batch<R: Rng + ?Sized>(
    tokens: &[usize],
    batch_size: usize,
    seq_len: usize,
    vocab_size: usize,
    policy: &MaskingPolicy,
    rng: &mut R,
) -> Result<MlmBatch> {
    policy.validate()?;
    if tokens.is_empty() || tokens.len() != batch_size * seq_len {
        return Err(Error::Data(format!(
            "{} tokens do not form a {batch_size}x{seq_len} batch",
            tokens.len()
        )));
    }
    if vocab_size <= FIRST_REGULAR_ID {
        return Err(Error::Config("vocab has no regular tokens".into()));
    }
    let mut input_ids = tokens.to_vec();
    let mut labels = vec![None; tokens.len()];
    for (i, &tok) in tokens.iter().enumerate() {
        if tok < FIRST_REGULAR_ID || rng.random::<f64>() >= policy.mask_prob {
            continue;
        }
        labels[i] = Some(tok);
        let r: f64 = rng.random();
        if r < policy.mask_token_prob {
            input_ids[i] = policy.mask_token_id;
        } else if r < policy.mask_token_prob + policy.random_token_prob {
            input_ids[i] = rng.random_range(FIRST_REGULAR_ID..vocab_size);
        }
    }
    if labels.iter().all(Option::is_none) {
        return Err(Error::EmptyBatch("no position was selected for masking".into()));
    }
    Ok(MlmBatch {
        batch_size,
        seq_len,
        input_ids,
        labels,
    })
}

/// Endless stream of training batches: sequences are reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct BatchStream {
    sequences: Vec<Vec<usize>>,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(sequences: Vec<Vec<usize>>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if sequences.len() < batch_size {
            return Err(Error::Data(format!(
                "{} sequences cannot fill one batch of {batch_size}",
                sequences.len()
            )));
        }
        let n = sequences.len();
        Ok(BatchStream {
            sequences,
            batch_size,
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Tokens of the next batch, flattened row-major.
    pub fn next_tokens(&mut self) -> Vec<usize> {
        let mut out = Vec::new();
        for _ in 0..self.batch_size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.extend_from_slice(&self.sequences[self.order[self.pos]]);
            self.pos += 1;
        }
        out
    }
}

/// Fixed evaluation batches masked once with `seed`. Batches whose random
/// draw selects nothing are skipped.
pub fn eval_batches(
    sequences: &[Vec<usize>],
    batch_size: usize,
    vocab_size: usize,
    policy: &MaskingPolicy,
    seed: u64,
) -> Result<Vec<MlmBatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for chunk in sequences.chunks(batch_size.max(1)) {
        let seq_len = chunk[0].len();
        let flat = chunk.concat();
        match mask_batch(&flat, chunk.len(), seq_len, vocab_size, policy, &mut rng) {
            Ok(b) => out.push(b),
            Err(Error::EmptyBatch(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::Data("evaluation set yields no masked batch".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_with_lexicographic_ties() {
        let v = Vocab::build("a a b", 7).unwrap();
        assert_eq!(&v.tokens()[5..], &["a", "b"]);
        let v = Vocab::build("c b b a c", 7).unwrap();
        assert_eq!(&v.tokens()[5..], &["b", "c"]);
        assert_eq!(v.id("zzz"), UNK_ID);
    }

    #[test]
    fn vocab_size_needs_room() {
        assert!(matches!(Vocab::build("a", 5), Err(Error::Config(_))));
        assert!(matches!(Vocab::build("  \n", 10), Err(Error::Data(_))));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::build("x y y z", 10).unwrap();
        let text = v.to_file_string();
        assert_eq!(Vocab::parse(&text).unwrap(), v);
        assert!(Vocab::parse("[PAD]\nfoo\n").is_err());
    }

    #[test]
    fn sequences_are_cls_prefixed_windows() {
        let v = Vocab::build("a b c d", 20).unwrap();
        let c = Corpus::from_text("a b c\n\nd a\n", &v);
        let seqs = c.sequences(3).unwrap();
        // stream: a b c SEP d a SEP -> windows of 2
        assert_eq!(seqs.len(), 3);
        assert!(seqs.iter().all(|s| s.len() == 3 && s[0] == CLS_ID));
        assert_eq!(seqs[1][2], SEP_ID);
        assert_eq!(seqs[2][1], v.id("d"));
        assert!(matches!(c.sequences(64), Err(Error::Data(_))));
    }

    #[test]
    fn all_special_input_is_empty_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MaskingPolicy::default();
        let err = mask_batch(&[CLS_ID, SEP_ID, PAD_ID], 1, 3, 10, &p, &mut rng).unwrap_err();
        assert!(matches!(err, Error::EmptyBatch(_)));
    }

    #[test]
    fn tiny_mask_prob_is_empty_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MaskingPolicy {
            mask_prob: 1e-12,
            ..MaskingPolicy::default()
        };
        let err = mask_batch(&[5, 6, 7, 8], 1, 4, 10, &p, &mut rng).unwrap_err();
        assert!(matches!(err, Error::EmptyBatch(_)));
    }

    #[test]
    fn full_masking_replaces_every_regular_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MaskingPolicy {
            mask_prob: 1.0,
            mask_token_prob: 1.0,
            random_token_prob: 0.0,
            keep_prob: 0.0,
            mask_token_id: MASK_ID,
        };
        let toks = [CLS_ID, 5, 9, 7, SEP_ID, 6];
        let b = mask_batch(&toks, 1, 6, 10, &p, &mut rng).unwrap();
        assert_eq!(b.input_ids, vec![CLS_ID, MASK_ID, MASK_ID, MASK_ID, SEP_ID, MASK_ID]);
        assert_eq!(b.labels[0], None);
        assert_eq!(b.labels[2], Some(9));
    }

    #[test]
    fn selected_fraction_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let toks: Vec<usize> = (0..10_000).map(|i| 5 + i % 50).collect();
        let b = mask_batch(&toks, 100, 100, 60, &MaskingPolicy::default(), &mut rng).unwrap();
        let frac = b.masked_count() as f64 / 10_000.0;
        assert!((0.13..=0.17).contains(&frac), "{frac}");
    }

    #[test]
    fn bad_policy_rejected() {
        let p = MaskingPolicy {
            keep_prob: 0.3,
            ..MaskingPolicy::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn batch_stream_covers_each_epoch() {
        let seqs: Vec<Vec<usize>> = (0..6).map(|i| vec![i]).collect();
        let mut s = BatchStream::new(seqs, 2, 1).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_tokens()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
        assert!(BatchStream::new(vec![vec![1]], 2, 0).is_err());
    }
}
