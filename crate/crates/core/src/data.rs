//! Synthetic task generation, vocabulary handling, and batching by sentence
//! count or by padded-token budget.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

/// Token ↔ id bijection with fixed reserved ids 0=pad, 1=bos, 2=eos, 3=unk.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Synthetic vocabulary of the given total size; content tokens are
    /// named "w4", "w5", ….
    pub fn synthetic(size: usize) -> Result<Vocabulary> {
        if size <= RESERVED {
            return Err(Error::ConfigInvalid(format!(
                "vocab size {size} leaves no room for content tokens"
            )));
        }
        let mut tokens = vec!["<pad>".into(), "<bos>".into(), "<eos>".into(), "<unk>".into()];
        tokens.extend((RESERVED..size).map(|i| format!("w{i}")));
        Ok(Vocabulary { tokens })
    }

    /// Vocabulary built from corpus tokens (sorted, deduplicated).
    pub fn from_tokens(mut toks: Vec<String>) -> Vocabulary {
        toks.sort();
        toks.dedup();
        let mut tokens = vec![
            "<pad>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
            "<unk>".to_string(),
        ];
        tokens.extend(toks);
        Vocabulary { tokens }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens.iter().position(|t| t == token).unwrap_or(UNK)
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode_ids(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).to_string())
            .collect()
    }
}

/// One source/target pair; the target always ends with EOS.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SentencePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl SentencePair {
    pub fn new(src: Vec<usize>, mut tgt_content: Vec<usize>) -> SentencePair {
        tgt_content.push(EOS);
        SentencePair { src, tgt: tgt_content }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Fixed invertible token substitution composed with reversal; forces a
    /// genuine encoder-decoder mapping rather than positional copying.
    ToyTranslation,
}

/// Deterministic synthetic corpus: `count` pairs with source lengths drawn
/// uniformly from `len_range`, content tokens uniform over the vocabulary's
/// non-reserved ids.
pub fn gen_task(
    kind: TaskKind,
    count: usize,
    len_range: (usize, usize),
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<SentencePair>> {
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi || vocab_size <= RESERVED {
        return Err(Error::ConfigInvalid(format!(
            "bad task spec: lengths {lo}..={hi}, vocab {vocab_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let substitution = content_permutation(vocab_size, seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(lo..=hi);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(RESERVED..vocab_size)).collect();
        let tgt = match kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().cloned().collect(),
            TaskKind::ToyTranslation => {
                src.iter().rev().map(|&t| substitution[t - RESERVED]).collect()
            }
        };
        pairs.push(SentencePair::new(src, tgt));
    }
    Ok(pairs)
}

/// Seed-derived permutation of the content ids.
fn content_permutation(vocab_size: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (RESERVED..vocab_size).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0b5e);
    perm.shuffle(&mut rng);
    perm
}

/// Padded token matrices for one batch. Padding only follows each sequence;
/// masks are true exactly on non-pad positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[SentencePair]) -> Result<Batch> {
        if pairs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if pairs.iter().any(|p| p.src.is_empty()) {
            return Err(Error::EmptySequence);
        }
        let max_src = pairs.iter().map(|p| p.src.len()).max().unwrap();
        let max_tgt = pairs.iter().map(|p| p.tgt.len()).max().unwrap();
        let mut src = Vec::with_capacity(pairs.len());
        let mut tgt = Vec::with_capacity(pairs.len());
        for p in pairs {
            let mut s = p.src.clone();
            s.resize(max_src, PAD);
            src.push(s);
            let mut t = p.tgt.clone();
            t.resize(max_tgt, PAD);
            tgt.push(t);
        }
        Ok(Batch {
            src,
            tgt,
            src_lens: pairs.iter().map(|p| p.src.len()).collect(),
            tgt_lens: pairs.iter().map(|p| p.tgt.len()).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.src.len()
    }

    pub fn max_src_len(&self) -> usize {
        self.src.first().map_or(0, Vec::len)
    }

    pub fn max_tgt_len(&self) -> usize {
        self.tgt.first().map_or(0, Vec::len)
    }

    /// Total non-pad target tokens (the loss-bearing positions).
    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }

    pub fn src_mask(&self) -> Vec<Vec<bool>> {
        self.src_lens.iter().map(|&l| mask_row(l, self.max_src_len())).collect()
    }

    pub fn tgt_mask(&self) -> Vec<Vec<bool>> {
        self.tgt_lens.iter().map(|&l| mask_row(l, self.max_tgt_len())).collect()
    }
}

fn mask_row(len: usize, padded: usize) -> Vec<bool> {
    (0..padded).map(|i| i < len).collect()
}

/// Fixed-size batches, in input order; the last batch may be short.
pub fn batch_by_sentences(pairs: &[SentencePair], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::ConfigInvalid("batch size 0".into()));
    }
    pairs.chunks(batch_size).map(Batch::from_pairs).collect()
}

/// Token-budget batches: pairs are length-sorted into buckets and each batch
/// greedily filled while the padded source and padded target token counts
/// both stay within `budget`.
pub fn batch_by_tokens(pairs: &[SentencePair], budget: usize) -> Result<Vec<Batch>> {
    if budget == 0 {
        return Err(Error::ConfigInvalid("token budget 0".into()));
    }
    for p in pairs {
        let need = p.src.len().max(p.tgt.len());
        if need > budget {
            return Err(Error::SentenceExceedsBudget { len: need, budget });
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].src.len(), pairs[i].tgt.len(), i));

    let mut batches = Vec::new();
    let mut current: Vec<SentencePair> = Vec::new();
    let (mut max_src, mut max_tgt) = (0usize, 0usize);
    for &i in &order {
        let p = &pairs[i];
        let new_src = max_src.max(p.src.len());
        let new_tgt = max_tgt.max(p.tgt.len());
        let n = current.len() + 1;
        if !current.is_empty() && (n * new_src > budget || n * new_tgt > budget) {
            batches.push(Batch::from_pairs(&current)?);
            current.clear();
            max_src = 0;
            max_tgt = 0;
        }
        max_src = max_src.max(p.src.len());
        max_tgt = max_tgt.max(p.tgt.len());
        current.push(p.clone());
    }
    if !current.is_empty() {
        batches.push(Batch::from_pairs(&current)?);
    }
    Ok(batches)
}

/// Deterministic per-epoch shuffle.
pub fn shuffle_pairs(pairs: &mut [SentencePair], seed: u64, epoch: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch));
    pairs.shuffle(&mut rng);
}

/// Load a parallel corpus from two whitespace-tokenized text files.
pub fn load_parallel_corpus(
    vocab: &Vocabulary,
    src_lines: &str,
    tgt_lines: &str,
) -> Result<Vec<SentencePair>> {
    let src: Vec<&str> = src_lines.lines().collect();
    let tgt: Vec<&str> = tgt_lines.lines().collect();
    if src.is_empty() || src.len() != tgt.len() {
        return Err(Error::ConfigInvalid(format!(
            "parallel corpus sides have {} and {} lines",
            src.len(),
            tgt.len()
        )));
    }
    Ok(src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| SentencePair::new(vocab.encode_line(s), vocab.encode_line(t)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_and_copy_definitions() {
        let pairs = gen_task(TaskKind::Reverse, 20, (3, 3), 16, 7).unwrap();
        for p in &pairs {
            let mut rev: Vec<usize> = p.src.iter().rev().cloned().collect();
            rev.push(EOS);
            assert_eq!(p.tgt, rev);
        }
        let pairs = gen_task(TaskKind::Copy, 20, (2, 5), 16, 7).unwrap();
        for p in &pairs {
            let mut cp = p.src.clone();
            cp.push(EOS);
            assert_eq!(p.tgt, cp);
        }
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let a = gen_task(TaskKind::ToyTranslation, 50, (4, 12), 16, 99).unwrap();
        let b = gen_task(TaskKind::ToyTranslation, 50, (4, 12), 16, 99).unwrap();
        assert_eq!(a, b);
        let c = gen_task(TaskKind::ToyTranslation, 50, (4, 12), 16, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn toy_translation_is_an_invertible_substitution_of_the_reverse() {
        let pairs = gen_task(TaskKind::ToyTranslation, 30, (4, 8), 16, 5).unwrap();
        let perm = content_permutation(16, 5);
        // bijective over content ids
        let mut seen = perm.clone();
        seen.sort();
        assert_eq!(seen, (RESERVED..16).collect::<Vec<_>>());
        for p in &pairs {
            for (i, &s) in p.src.iter().rev().enumerate() {
                assert_eq!(p.tgt[i], perm[s - RESERVED]);
            }
        }
    }

    #[test]
    fn sentence_batching_sizes() {
        let pairs = gen_task(TaskKind::Copy, 10, (3, 3), 16, 1).unwrap();
        let batches = batch_by_sentences(&pairs, 4).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Batch::size).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn token_batching_greedy_fill() {
        // stored target length includes EOS; content length 4 + EOS pads to 5,
        // matching the source length of 5
        let pairs: Vec<SentencePair> = (0..3)
            .map(|_| SentencePair::new(vec![4, 5, 6, 7, 8], vec![4, 5, 6, 7]))
            .collect();
        assert!(pairs.iter().all(|p| p.src.len() == 5 && p.tgt.len() == 5));
        let batches = batch_by_tokens(&pairs, 10).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Batch::size).collect();
        assert_eq!(sizes, vec![2, 1]);
    }

    #[test]
    fn token_budget_rejects_oversized_pair() {
        let pairs = vec![SentencePair::new(vec![4; 11], vec![4; 5])];
        assert!(matches!(
            batch_by_tokens(&pairs, 10),
            Err(Error::SentenceExceedsBudget { len: 11, budget: 10 })
        ));
    }

    #[test]
    fn token_batches_respect_budget_and_roundtrip() {
        let pairs = gen_task(TaskKind::Reverse, 100, (2, 9), 16, 3).unwrap();
        let budget = 24;
        let batches = batch_by_tokens(&pairs, budget).unwrap();
        let mut recovered = Vec::new();
        for b in &batches {
            assert!(b.size() * b.max_src_len() <= budget);
            assert!(b.size() * b.max_tgt_len() <= budget);
            for i in 0..b.size() {
                recovered.push(SentencePair {
                    src: b.src[i][..b.src_lens[i]].to_vec(),
                    tgt: b.tgt[i][..b.tgt_lens[i]].to_vec(),
                });
            }
        }
        let mut want = pairs.clone();
        recovered.sort();
        want.sort();
        assert_eq!(recovered, want);
    }

    #[test]
    fn sentence_batches_roundtrip() {
        let pairs = gen_task(TaskKind::Copy, 23, (2, 6), 16, 11).unwrap();
        let batches = batch_by_sentences(&pairs, 5).unwrap();
        let mut recovered = Vec::new();
        for b in &batches {
            for i in 0..b.size() {
                recovered.push(SentencePair {
                    src: b.src[i][..b.src_lens[i]].to_vec(),
                    tgt: b.tgt[i][..b.tgt_lens[i]].to_vec(),
                });
            }
        }
        assert_eq!(recovered, pairs);
    }

    #[test]
    fn masks_flag_exactly_non_pad_positions() {
        let pairs = vec![
            SentencePair::new(vec![4, 5], vec![5, 4]),
            SentencePair::new(vec![6, 7, 8, 9], vec![9]),
        ];
        let b = Batch::from_pairs(&pairs).unwrap();
        for (row, mask) in b.src.iter().zip(b.src_mask()) {
            for (tok, m) in row.iter().zip(mask) {
                assert_eq!(m, *tok != PAD);
            }
        }
        for (row, mask) in b.tgt.iter().zip(b.tgt_mask()) {
            for (tok, m) in row.iter().zip(mask) {
                assert_eq!(m, *tok != PAD);
            }
        }
    }

    #[test]
    fn vocabulary_reserved_ids_and_roundtrip() {
        let v = Vocabulary::synthetic(16).unwrap();
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<bos>"), BOS);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.size(), 16);
        for id in 0..16 {
            assert_eq!(v.id(v.token(id)), id);
        }
        assert_eq!(v.id("never-seen"), UNK);
        assert_eq!(v.decode_ids(&[BOS, 4, 5, EOS]), vec!["w4", "w5"]);
    }

    #[test]
    fn corpus_loader_pairs_lines() {
        let v = Vocabulary::synthetic(16).unwrap();
        let pairs = load_parallel_corpus(&v, "w4 w5\nw6", "w5 w4\nw6").unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].src, vec![4, 5]);
        assert_eq!(pairs[0].tgt, vec![5, 4, EOS]);
        assert!(load_parallel_corpus(&v, "a\nb", "a").is_err());
    }
}
