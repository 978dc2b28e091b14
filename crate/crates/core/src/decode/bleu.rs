//! Corpus-level BLEU: geometric mean of modified n-gram precisions (n ≤ 4)
//! times the brevity penalty, over whitespace-tokenized sentences.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct BleuOptions {
    pub max_n: usize,
    /// Add-one smoothing on the n-gram precision counts, for tiny corpora
    /// where a zero higher-order match would zero the whole score. Off by
    /// default: corpus-level comparison uses the unsmoothed definition.
    pub smooth: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions { max_n: 4, smooth: false }
    }
}

/// BLEU in [0, 100] over parallel corpora of token sequences.
pub fn bleu<T: AsRef<str>>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    opts: BleuOptions,
) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::EmptyCorpus);
    }
    let max_n = opts.max_n.max(1);
    let mut matched = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;

    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=max_n {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &hyp_counts {
                total[n - 1] += count;
                if let Some(&ref_count) = ref_counts.get(gram) {
                    matched[n - 1] += count.min(ref_count);
                }
            }
        }
    }

    let mut log_precision_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = if opts.smooth {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (m as f64 / t as f64).ln();
    }
    let geo_mean = (log_precision_sum / max_n as f64).exp();
    let bp = if hyp_len >= ref_len || hyp_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * geo_mean * bp)
}

/// BLEU over plain text: one whitespace-tokenized sentence per line.
pub fn bleu_lines(hypotheses: &str, references: &str, opts: BleuOptions) -> Result<f64> {
    let tokenize = |text: &str| -> Vec<Vec<String>> {
        text.lines()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    };
    let hyp = tokenize(hypotheses);
    let refs = tokenize(references);
    if hyp.is_empty() || refs.is_empty() || hyp.len() != refs.len() {
        return Err(Error::EmptyCorpus);
    }
    bleu(&hyp, &refs, opts)
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let gram: Vec<&str> = window.iter().map(AsRef::as_ref).collect();
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_corpora_score_100() {
        let corpus = vec![toks("a b c d e"), toks("x y z w q")];
        let score = bleu(&corpus, &corpus, BleuOptions::default()).unwrap();
        assert!((score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn brevity_penalty_hand_example() {
        // hyp "a b c d" vs ref "a b c d e": all precisions 1, BP = exp(1 − 5/4)
        let score =
            bleu(&[toks("a b c d")], &[toks("a b c d e")], BleuOptions::default()).unwrap();
        let want = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
        assert!((score - want).abs() < 1e-9);
        assert!((score - 77.88).abs() < 0.01);
    }

    #[test]
    fn zero_fourgram_match_without_smoothing_is_zero() {
        let score =
            bleu(&[toks("a b c d")], &[toks("a b x d")], BleuOptions::default()).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn smoothing_rescues_tiny_corpora() {
        let score = bleu(
            &[toks("a b c d")],
            &[toks("a b x d")],
            BleuOptions { max_n: 4, smooth: true },
        )
        .unwrap();
        assert!(score > 0.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: Vec<Vec<String>> = Vec::new();
        assert!(matches!(
            bleu(&empty, &empty, BleuOptions::default()),
            Err(Error::EmptyCorpus)
        ));
        assert!(bleu_lines("", "", BleuOptions::default()).is_err());
    }

    #[test]
    fn corpus_permutation_invariance() {
        let hyp = vec![toks("a b c d"), toks("e f g h"), toks("i j k l m")];
        let refs = vec![toks("a b c d"), toks("e f x h"), toks("i j k l m n")];
        let a = bleu(&hyp, &refs, BleuOptions { max_n: 2, smooth: false }).unwrap();
        let perm = [2usize, 0, 1];
        let hyp_p: Vec<_> = perm.iter().map(|&i| hyp[i].clone()).collect();
        let refs_p: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        let b = bleu(&hyp_p, &refs_p, BleuOptions { max_n: 2, smooth: false }).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_repeated_tokens() {
        // "the the the" vs "the cat": unigram matches clip at ref count 1
        let score = bleu(
            &[toks("the the the")],
            &[toks("the cat")],
            BleuOptions { max_n: 1, smooth: false },
        )
        .unwrap();
        // precision 1/3, BP = 1 (hyp longer)
        assert!((score - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn line_interface_matches_token_interface() {
        let a = bleu_lines("a b c\nd e f", "a b c\nd x f", BleuOptions { max_n: 2, smooth: false })
            .unwrap();
        let b = bleu(
            &[toks("a b c"), toks("d e f")],
            &[toks("a b c"), toks("d x f")],
            BleuOptions { max_n: 2, smooth: false },
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
