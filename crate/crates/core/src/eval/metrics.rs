//! Accuracy, corpus BLEU and ROUGE-L.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy<L: PartialEq>(predictions: &[L], labels: &[L]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("accuracy of an empty set is undefined".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

/// Corpus-level BLEU in `[0, 100]` with one reference per candidate.
///
/// Modified n-gram precisions are pooled over the corpus. When any
/// precision for `n ≥ 2` is zero, add-one smoothing is applied to the
/// numerator and denominator of every `n ≥ 2` order. A zero unigram
/// precision gives 0.
///
/// ```
/// use xlprompt_core::eval::bleu;
///
/// let c = vec![vec!["the", "cat", "sat"]];
/// let r = vec![vec!["the", "cat", "sat", "down"]];
/// assert!((bleu(&c, &r, 4).unwrap() - 71.653).abs() < 0.01);
/// ```
pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Data("BLEU needs at least one reference".into()));
    }
    if max_n == 0 {
        return Err(Error::Config("BLEU max_n must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            let cc = ngram_counts(c, n);
            totals[n - 1] += cc.values().sum::<usize>();
            matches[n - 1] += cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if cand_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let smooth = (1..max_n).any(|i| matches[i] == 0);
    let mut log_sum = 0.0;
    for i in 0..max_n {
        let (m, t) = if smooth && i > 0 {
            (matches[i] + 1, totals[i] + 1)
        } else {
            (matches[i], totals[i])
        };
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 in `[0, 1]`; 0 when either side is empty.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-L averaged over examples.
pub fn mean_rouge_l<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.len() != references.len() || references.is_empty() {
        return Err(Error::Data(format!(
            "ROUGE-L needs equal, non-zero counts (got {} and {})",
            candidates.len(),
            references.len()
        )));
    }
    let total: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r)).sum();
    Ok(total / references.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Data("cannot summarize zero values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(Summary { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
        let p = [1, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        let l = [1, 1, 1, 1, 1, 1, 1, 1, 1, 1];
        assert!((accuracy(&p, &l).unwrap() - 0.7).abs() < 1e-15);
        assert!(accuracy::<u8>(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn bleu_cases() {
        let r = vec![words("a b c d e f")];
        assert!((bleu(&r, &r, 4).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&[words("x y z")], &r, 4).unwrap(), 0.0);
        assert_eq!(bleu(&[vec![]], &r, 4).unwrap(), 0.0);
        // p1..p3 = 1, p4 smoothed to (0+1)/(0+1); BP = exp(1 - 4/3).
        let worked = bleu(&[words("the cat sat")], &[words("the cat sat down")], 4).unwrap();
        assert!((worked - 100.0 * (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-9);
        assert!((worked - 71.65).abs() < 0.01);
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // Classic "the the the" example: p1 = 2/7 after clipping.
        let c = vec![words("the the the the the the the")];
        let r = vec![words("the cat is on the mat")];
        let score = bleu(&c, &r, 1).unwrap();
        assert!((score - 100.0 * 2.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&words("a b c"), &words("a b c")), 1.0);
        assert_eq!(rouge_l(&words("a b"), &words("c d")), 0.0);
        assert_eq!(rouge_l(&words("a b c d"), &words("a c b d")), 0.75);
        assert_eq!(rouge_l::<&str>(&[], &words("a")), 0.0);
    }

    #[test]
    fn summary_matches_definition() {
        let s = summarize(&[0.5, 0.7, 0.9]).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-15);
        assert!((s.std - 0.2).abs() < 1e-15);
        assert_eq!(summarize(&[0.3]).unwrap().std, 0.0);
    }

    /// Exponential-time oracle: the longest common subsequence by subset
    /// enumeration of the shorter side.
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let mut best = 0;
        for mask in 0u32..(1 << short.len()) {
            let sub: Vec<u8> = (0..short.len()).filter(|i| mask & (1 << i) != 0).map(|i| short[i]).collect();
            let mut it = long.iter();
            if sub.iter().all(|x| it.any(|y| y == x)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn lcs_matches_brute_force(a in proptest::collection::vec(0u8..4, 0..=12), b in proptest::collection::vec(0u8..4, 0..=12)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn identity_is_the_maximum(a in proptest::collection::vec(0u8..6, 1..=12), b in proptest::collection::vec(0u8..6, 1..=12)) {
            prop_assert_eq!(rouge_l(&a, &a), 1.0);
            prop_assert!(rouge_l(&a, &b) <= 1.0);
            let s = bleu(std::slice::from_ref(&b), std::slice::from_ref(&a), 4).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
            if a != b {
                prop_assert!(rouge_l(&b, &a) < 1.0);
            }
        }
    }
}
