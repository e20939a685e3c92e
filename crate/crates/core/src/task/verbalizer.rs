use std::collections::BTreeMap;

use crate::backend::vocab::{TokenId, Tokenizer, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Float;

/// Positional bijection between candidate words and binary labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalizer {
    candidate_ids: Vec<TokenId>,
    labels: Vec<u8>,
}

fn parse_label(key: &str) -> Result<u8> {
    match key.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "positive" => Ok(1),
        "false" | "0" | "no" | "negative" => Ok(0),
        other => Err(Error::Config(format!(
            "verbalizer label `{other}` is not binary (use true/false)"
        ))),
    }
}

impl Verbalizer {
    pub fn new(candidate_ids: Vec<TokenId>, labels: Vec<u8>, vocab_size: usize) -> Result<Self> {
        if candidate_ids.len() != labels.len() || candidate_ids.len() < 2 {
            return Err(Error::Config(format!(
                "verbalizer needs at least two candidates paired with labels, got {} ids and {} labels",
                candidate_ids.len(),
                labels.len()
            )));
        }
        let mut seen = candidate_ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != candidate_ids.len() {
            return Err(Error::Config("verbalizer candidate ids must be distinct".into()));
        }
        if let Some(&bad) = candidate_ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::Config(format!(
                "verbalizer candidate id {bad} is outside the vocabulary of {vocab_size}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Config(format!("verbalizer label {bad} is not binary")));
        }
        Ok(Self {
            candidate_ids,
            labels,
        })
    }

    /// `yes ↔ true`, `no ↔ false`.
    pub fn yes_no(vocab: &Vocabulary) -> Result<Self> {
        let mut words = BTreeMap::new();
        words.insert("true".to_string(), "yes".to_string());
        words.insert("false".to_string(), "no".to_string());
        Self::from_words(&words, vocab, None)
    }

    /// Builds from a `{label: word}` map. A word that the tokenizer splits
    /// into several pieces is represented by its first piece.
    pub fn from_words(
        words: &BTreeMap<String, String>,
        vocab: &Vocabulary,
        tokenizer: Option<&dyn Tokenizer>,
    ) -> Result<Self> {
        let mut pairs: Vec<(u8, TokenId)> = Vec::with_capacity(words.len());
        for (label, word) in words {
            let label = parse_label(label)?;
            let id = match vocab.id(word) {
                Some(id) => id,
                None => {
                    let pieces = tokenizer.map(|t| t.tokenize(word)).unwrap_or_default();
                    match pieces.first() {
                        Some(&first) if first != vocab.special().unk => {
                            log::warn!(
                                "verbalizer word `{word}` splits into {} pieces; using the first",
                                pieces.len()
                            );
                            first
                        }
                        _ => {
                            return Err(Error::Config(format!(
                                "verbalizer word `{word}` is not in the vocabulary"
                            )))
                        }
                    }
                }
            };
            pairs.push((label, id));
        }
        // Positive label first, like the default yes/no ordering.
        pairs.sort_by_key(|p| std::cmp::Reverse(p.0));
        let (labels, ids) = pairs.into_iter().unzip();
        Self::new(ids, labels, vocab.len())
    }

    pub fn candidate_ids(&self) -> &[TokenId] {
        &self.candidate_ids
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn target_for(&self, label: u8) -> Result<TokenId> {
        self.labels
            .iter()
            .position(|&l| l == label)
            .map(|i| self.candidate_ids[i])
            .ok_or_else(|| Error::Config(format!("no verbalizer candidate for label {label}")))
    }
}

/// Reads the label off a distribution over the vocabulary: the candidate
/// with the highest probability wins, equal probabilities go to the
/// negative label. The score is the winner's probability renormalized over
/// the candidate set.
pub fn verbalize<T: Float>(dist: &[T], v: &Verbalizer) -> Result<(u8, f64)> {
    let mut best: Option<(usize, f64)> = None;
    let mut total = 0.0;
    for (i, &id) in v.candidate_ids.iter().enumerate() {
        let p = dist
            .get(id as usize)
            .ok_or_else(|| {
                Error::Config(format!(
                    "candidate id {id} is outside a distribution of length {}",
                    dist.len()
                ))
            })?
            .to_f64_lossy();
        total += p;
        best = match best {
            Some((j, q)) if q > p || (q == p && v.labels[j] <= v.labels[i]) => Some((j, q)),
            _ => Some((i, p)),
        };
    }
    let (winner, p) = best.expect("at least two candidates");
    let score = if total > 0.0 { p / total } else { 1.0 / v.candidate_ids.len() as f64 };
    Ok((v.labels[winner], score))
}

/// Floor applied to the target probability before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmLoss {
    pub value: f64,
    /// The target probability was below [`PROB_FLOOR`] and got clamped.
    pub clamped: bool,
}

/// `-ln p(target)`.
pub fn mlm_loss<T: Float>(dist: &[T], target: TokenId) -> Result<MlmLoss> {
    let p = dist
        .get(target as usize)
        .ok_or_else(|| {
            Error::Config(format!(
                "target id {target} is outside a distribution of length {}",
                dist.len()
            ))
        })?
        .to_f64_lossy();
    let clamped = p.is_nan() || p < PROB_FLOOR;
    let value = -p.max(PROB_FLOOR).ln();
    Ok(MlmLoss { value, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn yes_no() -> Verbalizer {
        Verbalizer::new(vec![3, 1], vec![1, 0], 5).unwrap()
    }

    #[test]
    fn renormalized_score() {
        let dist = [0.05, 0.1, 0.05, 0.7, 0.1];
        let (label, score) = verbalize(&dist, &yes_no()).unwrap();
        assert_eq!(label, 1);
        assert!((score - 0.875).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_the_negative_label() {
        let dist = [0.2, 0.3, 0.2, 0.3, 0.0];
        assert_eq!(verbalize(&dist, &yes_no()).unwrap(), (0, 0.5));
        let flipped = Verbalizer::new(vec![1, 3], vec![0, 1], 5).unwrap();
        assert_eq!(verbalize(&dist, &flipped).unwrap(), (0, 0.5));
    }

    #[test]
    fn out_of_range_candidate() {
        assert!(Verbalizer::new(vec![3, 9], vec![1, 0], 5).is_err());
        let v = yes_no();
        assert!(matches!(verbalize(&[0.5f64, 0.5], &v), Err(Error::Config(_))));
    }

    #[test]
    fn loss_reference_values() {
        let l = mlm_loss(&[0.2f64, 0.3, 0.5], 2).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(mlm_loss(&[0.0f64, 1.0], 1).unwrap().value, 0.0);
        let n = 37;
        let uniform = vec![1.0 / n as f64; n];
        assert!((mlm_loss(&uniform, 5).unwrap().value - (n as f64).ln()).abs() < 1e-12);
        let zero = mlm_loss(&[1.0f64, 0.0], 1).unwrap();
        assert!(zero.clamped);
        assert!((zero.value - 1e12f64.ln()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn non_candidate_entries_never_change_the_label(
            raw in prop::collection::vec(0.0f64..1.0, 5),
            noise in prop::collection::vec(0.0f64..1.0, 5),
        ) {
            let v = yes_no();
            let mut other = raw.clone();
            for (i, n) in noise.iter().enumerate() {
                if i != 1 && i != 3 {
                    other[i] = *n;
                }
            }
            prop_assert_eq!(verbalize(&raw, &v).unwrap().0, verbalize(&other, &v).unwrap().0);
        }

        #[test]
        fn loss_decreases_as_target_mass_grows(a in 0.01f64..0.98, delta in 0.001f64..0.01) {
            let b = (a + delta).min(0.99);
            prop_assume!(b > a);
            let l1 = mlm_loss(&[1.0 - a, a], 1).unwrap().value;
            let l2 = mlm_loss(&[1.0 - b, b], 1).unwrap().value;
            prop_assert!(l2 < l1);
        }
    }
}
