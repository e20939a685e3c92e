//! Continual masked-language-model pre-training on language-marked code.
//!
//! Each item is encoded as `[CLS] <lang> code`. Masking selects code
//! positions independently with probability `mask_rate`; a selected
//! position becomes `[MASK]` 80% of the time, a random ordinary token 10%
//! and stays unchanged 10%. The masking stream for item `i` in epoch `e`
//! is seeded by `(seed, e, i)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Gradients, TrainableMask};
use crate::backend::params::ParameterStore;
use crate::backend::transformer::{MaskedLanguageModel, ToyTransformer};
use crate::backend::vocab::{TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::train::config::{TrainConfig, TrainableSet};
use crate::train::fit::{derive_seed, fit, EpochLog, Objective, Selection, TrainOutcome};

/// Epoch index reserved for the fixed masking of held-out scoring.
const HELD_OUT_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedCode {
    pub id: String,
    pub language: String,
    pub tokens: TokenSequence,
}

/// One masked training instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSample {
    pub inputs: TokenSequence,
    /// Original token at masked positions.
    pub targets: Vec<Option<usize>>,
}

impl MaskedSample {
    pub fn num_masked(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Token ids eligible as random replacements.
fn ordinary_tokens(vocab: &Vocabulary) -> Vec<TokenId> {
    let tags: Vec<TokenId> = vocab.languages().map(|(_, id)| id).collect();
    (0..vocab.len() as TokenId)
        .filter(|&id| !vocab.is_special(id) && !tags.contains(&id))
        .collect()
}

/// `[CLS] <lang> code`, truncated to `max_len`, with masking applied.
pub fn mask_item(
    item: &MarkedCode,
    vocab: &Vocabulary,
    max_len: usize,
    mask_rate: f64,
    seed: u64,
    epoch: u64,
    index: u64,
) -> Result<MaskedSample> {
    let tag = vocab.language_id(&item.language)?;
    let replacements = ordinary_tokens(vocab);
    let special = vocab.special();
    let keep = item.tokens.len().min(max_len.saturating_sub(2));
    let mut inputs = Vec::with_capacity(keep + 2);
    inputs.push(special.cls);
    inputs.push(tag);
    let mut targets = vec![None, None];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch, index]));
    for &tok in &item.tokens[..keep] {
        if mask_rate > 0.0 && rng.random_bool(mask_rate.min(1.0)) {
            targets.push(Some(tok as usize));
            let roll: f64 = rng.random();
            inputs.push(if roll < 0.8 {
                special.mask
            } else if roll < 0.9 && !replacements.is_empty() {
                replacements[rng.random_range(0..replacements.len())]
            } else {
                tok
            });
        } else {
            targets.push(None);
            inputs.push(tok);
        }
    }
    Ok(MaskedSample { inputs, targets })
}

/// Every corpus item must carry a registered language tag.
pub fn check_languages(corpus: &[MarkedCode], vocab: &Vocabulary) -> Result<()> {
    for item in corpus {
        vocab
            .language_id(&item.language)
            .map_err(|e| Error::Config(format!("corpus item {}: {e}", item.id)))?;
    }
    Ok(())
}

fn sample_loss(
    model: &ToyTransformer,
    store: &ParameterStore<f32>,
    mask: &TrainableMask,
    sample: &MaskedSample,
) -> Result<(f64, Gradients<f32>)> {
    let mut g = Graph::with_trainable(store, mask);
    let emb = model.embed_tokens(&mut g, &sample.inputs);
    let h = model.encode(&mut g, emb, &vec![true; sample.inputs.len()])?;
    let logits = model.mlm_logits(&mut g, h);
    let loss = g.cross_entropy(logits, &sample.targets);
    let grads = g.backward(loss);
    Ok((g.scalar(loss) as f64, grads))
}

pub struct MlmPretraining<'a> {
    pub model: &'a ToyTransformer,
    pub vocab: &'a Vocabulary,
    pub corpus: &'a [MarkedCode],
    pub held_out: &'a [MarkedCode],
    pub mask_rate: f64,
    pub seed: u64,
}

impl MlmPretraining<'_> {
    fn max_len(&self) -> usize {
        MaskedLanguageModel::<f32>::config(self.model).max_seq_len
    }

    /// Mean loss over masked positions of `items` under the fixed held-out
    /// masking. Items with nothing masked are skipped.
    pub fn loss_on(&self, store: &ParameterStore<f32>, items: &[MarkedCode]) -> Result<f64> {
        let none = TrainableMask::none(store.len());
        let scored = items
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let rate = if self.mask_rate > 0.0 { self.mask_rate } else { 0.15 };
                let s = mask_item(item, self.vocab, self.max_len(), rate, self.seed, HELD_OUT_EPOCH, i as u64)?;
                if s.num_masked() == 0 {
                    return Ok(None);
                }
                let n = s.num_masked() as f64;
                sample_loss(self.model, store, &none, &s).map(|(l, _)| Some((l * n, n)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (sum, count) = scored.into_iter().flatten().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        if count == 0.0 {
            return Err(Error::Data("no held-out position was masked".into()));
        }
        Ok(sum / count)
    }
}

impl Objective for MlmPretraining<'_> {
    fn len(&self) -> usize {
        self.corpus.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.corpus[index].id
    }

    fn batch(
        &self,
        store: &ParameterStore<f32>,
        mask: &TrainableMask,
        batch: &[usize],
        epoch: usize,
    ) -> Result<(f64, Gradients<f32>)> {
        let parts = batch
            .par_iter()
            .map(|&i| {
                let s = mask_item(&self.corpus[i], self.vocab, self.max_len(), self.mask_rate, self.seed, epoch as u64, i as u64)?;
                if s.num_masked() == 0 {
                    return Ok(None);
                }
                sample_loss(self.model, store, mask, &s).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = Gradients::zeros(store.len());
        let mut loss = 0.0;
        let mut used = 0;
        for (l, g) in parts.into_iter().flatten() {
            loss += l;
            total.merge(&g);
            used += 1;
        }
        if used > 0 {
            total.scale(1.0 / used as f32);
            loss /= used as f64;
        }
        Ok((loss, total))
    }

    fn metric_name(&self) -> &str {
        "mlm_loss"
    }

    fn validate(&self, store: &ParameterStore<f32>) -> Result<Option<f64>> {
        if self.held_out.is_empty() {
            return Ok(None);
        }
        self.loss_on(store, self.held_out).map(Some)
    }

    fn selection(&self) -> Selection {
        Selection::Final
    }
}

/// Updates only `encoder.*` and `mlm.*`; the final epoch is kept.
pub fn continual_mlm_pretrain(
    job: &MlmPretraining<'_>,
    store: ParameterStore<f32>,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    check_languages(job.corpus, job.vocab)?;
    check_languages(job.held_out, job.vocab)?;
    if !(0.0..=1.0).contains(&job.mask_rate) {
        return Err(Error::Config(format!("mask_rate {} is outside [0, 1]", job.mask_rate)));
    }
    let config = TrainConfig {
        trainable_set: TrainableSet::PlmOnly,
        ..config.clone()
    };
    // The plm-only set also covers task heads; none may be present here.
    if store.iter().any(|(_, name, _)| name.starts_with("decoder.") || name.starts_with("head.")) {
        return Err(Error::Config("MLM pre-training expects a store without task heads".into()));
    }
    fit(store, job, &config, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::transformer::ModelConfig;
    use crate::prompt::bank::PromptBank;

    fn vocab() -> Vocabulary {
        let words: Vec<String> = (0..10).map(|i| format!("k{i}")).collect();
        Vocabulary::build(words.iter().map(String::as_str), &["p".into(), "q".into()], &[], 64).unwrap()
    }

    /// Programs of the form `k0 k1 k2 …` cycling from a start token: fully
    /// predictable from context.
    fn corpus(vocab: &Vocabulary, n: usize, offset: usize) -> Vec<MarkedCode> {
        (0..n)
            .map(|i| MarkedCode {
                id: format!("c{}", i + offset),
                language: if i % 2 == 0 { "p" } else { "q" }.into(),
                tokens: (0..10).map(|j| vocab.id(&format!("k{}", (i + offset + j) % 10)).unwrap()).collect(),
            })
            .collect()
    }

    fn model(vocab: &Vocabulary) -> (ToyTransformer, ParameterStore<f32>) {
        let cfg = ModelConfig {
            hidden_dim: 16,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 32,
            max_seq_len: 16,
            vocab_size: vocab.len(),
            tie_mlm_head: true,
        };
        let mut store = ParameterStore::new();
        let m = ToyTransformer::init(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        (m, store)
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig {
            base_lr: 3e-3,
            epochs,
            seed: 8,
            ..TrainConfig::mlm()
        }
    }

    #[test]
    fn masking_is_seeded_and_respects_the_rate() {
        let v = vocab();
        let item = &corpus(&v, 1, 0)[0];
        let a = mask_item(item, &v, 16, 0.5, 1, 2, 3).unwrap();
        assert_eq!(a, mask_item(item, &v, 16, 0.5, 1, 2, 3).unwrap());
        assert_ne!(a, mask_item(item, &v, 16, 0.5, 1, 3, 3).unwrap());
        assert_eq!(a.inputs[0], v.special().cls);
        assert_eq!(a.inputs[1], v.language_id("p").unwrap());
        assert!(a.targets[..2].iter().all(Option::is_none));
        let none = mask_item(item, &v, 16, 0.0, 1, 2, 3).unwrap();
        assert_eq!(none.num_masked(), 0);
        assert_eq!(&none.inputs[2..], &item.tokens[..]);
    }

    #[test]
    fn replacement_mix_is_roughly_80_10_10() {
        let v = vocab();
        let item = MarkedCode {
            id: "x".into(),
            language: "p".into(),
            tokens: vec![v.id("k3").unwrap(); 2000],
        };
        let s = mask_item(&item, &v, 4000, 1.0, 0, 0, 0).unwrap();
        let masked = s.inputs.iter().filter(|&&t| t == v.special().mask).count();
        let kept = s.inputs[2..].iter().filter(|&&t| t == v.id("k3").unwrap()).count();
        assert!((1500..1700).contains(&masked), "{masked}");
        // Random replacements can also draw the original token.
        assert!((180..280).contains(&kept), "{kept}");
    }

    #[test]
    fn unregistered_tag_is_a_config_error() {
        let v = vocab();
        let (m, store) = model(&v);
        let mut bad = corpus(&v, 2, 0);
        bad[1].language = "r".into();
        let job = MlmPretraining {
            model: &m,
            vocab: &v,
            corpus: &bad,
            held_out: &[],
            mask_rate: 0.15,
            seed: 0,
        };
        assert!(matches!(continual_mlm_pretrain(&job, store, &config(1), &mut |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn held_out_loss_drops_and_only_backbone_moves() {
        let v = vocab();
        let (m, mut store) = model(&v);
        PromptBank::init(&mut store, 2, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let train = corpus(&v, 40, 0);
        let held = corpus(&v, 10, 100);
        let job = MlmPretraining {
            model: &m,
            vocab: &v,
            corpus: &train,
            held_out: &held,
            mask_rate: 0.15,
            seed: 3,
        };
        let before = job.loss_on(&store, &held).unwrap();
        let original = store.clone();
        let out = continual_mlm_pretrain(&job, store, &config(6), &mut |_| {}).unwrap();
        let after = job.loss_on(&out.store, &held).unwrap();
        assert!(after < before, "{after} !< {before}");
        assert!(out.store.bitwise_eq_prefix(&original, "prompt."));
        assert!(!out.store.bitwise_eq_prefix(&original, "encoder."));
    }

    #[test]
    fn zero_mask_rate_changes_nothing() {
        let v = vocab();
        let (m, store) = model(&v);
        let train = corpus(&v, 8, 0);
        let job = MlmPretraining {
            model: &m,
            vocab: &v,
            corpus: &train,
            held_out: &[],
            mask_rate: 0.0,
            seed: 3,
        };
        let original = store.clone();
        let out = continual_mlm_pretrain(&job, store, &config(1), &mut |_| {}).unwrap();
        assert!(out.steps.iter().all(|s| s.grad_norm == 0.0 && s.loss == 0.0));
        assert_eq!(out.store.content_hash(), original.content_hash());
    }
}
