#![allow(dead_code)]

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xlprompt_core::backend::params::ParameterStore;
use xlprompt_core::backend::transformer::{ModelConfig, ToyTransformer};
use xlprompt_core::backend::vocab::{Tokenizer, Vocabulary, WhitespaceTokenizer};
use xlprompt_core::data::pipeline::{balance_with_negatives, split};
use xlprompt_core::data::record::RawRecord;
use xlprompt_core::data::synthetic::{all_tokens, clone_pairs, unlabeled_programs, Dialect, ProgramShape};
use xlprompt_core::eval::{Backbone, Corpus};
use xlprompt_core::train::{continual_mlm_pretrain, MarkedCode, MlmPretraining, TrainConfig, TrainableSet};

pub const LANGS: [&str; 2] = ["alpha", "beta"];

pub fn small_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: 32,
        num_layers: 2,
        num_heads: 4,
        ffn_dim: 64,
        max_seq_len: 128,
        vocab_size,
        tie_mlm_head: true,
    }
}

pub fn synthetic_vocab() -> Vocabulary {
    let dialects = [Dialect::alpha(), Dialect::beta()];
    let words = all_tokens(&dialects, ProgramShape::default().max_number);
    let langs: Vec<String> = LANGS.iter().map(|s| s.to_string()).collect();
    Vocabulary::build(words.iter().map(String::as_str), &langs, &["yes", "no"], 512).unwrap()
}

pub struct Pretrain {
    pub programs_per_dialect: usize,
    pub epochs: usize,
    pub lr: f64,
}

/// A backbone pre-trained with MLM on unlabeled programs of both dialects.
pub fn pretrained_backbone(seed: u64, pretrain: &Pretrain) -> (Backbone, WhitespaceTokenizer) {
    let vocab = synthetic_vocab();
    let tok = WhitespaceTokenizer::new(vocab.clone());
    let config = small_config(vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let model = ToyTransformer::init(&mut store, &config, &mut rng).unwrap();
    let shape = ProgramShape::default();
    let mut corpus = Vec::new();
    let mut held_out = Vec::new();
    for dialect in [Dialect::alpha(), Dialect::beta()] {
        let programs = unlabeled_programs(&mut rng, &dialect, pretrain.programs_per_dialect + 20, &shape);
        for (i, text) in programs.iter().enumerate() {
            let item = MarkedCode {
                id: format!("{}-u{i}", dialect.name),
                language: dialect.name.to_string(),
                tokens: tok.tokenize(text),
            };
            if i < 20 {
                held_out.push(item);
            } else {
                corpus.push(item);
            }
        }
    }
    let job = MlmPretraining {
        model: &model,
        vocab: &vocab,
        corpus: &corpus,
        held_out: &held_out,
        mask_rate: 0.15,
        seed,
    };
    let cfg = TrainConfig {
        base_lr: pretrain.lr,
        batch_size: 16,
        epochs: pretrain.epochs,
        warmup_steps: None,
        weight_decay: 0.01,
        clip_norm: 1.0,
        seed,
        trainable_set: TrainableSet::PlmOnly,
    };
    let t = Instant::now();
    let out = continual_mlm_pretrain(&job, store, &cfg, &mut |e| {
        eprintln!("  pretrain epoch {} loss {:.4} held-out {:.4}", e.epoch, e.train_loss, e.metric.value)
    })
    .unwrap();
    eprintln!("  pretraining took {:.1}s", t.elapsed().as_secs_f64());
    (
        Backbone {
            config,
            vocab,
            store: out.store,
        },
        tok,
    )
}

/// Balanced clone-detection records: `positives` clones plus as many
/// sampled negatives, shuffled and cut into train/valid/test.
pub fn clone_corpus(seed: u64, dialect: &Dialect, positives: usize, ratios: [f64; 3]) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos: Vec<RawRecord> = clone_pairs(&mut rng, dialect, positives, &ProgramShape::default(), &format!("{}-", dialect.name));
    let all = balance_with_negatives(&pos, seed).unwrap();
    let [train, valid, test] = split(all, ratios, seed).unwrap();
    Corpus { train, valid, test }
}
