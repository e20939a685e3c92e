//! Prompt-conditioned sequence generation with the decoder header.

use rayon::prelude::*;

use crate::autograd::{Graph, Gradients, TrainableMask};
use crate::backend::params::ParameterStore;
use crate::backend::transformer::{MaskedLanguageModel, ToyTransformer};
use crate::backend::vocab::{SpecialIds, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::prompt::bank::PromptBank;
use crate::prompt::inject::{compose_embeddings, compose_embeddings_matrix, MaskedInput};
use crate::task::cast::{build_generative_input, GenerativeExample};
use crate::task::decoder::{decode, seq2seq_loss_var, strip_eos, teacher_forcing, DecoderHeader, Strategy};
use crate::task::TaskKind;
use crate::tensor::Matrix;
use crate::train::classifier::{bank_is_trainable, prompt_input, reduce_batch};
use crate::train::config::TrainConfig;
use crate::train::fit::{fit, EpochLog, Objective, Selection, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerativeInput {
    pub id: String,
    pub language: String,
    pub input: MaskedInput,
    pub target: TokenSequence,
}

#[derive(Debug, Clone)]
pub struct PromptGenerator {
    pub model: ToyTransformer,
    pub bank: PromptBank,
    pub decoder: DecoderHeader,
    pub task: TaskKind,
    pub special: SpecialIds,
}

impl PromptGenerator {
    pub fn cast(&self, ex: &GenerativeExample, vocab: &Vocabulary) -> Result<GenerativeInput> {
        if ex.task != self.task {
            return Err(Error::Config(format!("example {} is {}, generator is {}", ex.id, ex.task, self.task)));
        }
        let max_len = MaskedLanguageModel::<f32>::config(&self.model).max_seq_len;
        let fixed = 1 + self.bank.len() + usize::from(self.task == TaskKind::Cg);
        if fixed >= max_len {
            return Err(Error::InputTooLong { len: fixed + 1, limit: max_len });
        }
        let source = &ex.source[..ex.source.len().min(max_len - fixed)];
        let input = build_generative_input(source, self.task, &ex.language, self.bank.len(), vocab, max_len)?;
        let keep = ex.target.len().min(self.decoder.config().max_target_len);
        if keep == 0 {
            return Err(Error::EmptyTarget);
        }
        Ok(GenerativeInput {
            id: ex.id.clone(),
            language: ex.language.clone(),
            input,
            target: ex.target[..keep].to_vec(),
        })
    }

    pub fn cast_all(&self, examples: &[GenerativeExample], vocab: &Vocabulary) -> Result<Vec<GenerativeInput>> {
        examples.iter().map(|e| self.cast(e, vocab)).collect()
    }

    fn example_loss(
        &self,
        store: &ParameterStore<f32>,
        mask: &TrainableMask,
        ex: &GenerativeInput,
        prompts: Option<&Matrix<f32>>,
        prompts_trainable: bool,
    ) -> Result<(f64, Gradients<f32>, Option<Matrix<f32>>)> {
        let mut g = Graph::with_trainable(store, mask);
        let p = prompt_input(&mut g, prompts, prompts_trainable);
        let emb = compose_embeddings(&mut g, &self.model, &ex.input, p)?;
        let memory = self.model.encode(&mut g, emb, &vec![true; ex.input.len()])?;
        let (dec_in, dec_out) = teacher_forcing(&ex.target, self.special);
        let logits = self.decoder.forward(&mut g, memory, &dec_in)?;
        let loss = seq2seq_loss_var(&mut g, logits, &dec_out, self.special.pad)?;
        let mut grads = g.backward(loss);
        let dp = match p {
            Some(p) if prompts_trainable => grads.take_leaf(p),
            _ => None,
        };
        Ok((g.scalar(loss) as f64, grads, dp))
    }

    pub fn batch_gradients(
        &self,
        store: &ParameterStore<f32>,
        mask: &TrainableMask,
        examples: &[&GenerativeInput],
    ) -> Result<(f64, Gradients<f32>)> {
        let mut bank_graph = Graph::with_trainable(store, mask);
        let bank_out = self.bank.encode(&mut bank_graph);
        let prompts = bank_out.map(|v| bank_graph.value(v).clone());
        let trainable = bank_is_trainable(&self.bank, store, mask);
        let parts = examples
            .par_iter()
            .map(|ex| self.example_loss(store, mask, ex, prompts.as_ref(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(reduce_batch(store, &bank_graph, bank_out, parts))
    }

    /// Mean teacher-forced loss.
    pub fn mean_loss(&self, store: &ParameterStore<f32>, examples: &[GenerativeInput]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Data("no examples to score".into()));
        }
        let none = TrainableMask::none(store.len());
        let prompts = (!self.bank.is_empty()).then(|| self.bank.encode_matrix(store));
        let losses = examples
            .par_iter()
            .map(|ex| self.example_loss(store, &none, ex, prompts.as_ref(), false).map(|r| r.0))
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Decoded outputs without the trailing EOS.
    pub fn generate(
        &self,
        store: &ParameterStore<f32>,
        inputs: &[MaskedInput],
        max_len: usize,
        strategy: Strategy,
    ) -> Result<Vec<TokenSequence>> {
        let prompts = self.bank.encode_matrix(store);
        let table = store.get(MaskedLanguageModel::<f32>::token_table(&self.model));
        inputs
            .par_iter()
            .map(|input| {
                let emb = compose_embeddings_matrix(input, &prompts, table)?;
                let states = self.model.encode_states(store, &emb, &vec![true; input.len()])?;
                let out = decode(&states, &self.decoder, store, self.special, max_len, strategy)?;
                Ok(strip_eos(out, self.special))
            })
            .collect()
    }
}

struct GenerativeObjective<'a> {
    generator: &'a PromptGenerator,
    train: &'a [GenerativeInput],
    valid: &'a [GenerativeInput],
}

impl Objective for GenerativeObjective<'_> {
    fn len(&self) -> usize {
        self.train.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.train[index].id
    }

    fn batch(
        &self,
        store: &ParameterStore<f32>,
        mask: &TrainableMask,
        batch: &[usize],
        _epoch: usize,
    ) -> Result<(f64, Gradients<f32>)> {
        let examples: Vec<&GenerativeInput> = batch.iter().map(|&i| &self.train[i]).collect();
        self.generator.batch_gradients(store, mask, &examples)
    }

    fn metric_name(&self) -> &str {
        "loss"
    }

    fn validate(&self, store: &ParameterStore<f32>) -> Result<Option<f64>> {
        self.generator.mean_loss(store, self.valid).map(Some)
    }

    fn selection(&self) -> Selection {
        Selection::Minimize
    }
}

/// Trains encoder, prompts and decoder; keeps the epoch with the lowest
/// validation loss.
pub fn train_generator(
    generator: &PromptGenerator,
    store: ParameterStore<f32>,
    train: &[GenerativeInput],
    valid: &[GenerativeInput],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if valid.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    fit(store, &GenerativeObjective { generator, train, valid }, config, on_epoch)
}
