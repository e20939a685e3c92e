//! Prompt-tuned pair classification through the MLM head.

use rayon::prelude::*;

use crate::autograd::{Graph, Gradients, TrainableMask, Var};
use crate::backend::params::ParameterStore;
use crate::backend::transformer::{MaskedLanguageModel, ToyTransformer};
use crate::backend::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::prompt::bank::PromptBank;
use crate::prompt::inject::{compose_embeddings, compose_embeddings_matrix, MaskedInput};
use crate::prompt::layout::TemplateLayout;
use crate::task::cast::{cast_classification, ClassificationExample};
use crate::task::verbalizer::{verbalize, Verbalizer};
use crate::tensor::Matrix;
use crate::train::config::TrainConfig;
use crate::train::fit::{fit, EpochLog, Objective, Selection, TrainOutcome};

/// A cast example with its provenance kept for auditing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledInput {
    pub id: String,
    pub language: String,
    pub input: MaskedInput,
    pub target: TokenId,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct PromptClassifier {
    pub model: ToyTransformer,
    pub bank: PromptBank,
    pub layout: TemplateLayout,
    pub verbalizer: Verbalizer,
}

/// Prompt vectors as an input of a per-example graph: a leaf when the
/// bank is being trained, a constant otherwise.
pub(crate) fn prompt_input(g: &mut Graph<'_, f32>, prompts: Option<&Matrix<f32>>, trainable: bool) -> Option<Var> {
    prompts.map(|p| if trainable { g.leaf(p.clone()) } else { g.constant(p.clone()) })
}

/// Sums per-example `(loss, grads, d_prompts)` in batch order, divides by
/// the batch size and pushes the prompt gradient through the bank graph.
pub(crate) fn reduce_batch(
    store: &ParameterStore<f32>,
    bank_graph: &Graph<'_, f32>,
    bank_out: Option<Var>,
    parts: Vec<(f64, Gradients<f32>, Option<Matrix<f32>>)>,
) -> (f64, Gradients<f32>) {
    let n = parts.len() as f32;
    let mut total = Gradients::zeros(store.len());
    let mut loss = 0.0;
    let mut d_prompts: Option<Matrix<f32>> = None;
    for (l, g, dp) in parts {
        loss += l;
        total.merge(&g);
        if let Some(dp) = dp {
            match &mut d_prompts {
                Some(acc) => acc.add_assign(&dp),
                None => d_prompts = Some(dp),
            }
        }
    }
    total.scale(1.0 / n);
    if let (Some(p), Some(mut dp)) = (bank_out, d_prompts) {
        dp.scale_assign(1.0 / n);
        total.merge(&bank_graph.backward_with(vec![(p, dp)]));
    }
    (loss / n as f64, total)
}

pub(crate) fn bank_is_trainable(bank: &PromptBank, store: &ParameterStore<f32>, mask: &TrainableMask) -> bool {
    !bank.is_empty() && store.ids_with_prefix("prompt.").any(|id| mask.contains(id))
}

impl PromptClassifier {
    pub fn max_len(&self) -> usize {
        MaskedLanguageModel::<f32>::config(&self.model).max_seq_len
    }

    pub fn cast(&self, ex: &ClassificationExample, vocab: &Vocabulary) -> Result<LabeledInput> {
        if self.layout.m != self.bank.len() {
            return Err(Error::LayoutMismatch(format!(
                "layout has {} prompt tokens, bank has {}",
                self.layout.m,
                self.bank.len()
            )));
        }
        let cast = cast_classification(ex, &self.layout, vocab, &self.verbalizer, self.max_len())?;
        Ok(LabeledInput {
            id: ex.id.clone(),
            language: ex.language.clone(),
            input: cast.input,
            target: cast.target,
            label: ex.label,
        })
    }

    pub fn cast_all(&self, examples: &[ClassificationExample], vocab: &Vocabulary) -> Result<Vec<LabeledInput>> {
        examples.iter().map(|e| self.cast(e, vocab)).collect()
    }

    fn example_loss(
        &self,
        store: &ParameterStore<f32>,
        mask: &TrainableMask,
        ex: &LabeledInput,
        prompts: Option<&Matrix<f32>>,
        prompts_trainable: bool,
    ) -> Result<(f64, Gradients<f32>, Option<Matrix<f32>>)> {
        let mask_index = ex
            .input
            .mask_index
            .ok_or_else(|| Error::LayoutMismatch(format!("input {} has no mask slot", ex.id)))?;
        let mut g = Graph::with_trainable(store, mask);
        let p = prompt_input(&mut g, prompts, prompts_trainable);
        let emb = compose_embeddings(&mut g, &self.model, &ex.input, p)?;
        let h = self.model.encode(&mut g, emb, &vec![true; ex.input.len()])?;
        let at_mask = g.rows(&[(h, mask_index)]);
        let logits = self.model.mlm_logits(&mut g, at_mask);
        let loss = g.cross_entropy(logits, &[Some(ex.target as usize)]);
        let mut grads = g.backward(loss);
        let dp = match p {
            Some(p) if prompts_trainable => grads.take_leaf(p),
            _ => None,
        };
        Ok((g.scalar(loss) as f64, grads, dp))
    }

    /// Mean loss of `batch` and its gradient with respect to every
    /// parameter enabled in `mask`.
    pub fn batch_gradients(
        &self,
        store: &ParameterStore<f32>,
        mask: &TrainableMask,
        examples: &[&LabeledInput],
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

    /// Label and renormalized candidate score for each input.
    pub fn predict(&self, store: &ParameterStore<f32>, inputs: &[MaskedInput]) -> Result<Vec<(u8, f64)>> {
        let prompts = self.bank.encode_matrix(store);
        let table = store.get(MaskedLanguageModel::<f32>::token_table(&self.model));
        inputs
            .par_iter()
            .map(|input| {
                let mask_index = input
                    .mask_index
                    .ok_or_else(|| Error::LayoutMismatch("input has no mask slot".into()))?;
                let emb = compose_embeddings_matrix(input, &prompts, table)?;
                let states = self.model.encode_states(store, &emb, &vec![true; input.len()])?;
                let dist = self.model.mlm_predict(store, states.row(mask_index))?;
                verbalize(&dist, &self.verbalizer)
            })
            .collect()
    }

    pub fn accuracy(&self, store: &ParameterStore<f32>, examples: &[LabeledInput]) -> Result<f64> {
        let inputs: Vec<MaskedInput> = examples.iter().map(|e| e.input.clone()).collect();
        let predicted: Vec<u8> = self.predict(store, &inputs)?.into_iter().map(|(l, _)| l).collect();
        let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
        crate::eval::metrics::accuracy(&predicted, &labels)
    }

    /// Mean verbalizer loss over `examples` without building gradients.
    pub fn mean_loss(&self, store: &ParameterStore<f32>, examples: &[LabeledInput]) -> Result<f64> {
        let none = TrainableMask::none(store.len());
        let refs: Vec<&LabeledInput> = examples.iter().collect();
        let prompts = self.bank.encode_matrix(store);
        let prompts = (!self.bank.is_empty()).then_some(prompts);
        let losses = refs
            .par_iter()
            .map(|ex| self.example_loss(store, &none, ex, prompts.as_ref(), false).map(|r| r.0))
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }
}

struct ClassificationObjective<'a> {
    clf: &'a PromptClassifier,
    train: &'a [LabeledInput],
    valid: &'a [LabeledInput],
}

impl Objective for ClassificationObjective<'_> {
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
        let examples: Vec<&LabeledInput> = batch.iter().map(|&i| &self.train[i]).collect();
        self.clf.batch_gradients(store, mask, &examples)
    }

    fn metric_name(&self) -> &str {
        "accuracy"
    }

    fn validate(&self, store: &ParameterStore<f32>) -> Result<Option<f64>> {
        self.clf.accuracy(store, self.valid).map(Some)
    }

    fn selection(&self) -> Selection {
        Selection::Maximize
    }
}

/// Trains on `train` and returns the parameters with the best validation
/// accuracy.
pub fn train_classifier(
    clf: &PromptClassifier,
    store: ParameterStore<f32>,
    train: &[LabeledInput],
    valid: &[LabeledInput],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if valid.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    fit(store, &ClassificationObjective { clf, train, valid }, config, on_epoch)
}
