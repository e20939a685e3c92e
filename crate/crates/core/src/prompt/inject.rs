//! Template injection and embedding composition.

use std::ops::Range;

use crate::autograd::{Graph, Var};
use crate::backend::transformer::MaskedLanguageModel;
use crate::backend::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::prompt::layout::{Anchor, TemplateLayout};
use crate::tensor::{Float, Matrix};

/// One input position: a vocabulary token or the `k`-th prompt placeholder.
/// Prompt placeholders live outside the id space, so they can never collide
/// with a real token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Token(TokenId),
    Prompt(usize),
}

/// A model input with prompt placeholders and (optionally) a mask slot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskedInput {
    pub slots: Vec<Slot>,
    pub prompt_positions: Vec<usize>,
    /// `None` for generative inputs.
    pub mask_index: Option<usize>,
    pub segment_spans: Vec<Range<usize>>,
}

impl MaskedInput {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_prompts(&self) -> usize {
        self.prompt_positions.len()
    }

    /// Token ids, or `None` where a prompt sits.
    pub fn token_ids(&self) -> Vec<Option<TokenId>> {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::Token(t) => Some(t),
                Slot::Prompt(_) => None,
            })
            .collect()
    }

    /// Tokens of segment `i`.
    pub fn segment(&self, i: usize) -> Vec<TokenId> {
        self.slots[self.segment_spans[i].clone()]
            .iter()
            .filter_map(|s| match *s {
                Slot::Token(t) => Some(t),
                Slot::Prompt(_) => None,
            })
            .collect()
    }
}

/// Incremental construction of a [`MaskedInput`].
#[derive(Debug, Default)]
pub struct InputBuilder {
    input: MaskedInput,
}

impl InputBuilder {
    pub fn token(&mut self, id: TokenId) -> &mut Self {
        self.input.slots.push(Slot::Token(id));
        self
    }

    pub fn prompts(&mut self, count: usize) -> &mut Self {
        for _ in 0..count {
            let k = self.input.prompt_positions.len();
            self.input.prompt_positions.push(self.input.slots.len());
            self.input.slots.push(Slot::Prompt(k));
        }
        self
    }

    pub fn segment(&mut self, ids: &[TokenId]) -> &mut Self {
        let start = self.input.slots.len();
        self.input.slots.extend(ids.iter().map(|&t| Slot::Token(t)));
        self.input.segment_spans.push(start..self.input.slots.len());
        self
    }

    pub fn mask(&mut self, id: TokenId) -> &mut Self {
        self.input.mask_index = Some(self.input.slots.len());
        self.input.slots.push(Slot::Token(id));
        self
    }

    pub fn finish(self, max_len: usize) -> Result<MaskedInput> {
        if self.input.slots.len() > max_len {
            return Err(Error::InputTooLong {
                len: self.input.slots.len(),
                limit: max_len,
            });
        }
        Ok(self.input)
    }
}

/// Lays out `[CLS] P x1 P x2 P [MASK] P` according to `layout`.
pub fn inject(
    x1: &[TokenId],
    x2: Option<&[TokenId]>,
    layout: &TemplateLayout,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<MaskedInput> {
    match (layout.pair_mode, x2.is_some()) {
        (false, true) => {
            return Err(Error::LayoutMismatch(
                "single-segment layout given two inputs".into(),
            ))
        }
        (true, false) => {
            return Err(Error::LayoutMismatch(
                "pair layout given a single input".into(),
            ))
        }
        _ => {}
    }
    let sp = vocab.special();
    let mut b = InputBuilder::default();
    b.token(sp.cls)
        .prompts(layout.prompts_at(Anchor::BeforeFirst))
        .segment(x1);
    if let Some(x2) = x2 {
        b.prompts(layout.prompts_at(Anchor::BetweenSegments)).segment(x2);
    }
    b.prompts(layout.prompts_at(Anchor::BeforeMask))
        .mask(sp.mask)
        .prompts(layout.prompts_at(Anchor::AfterMask));
    b.finish(max_len)
}

/// Input embeddings: table rows at token positions, rows of
/// `prompt_vectors` (in order) at prompt positions.
pub fn compose_embeddings<T: Float>(
    g: &mut Graph<'_, T>,
    model: &dyn MaskedLanguageModel<T>,
    input: &MaskedInput,
    prompt_vectors: Option<Var>,
) -> Result<Var> {
    let m = input.num_prompts();
    let dim = model.config().hidden_dim;
    match prompt_vectors {
        Some(p) => {
            let (rows, cols) = g.shape(p);
            if rows != m || cols != dim {
                return Err(Error::Config(format!(
                    "prompt vectors are {rows}x{cols}, input needs {m}x{dim}"
                )));
            }
        }
        None if m > 0 => {
            return Err(Error::Config(format!(
                "input has {m} prompt slots but no prompt vectors were supplied"
            )))
        }
        None => {}
    }
    let token_ids: Vec<TokenId> = input.token_ids().into_iter().flatten().collect();
    if m == 0 {
        return Ok(model.embed_tokens(g, &token_ids));
    }
    let prompts = prompt_vectors.expect("checked above");
    if token_ids.is_empty() {
        return Ok(prompts);
    }
    let tokens = model.embed_tokens(g, &token_ids);
    let mut next_token = 0;
    let sources: Vec<(Var, usize)> = input
        .slots
        .iter()
        .map(|s| match *s {
            Slot::Token(_) => {
                next_token += 1;
                (tokens, next_token - 1)
            }
            Slot::Prompt(k) => (prompts, k),
        })
        .collect();
    Ok(g.rows(&sources))
}

/// Plain-matrix form of [`compose_embeddings`].
pub fn compose_embeddings_matrix<T: Float>(
    input: &MaskedInput,
    prompt_vectors: &Matrix<T>,
    table: &Matrix<T>,
) -> Result<Matrix<T>> {
    if prompt_vectors.rows() != input.num_prompts() {
        return Err(Error::Config(format!(
            "{} prompt vectors for {} prompt slots",
            prompt_vectors.rows(),
            input.num_prompts()
        )));
    }
    if input.num_prompts() > 0 && prompt_vectors.cols() != table.cols() {
        return Err(Error::Config(format!(
            "prompt width {} differs from embedding width {}",
            prompt_vectors.cols(),
            table.cols()
        )));
    }
    let mut out = Matrix::zeros(input.len(), table.cols());
    for (r, s) in input.slots.iter().enumerate() {
        let src = match *s {
            Slot::Token(t) => table.row(t as usize),
            Slot::Prompt(k) => prompt_vectors.row(k),
        };
        out.row_mut(r).copy_from_slice(src);
    }
    Ok(out)
}
