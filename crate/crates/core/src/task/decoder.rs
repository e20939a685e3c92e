//! Transformer decoder header for the generative tasks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backend::layers::{
    AttentionMask, Binder, FeedForward, Init, Initializer, LayerNorm, Linear, MultiHeadAttention,
    ParamBuilder, INIT_STD,
};
use crate::backend::params::{ParamId, ParameterStore};
use crate::backend::transformer::HiddenStates;
use crate::backend::vocab::{SpecialIds, TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Float, Matrix};

pub const DECODER_PREFIX: &str = "decoder.";

fn default_layers() -> usize {
    6
}

fn default_heads() -> usize {
    4
}

fn default_max_target_len() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    /// `0` means four times the hidden width.
    #[serde(default)]
    pub ffn_dim: usize,
    #[serde(default = "default_max_target_len")]
    pub max_target_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: default_layers(),
            num_heads: default_heads(),
            ffn_dim: 0,
            max_target_len: default_max_target_len(),
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attention: MultiHeadAttention,
    self_norm: LayerNorm,
    cross_attention: MultiHeadAttention,
    cross_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DecoderHeader {
    config: DecoderConfig,
    hidden_dim: usize,
    vocab_size: usize,
    tokens: ParamId,
    positions: ParamId,
    embed_norm: LayerNorm,
    layers: Vec<DecoderLayer>,
    output: Linear,
}

impl DecoderHeader {
    fn build(b: &mut dyn ParamBuilder, config: &DecoderConfig, hidden_dim: usize, vocab_size: usize) -> Self {
        let d = hidden_dim;
        let ffn = if config.ffn_dim == 0 { 4 * d } else { config.ffn_dim };
        let tokens = b.param("decoder.embed.tokens", vocab_size, d, Init::Normal(INIT_STD));
        // One extra row for the leading BOS.
        let positions = b.param("decoder.embed.positions", config.max_target_len + 1, d, Init::Normal(INIT_STD));
        let embed_norm = LayerNorm::build(b, "decoder.embed.norm", d);
        let layers = (0..config.num_layers)
            .map(|i| {
                let p = format!("decoder.layers.{i}");
                DecoderLayer {
                    self_attention: MultiHeadAttention::build(b, &format!("{p}.self_attention"), d, config.num_heads),
                    self_norm: LayerNorm::build(b, &format!("{p}.self_norm"), d),
                    cross_attention: MultiHeadAttention::build(b, &format!("{p}.cross_attention"), d, config.num_heads),
                    cross_norm: LayerNorm::build(b, &format!("{p}.cross_norm"), d),
                    ffn: FeedForward::build(b, &format!("{p}.ffn"), d, ffn),
                    ffn_norm: LayerNorm::build(b, &format!("{p}.ffn_norm"), d),
                }
            })
            .collect();
        let output = Linear::build(b, "decoder.output", d, vocab_size);
        Self {
            config: config.clone(),
            hidden_dim,
            vocab_size,
            tokens,
            positions,
            embed_norm,
            layers,
            output,
        }
    }

    fn check(config: &DecoderConfig, hidden_dim: usize) -> Result<()> {
        if config.num_heads == 0 || !hidden_dim.is_multiple_of(config.num_heads) {
            return Err(Error::Config(format!(
                "decoder heads {} do not divide hidden width {hidden_dim}",
                config.num_heads
            )));
        }
        if config.max_target_len == 0 {
            return Err(Error::Config("decoder max_target_len must be positive".into()));
        }
        Ok(())
    }

    pub fn init<T: Float, R: Rng>(
        store: &mut ParameterStore<T>,
        config: &DecoderConfig,
        hidden_dim: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::check(config, hidden_dim)?;
        let mut init = Initializer::new(store, rng);
        let header = Self::build(&mut init, config, hidden_dim, vocab_size);
        init.finish()?;
        Ok(header)
    }

    pub fn bind<T: Float>(
        store: &ParameterStore<T>,
        config: &DecoderConfig,
        hidden_dim: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        Self::check(config, hidden_dim)?;
        let mut binder = Binder::new(store);
        let header = Self::build(&mut binder, config, hidden_dim, vocab_size);
        binder.finish()?;
        Ok(header)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Longest decoder input the position table supports.
    pub fn max_input_len(&self) -> usize {
        self.config.max_target_len + 1
    }

    /// Next-token logits (`len × vocab`) for every prefix of `inputs`,
    /// attending over the encoder `memory`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, memory: Var, inputs: &[TokenId]) -> Result<Var> {
        let len = inputs.len();
        if len > self.max_input_len() {
            return Err(Error::InputTooLong {
                len,
                limit: self.max_input_len(),
            });
        }
        let memory_dim = g.shape(memory).1;
        if memory_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "encoder states have width {memory_dim}, decoder expects {}",
                self.hidden_dim
            )));
        }
        let table = g.param(self.tokens);
        let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let x = g.gather(table, &ids);
        let pos_table = g.param(self.positions);
        let pos_ids: Vec<usize> = (0..len).collect();
        let pos = g.gather(pos_table, &pos_ids);
        let x = g.add(x, pos);
        let mut x = self.embed_norm.forward(g, x);
        let causal = AttentionMask {
            key_valid: None,
            causal: true,
        };
        for layer in &self.layers {
            let a = layer.self_attention.forward(g, x, x, causal);
            let r = g.add(x, a);
            x = layer.self_norm.forward(g, r);
            let c = layer.cross_attention.forward(g, x, memory, AttentionMask::default());
            let r = g.add(x, c);
            x = layer.cross_norm.forward(g, r);
            let f = layer.ffn.forward(g, x);
            let r = g.add(x, f);
            x = layer.ffn_norm.forward(g, r);
        }
        Ok(self.output.forward(g, x))
    }

    fn next_log_probs<T: Float>(
        &self,
        store: &ParameterStore<T>,
        memory: &Matrix<T>,
        prefix: &[TokenId],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let mem = g.constant(memory.clone());
        let logits = self.forward(&mut g, mem, prefix)?;
        let row = g.value(logits).row(prefix.len() - 1);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("decoder produced non-finite logits".into()));
        }
        let lse = log_sum_exp(row).to_f64_lossy();
        Ok(row.iter().map(|v| v.to_f64_lossy() - lse).collect())
    }
}

/// Decoder inputs `[BOS] y` and outputs `y [EOS]` for teacher forcing.
pub fn teacher_forcing(target: &[TokenId], special: SpecialIds) -> (TokenSequence, TokenSequence) {
    let mut inputs = Vec::with_capacity(target.len() + 1);
    inputs.push(special.bos);
    inputs.extend_from_slice(target);
    let mut outputs = target.to_vec();
    outputs.push(special.eos);
    (inputs, outputs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Strategy {
    #[default]
    Greedy,
    Beam { size: usize },
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Generates up to `max_len` tokens after BOS. The returned sequence ends
/// with EOS when the model emitted one.
pub fn decode<T: Float>(
    encoder_states: &HiddenStates<T>,
    header: &DecoderHeader,
    store: &ParameterStore<T>,
    special: SpecialIds,
    max_len: usize,
    strategy: Strategy,
) -> Result<TokenSequence> {
    let max_len = max_len.max(1).min(header.max_input_len() - 1).max(1);
    let memory = encoder_states.matrix();
    match strategy {
        Strategy::Greedy => {
            let mut prefix = vec![special.bos];
            for _ in 0..max_len {
                let lp = header.next_log_probs(store, memory, &prefix)?;
                let next = argmax(&lp) as TokenId;
                prefix.push(next);
                if next == special.eos {
                    break;
                }
            }
            Ok(prefix[1..].to_vec())
        }
        Strategy::Beam { size } => beam_search(memory, header, store, special, max_len, size.max(1)),
    }
}

fn beam_search<T: Float>(
    memory: &Matrix<T>,
    header: &DecoderHeader,
    store: &ParameterStore<T>,
    special: SpecialIds,
    max_len: usize,
    size: usize,
) -> Result<TokenSequence> {
    let normalized = |tokens: &[TokenId], score: f64| score / (tokens.len() - 1) as f64;
    let mut alive: Vec<(TokenSequence, f64)> = vec![(vec![special.bos], 0.0)];
    let mut finished: Vec<(TokenSequence, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(TokenSequence, f64)> = Vec::new();
        for (prefix, score) in &alive {
            let lp = header.next_log_probs(store, memory, prefix)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(size) {
                let mut next = prefix.clone();
                next.push(tok as TokenId);
                candidates.push((next, score + lp[tok]));
            }
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
        alive.clear();
        for (tokens, score) in candidates.into_iter().take(size) {
            if *tokens.last().expect("non-empty") == special.eos {
                finished.push((tokens, score));
            } else {
                alive.push((tokens, score));
            }
        }
        if finished.len() >= size || alive.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { alive } else { finished };
    let best = pool
        .into_iter()
        .map(|(t, s)| {
            let n = normalized(&t, s);
            (t, n)
        })
        .fold(None::<(TokenSequence, f64)>, |acc, (t, n)| match acc {
            Some((bt, bn)) if bn >= n => Some((bt, bn)),
            _ => Some((t, n)),
        })
        .expect("beam pool is never empty");
    Ok(best.0[1..].to_vec())
}

/// Drops a trailing EOS.
pub fn strip_eos(mut tokens: TokenSequence, special: SpecialIds) -> TokenSequence {
    if tokens.last() == Some(&special.eos) {
        tokens.pop();
    }
    tokens
}

/// Mean per-token cross-entropy over the non-padding positions of
/// `target`.
pub fn seq2seq_loss<T: Float>(logits: &Matrix<T>, target: &[TokenId], pad: TokenId) -> Result<f64> {
    if logits.rows() != target.len() {
        return Err(Error::Config(format!(
            "{} logit rows for a target of length {}",
            logits.rows(),
            target.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &t) in target.iter().enumerate() {
        if t == pad {
            continue;
        }
        let row = logits.row(r);
        total += (log_sum_exp(row) - row[t as usize]).to_f64_lossy();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyTarget);
    }
    Ok(total / count as f64)
}

/// Graph form of [`seq2seq_loss`].
pub fn seq2seq_loss_var<T: Float>(g: &mut Graph<'_, T>, logits: Var, target: &[TokenId], pad: TokenId) -> Result<Var> {
    let targets: Vec<Option<usize>> = target
        .iter()
        .map(|&t| (t != pad).then_some(t as usize))
        .collect();
    if targets.iter().all(Option::is_none) {
        return Err(Error::EmptyTarget);
    }
    Ok(g.cross_entropy(logits, &targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::TrainableMask;
    use crate::backend::vocab::Vocabulary;
    use crate::train::optim::{AdamW, OptimizerState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn special() -> SpecialIds {
        Vocabulary::build(["x"], &[], &[], 100).unwrap().special()
    }

    fn small() -> DecoderConfig {
        DecoderConfig {
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 32,
            max_target_len: 12,
        }
    }

    #[test]
    fn loss_reference_values() {
        let logits = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 0.5, 0.0, 0.0, 3.0]);
        let target = [1, 2];
        let p = |row: &[f64], t: usize| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row[t].exp() / z
        };
        let expected = -(p(&[1.0, 2.0, 0.5], 1).ln() + p(&[0.0, 0.0, 3.0], 2).ln()) / 2.0;
        assert!((seq2seq_loss(&logits, &target, 0).unwrap() - expected).abs() < 1e-12);
        let uniform = Matrix::<f64>::zeros(4, 9);
        assert!((seq2seq_loss(&uniform, &[3, 4, 5, 6], 0).unwrap() - 9f64.ln()).abs() < 1e-12);
        let sharp = Matrix::from_vec(1, 3, vec![-1e3f64, 1e3, -1e3]);
        assert_eq!(seq2seq_loss(&sharp, &[1], 0).unwrap(), 0.0);
    }

    #[test]
    fn padding_is_excluded_and_all_padding_is_an_error() {
        let logits = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 0.5, 9.0, -4.0, 3.0]);
        let one = seq2seq_loss(&Matrix::from_vec(1, 3, vec![1.0f64, 2.0, 0.5]), &[2], 0).unwrap();
        assert!((seq2seq_loss(&logits, &[2, 0], 0).unwrap() - one).abs() < 1e-12);
        assert!(matches!(seq2seq_loss(&logits, &[0, 0], 0), Err(Error::EmptyTarget)));
    }

    fn overfit(steps: usize) -> (ParameterStore<f32>, DecoderHeader, HiddenStates<f32>, Vec<f32>) {
        let sp = special();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParameterStore::new();
        let header = DecoderHeader::init(&mut store, &small(), 16, 20, &mut rng).unwrap();
        let memory = Matrix::<f32>::randn(5, 16, 1.0, &mut rng);
        let target = vec![9, 12, 15, 9];
        let (inputs, outputs) = teacher_forcing(&target, sp);
        let mask = TrainableMask::all(store.len());
        let mut state = OptimizerState::new(store.len());
        let mut losses = Vec::new();
        for _ in 0..steps {
            let (loss, grads) = {
                let mut g = Graph::with_trainable(&store, &mask);
                let mem = g.constant(memory.clone());
                let logits = header.forward(&mut g, mem, &inputs).unwrap();
                let loss = seq2seq_loss_var(&mut g, logits, &outputs, sp.pad).unwrap();
                (g.scalar(loss), g.backward(loss))
            };
            losses.push(loss);
            AdamW::default().step(&mut store, &mut state, &grads, 3e-3);
        }
        (store, header, HiddenStates::new(memory).unwrap(), losses)
    }

    #[test]
    fn overfit_single_pair_is_reproduced() {
        let sp = special();
        let (store, header, states, losses) = overfit(200);
        assert!(losses.last().unwrap() < &losses[0]);
        let greedy = decode(&states, &header, &store, sp, 10, Strategy::Greedy).unwrap();
        assert_eq!(strip_eos(greedy.clone(), sp), vec![9, 12, 15, 9]);
        assert_eq!(*greedy.last().unwrap(), sp.eos);
        let beam1 = decode(&states, &header, &store, sp, 10, Strategy::Beam { size: 1 }).unwrap();
        assert_eq!(beam1, greedy);
        let beam5 = decode(&states, &header, &store, sp, 10, Strategy::Beam { size: 5 }).unwrap();
        assert_eq!(beam5, greedy);
    }

    #[test]
    fn max_len_one_gives_one_token() {
        let sp = special();
        let (store, header, states, _) = overfit(1);
        let out = decode(&states, &header, &store, sp, 1, Strategy::Greedy).unwrap();
        assert_eq!(out.len(), 1);
        let out = decode(&states, &header, &store, sp, 1, Strategy::Beam { size: 3 }).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn binder_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::<f32>::new();
        DecoderHeader::init(&mut store, &small(), 16, 20, &mut rng).unwrap();
        assert!(DecoderHeader::bind(&store, &small(), 16, 20).is_ok());
        assert!(matches!(
            DecoderHeader::bind(&store, &small(), 16, 21),
            Err(Error::Incompatible(_))
        ));
        assert_eq!(DecoderConfig::default().num_layers, 6);
    }
}
