//! Bidirectional transformer encoder with a masked-language-model head.
//!
//! The layout mirrors BERT/RoBERTa (learned positions, post-norm residual
//! blocks, GELU feed-forward, transform + tied decoder MLM head), so weights
//! exported from such a model can be bound through the archive adapter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backend::layers::{
    AttentionMask, Binder, FeedForward, Init, Initializer, LayerNorm, Linear, MultiHeadAttention,
    ParamBuilder, INIT_STD,
};
use crate::backend::params::{ParamId, ParameterStore};
use crate::backend::vocab::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Float, Matrix};

/// Parameter name prefixes that make up the pre-trained backbone.
pub const BACKBONE_PREFIXES: [&str; 2] = ["encoder.", "mlm."];

fn default_max_seq_len() -> usize {
    512
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Feed-forward width; `0` means `4 × hidden_dim`.
    #[serde(default)]
    pub ffn_dim: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Share the MLM output projection with the token embedding table.
    #[serde(default = "default_true")]
    pub tie_mlm_head: bool,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, 4 heads, width 128.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            hidden_dim: 128,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 512,
            max_seq_len: 512,
            vocab_size,
            tie_mlm_head: true,
        }
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.hidden_dim
        } else {
            self.ffn_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("hidden_dim and num_heads must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-position encoder outputs (`len × hidden_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<T>(Matrix<T>);

impl<T: Float> HiddenStates<T> {
    pub fn new(states: Matrix<T>) -> Result<Self> {
        if !states.all_finite() {
            return Err(Error::Numeric("hidden states contain non-finite values".into()));
        }
        Ok(Self(states))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.0
    }
}

/// A pre-trained masked language model: token embedding table, encoder and
/// MLM head. Implementations only describe graph construction; parameters
/// live in the caller's [`ParameterStore`].
pub trait MaskedLanguageModel<T: Float>: Send + Sync {
    fn config(&self) -> &ModelConfig;

    /// Id of the `vocab × hidden` token embedding table.
    fn token_table(&self) -> ParamId;

    /// Embedding rows for `ids`.
    fn embed_tokens(&self, g: &mut Graph<'_, T>, ids: &[TokenId]) -> Var {
        let table = g.param(self.token_table());
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        g.gather(table, &ids)
    }

    /// Contextual states for a `len × hidden` input embedding matrix.
    /// `attention_mask[i] == false` marks padding.
    fn encode(&self, g: &mut Graph<'_, T>, embeddings: Var, attention_mask: &[bool]) -> Result<Var>;

    /// Vocabulary logits for each row of `hidden`.
    fn mlm_logits(&self, g: &mut Graph<'_, T>, hidden: Var) -> Var;
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attention: MultiHeadAttention,
    attention_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct MlmHead {
    transform: Linear,
    norm: LayerNorm,
    decoder: ParamId,
    tied: bool,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct ToyTransformer {
    config: ModelConfig,
    tokens: ParamId,
    positions: ParamId,
    embed_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    mlm: MlmHead,
}

impl ToyTransformer {
    fn build(b: &mut dyn ParamBuilder, config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let tokens = b.param("encoder.embed.tokens", config.vocab_size, d, Init::Normal(INIT_STD));
        let positions = b.param("encoder.embed.positions", config.max_seq_len, d, Init::Normal(INIT_STD));
        let embed_norm = LayerNorm::build(b, "encoder.embed.norm", d);
        let layers = (0..config.num_layers)
            .map(|i| {
                let p = format!("encoder.layers.{i}");
                EncoderLayer {
                    attention: MultiHeadAttention::build(b, &format!("{p}.attention"), d, config.num_heads),
                    attention_norm: LayerNorm::build(b, &format!("{p}.attention_norm"), d),
                    ffn: FeedForward::build(b, &format!("{p}.ffn"), d, config.ffn_width()),
                    ffn_norm: LayerNorm::build(b, &format!("{p}.ffn_norm"), d),
                }
            })
            .collect();
        let transform = Linear::build(b, "mlm.transform", d, d);
        let norm = LayerNorm::build(b, "mlm.norm", d);
        let (decoder, tied) = if config.tie_mlm_head {
            (tokens, true)
        } else {
            (b.param("mlm.decoder", config.vocab_size, d, Init::Normal(INIT_STD)), false)
        };
        let bias = b.param("mlm.bias", 1, config.vocab_size, Init::Zeros);
        Self {
            config: config.clone(),
            tokens,
            positions,
            embed_norm,
            layers,
            mlm: MlmHead {
                transform,
                norm,
                decoder,
                tied,
                bias,
            },
        }
    }

    /// Registers freshly initialized backbone parameters in `store`.
    pub fn init<T: Float, R: Rng>(
        store: &mut ParameterStore<T>,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(store, rng);
        let model = Self::build(&mut init, config);
        init.finish()?;
        Ok(model)
    }

    /// Binds to backbone parameters already present in `store`.
    pub fn bind<T: Float>(store: &ParameterStore<T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut binder = Binder::new(store);
        let model = Self::build(&mut binder, config);
        binder.finish()?;
        Ok(model)
    }

    pub fn is_tied(&self) -> bool {
        self.mlm.tied
    }

    pub fn position_table(&self) -> ParamId {
        self.positions
    }

    /// Non-differentiable forward pass over a plain embedding matrix.
    pub fn encode_states<T: Float>(
        &self,
        store: &ParameterStore<T>,
        embeddings: &Matrix<T>,
        attention_mask: &[bool],
    ) -> Result<HiddenStates<T>> {
        let mut g = Graph::new(store);
        let x = g.constant(embeddings.clone());
        let h = self.encode(&mut g, x, attention_mask)?;
        HiddenStates::new(g.value(h).clone())
    }

    /// Probability distribution over the vocabulary for one hidden vector.
    pub fn mlm_predict<T: Float>(&self, store: &ParameterStore<T>, hidden: &[T]) -> Result<Vec<T>> {
        if hidden.len() != self.config.hidden_dim {
            return Err(Error::Config(format!(
                "hidden vector has {} entries, expected {}",
                hidden.len(),
                self.config.hidden_dim
            )));
        }
        let mut g = Graph::new(store);
        let h = g.constant(Matrix::row_vector(hidden.to_vec()));
        let logits = self.mlm_logits(&mut g, h);
        probabilities(g.value(logits).row(0))
    }
}

/// Softmax over a logit row, refusing to propagate non-finite values.
pub fn probabilities<T: Float>(logits: &[T]) -> Result<Vec<T>> {
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("logit {i} is not finite")));
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    Ok(p)
}

impl<T: Float> MaskedLanguageModel<T> for ToyTransformer {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn token_table(&self) -> ParamId {
        self.tokens
    }

    fn encode(&self, g: &mut Graph<'_, T>, embeddings: Var, attention_mask: &[bool]) -> Result<Var> {
        let (len, dim) = g.shape(embeddings);
        if len > self.config.max_seq_len {
            return Err(Error::InputTooLong {
                len,
                limit: self.config.max_seq_len,
            });
        }
        if attention_mask.len() != len {
            return Err(Error::Config(format!(
                "attention mask has {} entries for {len} positions",
                attention_mask.len()
            )));
        }
        if dim != self.config.hidden_dim {
            return Err(Error::Config(format!(
                "input embeddings have width {dim}, expected {}",
                self.config.hidden_dim
            )));
        }
        let pos_table = g.param(self.positions);
        let ids: Vec<usize> = (0..len).collect();
        let pos = g.gather(pos_table, &ids);
        let x = g.add(embeddings, pos);
        let mut x = self.embed_norm.forward(g, x);
        let mask = AttentionMask {
            key_valid: Some(attention_mask),
            causal: false,
        };
        for layer in &self.layers {
            let a = layer.attention.forward(g, x, x, mask);
            let r = g.add(x, a);
            x = layer.attention_norm.forward(g, r);
            let f = layer.ffn.forward(g, x);
            let r = g.add(x, f);
            x = layer.ffn_norm.forward(g, r);
        }
        Ok(x)
    }

    fn mlm_logits(&self, g: &mut Graph<'_, T>, hidden: Var) -> Var {
        let h = self.mlm.transform.forward(g, hidden);
        let h = g.gelu(h);
        let h = self.mlm.norm.forward(g, h);
        let w = g.param(self.mlm.decoder);
        let logits = g.matmul_t(h, w);
        let b = g.param(self.mlm.bias);
        g.add_row(logits, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_params;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(vocab: usize) -> ModelConfig {
        ModelConfig {
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 64,
            max_seq_len: 64,
            vocab_size: vocab,
            tie_mlm_head: true,
        }
    }

    fn model<T: Float>(seed: u64, cfg: &ModelConfig) -> (ParameterStore<T>, ToyTransformer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let m = ToyTransformer::init(&mut store, cfg, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(10);
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.num_heads = 2;
        cfg.max_seq_len = 1;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::toy(8000).validate().is_ok());
    }

    #[test]
    fn encode_shape_contract() {
        let cfg = ModelConfig {
            hidden_dim: 64,
            num_heads: 4,
            ..small(20)
        };
        let (store, m) = model::<f32>(1, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::randn(24, 64, 1.0, &mut rng);
        let h = m.encode_states(&store, &x, &[true; 24]).unwrap();
        assert_eq!((h.len(), h.dim()), (24, 64));
    }

    #[test]
    fn overlong_input_names_the_limit() {
        let (store, m) = model::<f32>(1, &small(20));
        let x = Matrix::zeros(65, 32);
        match m.encode_states(&store, &x, &[true; 65]) {
            Err(Error::InputTooLong { len: 65, limit: 64 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn padding_does_not_leak_into_real_positions() {
        let (store, m) = model::<f32>(3, &small(20));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix::<f32>::randn(10, 32, 1.0, &mut rng);
        let mut b = a.clone();
        for v in b.row_mut(7) {
            *v += 3.0;
        }
        let mask: Vec<bool> = (0..10).map(|i| i != 7).collect();
        let ha = m.encode_states(&store, &a, &mask).unwrap();
        let hb = m.encode_states(&store, &b, &mask).unwrap();
        for i in (0..10).filter(|&i| i != 7) {
            assert_eq!(ha.row(i), hb.row(i), "row {i}");
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let (s1, m1) = model::<f32>(11, &small(20));
        let (s2, m2) = model::<f32>(11, &small(20));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::<f32>::randn(12, 32, 1.0, &mut rng);
        let a = m1.encode_states(&s1, &x, &[true; 12]).unwrap();
        let b = m2.encode_states(&s2, &x, &[true; 12]).unwrap();
        assert!(a
            .matrix()
            .data()
            .iter()
            .zip(b.matrix().data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let (mut store, m) = model::<f64>(6, &small(20));
        let pos = m.position_table();
        store.get_mut(pos).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Matrix::<f64>::randn(6, 32, 1.0, &mut rng);
        let perm = [3, 0, 5, 1, 4, 2];
        let px = Matrix::from_fn(6, 32, |r, c| x.get(perm[r], c));
        let h = m.encode_states(&store, &x, &[true; 6]).unwrap();
        let ph = m.encode_states(&store, &px, &[true; 6]).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for (a, b) in ph.row(r).iter().zip(h.row(src)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let (mut store, m) = model::<f64>(8, &small(20));
        for name in ["mlm.transform.weight", "mlm.transform.bias", "mlm.bias"] {
            let id = store.id(name).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        // With a zero transform the layer norm output is its bias (zero).
        let p = m.mlm_predict(&store, &[0.3; 32]).unwrap();
        assert_eq!(p.len(), 20);
        for v in p {
            assert!((v - 1.0 / 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_reference_values() {
        let p = probabilities(&[1.0f64, 2.0, 3.0]).unwrap();
        // exp(k) / (e + e^2 + e^3), evaluated independently.
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in p.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn non_finite_logits_surface_an_error() {
        assert!(matches!(
            probabilities(&[1.0f32, f32::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn untied_head_has_its_own_decoder() {
        let cfg = ModelConfig {
            tie_mlm_head: false,
            ..small(20)
        };
        let (store, m) = model::<f32>(1, &cfg);
        assert!(!m.is_tied());
        assert!(store.id("mlm.decoder").is_some());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 8,
            vocab_size: 11,
            tie_mlm_head: true,
        };
        let (mut store, m) = model::<f64>(9, &cfg);
        // Larger weights than the 0.02 init so every path carries signal.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for id in 0..store.len() {
            let (r, c) = store.get(id).shape();
            if !store.name(id).contains("norm") {
                *store.get_mut(id) = Matrix::randn(r, c, 0.5, &mut rng);
            }
        }
        let ids: Vec<TokenId> = vec![2, 5, 7, 1, 9];
        let loss_fn = |s: &ParameterStore<f64>| {
            let mut g = Graph::new(s);
            let x = m.embed_tokens(&mut g, &ids);
            let h = m.encode(&mut g, x, &[true, true, true, true, false]).unwrap();
            let logits = m.mlm_logits(&mut g, h);
            let loss = g.cross_entropy(logits, &[Some(3), None, Some(4), Some(0), None]);
            (g.scalar(loss), g.backward(loss))
        };
        let worst = check_params(&mut store, 64, &mut rng, loss_fn);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn softmax_normalizes(logits in proptest::collection::vec(-30.0f64..30.0, 1..200)) {
            let p = probabilities(&logits).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }
    }
}
