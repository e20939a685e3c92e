//! Parameter registration and the layers shared by encoder, decoder,
//! prompt encoder and classification headers.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::backend::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Matrix};

/// Initial value distribution of a fresh parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    /// Uniform on `[-a, a]`.
    Uniform(f64),
    Zeros,
    Ones,
}

/// Standard deviation used for all randomly initialized weights.
pub const INIT_STD: f64 = 0.02;

/// Source of parameter ids while constructing a model: either registering
/// fresh arrays ([`Initializer`]) or binding to existing ones ([`Binder`]).
pub trait ParamBuilder {
    fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId;
}

pub struct Initializer<'a, T, R> {
    store: &'a mut ParameterStore<T>,
    rng: &'a mut R,
    problems: Vec<String>,
}

impl<'a, T: Float, R: Rng> Initializer<'a, T, R> {
    pub fn new(store: &'a mut ParameterStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            problems: Vec::new(),
        }
    }

    pub fn finish(self) -> Result<()> {
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.problems.join("; ")))
        }
    }
}

impl<T: Float, R: Rng> ParamBuilder for Initializer<'_, T, R> {
    fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        let value = match init {
            Init::Normal(std) => Matrix::randn(rows, cols, std, self.rng),
            Init::Uniform(a) => {
                Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(self.rng.random_range(-a..=a)))
            }
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, T::one()),
        };
        match self.store.insert(name, value) {
            Ok(id) => id,
            Err(e) => {
                self.problems.push(e.to_string());
                usize::MAX
            }
        }
    }
}

/// Resolves names against an existing store, collecting every missing or
/// mis-shaped array before failing.
pub struct Binder<'a, T> {
    store: &'a ParameterStore<T>,
    problems: Vec<String>,
}

impl<'a, T: Float> Binder<'a, T> {
    pub fn new(store: &'a ParameterStore<T>) -> Self {
        Self {
            store,
            problems: Vec::new(),
        }
    }

    pub fn finish(self) -> Result<()> {
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(self.problems))
        }
    }
}

impl<T: Float> ParamBuilder for Binder<'_, T> {
    fn param(&mut self, name: &str, rows: usize, cols: usize, _init: Init) -> ParamId {
        match self.store.expect(name, (rows, cols)) {
            Ok(id) => id,
            Err(Error::Incompatible(mut p)) => {
                self.problems.append(&mut p);
                usize::MAX
            }
            Err(e) => {
                self.problems.push(e.to_string());
                usize::MAX
            }
        }
    }
}

/// `y = x · W + b` with `W` stored input-major (`in × out`).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn build(b: &mut dyn ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: b.param(&format!("{name}.weight"), in_dim, out_dim, Init::Normal(INIT_STD)),
            bias: b.param(&format!("{name}.bias"), 1, out_dim, Init::Zeros),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn build(b: &mut dyn ParamBuilder, name: &str, dim: usize) -> Self {
        Self {
            gamma: b.param(&format!("{name}.gamma"), 1, dim, Init::Ones),
            beta: b.param(&format!("{name}.beta"), 1, dim, Init::Zeros),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Which keys a query may attend to.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionMask<'a> {
    /// `false` marks padding keys.
    pub key_valid: Option<&'a [bool]>,
    /// Query `i` may only see keys `0..=i`.
    pub causal: bool,
}

impl AttentionMask<'_> {
    fn additive<T: Float>(&self, q_len: usize, k_len: usize) -> Option<Matrix<T>> {
        if self.key_valid.is_none() && !self.causal {
            return None;
        }
        if let Some(valid) = self.key_valid {
            if !self.causal && valid.iter().all(|&v| v) {
                return None;
            }
        }
        Some(Matrix::from_fn(q_len, k_len, |i, j| {
            let padded = self.key_valid.is_some_and(|v| !v[j]);
            let future = self.causal && j > i;
            if padded || future {
                T::neg_infinity()
            } else {
                T::zero()
            }
        }))
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn build(b: &mut dyn ParamBuilder, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            query: Linear::build(b, &format!("{name}.query"), dim, dim),
            key: Linear::build(b, &format!("{name}.key"), dim, dim),
            value: Linear::build(b, &format!("{name}.value"), dim, dim),
            output: Linear::build(b, &format!("{name}.output"), dim, dim),
            heads,
        }
    }

    /// Scaled dot-product attention of `queries` over `memory`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        memory: Var,
        mask: AttentionMask<'_>,
    ) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let (q_len, dim) = g.shape(q);
        let k_len = g.shape(k).0;
        let head_dim = dim / self.heads;
        let q = g.scale(q, T::one() / T::from_f64_lossy(head_dim as f64).sqrt());
        let additive = mask.additive::<T>(q_len, k_len);
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let mut scores = g.matmul_t(qh, kh);
            if let Some(m) = &additive {
                scores = g.add_const(scores, m);
            }
            let probs = g.softmax(scores);
            outputs.push(g.matmul(probs, vh));
        }
        let merged = if outputs.len() == 1 {
            outputs[0]
        } else {
            g.concat_cols(&outputs)
        };
        self.output.forward(g, merged)
    }
}

/// Two-layer position-wise feed-forward block with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn build(b: &mut dyn ParamBuilder, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::build(b, &format!("{name}.up"), dim, hidden),
            down: Linear::build(b, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binder_lists_every_offending_name() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::<f32>::new();
        let mut init = Initializer::new(&mut store, &mut rng);
        Linear::build(&mut init, "l", 3, 4);
        init.finish().unwrap();
        let mut binder = Binder::new(&store);
        Linear::build(&mut binder, "l", 4, 4);
        LayerNorm::build(&mut binder, "n", 4);
        match binder.finish() {
            Err(Error::Incompatible(p)) => {
                assert_eq!(p.len(), 3, "{p:?}");
                assert!(p[0].starts_with("l.weight"));
                assert!(p[1].starts_with("n.gamma"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn causal_mask_blocks_future_keys() {
        let mask = AttentionMask {
            key_valid: None,
            causal: true,
        };
        let m = mask.additive::<f32>(3, 3).unwrap();
        assert_eq!(m.get(0, 1), f32::NEG_INFINITY);
        assert_eq!(m.get(2, 1), 0.0);
    }
}
