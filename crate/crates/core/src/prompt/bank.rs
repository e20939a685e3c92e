//! Trainable prompt embeddings reparameterized by a two-layer
//! bidirectional LSTM followed by a two-layer ReLU MLP.
//!
//! The raw `m × d` embeddings never reach the backbone directly: they are
//! run through the recurrent encoder so neighbouring prompts share
//! information, then projected back to the model width.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::backend::layers::{Binder, Init, Initializer, Linear, ParamBuilder, INIT_STD};
use crate::backend::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Matrix};

pub const PROMPT_PREFIX: &str = "prompt.";

#[derive(Debug, Clone)]
struct LstmCell {
    w_input: ParamId,
    w_hidden: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl LstmCell {
    fn build(b: &mut dyn ParamBuilder, name: &str, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_input: b.param(&format!("{name}.w_input"), input, 4 * hidden, Init::Uniform(bound)),
            w_hidden: b.param(&format!("{name}.w_hidden"), hidden, 4 * hidden, Init::Uniform(bound)),
            bias: b.param(&format!("{name}.bias"), 1, 4 * hidden, Init::Uniform(bound)),
            hidden,
        }
    }

    /// Runs over the rows of `xs` in the given order; returns one hidden
    /// row per input row, in input order.
    fn run<T: Float>(&self, g: &mut Graph<'_, T>, xs: Var, reverse: bool) -> Vec<Var> {
        let steps = g.shape(xs).0;
        let h_dim = self.hidden;
        let w_in = g.param(self.w_input);
        let w_h = g.param(self.w_hidden);
        let bias = g.param(self.bias);
        // All input projections at once.
        let projected = g.matmul(xs, w_in);
        let projected = g.add_row(projected, bias);
        let mut h = g.constant(Matrix::zeros(1, h_dim));
        let mut c = g.constant(Matrix::zeros(1, h_dim));
        let mut out = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let x_t = g.rows(&[(projected, t)]);
            let rec = g.matmul(h, w_h);
            let gates = g.add(x_t, rec);
            let i = g.slice_cols(gates, 0, h_dim);
            let f = g.slice_cols(gates, h_dim, h_dim);
            let cand = g.slice_cols(gates, 2 * h_dim, h_dim);
            let o = g.slice_cols(gates, 3 * h_dim, h_dim);
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let cand = g.tanh(cand);
            let o = g.sigmoid(o);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let c_act = g.tanh(c);
            h = g.mul(o, c_act);
            out[t] = h;
        }
        out
    }
}

#[derive(Debug, Clone)]
struct BiLstmLayer {
    forward: LstmCell,
    backward: LstmCell,
}

#[derive(Debug, Clone)]
pub struct PromptBank {
    m: usize,
    dim: usize,
    embeddings: Option<ParamId>,
    lstm: Vec<BiLstmLayer>,
    mlp: [Linear; 2],
}

impl PromptBank {
    const LSTM_LAYERS: usize = 2;

    fn build(b: &mut dyn ParamBuilder, m: usize, dim: usize) -> Self {
        let hidden = (dim / 2).max(1);
        let embeddings =
            (m > 0).then(|| b.param("prompt.embeddings", m, dim, Init::Normal(INIT_STD)));
        let lstm = (0..Self::LSTM_LAYERS)
            .map(|l| {
                let input = if l == 0 { dim } else { 2 * hidden };
                BiLstmLayer {
                    forward: LstmCell::build(b, &format!("prompt.lstm.{l}.forward"), input, hidden),
                    backward: LstmCell::build(b, &format!("prompt.lstm.{l}.backward"), input, hidden),
                }
            })
            .collect();
        let mlp = [
            Linear::build(b, "prompt.mlp.0", 2 * hidden, dim),
            Linear::build(b, "prompt.mlp.1", dim, dim),
        ];
        Self {
            m,
            dim,
            embeddings,
            lstm,
            mlp,
        }
    }

    pub fn init<T: Float, R: Rng>(
        store: &mut ParameterStore<T>,
        m: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("prompt width must be positive".into()));
        }
        let mut init = Initializer::new(store, rng);
        let bank = Self::build(&mut init, m, dim);
        init.finish()?;
        Ok(bank)
    }

    /// Fresh bank replacing any `prompt.*` arrays already in `store`.
    pub fn reinit<T: Float, R: Rng>(
        store: &mut ParameterStore<T>,
        m: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        store.remove_prefix(PROMPT_PREFIX);
        Self::init(store, m, dim, rng)
    }

    pub fn bind<T: Float>(store: &ParameterStore<T>, m: usize, dim: usize) -> Result<Self> {
        let mut binder = Binder::new(store);
        let bank = Self::build(&mut binder, m, dim);
        binder.finish()?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.m, self.dim]
    }

    /// `m × d` prompt vectors; `None` when the bank is empty.
    pub fn encode<T: Float>(&self, g: &mut Graph<'_, T>) -> Option<Var> {
        let table = g.param(self.embeddings?);
        let mut x = table;
        for layer in &self.lstm {
            let fwd = layer.forward.run(g, x, false);
            let bwd = layer.backward.run(g, x, true);
            let rows: Vec<Var> = fwd
                .into_iter()
                .zip(bwd)
                .map(|(f, b)| g.concat_cols(&[f, b]))
                .collect();
            let sources: Vec<(Var, usize)> = rows.into_iter().map(|r| (r, 0)).collect();
            x = g.rows(&sources);
        }
        let h = self.mlp[0].forward(g, x);
        let h = g.relu(h);
        Some(self.mlp[1].forward(g, h))
    }

    /// Plain evaluation of [`PromptBank::encode`].
    pub fn encode_matrix<T: Float>(&self, store: &ParameterStore<T>) -> Matrix<T> {
        let mut g = Graph::new(store);
        match self.encode(&mut g) {
            Some(v) => g.value(v).clone(),
            None => Matrix::zeros(0, self.dim),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::<f32>::new();
        let bank = PromptBank::init(&mut store, 10, 128, &mut rng).unwrap();
        let out = bank.encode_matrix(&store);
        assert_eq!(out.shape(), (10, 128));
        assert!(out.all_finite());
    }

    #[test]
    fn empty_bank_gives_empty_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::<f32>::new();
        let bank = PromptBank::init(&mut store, 0, 16, &mut rng).unwrap();
        assert_eq!(bank.encode_matrix(&store).shape(), (0, 16));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::<f64>::new();
        let bank = PromptBank::init(&mut store, 5, 8, &mut rng).unwrap();
        for id in 0..store.len() {
            if store.name(id) != "prompt.embeddings" {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let emb = store.id("prompt.embeddings").unwrap();
        *store.get_mut(emb) = Matrix::randn(5, 8, 3.0, &mut rng);
        let out = bank.encode_matrix(&store);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::<f32>::new();
        let bank = PromptBank::init(&mut store, 6, 16, &mut rng).unwrap();
        assert_eq!(bank.encode_matrix(&store), bank.encode_matrix(&store));
    }

    #[test]
    fn bind_reuses_existing_arrays() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::<f32>::new();
        let bank = PromptBank::init(&mut store, 6, 16, &mut rng).unwrap();
        let bound = PromptBank::bind(&store, 6, 16).unwrap();
        assert_eq!(bank.encode_matrix(&store), bound.encode_matrix(&store));
        assert!(PromptBank::bind(&store, 7, 16).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::<f64>::new();
        let bank = PromptBank::init(&mut store, 4, 6, &mut rng).unwrap();
        let target = Matrix::<f64>::randn(4, 6, 1.0, &mut rng);
        let loss_fn = |s: &ParameterStore<f64>| {
            let mut g = Graph::new(s);
            let p = bank.encode(&mut g).unwrap();
            let t = g.constant(target.clone());
            let prod = g.mul(p, t);
            let loss = g.sum(prod);
            (g.scalar(loss), g.backward(loss))
        };
        let worst = check_params(&mut store, 32, &mut rng, loss_fn);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
