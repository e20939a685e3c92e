//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameter leaves borrow
//! their values from a [`ParameterStore`] instead of copying them, and
//! parameters outside the trainable set are treated as constants so their
//! weight gradients are never computed. Gradients come back as a
//! [`Gradients`] value indexed by [`ParamId`], which can be summed across
//! examples and handed to an optimizer.

use std::collections::HashMap;

use crate::backend::params::{ParamId, ParameterStore};
use crate::tensor::{cast, softmax_in_place, Float, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Rows(Vec<(Var, usize)>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix<T>,
        count: usize,
    },
}

struct Node<T> {
    op: Op<T>,
    /// `None` for parameter leaves; their value lives in the store.
    value: Option<Matrix<T>>,
    needs_grad: bool,
}

/// Per-parameter gradients plus gradients of requested input leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<Option<Matrix<T>>>,
    leaves: HashMap<Var, Matrix<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn zeros(num_params: usize) -> Self {
        Self {
            params: vec![None; num_params],
            leaves: HashMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params.get(id).and_then(Option::as_ref)
    }

    pub fn leaf(&self, var: Var) -> Option<&Matrix<T>> {
        self.leaves.get(&var)
    }

    pub fn take_leaf(&mut self, var: Var) -> Option<Matrix<T>> {
        self.leaves.remove(&var)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }

    pub fn add_param(&mut self, id: ParamId, grad: &Matrix<T>) {
        match &mut self.params[id] {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    /// Adds all parameter gradients of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (id, g) in other.iter() {
            self.add_param(id, g);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.params.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.params
            .iter()
            .flatten()
            .map(Matrix::sq_norm)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / (norm + cast(1e-6)));
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(Matrix::all_finite)
    }
}

/// Which parameters receive gradients.
#[derive(Debug, Clone)]
pub struct TrainableMask(Vec<bool>);

impl TrainableMask {
    pub fn all(num_params: usize) -> Self {
        Self(vec![true; num_params])
    }

    pub fn none(num_params: usize) -> Self {
        Self(vec![false; num_params])
    }

    pub fn from_prefixes<T: Float>(store: &ParameterStore<T>, prefixes: &[&str]) -> Self {
        Self(
            store
                .iter()
                .map(|(_, name, _)| prefixes.iter().any(|p| name.starts_with(p)))
                .collect(),
        )
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.0.get(id).copied().unwrap_or(false)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i)
    }
}

pub struct Graph<'s, T> {
    store: &'s ParameterStore<T>,
    trainable: Option<&'s TrainableMask>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'s, T: Float> Graph<'s, T> {
    /// A graph in which every parameter is trainable.
    pub fn new(store: &'s ParameterStore<T>) -> Self {
        Self {
            store,
            trainable: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// A graph in which only parameters in `mask` receive gradients.
    pub fn with_trainable(store: &'s ParameterStore<T>, mask: &'s TrainableMask) -> Self {
        Self {
            trainable: Some(mask),
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParameterStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(Op::Input, m, false)
    }

    /// Input leaf whose gradient is reported in [`Gradients::leaf`].
    pub fn leaf(&mut self, m: Matrix<T>) -> Var {
        self.push(Op::Input, m, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let needs_grad = self.trainable.is_none_or(|m| m.contains(id));
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), value, ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMulT(a, b), value, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), value, ng)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let mut value = self.value(a).clone();
        let r = r.row(0).to_vec();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(Op::AddRow(a, row), value, ng)
    }

    /// Adds a constant matrix (e.g. an additive attention mask).
    pub fn add_const(&mut self, a: Var, c: &Matrix<T>) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(c);
        let ng = self.ng(a);
        self.push(Op::AddConst(a), value, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), value, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), value, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(Op::Relu(a), value, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c: T = cast(GELU_C);
        let k: T = cast(GELU_A);
        let half: T = cast(0.5);
        let value = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(Op::Gelu(a), value, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        let ng = self.ng(a);
        self.push(Op::Tanh(a), value, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(Op::Sigmoid(a), value, ng)
    }

    /// Row-wise softmax. Rows that are entirely `-inf` become zeros.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(Op::Softmax(a), value, ng)
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n: T = cast(cols as f64);
        let eps: T = cast(LAYER_NORM_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, &gg), &bb) in value.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gg + bb;
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
            ng,
        )
    }

    /// Selects rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Matrix::from_vec(ids.len(), cols, data);
        let ng = self.ng(table);
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
            ng,
        )
    }

    /// Builds a matrix whose row `i` is row `sources[i].1` of node
    /// `sources[i].0`. All sources must share a width.
    pub fn rows(&mut self, sources: &[(Var, usize)]) -> Var {
        assert!(!sources.is_empty(), "rows() needs at least one source");
        let cols = self.value(sources[0].0).cols();
        let mut data = Vec::with_capacity(sources.len() * cols);
        let mut ng = false;
        for &(v, r) in sources {
            let m = self.value(v);
            assert_eq!(m.cols(), cols, "rows() width mismatch");
            data.extend_from_slice(m.row(r));
            ng |= self.ng(v);
        }
        let value = Matrix::from_vec(sources.len(), cols, data);
        self.push(Op::Rows(sources.to_vec()), value, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), value, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let m = self.value(x);
        assert!(start + width <= m.cols(), "slice_cols out of range");
        let value = Matrix::from_fn(m.rows(), width, |r, c| m.get(r, start + c));
        let ng = self.ng(x);
        self.push(Op::SliceCols { x, start }, value, ng)
    }

    /// Mean over rows, giving a `1 × cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let n: T = cast(m.rows() as f64);
        let value = Matrix::from_fn(1, m.cols(), |_, c| {
            (0..m.rows()).map(|r| m.get(r, c)).sum::<T>() / n
        });
        let ng = self.ng(x);
        self.push(Op::MeanRows(x), value, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::from_vec(1, 1, vec![self.value(x).sum()]);
        let ng = self.ng(x);
        self.push(Op::Sum(x), value, ng)
    }

    /// Mean token cross-entropy of row-wise softmax(logits) against
    /// `targets`; rows whose target is `None` are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target per logits row");
        let mut probs = l.clone();
        let mut total = T::zero();
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            softmax_in_place(probs.row_mut(r));
            if let Some(t) = *t {
                let lse = crate::tensor::log_sum_exp(l.row(r));
                total += lse - l.get(r, t);
                count += 1;
            }
        }
        let loss = if count > 0 {
            total / cast(count as f64)
        } else {
            T::zero()
        };
        let ng = self.ng(logits);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            Matrix::from_vec(1, 1, vec![loss]),
            ng,
        )
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        self.backward_with(vec![(loss, Matrix::filled(1, 1, T::one()))])
    }

    /// Backpropagates from arbitrary seed gradients.
    pub fn backward_with(&self, seeds: Vec<(Var, Matrix<T>)>) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(v), "seed gradient shape");
            accumulate(&mut grads, v, g);
        }
        let mut out = Gradients::zeros(self.store.len());
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {
                    out.leaves.insert(Var(idx), dy);
                }
                Op::Param(id) => out.add_param(*id, &dy),
                op => self.backward_op(op, Var(idx), &dy, &mut grads),
            }
        }
        out
    }

    fn backward_op(&self, op: &Op<T>, out: Var, dy: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, self.value(*a).t_matmul(dy));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, dy.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.ng(*row) {
                    accumulate(grads, *row, column_sums(dy));
                }
            }
            Op::AddConst(a) => accumulate(grads, *a, dy.clone()),
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, dy.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, dy.map(|g| g * s));
            }
            Op::Relu(a) => {
                let d = dy.zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() });
                accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let c: T = cast(GELU_C);
                let k: T = cast(GELU_A);
                let half: T = cast(0.5);
                let three: T = cast(3.0);
                let d = dy.zip_map(self.value(*a), |g, x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    g * (half * (T::one() + t) + half * x * dt)
                });
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = dy.zip_map(self.value(out), |g, y| g * (T::one() - y * y));
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = dy.zip_map(self.value(out), |g, y| g * y * (T::one() - y));
                accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = self.value(out);
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = dy.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for ((o, &p), &g) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (g - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                if self.ng(*beta) {
                    accumulate(grads, *beta, column_sums(dy));
                }
                if self.ng(*gamma) {
                    let prod = dy.zip_map(xhat, |g, h| g * h);
                    accumulate(grads, *gamma, column_sums(&prod));
                }
                if self.ng(*x) {
                    let g = self.value(*gamma).row(0);
                    let n: T = cast(cols as f64);
                    let mut dx = Matrix::zeros(rows, cols);
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let dxhat: Vec<T> =
                            dy.row(r).iter().zip(g).map(|(&d, &gg)| d * gg).collect();
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dh: T = dxhat.iter().zip(xhat.row(r)).map(|(&d, &h)| d * h).sum();
                        let scale = inv / n;
                        for ((o, &d), &h) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *o = scale * (n * d - sum_d - h * sum_dh);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gather { table, ids } => {
                let (rows, cols) = self.shape(*table);
                let mut d = Matrix::zeros(rows, cols);
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &g) in d.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::Rows(sources) => {
                let mut partial: HashMap<Var, Matrix<T>> = HashMap::new();
                for (r, &(v, src_row)) in sources.iter().enumerate() {
                    if !self.ng(v) {
                        continue;
                    }
                    let (rows, cols) = self.shape(v);
                    let d = partial.entry(v).or_insert_with(|| Matrix::zeros(rows, cols));
                    for (o, &g) in d.row_mut(src_row).iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                let mut partial: Vec<_> = partial.into_iter().collect();
                partial.sort_by_key(|(v, _)| v.0);
                for (v, d) in partial {
                    accumulate(grads, v, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        let d = Matrix::from_fn(dy.rows(), w, |r, c| dy.get(r, offset + c));
                        accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                accumulate(grads, *x, d);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let n: T = cast(rows as f64);
                let d = Matrix::from_fn(rows, cols, |_, c| dy.get(0, c) / n);
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let (rows, cols) = self.shape(*x);
                accumulate(grads, *x, Matrix::filled(rows, cols, dy.get(0, 0)));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = dy.get(0, 0) / cast(*count as f64);
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for (o, &p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o = p * scale;
                        }
                        let v = d.get(r, t) - scale;
                        d.set(r, t, v);
                    }
                }
                accumulate(grads, *logits, d);
            }
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Float>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}


#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(rng: &mut ChaCha8Rng) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("a", Matrix::randn(3, 4, 1.0, rng)).unwrap();
        s.insert("b", Matrix::randn(4, 5, 1.0, rng)).unwrap();
        s.insert("c", Matrix::randn(3, 5, 1.0, rng)).unwrap();
        s.insert("row", Matrix::randn(1, 5, 1.0, rng)).unwrap();
        s.insert("gamma", Matrix::randn(1, 5, 1.0, rng)).unwrap();
        s.insert("beta", Matrix::randn(1, 5, 1.0, rng)).unwrap();
        s.insert("table", Matrix::randn(6, 4, 1.0, rng)).unwrap();
        s
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = store_with(&mut rng);
        let weights = Matrix::<f64>::randn(3, 5, 1.0, &mut rng);
        let loss_fn = |s: &ParameterStore<f64>| {
            let mut g = Graph::new(s);
            let a = g.param(0);
            let b = g.param(1);
            let c = g.param(2);
            let row = g.param(3);
            let gamma = g.param(4);
            let beta = g.param(5);
            let table = g.param(6);
            let ab = g.matmul(a, b);
            let abr = g.add_row(ab, row);
            let ln = g.layer_norm(abr, gamma, beta);
            let ge = g.gelu(ln);
            let sm = g.softmax(ge);
            let th = g.tanh(c);
            let sg = g.sigmoid(c);
            let prod = g.mul(th, sg);
            let mixed = g.add(sm, prod);
            let rl = g.relu(mixed);
            let gathered = g.gather(table, &[0, 2, 2]);
            let gt = g.matmul_t(gathered, a);
            let sliced = g.slice_cols(rl, 1, 3);
            let cat = g.concat_cols(&[gt, sliced]);
            let picked = g.rows(&[(cat, 2), (cat, 0), (cat, 1)]);
            let scaled = g.scale(picked, 0.7);
            let mean = g.mean_rows(scaled);
            let w = g.constant(weights.clone());
            let weighted = g.mul(rl, w);
            let s1 = g.sum(weighted);
            let s2 = g.sum(mean);
            let ce = g.cross_entropy(cat, &[Some(1), None, Some(4)]);
            let s12 = g.add(s1, s2);
            let total = g.add(s12, ce);
            let loss = g.scalar(total);
            (loss, g.backward(total))
        };
        let worst = check_params(&mut store, 64, &mut rng, loss_fn);
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = store_with(&mut rng);
        let mask = TrainableMask::from_prefixes(&store, &["b"]);
        let mut g = Graph::with_trainable(&store, &mask);
        let a = g.param(0);
        let b = g.param(1);
        let ab = g.matmul(a, b);
        let loss = g.sum(ab);
        let grads = g.backward(loss);
        assert!(grads.param(0).is_none());
        assert!(grads.param(1).is_some());
    }

    #[test]
    fn leaf_gradients_are_reported() {
        let store = ParameterStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        let y = g.mul(x, x);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        assert_eq!(grads.leaf(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut grads = Gradients::<f64>::zeros(1);
        grads.add_param(0, &Matrix::from_vec(1, 2, vec![3.0, 4.0]));
        let before = grads.clip_global_norm(1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() < 1e-6);
    }
}
