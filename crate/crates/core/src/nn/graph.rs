//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as it runs the forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that (transitively) depends on a parameter or a
//! gradient-tracked input.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    SoftmaxRows(Var),
    /// Row-wise standardisation; stores 1/σ per row.
    NormRows(Var, Vec<f64>),
    /// Column-wise standardisation; stores 1/σ per column.
    NormCols(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    SumAll(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Mode {
    Eval,
    Train(ChaCha8Rng),
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    mode: Mode,
    batch_stats: Vec<BatchStats>,
}

/// Gradients of one scalar with respect to every tracked node.
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    /// Inference graph: dropout off, batch norm uses running statistics.
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            mode: Mode::Eval,
            batch_stats: Vec::new(),
        }
    }

    /// Training graph; `rng` drives dropout and any sampling done through
    /// [`Graph::rng`].
    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            mode: Mode::Train(rng),
            batch_stats: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train(_))
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match &mut self.mode {
            Mode::Train(rng) => Some(rng),
            Mode::Eval => None,
        }
    }

    /// Hands the training RNG back (in its advanced state).
    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        match self.mode {
            Mode::Train(rng) => Some(rng),
            Mode::Eval => None,
        }
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }

    pub(crate) fn record_batch_stats(&mut self, stats: BatchStats) {
        self.batch_stats.push(stats);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf; repeated lookups of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        v
    }

    /// Parameter gradients from a backward pass, in parameter-id order.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Matrix)> {
        let mut out: Vec<(ParamId, Matrix)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row shape");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 × cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row shape");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Standardises each row to zero mean and unit variance (no affine).
    pub fn norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let mut inv = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv.push(is);
        }
        let rg = self.rg(a);
        self.push(v, Op::NormRows(a, inv), rg)
    }

    /// Standardises each column over the rows (batch statistics). Returns
    /// the normalised node plus the per-column mean and biased variance.
    pub fn norm_cols(&mut self, a: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let mut v = self.value(a).clone();
        let (rows, cols) = v.shape();
        let n = rows as f64;
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for (m, x) in mean.iter_mut().zip(v.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for r in 0..rows {
            for ((s, x), m) in var.iter_mut().zip(v.row(r)).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        for r in 0..rows {
            for ((x, m), is) in v.row_mut(r).iter_mut().zip(&mean).zip(&inv) {
                *x = (*x - m) * is;
            }
        }
        let rg = self.rg(a);
        (self.push(v, Op::NormCols(a, inv), rg), mean, var)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&vals);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&vals);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_rows(start, end);
        let rg = self.rg(a);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    /// Row gather; `None` entries produce zero rows (used for padding).
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Var {
        let v = self.value(a).gather_rows(&index);
        let rg = self.rg(a);
        self.push(v, Op::GatherRows(a, index), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    /// Mean over all elements.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `x · w + b` with `w: in × out` and `b: 1 × out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Inverted dropout. Identity in eval mode or when `rate` is 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let (rows, cols) = self.value(a).shape();
        let keep = 1.0 - rate;
        let mask = match &mut self.mode {
            Mode::Eval => return a,
            Mode::Train(rng) => {
                let data = (0..rows * cols)
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Matrix::from_vec(rows, cols, data)
            }
        };
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Grads { grads }
    }

    fn propagate(&self, i: usize, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let acc = |grads: &mut [Option<Matrix>], v: Var, g: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, dy.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(grads, *b, self.value(*a).matmul_tn(dy));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, dy.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(grads, *b, dy.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, dy.clone());
                if self.rg(*b) {
                    acc(grads, *b, dy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, dy.zip_map(self.value(*b), |g, x| g * x));
                }
                if self.rg(*b) {
                    acc(grads, *b, dy.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, dy.clone());
                if self.rg(*row) {
                    acc(grads, *row, col_sums(dy));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.rg(*a) {
                    let mut g = dy.clone();
                    for r in 0..g.rows() {
                        for (o, s) in g.row_mut(r).iter_mut().zip(rv.data()) {
                            *o *= s;
                        }
                    }
                    acc(grads, *a, g);
                }
                if self.rg(*row) {
                    acc(grads, *row, col_sums(&dy.zip_map(self.value(*a), |g, x| g * x)));
                }
            }
            Op::Scale(a, s) => acc(grads, *a, dy.map(|g| g * s)),
            Op::AddScalar(a) => acc(grads, *a, dy.clone()),
            Op::Relu(a) => acc(
                grads,
                *a,
                dy.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Sigmoid(a) => acc(grads, *a, dy.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(a) => acc(grads, *a, dy.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Exp(a) => acc(grads, *a, dy.zip_map(y, |g, e| g * e)),
            Op::Square(a) => acc(grads, *a, dy.zip_map(self.value(*a), |g, x| 2.0 * g * x)),
            Op::SoftmaxRows(a) => {
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let s: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for ((o, p), d) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o = p * (d - s);
                    }
                }
                acc(grads, *a, g);
            }
            Op::NormRows(a, inv) => {
                let mut g = Matrix::zeros(y.rows(), y.cols());
                let n = y.cols() as f64;
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let mean_d = dr.iter().sum::<f64>() / n;
                    let mean_dy = yr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, yv), d) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o = inv[r] * (d - mean_d - yv * mean_dy);
                    }
                }
                acc(grads, *a, g);
            }
            Op::NormCols(a, inv) => {
                let (rows, cols) = y.shape();
                let n = rows as f64;
                let mut mean_d = vec![0.0; cols];
                let mut mean_dy = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        mean_d[c] += dy.get(r, c);
                        mean_dy[c] += dy.get(r, c) * y.get(r, c);
                    }
                }
                let mut g = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let v = inv[c]
                            * (dy.get(r, c) - mean_d[c] / n - y.get(r, c) * mean_dy[c] / n);
                        g.set(r, c, v);
                    }
                }
                acc(grads, *a, g);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.rg(*p) {
                        acc(grads, *p, dy.slice_cols(start, start + w));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    if self.rg(*p) {
                        acc(grads, *p, dy.slice_rows(start, start + h));
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                for r in 0..dy.rows() {
                    g.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                acc(grads, *a, g);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                for r in 0..dy.rows() {
                    g.row_mut(start + r).copy_from_slice(dy.row(r));
                }
                acc(grads, *a, g);
            }
            Op::GatherRows(a, index) => {
                let src = self.value(*a);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                for (dst, s) in index.iter().enumerate() {
                    if let Some(s) = *s {
                        for (o, d) in g.row_mut(s).iter_mut().zip(dy.row(dst)) {
                            *o += d;
                        }
                    }
                }
                acc(grads, *a, g);
            }
            Op::SumAll(a) => {
                let src = self.value(*a);
                acc(grads, *a, Matrix::filled(src.rows(), src.cols(), dy.get(0, 0)));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}
