//! Parameterised building blocks. Each layer owns only [`ParamId`]s; values
//! live in a [`ParamStore`] and forward passes record onto a [`Graph`].

use rand::Rng;

use super::graph::{BatchStats, Graph, Var};
use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};

/// A contiguous run of rows belonging to one sequence inside a stacked batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng),
            b: store.add_filled(format!("{name}.b"), fan_out, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), dim, 1.0),
            beta: store.add_filled(format!("{name}.beta"), dim, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.norm_rows(x, 1e-5);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding).saturating_sub(kernel) / stride + 1
}

/// 1-D convolution over the row (time) axis, lowered to a gather + matmul.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.add_xavier(format!("{name}.w"), kernel * in_ch, out_ch, rng),
            b: store.add_filled(format!("{name}.b"), out_ch, 0.0),
            kernel,
            stride,
            padding,
        }
    }

    /// Length-preserving stride-1 convolution with centred padding.
    pub fn same(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self::new(store, name, in_ch, out_ch, kernel, 1, kernel / 2, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let len = g.value(x).rows();
        self.forward_segments(g, store, x, &[Segment { start: 0, len }]).0
    }

    /// Convolves each segment independently (zero padding at segment
    /// edges) and returns the stacked output with its segment layout.
    pub fn forward_segments(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[Segment],
    ) -> (Var, Vec<Segment>) {
        let mut taps: Vec<Vec<Option<usize>>> = vec![Vec::new(); self.kernel];
        let mut out_segments = Vec::with_capacity(segments.len());
        let mut out_start = 0;
        for seg in segments {
            let out_len = conv_out_len(seg.len, self.kernel, self.stride, self.padding);
            for pos in 0..out_len {
                for (j, tap) in taps.iter_mut().enumerate() {
                    let src = (pos * self.stride + j) as isize - self.padding as isize;
                    tap.push((src >= 0 && (src as usize) < seg.len).then(|| seg.start + src as usize));
                }
            }
            out_segments.push(Segment {
                start: out_start,
                len: out_len,
            });
            out_start += out_len;
        }
        let cols: Vec<Var> = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            vec![x]
        } else {
            taps.into_iter().map(|idx| g.gather_rows(x, idx)).collect()
        };
        let stacked = if cols.len() == 1 { cols[0] } else { g.concat_cols(&cols) };
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        (g.affine(stacked, w, b), out_segments)
    }
}

/// Batch normalisation over rows; running statistics are updated by the
/// trainer from [`Graph::batch_stats`].
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), dim, 1.0),
            beta: store.add_filled(format!("{name}.beta"), dim, 0.0),
            running_mean: store.add(format!("{name}.running_mean"), Matrix::zeros(1, dim), false),
            running_var: store.add(format!("{name}.running_var"), Matrix::filled(1, dim, 1.0), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let normed = if g.is_training() && g.value(x).rows() > 1 {
            let (n, mean, var) = g.norm_cols(x, BN_EPS);
            g.record_batch_stats(BatchStats {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean,
                var,
            });
            n
        } else {
            let mean = store.value(self.running_mean);
            let inv = store.value(self.running_var).map(|v| 1.0 / (v + BN_EPS).sqrt());
            let shift = g.constant(mean.map(|m| -m));
            let scale = g.constant(inv);
            let centred = g.add_row(x, shift);
            g.mul_row(centred, scale)
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(normed, gamma);
        g.add_row(y, beta)
    }
}

/// Single-layer GRU (gate order r, z, n).
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_ih: store.add_xavier(format!("{name}.w_ih"), input, 3 * hidden, rng),
            w_hh: store.add_xavier(format!("{name}.w_hh"), hidden, 3 * hidden, rng),
            b_ih: store.add_filled(format!("{name}.b_ih"), 3 * hidden, 0.0),
            b_hh: store.add_filled(format!("{name}.b_hh"), 3 * hidden, 0.0),
            hidden,
        }
    }

    /// Runs over the rows of `x` (forwards, or backwards when `reverse`)
    /// and returns the final hidden state as a `1 × hidden` row.
    pub fn final_state(&self, g: &mut Graph, store: &ParamStore, x: Var, reverse: bool) -> Var {
        let h_dim = self.hidden;
        let len = g.value(x).rows();
        let w_ih = g.param(store, self.w_ih);
        let b_ih = g.param(store, self.b_ih);
        let w_hh = g.param(store, self.w_hh);
        let b_hh = g.param(store, self.b_hh);
        let xw = g.affine(x, w_ih, b_ih);
        let mut h = g.constant(Matrix::zeros(1, h_dim));
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let xt = g.slice_rows(xw, t, t + 1);
            let hw = g.affine(h, w_hh, b_hh);
            let xr = g.slice_cols(xt, 0, h_dim);
            let hr = g.slice_cols(hw, 0, h_dim);
            let r_pre = g.add(xr, hr);
            let r = g.sigmoid(r_pre);
            let xz = g.slice_cols(xt, h_dim, 2 * h_dim);
            let hz = g.slice_cols(hw, h_dim, 2 * h_dim);
            let z_pre = g.add(xz, hz);
            let z = g.sigmoid(z_pre);
            let xn = g.slice_cols(xt, 2 * h_dim, 3 * h_dim);
            let hn = g.slice_cols(hw, 2 * h_dim, 3 * h_dim);
            let rhn = g.mul(r, hn);
            let n_pre = g.add(xn, rhn);
            let n = g.tanh(n_pre);
            // h' = n + z ⊙ (h − n)
            let diff = g.sub(h, n);
            let zd = g.mul(z, diff);
            h = g.add(n, zd);
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "hidden dim must divide into heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Var {
        let dim = g.value(x).cols();
        let hd = dim / self.heads;
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, x);
        let v = self.v.forward(g, store, x);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * hd, (h + 1) * hd);
            let qh = g.slice_cols(q, s, e);
            let kh = g.slice_cols(k, s, e);
            let vh = g.slice_cols(v, s, e);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            let attn = g.dropout(attn, dropout);
            heads.push(g.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.out.forward(g, store, cat)
    }
}

/// Feed-forward transformer block: self-attention and a two-layer
/// convolutional position-wise network, each with residual + layer norm.
#[derive(Clone, Debug)]
pub struct FftBlock {
    pub attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub ln_ffn: LayerNorm,
}

impl FftBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            conv1: Conv1d::same(store, &format!("{name}.ffn1"), dim, ffn_dim, kernel, rng),
            conv2: Conv1d::same(store, &format!("{name}.ffn2"), ffn_dim, dim, 1, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Var {
        let a = self.attn.forward(g, store, x, dropout);
        let a = g.dropout(a, dropout);
        let r = g.add(x, a);
        let x = self.ln_attn.forward(g, store, r);
        let f = self.conv1.forward(g, store, x);
        let f = g.relu(f);
        let f = self.conv2.forward(g, store, f);
        let f = g.dropout(f, dropout);
        let r = g.add(x, f);
        self.ln_ffn.forward(g, store, r)
    }
}

/// Sinusoidal positional table, `len × dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_lengths_follow_formula() {
        assert_eq!(conv_out_len(100, 3, 2, 1), 50);
        assert_eq!(conv_out_len(50, 3, 2, 1), 25);
        assert_eq!(conv_out_len(25, 3, 2, 1), 13);
        assert_eq!(conv_out_len(1, 3, 2, 1), 1);
        assert_eq!(conv_out_len(7, 3, 1, 1), 7);
    }

    #[test]
    fn segmented_conv_matches_separate_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 2, 3, 3, 2, 1, &mut rng);
        let a = Matrix::from_vec(5, 2, (0..10).map(|i| i as f64 * 0.1).collect());
        let b = Matrix::from_vec(3, 2, (0..6).map(|i| 1.0 - i as f64 * 0.2).collect());
        let mut g = Graph::eval();
        let xa = g.constant(a.clone());
        let xb = g.constant(b.clone());
        let ya = conv.forward(&mut g, &store, xa);
        let yb = conv.forward(&mut g, &store, xb);
        let stacked = g.constant(Matrix::concat_rows(&[&a, &b]));
        let segs = [Segment { start: 0, len: 5 }, Segment { start: 5, len: 3 }];
        let (y, out) = conv.forward_segments(&mut g, &store, stacked, &segs);
        assert_eq!(out, vec![Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }]);
        let joined = Matrix::concat_rows(&[g.value(ya), g.value(yb)]);
        assert_eq!(g.value(y), &joined);
    }

    #[test]
    fn gru_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 3, 4, &mut rng);
        let x = Matrix::from_vec(4, 3, (0..12).map(|i| ((i as f64) * 0.7).cos()).collect());
        let loss = |store: &ParamStore| {
            let mut g = Graph::eval();
            let xv = g.constant(x.clone());
            let h = gru.final_state(&mut g, store, xv, true);
            let s = g.square(h);
            let l = g.sum_all(s);
            (g, l)
        };
        let (g, l) = loss(&store);
        let grads = g.backward(l);
        let pg = g.param_grads(&grads);
        let (id, grad) = pg.iter().find(|(id, _)| *id == gru.w_hh).unwrap();
        for idx in [0, 5, 17, 40] {
            let h = 1e-6;
            let mut plus = store.clone();
            plus.value_mut(*id).data_mut()[idx] += h;
            let mut minus = store.clone();
            minus.value_mut(*id).data_mut()[idx] -= h;
            let (gp, lp) = loss(&plus);
            let (gm, lm) = loss(&minus);
            let fd = (gp.value(lp).get(0, 0) - gm.value(lm).get(0, 0)) / (2.0 * h);
            let an = grad.data()[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{idx}: {fd} vs {an}");
        }
    }
}
