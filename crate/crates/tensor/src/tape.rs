use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::ops::{
    axis_split, col2im_add, conv_out_len, im2col, inverse_permutation, permute_data,
    pool_out_len, BatchNormMode,
};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// Nodes are only ever appended, so every node's inputs precede it.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid_shape(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free input whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter onto the tape; repeated loads share one node so
    /// every use contributes to the same gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- elementwise -------------------------------------------------

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap_or(&1);
        if tb.numel() != n || tb.rank() != 1 {
            return Err(mismatch("add_bias", tx.shape(), tb.shape()));
        }
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|&v| v * c).collect());
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = T::of(tx.numel() as f64);
        let s: T = tx.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_parts(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        );
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_parts(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect(),
        );
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    /// Inverted dropout; a no-op when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let tx = self.value(x);
        let mask: Vec<T> = (0..tx.numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), T::zero(), &mut c, (n, 1));
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `[g, m, k] x [g, k, n]`, or `[g, m, k] x [g, n, k]^T`
    /// when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(mismatch("batch_matmul", ta.shape(), tb.shape()));
        }
        let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(mismatch("batch_matmul", ta.shape(), tb.shape()));
        }
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        let mut c = vec![T::zero(); g * m * n];
        for i in 0..g {
            T::gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                (k, 1),
                &tb.data()[i * k * n..(i + 1) * k * n],
                b_strides,
                T::zero(),
                &mut c[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        let out = Tensor::from_parts(vec![g, m, n], c);
        Ok(self.push(out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// `x · w + b` over the last axis of `x` (any leading shape).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d_in = *shape.last().ok_or_else(|| invalid_shape("linear", &shape, "rank 0"))?;
        let rows = self.value(x).numel() / d_in;
        let flat = self.reshape(x, &[rows, d_in])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        let d_out = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        self.reshape(y, &out_shape)
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(mismatch("reshape", tx.shape(), shape));
        }
        if tx.shape() == shape {
            return Ok(x);
        }
        let out = Tensor::from_parts(shape.to_vec(), tx.data().to_vec());
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid_shape("permute", tx.shape(), format!("bad axes {axes:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| tx.shape()[a]).collect();
        let data = permute_data(tx.data(), tx.shape(), axes);
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(invalid_shape("transpose", self.shape(x), "expected rank 2"));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid_shape("concat", &base, format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Gathers rows of a `[rows, d]` table; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(invalid_shape("gather_rows", tt.shape(), "expected rank 2 table"));
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    // ---- normalization and activations -----------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(invalid_shape("softmax", tx.shape(), format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = axis_split(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Softmax over the last axis of `[g, q, k]` scores where keys flagged
    /// `false` in `key_mask` get zero weight. `key_mask` holds `r * k` flags
    /// and group `i` uses row `i / (g / r)`. A row with every key masked
    /// yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(invalid_shape("masked_softmax", tx.shape(), "expected rank 3"));
        }
        let (g, q, k) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if key_mask.is_empty() || key_mask.len() % k != 0 || g % (key_mask.len() / k) != 0 {
            return Err(mismatch("masked_softmax", tx.shape(), &[key_mask.len()]));
        }
        let rep = g / (key_mask.len() / k);
        let src = tx.data();
        let mut out = vec![T::zero(); src.len()];
        for gi in 0..g {
            let mask = &key_mask[(gi / rep) * k..(gi / rep + 1) * k];
            for qi in 0..q {
                let base = (gi * q + qi) * k;
                let row = &src[base..base + k];
                let max = row
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .fold(T::neg_infinity(), T::max);
                if max == T::neg_infinity() {
                    continue;
                }
                let mut total = T::zero();
                for j in 0..k {
                    if mask[j] {
                        let e = (row[j] - max).exp();
                        out[base + j] = e;
                        total += e;
                    }
                }
                for v in &mut out[base..base + k] {
                    *v /= total;
                }
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(out, Op::MaskedSoftmax(x), &[x]))
    }

    /// Normalizes over the last axis, then applies per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&1);
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != d || tb.numel() != d {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / d;
        let dn = T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Batch normalization of `[n, c]` or `[n, c, len]` input over every
    /// axis except the channel axis 1.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if !(2..=3).contains(&shape.len()) {
            return Err(invalid_shape("batch_norm", &shape, "expected rank 2 or 3"));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner = if shape.len() == 3 { shape[2] } else { 1 };
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != c || tb.numel() != c {
            return Err(mismatch("batch_norm", &shape, tg.shape()));
        }
        let count = n * inner;
        let idx = |s: usize, ch: usize, i: usize| (s * c + ch) * inner + i;
        let eps_t = T::of(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let (train, stats) = match mode {
            BatchNormMode::Train => {
                let cn = T::of(count as f64);
                let mut unbiased = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        for i in 0..inner {
                            s += tx.data()[idx(b, ch, i)];
                        }
                    }
                    let m = s / cn;
                    let mut ss = T::zero();
                    for b in 0..n {
                        for i in 0..inner {
                            let dv = tx.data()[idx(b, ch, i)] - m;
                            ss += dv * dv;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = ss / cn;
                    unbiased[ch] = if count > 1 {
                        ss / T::of((count - 1) as f64)
                    } else {
                        T::zero()
                    };
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (true, Some(stats))
            }
            BatchNormMode::Eval { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return Err(mismatch("batch_norm", &shape, &[rm.len()]));
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
                (false, None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut out = vec![T::zero(); tx.numel()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..inner {
                    let at = idx(b, ch, i);
                    let h = (tx.data()[at] - mean[ch]) * inv_std[ch];
                    xhat[at] = h;
                    out[at] = h * tg.data()[ch] + tb.data()[ch];
                }
            }
        }
        let out = Tensor::from_parts(shape, out);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                train,
            },
            &[x, gain, bias],
        );
        Ok((v, stats))
    }

    // ---- convolution ------------------------------------------------------

    /// 1-d convolution of `[n, c_in, len]` by `[c_out, c_in, kernel]` with
    /// zero padding on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 3 || tw.rank() != 3 || tw.shape()[1] != tx.shape()[1] {
            return Err(mismatch("conv1d", tx.shape(), tw.shape()));
        }
        let (n, c_in, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c_out, kernel) = (tw.shape()[0], tw.shape()[2]);
        if tb.numel() != c_out {
            return Err(mismatch("conv1d", tw.shape(), tb.shape()));
        }
        let out_len = conv_out_len(len, kernel, stride, padding)
            .ok_or_else(|| invalid_shape("conv1d", tx.shape(), "input shorter than kernel"))?;
        let ck = c_in * kernel;
        let mut cols = vec![T::zero(); ck * out_len];
        let mut out = vec![T::zero(); n * c_out * out_len];
        for s in 0..n {
            im2col(
                &tx.data()[s * c_in * len..(s + 1) * c_in * len],
                c_in,
                len,
                kernel,
                stride,
                padding,
                out_len,
                &mut cols,
            );
            let o = &mut out[s * c_out * out_len..(s + 1) * c_out * out_len];
            for (co, row) in o.chunks_mut(out_len).enumerate() {
                row.fill(tb.data()[co]);
            }
            T::gemm(c_out, ck, out_len, tw.data(), (ck, 1), &cols, (out_len, 1), T::one(), o, (out_len, 1));
        }
        let out = Tensor::from_parts(vec![n, c_out, out_len], out);
        Ok(self.push(out, Op::Conv1d { x, w, b, stride, padding }, &[x, w, b]))
    }

    /// Max pooling over the last axis of `[n, c, len]` with ceil-mode output
    /// length.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 || kernel == 0 || stride == 0 {
            return Err(invalid_shape("max_pool1d", tx.shape(), "expected rank 3, positive window"));
        }
        let (n, c, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let out_len = pool_out_len(len, kernel, stride);
        let mut out = Vec::with_capacity(n * c * out_len);
        let mut argmax = Vec::with_capacity(n * c * out_len);
        for row in tx.data().chunks(len) {
            for t in 0..out_len {
                let start = t * stride;
                let end = (start + kernel).min(len);
                let mut best = start;
                for j in start + 1..end {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                argmax.push(best);
            }
        }
        let out = Tensor::from_parts(vec![n, c, out_len], out);
        Ok(self.push(out, Op::MaxPool1d { x, argmax }, &[x]))
    }

    // ---- losses -------------------------------------------------------------

    /// Mean cross-entropy of softmax(`logits`) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() || targets.is_empty() {
            return Err(mismatch("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let (n, m) = (tl.shape()[0], tl.shape()[1]);
        let mut probs = vec![T::zero(); n * m];
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: m,
                });
            }
            let row = &tl.data()[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for j in 0..m {
                probs[i * m + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[t];
        }
        let loss = loss / T::of(n as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(grads)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(d, &gi)| *d -= gi);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
                if let Some(s) = self.slot(grads, *bias) {
                    let n = s.len();
                    for (i, &gi) in g.iter().enumerate() {
                        s[i % n] += gi;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *c);
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let share = g[0] / T::of(s.len() as f64);
                    s.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                if let Some(s) = self.slot(grads, *a) {
                    // dA = dC · B^T
                    T::gemm(m, n, k, g, (n, 1), val(*b), (1, n), T::one(), s, (k, 1));
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = A^T · dC
                    T::gemm(k, m, n, val(*a), (1, k), g, (n, 1), T::one(), s, (n, 1));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (bs, m, k) = (shape(*a)[0], shape(*a)[1], shape(*a)[2]);
                let n = if *trans_b { shape(*b)[1] } else { shape(*b)[2] };
                // effective rhs is [k, n]; its transpose and its gradient
                // layout depend on how it is stored
                let (bt_strides, db_strides) = if *trans_b { ((k, 1), (1, k)) } else { ((1, n), (n, 1)) };
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &val(*b)[i * k * n..(i + 1) * k * n],
                            bt_strides,
                            T::one(),
                            &mut s[i * m * k..(i + 1) * m * k],
                            (k, 1),
                        );
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..bs {
                        T::gemm(
                            k,
                            m,
                            n,
                            &val(*a)[i * m * k..(i + 1) * m * k],
                            (1, k),
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            T::one(),
                            &mut s[i * k * n..(i + 1) * k * n],
                            db_strides,
                        );
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
            }
            Op::Permute { x, axes } => {
                let out_shape: Vec<usize> = node.value.shape().to_vec();
                let back = permute_data(g, &out_shape, &inverse_permutation(axes));
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(&back).for_each(|(d, &gi)| *d += gi);
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = shape(v)[*axis] * inner;
                    if let Some(s) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            s[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &gi)| *d += gi);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Gather { table, ids } => {
                let d = shape(*table)[1];
                if let Some(s) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                if let Some(s) = self.slot(grads, *x) {
                    for i in 0..s.len() {
                        if vx[i] > T::zero() {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x);
                if let Some(s) = self.slot(grads, *x) {
                    for i in 0..s.len() {
                        s[i] += if vx[i] > T::zero() { g[i] } else { g[i] * *slope };
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(s) = self.slot(grads, *x) {
                    for i in 0..s.len() {
                        s[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                if let Some(s) = self.slot(grads, *x) {
                    for (r, (yr, gr)) in y.chunks(k).zip(g.chunks(k)).enumerate() {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            s[r * k + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = val(*gain).len();
                let gv = val(*gain);
                let rows = xhat.len() / d;
                if let Some(s) = self.slot(grads, *x) {
                    let dn = T::of(d as f64);
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_d += dh;
                            sum_dx += dh * xh[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s[r * d + j] += inv_std[r] / dn * (dn * dh - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *gain) {
                    for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        s[i % d] += gi * h;
                    }
                }
                if let Some(s) = self.slot(grads, *bias) {
                    for (i, &gi) in g.iter().enumerate() {
                        s[i % d] += gi;
                    }
                }
            }
            Op::BatchNorm { x, gain, bias, xhat, inv_std, train } => {
                let xs = shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let inner = if xs.len() == 3 { xs[2] } else { 1 };
                let idx = |b: usize, ch: usize, i: usize| (b * c + ch) * inner + i;
                let gv = val(*gain);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..inner {
                            let at = idx(b, ch, i);
                            sum_g[ch] += g[at];
                            sum_gx[ch] += g[at] * xhat[at];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let m = T::of((n * inner) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            for i in 0..inner {
                                let at = idx(b, ch, i);
                                let scale = gv[ch] * inv_std[ch];
                                s[at] += if *train {
                                    scale / m * (m * g[at] - sum_g[ch] - xhat[at] * sum_gx[ch])
                                } else {
                                    scale * g[at]
                                };
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *gain) {
                    s.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
                }
                if let Some(s) = self.slot(grads, *bias) {
                    s.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Conv1d { x, w, b, stride, padding } => {
                let (n, c_in, len) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
                let (c_out, kernel) = (shape(*w)[0], shape(*w)[2]);
                let out_len = node.value.shape()[2];
                let ck = c_in * kernel;
                let xv = val(*x);
                let wv = val(*w);
                if let Some(s) = self.slot(grads, *b) {
                    for (r, row) in g.chunks(out_len).enumerate() {
                        s[r % c_out] += row.iter().copied().sum();
                    }
                }
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                let mut cols = vec![T::zero(); ck * out_len];
                let mut dw = if need_w { vec![T::zero(); c_out * ck] } else { Vec::new() };
                let mut dx = if need_x { vec![T::zero(); n * c_in * len] } else { Vec::new() };
                for smp in 0..n {
                    let gs = &g[smp * c_out * out_len..(smp + 1) * c_out * out_len];
                    if need_w {
                        im2col(
                            &xv[smp * c_in * len..(smp + 1) * c_in * len],
                            c_in,
                            len,
                            kernel,
                            *stride,
                            *padding,
                            out_len,
                            &mut cols,
                        );
                        // dW += dOut · cols^T
                        T::gemm(c_out, out_len, ck, gs, (out_len, 1), &cols, (1, out_len), T::one(), &mut dw, (ck, 1));
                    }
                    if need_x {
                        // dcols = W^T · dOut
                        T::gemm(ck, c_out, out_len, wv, (1, ck), gs, (out_len, 1), T::zero(), &mut cols, (out_len, 1));
                        col2im_add(
                            &cols,
                            c_in,
                            len,
                            kernel,
                            *stride,
                            *padding,
                            out_len,
                            &mut dx[smp * c_in * len..(smp + 1) * c_in * len],
                        );
                    }
                }
                if let Some(s) = self.slot(grads, *w) {
                    s.iter_mut().zip(&dw).for_each(|(d, &v)| *d += v);
                }
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(&dx).for_each(|(d, &v)| *d += v);
                }
            }
            Op::MaxPool1d { x, argmax } => {
                let len = shape(*x)[2];
                let out_len = node.value.shape()[2];
                if let Some(s) = self.slot(grads, *x) {
                    for (o, (&gi, &src)) in g.iter().zip(argmax).enumerate() {
                        s[(o / out_len) * len + src] += gi;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let m = probs.len() / n;
                if let Some(s) = self.slot(grads, *logits) {
                    let share = g[0] / T::of(n as f64);
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..m {
                            let y = if j == t { T::one() } else { T::zero() };
                            s[i * m + j] += share * (probs[i * m + j] - y);
                        }
                    }
                }
            }
        }
    }
}
