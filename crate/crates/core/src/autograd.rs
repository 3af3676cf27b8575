//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value. Inputs always
//! precede outputs on the tape, so walking the nodes backwards from the root
//! is a valid reverse topological order. Gradients from multiple downstream
//! uses are summed into the same buffer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Exponent clamp for the logistic function.
const SIGMOID_CLAMP: f64 = 500.0;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    MulAddConst { x: Var, scale: Vec<f64> },
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Abs(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    IndexRows { x: Var, idx: Vec<usize> },
    ScaleRows { x: Var, g: Var },
    MaskRows { x: Var, keep: Vec<bool> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
    DotConst { x: Var, c: Vec<f64> },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    let z = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c[p,r] = a[p,q] * b[q,r]`, accumulated in i-k-j order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let crow = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (p, q, r) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; p * r];
        matmul_into(ta.data(), tb.data(), &mut out, p, q, r);
        let value = Tensor::new(vec![p, r], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(shape_err("transpose", t, t));
        }
        let (p, q) = (t.rows(), t.cols());
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = t.data()[i * q + j];
            }
        }
        let value = Tensor::new(vec![q, p], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`q` bias to every row of a `[p, q]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.numel() != tx.cols() {
            return Err(shape_err("add_row_bias", tx, tb));
        }
        let q = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(q) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRowBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift` with scalar constants.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    /// `x ⊙ scale + shift` with elementwise constants.
    pub fn mul_add_const(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if scale.len() != t.numel() || shift.len() != t.numel() {
            return Err(Error::Shape {
                op: "mul_add_const",
                left: t.shape().to_vec(),
                right: vec![scale.len(), shift.len()],
            });
        }
        let out = t
            .data()
            .iter()
            .zip(scale)
            .zip(shift)
            .map(|((v, a), b)| v * a + b)
            .collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::MulAddConst {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs(x))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let q = t.cols();
        let mut out = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(q).zip(out.chunks_mut(q)) {
            softmax_row(src, dst);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::RowSoftmax(x), rg)
    }

    /// Per-row standardization followed by an elementwise affine map.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let q = tx.cols();
        if tx.rank() != 2 || tg.numel() != q {
            return Err(shape_err("layer_norm_rows", tx, tg));
        }
        if tb.numel() != q {
            return Err(shape_err("layer_norm_rows", tx, tb));
        }
        let p = tx.rows();
        let mut xhat = vec![0.0; p * q];
        let mut inv_std = vec![0.0; p];
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            let row = &tx.data()[i * q..(i + 1) * q];
            let mean = row.iter().sum::<f64>() / q as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / q as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..q {
                let h = (row[j] - mean) * inv;
                xhat[i * q + j] = h;
                out[i * q + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(vec![p, q], out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `y[i] = x[idx[i]]` row-wise; indices may repeat.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (p, q) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(idx.len() * q);
        for &i in idx {
            if i >= p {
                return Err(Error::Index {
                    what: "index_rows",
                    index: i,
                    size: p,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let shape = if t.rank() == 2 {
            vec![idx.len(), q]
        } else {
            vec![idx.len()]
        };
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::IndexRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `y[i] = x[perm[i]]` for a bijection `perm`.
    pub fn gather_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        check_permutation(perm, self.value(x).rows())?;
        self.index_rows(x, perm)
    }

    /// Inverse of [`Tape::gather_rows`] under the same permutation: `y[perm[i]] = x[i]`.
    pub fn scatter_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        check_permutation(perm, self.value(x).rows())?;
        self.index_rows(x, &invert_permutation(perm))
    }

    /// Multiplies row `i` of `x` by `g[i]` (the gate "expand" across columns).
    pub fn scale_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        if tg.numel() != tx.rows() {
            return Err(shape_err("scale_rows", tx, tg));
        }
        let q = tx.cols();
        let mut out = tx.data().to_vec();
        for (row, &s) in out.chunks_mut(q).zip(tg.data()) {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, g]);
        Ok(self.push(value, Op::ScaleRows { x, g }, rg))
    }

    /// Hard row masking: rows with `keep[i] == false` become exactly zero.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if keep.len() != t.rows() {
            return Err(Error::Shape {
                op: "mask_rows",
                left: t.shape().to_vec(),
                right: vec![keep.len()],
            });
        }
        let q = t.cols();
        let mut out = t.data().to_vec();
        for (row, &k) in out.chunks_mut(q).zip(keep) {
            if !k {
                row.fill(0.0);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let p = t.rows();
        let mut out = Vec::with_capacity(p * len);
        for i in 0..p {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![p, len], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let p = first.rows();
        for &v in parts {
            let t = self.value(v);
            if t.rank() != 2 || t.rows() != p {
                return Err(shape_err("concat_cols", first, t));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&v| self.value(v).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(p * total);
        for i in 0..p {
            for &v in parts {
                out.extend_from_slice(self.value(v).row(i));
            }
        }
        let value = Tensor::new(vec![p, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Scalar `Σ c_i x_i` with constant weights.
    pub fn dot_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if c.len() != t.numel() {
            return Err(Error::Shape {
                op: "dot_const",
                left: t.shape().to_vec(),
                right: vec![c.len()],
            });
        }
        let s = t.data().iter().zip(c).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::DotConst { x, c: c.to_vec() },
            rg,
        ))
    }

    /// Negative log-likelihood of `label` under softmax(logits).
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        let n = t.numel();
        if label >= n {
            return Err(Error::Index {
                what: "cross_entropy label",
                index: label,
                size: n,
            });
        }
        let mut probs = vec![0.0; n];
        softmax_row(t.data(), &mut probs);
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[label];
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// Runs reverse accumulation from a scalar root. A tape supports one pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("tape already consumed by a previous backward pass"));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Backward("root must be a scalar"));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Backward("root is detached from every trainable input"));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (p, q, r) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |da| {
                    // dA = dC · Bᵀ
                    for ii in 0..p {
                        let grow = &g[ii * r..(ii + 1) * r];
                        for k in 0..q {
                            let brow = &tb.data()[k * r..(k + 1) * r];
                            da[ii * q + k] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    // dB = Aᵀ · dC
                    for ii in 0..p {
                        let grow = &g[ii * r..(ii + 1) * r];
                        for k in 0..q {
                            let aik = ta.data()[ii * q + k];
                            if aik == 0.0 {
                                continue;
                            }
                            for (d, gj) in db[k * r..(k + 1) * r].iter_mut().zip(grow) {
                                *d += aik * gj;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let t = &nodes[x.0].value;
                let (p, q) = (t.rows(), t.cols());
                acc(*x, &mut |dx| {
                    for ii in 0..p {
                        for j in 0..q {
                            dx[ii * q + j] += g[j * p + ii];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_assign(d, g));
                acc(*b, &mut |d| add_assign(d, g));
            }
            Op::AddRowBias(x, bias) => {
                acc(*x, &mut |d| add_assign(d, g));
                let q = nodes[x.0].value.cols();
                acc(*bias, &mut |d| {
                    for row in g.chunks(q) {
                        add_assign(d, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for ((d, gi), bi) in d.iter_mut().zip(g).zip(tb.data()) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, gi), ai) in d.iter_mut().zip(g).zip(ta.data()) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Affine { x, scale } => acc(*x, &mut |d| {
                for (d, gi) in d.iter_mut().zip(g) {
                    *d += scale * gi;
                }
            }),
            Op::MulAddConst { x, scale } => acc(*x, &mut |d| {
                for ((d, gi), s) in d.iter_mut().zip(g).zip(scale) {
                    *d += gi * s;
                }
            }),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((d, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((d, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Gelu(x) => {
                let xs = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for ((d, gi), xi) in d.iter_mut().zip(g).zip(xs) {
                        *d += gi * gelu_grad(*xi);
                    }
                });
            }
            Op::Abs(x) => {
                let xs = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for ((d, gi), xi) in d.iter_mut().zip(g).zip(xs) {
                        // subgradient 0 at the kink
                        let s = if *xi > 0.0 {
                            1.0
                        } else if *xi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *d += gi * s;
                    }
                });
            }
            Op::RowSoftmax(x) => {
                let y = node.value.data();
                let q = node.value.cols();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(q).zip(g.chunks(q)).zip(y.chunks(q)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dj, gj), yj) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dj += yj * (gj - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let q = node.value.cols();
                let gv = nodes[gain.0].value.data();
                acc(*x, &mut |d| {
                    for (ii, inv) in inv_std.iter().enumerate() {
                        let grow = &g[ii * q..(ii + 1) * q];
                        let hrow = &xhat[ii * q..(ii + 1) * q];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..q {
                            let dh = grow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let qf = q as f64;
                        for j in 0..q {
                            let dh = grow[j] * gv[j];
                            d[ii * q + j] += inv / qf * (qf * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (grow, hrow) in g.chunks(q).zip(xhat.chunks(q)) {
                        for ((dj, gj), hj) in d.iter_mut().zip(grow).zip(hrow) {
                            *dj += gj * hj;
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(q) {
                        add_assign(d, grow);
                    }
                });
            }
            Op::IndexRows { x, idx } => {
                let q = nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for (k, &src) in idx.iter().enumerate() {
                        add_assign(&mut d[src * q..(src + 1) * q], &g[k * q..(k + 1) * q]);
                    }
                });
            }
            Op::ScaleRows { x, g: gate } => {
                let tx = &nodes[x.0].value;
                let tg = &nodes[gate.0].value;
                let q = tx.cols();
                acc(*x, &mut |d| {
                    for ((drow, grow), s) in d.chunks_mut(q).zip(g.chunks(q)).zip(tg.data()) {
                        for (dj, gj) in drow.iter_mut().zip(grow) {
                            *dj += gj * s;
                        }
                    }
                });
                acc(*gate, &mut |d| {
                    for ((di, grow), xrow) in d.iter_mut().zip(g.chunks(q)).zip(tx.data().chunks(q)) {
                        *di += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::MaskRows { x, keep } => {
                let q = node.value.cols();
                acc(*x, &mut |d| {
                    for ((drow, grow), &k) in d.chunks_mut(q).zip(g.chunks(q)).zip(keep) {
                        if k {
                            add_assign(drow, grow);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let q = nodes[x.0].value.cols();
                let len = node.value.cols();
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(q).zip(g.chunks(len)) {
                        add_assign(&mut drow[*start..start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for part in parts {
                    let w = nodes[part.0].value.cols();
                    acc(*part, &mut |d| {
                        for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                            add_assign(drow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(x) => acc(*x, &mut |d| {
                for v in d.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::DotConst { x, c } => acc(*x, &mut |d| {
                for (v, ci) in d.iter_mut().zip(c) {
                    *v += g[0] * ci;
                }
            }),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => acc(*logits, &mut |d| {
                for (k, (v, p)) in d.iter_mut().zip(probs).enumerate() {
                    let target = if k == *label { 1.0 } else { 0.0 };
                    *v += g[0] * (p - target);
                }
            }),
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Permutation(format!(
            "length {} does not match {} rows",
            perm.len(),
            n
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::Permutation(format!("{perm:?} is not a bijection on 0..{n}")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::identity(2));
        let b = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let c = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let z = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::full(&[3, 2], 7.5));
        let c = t.matmul(z, b).unwrap();
        assert_eq!(t.value(c).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn sigmoid_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 40.0, -40.0, 1.0, 1e6, -1e6]));
        let y = t.sigmoid(x);
        let v = t.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
        assert!((v[3] - 0.731_058_578_6).abs() < 1e-9);
        assert!(v[4].is_finite() && v[5].is_finite());
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let x = t.constant(
            Tensor::from_rows(&[vec![2.0, 2.0, 2.0], vec![1000.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]])
                .unwrap(),
        );
        let y = t.row_softmax(x);
        let v = t.value(y);
        assert!(close(v.row(0), &[1.0 / 3.0; 3], 1e-15));
        assert!(close(v.row(1), &[1.0, 0.0, 0.0], 1e-12));
        assert!(close(v.row(2), &[0.090_030_57, 0.244_728_47, 0.665_240_96], 1e-8));
    }

    #[test]
    fn layer_norm_constant_and_standardized_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![3.0, 3.0], vec![1.0, -1.0]]).unwrap());
        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.layer_norm_rows(x, g, b, 1e-12).unwrap();
        let v = t.value(y);
        assert_eq!(v.row(0), &[0.0, 0.0]);
        assert!(close(v.row(1), &[1.0, -1.0], 1e-9));
    }

    #[test]
    fn gather_scatter_round_trip_is_exact() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]]).unwrap());
        let g = t.gather_rows(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.value(g).row(0), &[0.5, 0.6]);
        let s = t.scatter_rows(g, &[2, 0, 1]).unwrap();
        assert_eq!(t.value(s), t.value(x));
        let id = t.gather_rows(x, &[0, 1, 2]).unwrap();
        assert_eq!(t.value(id), t.value(x));
    }

    #[test]
    fn non_bijective_permutation_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.gather_rows(x, &[0, 0, 1]), Err(Error::Permutation(_))));
        assert!(matches!(t.scatter_rows(x, &[0, 1]), Err(Error::Permutation(_))));
        assert!(matches!(t.gather_rows(x, &[0, 1, 3]), Err(Error::Permutation(_))));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err(), "non-scalar root");
        let c = t.constant(Tensor::vector(vec![1.0]));
        let s = t.sum(c);
        assert!(t.backward(s).is_err(), "detached root");
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.backward(s).is_err(), "second pass on the same tape");
    }

    #[test]
    fn double_use_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.3, -0.7]));
        let a = t.sigmoid(x);
        let b = t.tanh(x);
        let sa = t.sum(a);
        let sb = t.sum(b);
        let total = t.add(sa, sb).unwrap();
        t.backward(total).unwrap();
        let both = t.grad(x).unwrap().clone();

        let single = |use_sigmoid: bool| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::vector(vec![0.3, -0.7]));
            let y = if use_sigmoid { t.sigmoid(x) } else { t.tanh(x) };
            let s = t.sum(y);
            t.backward(s).unwrap();
            t.grad(x).unwrap().clone()
        };
        let (ga, gb) = (single(true), single(false));
        for i in 0..2 {
            assert!((both.data()[i] - (ga.data()[i] + gb.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::matrix(1, 4, vec![0.5; 4]).unwrap());
        let ce = t.cross_entropy(l, 2).unwrap();
        assert!((t.value(ce).item() - 4f64.ln()).abs() < 1e-12);
        t.backward(ce).unwrap();
        assert!(close(t.grad(l).unwrap().data(), &[0.25, 0.25, -0.75, 0.25], 1e-12));
    }
}
