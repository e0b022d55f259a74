//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output tensor and whatever
//! forward values its backward rule needs. Nodes are appended in evaluation
//! order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MeanRows(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Index(Var, usize),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Sqrt(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Det3(Var),
    Bilinear {
        feat: Var,
        points: Var,
    },
    Im2col {
        x: Var,
        stride: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulScalar(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | Sum(a) | MeanRows(a) | Transpose(a) | Reshape(a) | SliceRows(a, _)
            | SliceCols(a, _) | GatherRows(a, _) | Index(a, _) | Exp(a) | Log(a) | Recip(a) | Sqrt(a)
            | Tanh(a) | Gelu(a) | Relu(a) | ClampMin(a, _) | Softmax(a) | LogSoftmax(a)
            | Det3(a) => vec![*a],
            ConcatRows(vs) | ConcatCols(vs) => vs.clone(),
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Bilinear { feat, points } => vec![*feat, *points],
            Im2col { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Computation tape: the owner of every intermediate value of one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf. Its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a trainable leaf (`requires_grad = true`).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Copies `v` into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone().with_requires_grad(false);
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires = match op {
            Op::Leaf => value.requires_grad(),
            _ => op
                .inputs()
                .iter()
                .any(|i| self.nodes[i.0].value.requires_grad()),
        };
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: value.with_requires_grad(requires),
            op,
        });
        Var(id)
    }

    fn unary_map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(x.shape(), data).expect("same shape");
        self.push(t, op)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[M x K] x [K x N] -> [M x N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape_err = || Error::shape("matmul", ta.shape(), tb.shape());
        let (m, k) = ta.dims2().map_err(|_| shape_err())?;
        let (k2, n) = tb.dims2().map_err(|_| shape_err())?;
        if k != k2 {
            return Err(shape_err());
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let t = Tensor::new(&[c, r], transpose_raw(ta.data(), r, c))?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    /// Cofactor-expansion determinant of a `3 x 3` matrix, as a `[1]` tensor.
    pub fn det3(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != [3, 3] {
            return Err(Error::shape("det3", ta.shape(), &[3, 3]));
        }
        let d = det3_raw(ta.data());
        Ok(self.push(Tensor::scalar(d), Op::Det3(a)))
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a length-`N` vector to every row of an `[M x N]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.last_dim();
        if tr.rank() != 1 || tr.len() != n {
            return Err(Error::shape("add_row", ta.shape(), tr.shape()));
        }
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tr.data()[i % n])
            .collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, Op::AddRow(a, row)))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(a), ts.shape()));
        }
        let k = ts.item();
        Ok(self.unary_map(a, |x| x * k, Op::MulScalar(a, s)))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary_map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary_map(a, libm::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary_map(a, libm::log, Op::Log(a))
    }

    /// Elementwise `1 / x`.
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary_map(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary_map(a, libm::sqrt, Op::Sqrt(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary_map(a, libm::tanh, Op::Tanh(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary_map(a, gelu_raw, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary_map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// `max(x, floor)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary_map(a, |x| if x > floor { x } else { floor }, Op::ClampMin(a, floor))
    }

    // ---- reductions and reshaping ------------------------------------------

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means of an `[M x N]` matrix, giving a length-`N` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2()?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(ta.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let t = Tensor::new(&[n], out)?;
        Ok(self.push(t, Op::MeanRows(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Concatenates rank-2 tensors with equal column counts along the rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let (_, c) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            let (r, cp) = tp.dims2()?;
            if cp != c {
                return Err(Error::shape("concat_rows", self.shape(first), tp.shape()));
            }
            rows += r;
            data.extend_from_slice(tp.data());
        }
        let t = Tensor::new(&[rows, c], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Concatenates rank-2 tensors with equal row counts along the columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.value(p).dims2()?;
            if rp != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(&[r, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack(&mut self, vectors: &[Var]) -> Result<Var> {
        let mut rows = Vec::with_capacity(vectors.len());
        for &v in vectors {
            let n = self.value(v).len();
            rows.push(self.reshape(v, &[1, n])?);
        }
        self.concat_rows(&rows)
    }

    /// Rows `start..start + count` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if count == 0 || start + count > r {
            return Err(Error::arg("slice_rows range out of bounds"));
        }
        let data = ta.data()[start * c..(start + count) * c].to_vec();
        let t = Tensor::new(&[count, c], data)?;
        Ok(self.push(t, Op::SliceRows(a, start)))
    }

    /// Columns `start..start + count` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if count == 0 || start + count > c {
            return Err(Error::arg("slice_cols range out of bounds"));
        }
        let mut data = Vec::with_capacity(r * count);
        for i in 0..r {
            data.extend_from_slice(&ta.row(i)[start..start + count]);
        }
        let t = Tensor::new(&[r, count], data)?;
        Ok(self.push(t, Op::SliceCols(a, start)))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if indices.is_empty() || indices.iter().any(|&i| i >= r) {
            return Err(Error::arg("gather_rows index out of bounds"));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(ta.row(i));
        }
        let t = Tensor::new(&[indices.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows(a, indices.to_vec())))
    }

    /// Element at flat index `i`, as a `[1]` tensor.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let ta = self.value(a);
        if i >= ta.len() {
            return Err(Error::arg("index out of bounds"));
        }
        let v = ta.data()[i];
        Ok(self.push(Tensor::scalar(v), Op::Index(a, i)))
    }

    // ---- normalization ------------------------------------------------------

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.last_dim();
        let mut out = ta.data().to_vec();
        out.chunks_mut(n).for_each(softmax_inplace);
        let t = Tensor::new(ta.shape(), out).expect("same shape");
        self.push(t, Op::Softmax(a))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax_lastdim(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.last_dim();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(ta.shape(), out).expect("same shape");
        self.push(t, Op::LogSoftmax(a))
    }

    /// Layer normalization over the last dimension followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        for p in [gain, bias] {
            let tp = self.value(p);
            if tp.rank() != 1 || tp.len() != d {
                return Err(Error::shape("layer_norm", tx.shape(), tp.shape()));
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.len() / d);
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- spatial -------------------------------------------------------------

    /// Bilinear sampling of an `[H x W x D]` feature map at `[G x 2]` points.
    ///
    /// Points are `(row, col)` pairs in normalized coordinates: `(-1, -1)` is the
    /// centre of the top-left cell and `(+1, +1)` the centre of the bottom-right
    /// cell. Coordinates beyond the map are clamped to the border. The result is
    /// `[G x D]`.
    pub fn bilinear_sample(&mut self, feat: Var, points: Var) -> Result<Var> {
        let (tf, tp) = (self.value(feat), self.value(points));
        let &[h, w, d] = tf.shape() else {
            return Err(Error::shape("bilinear_sample", tf.shape(), tp.shape()));
        };
        let (g, two) = tp
            .dims2()
            .map_err(|_| Error::shape("bilinear_sample", tf.shape(), tp.shape()))?;
        if two != 2 {
            return Err(Error::shape("bilinear_sample", tf.shape(), tp.shape()));
        }
        let fd = tf.data();
        let mut out = vec![0.0; g * d];
        for (gi, p) in tp.data().chunks(2).enumerate() {
            let ay = axis_sample(p[0], h);
            let ax = axis_sample(p[1], w);
            let o = &mut out[gi * d..(gi + 1) * d];
            for (wgt, y, x) in corner_weights(&ay, &ax) {
                let base = (y * w + x) * d;
                for (k, ov) in o.iter_mut().enumerate() {
                    *ov += wgt * fd[base + k];
                }
            }
        }
        let t = Tensor::new(&[g, d], out)?;
        Ok(self.push(t, Op::Bilinear { feat, points }))
    }

    /// Extracts zero-padded `3 x 3` neighbourhoods of an `[H x W x C]` map.
    ///
    /// With stride `s` the output is `[(Ho * Wo) x 9C]`, `Ho = (H - 1) / s + 1`,
    /// and columns ordered `(ky, kx, c)`. A `3 x 3` convolution is this followed
    /// by a matmul with a `[9C x C_out]` kernel.
    pub fn im2col3x3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        let &[h, w, c] = tx.shape() else {
            return Err(Error::shape("im2col3x3", tx.shape(), &[0, 0, 0]));
        };
        if stride == 0 {
            return Err(Error::arg("stride must be positive"));
        }
        let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let mut out = vec![0.0; ho * wo * 9 * c];
        let xd = tx.data();
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (oy * wo + ox) * 9 * c;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((oy * stride + ky) as isize - 1, (ox * stride + kx) as isize - 1);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let src = ((iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
        let t = Tensor::new(&[ho * wo, 9 * c], out)?;
        Ok(self.push(t, Op::Im2col { x, stride }))
    }

    // ---- backward ------------------------------------------------------------

    /// Propagates gradients from the scalar `loss` back through the tape.
    ///
    /// Afterwards every node that requires a gradient carries one (zeros if it
    /// does not influence the loss). Gradients from earlier calls are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::arg("backward requires a single-element loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].value.requires_grad() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if !node.value.requires_grad() {
                continue;
            }
            let g = grads
                .get_mut(id)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            node.value.set_grad(g)?;
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut acc = |v: Var, delta: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].value.requires_grad() {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            delta(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.last_dim();
                acc(*a, &|s| {
                    let bt = transpose_raw(tb.data(), k, n);
                    add_into(s, &matmul_raw(g, &bt, m, n, k));
                });
                acc(*b, &|s| {
                    let at = transpose_raw(ta.data(), m, k);
                    add_into(s, &matmul_raw(&at, g, k, m, n));
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &|s| (0..g.len()).for_each(|i| s[i] += g[i] * db[i]));
                acc(*b, &|s| (0..g.len()).for_each(|i| s[i] += g[i] * da[i]));
            }
            Op::AddRow(a, r) => {
                acc(*a, &|s| add_into(s, g));
                let n = self.value(*r).len();
                acc(*r, &|s| g.iter().enumerate().for_each(|(i, gv)| s[i % n] += gv));
            }
            Op::MulScalar(a, k) => {
                let kv = self.item(*k);
                let da = self.data(*a);
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * kv));
                acc(*k, &|s| s[0] += g.iter().zip(da).map(|(g, x)| g * x).sum::<f64>());
            }
            Op::Scale(a, c) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)),
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::MeanRows(a) => {
                let m = self.value(*a).shape()[0] as f64;
                let n = g.len();
                acc(*a, &|s| s.iter_mut().enumerate().for_each(|(i, s)| *s += g[i % n] / m));
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                acc(*a, &|s| add_into(s, &transpose_raw(g, c, r)));
            }
            Op::Reshape(a) => acc(*a, &|s| add_into(s, g)),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    let chunk = &g[offset..offset + n];
                    acc(*p, &|s| add_into(s, chunk));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut col = 0;
                for p in parts {
                    let (r, c) = self.value(*p).dims2().unwrap();
                    acc(*p, &|s| {
                        for i in 0..r {
                            for j in 0..c {
                                s[i * c + j] += g[i * total + col + j];
                            }
                        }
                    });
                    col += c;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.value.last_dim();
                let off = start * c;
                acc(*a, &|s| add_into(&mut s[off..off + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let (r, count) = node.value.dims2().unwrap();
                let c = self.value(*a).last_dim();
                acc(*a, &|s| {
                    for i in 0..r {
                        for j in 0..count {
                            s[i * c + start + j] += g[i * count + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = node.value.last_dim();
                acc(*a, &|s| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Index(a, i) => acc(*a, &|s| s[*i] += g[0]),
            Op::Exp(a) => acc(*a, &|s| (0..g.len()).for_each(|i| s[i] += g[i] * y[i])),
            Op::Log(a) => {
                let x = self.data(*a);
                acc(*a, &|s| (0..g.len()).for_each(|i| s[i] += g[i] / x[i]));
            }
            Op::Recip(a) => acc(*a, &|s| (0..g.len()).for_each(|i| s[i] -= g[i] * y[i] * y[i])),
            Op::Sqrt(a) => acc(*a, &|s| (0..g.len()).for_each(|i| s[i] += g[i] * 0.5 / y[i])),
            Op::Tanh(a) => acc(*a, &|s| (0..g.len()).for_each(|i| s[i] += g[i] * (1.0 - y[i] * y[i]))),
            Op::Gelu(a) => {
                let x = self.data(*a);
                acc(*a, &|s| (0..g.len()).for_each(|i| s[i] += g[i] * gelu_grad_raw(x[i])));
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                acc(*a, &|s| (0..g.len()).for_each(|i| if x[i] > 0.0 { s[i] += g[i] }));
            }
            Op::ClampMin(a, floor) => {
                let x = self.data(*a);
                acc(*a, &|s| (0..g.len()).for_each(|i| if x[i] > *floor { s[i] += g[i] }));
            }
            Op::Softmax(a) => {
                let n = node.value.last_dim();
                acc(*a, &|s| {
                    for ((sr, yr), gr) in s.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = node.value.last_dim();
                acc(*a, &|s| {
                    for ((sr, yr), gr) in s.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            sr[j] += gr[j] - libm::exp(yr[j]) * gsum;
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
                let d = node.value.last_dim();
                let gn = self.data(*gain);
                acc(*gain, &|s| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        (0..d).for_each(|j| s[j] += gr[j] * hr[j]);
                    }
                });
                acc(*bias, &|s| {
                    for gr in g.chunks(d) {
                        (0..d).for_each(|j| s[j] += gr[j]);
                    }
                });
                acc(*x, &|s| {
                    for (r, ((sr, gr), hr)) in s
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let dh: Vec<f64> = (0..d).map(|j| gr[j] * gn[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            sr[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::Det3(a) => {
                let cof = cofactors3(self.data(*a));
                acc(*a, &|s| (0..9).for_each(|i| s[i] += g[0] * cof[i]));
            }
            Op::Bilinear { feat, points } => {
                let tf = self.value(*feat);
                let &[h, w, d] = tf.shape() else { unreachable!() };
                let fd = tf.data();
                let pd = self.data(*points);
                acc(*feat, &|s| {
                    for (gi, p) in pd.chunks(2).enumerate() {
                        let (ay, ax) = (axis_sample(p[0], h), axis_sample(p[1], w));
                        let gr = &g[gi * d..(gi + 1) * d];
                        for (wgt, yy, xx) in corner_weights(&ay, &ax) {
                            let base = (yy * w + xx) * d;
                            (0..d).for_each(|k| s[base + k] += wgt * gr[k]);
                        }
                    }
                });
                acc(*points, &|s| {
                    for (gi, p) in pd.chunks(2).enumerate() {
                        let (ay, ax) = (axis_sample(p[0], h), axis_sample(p[1], w));
                        let gr = &g[gi * d..(gi + 1) * d];
                        let f = |yy: usize, xx: usize, k: usize| fd[(yy * w + xx) * d + k];
                        let (mut dwy, mut dwx) = (0.0, 0.0);
                        for k in 0..d {
                            let f00 = f(ay.lo, ax.lo, k);
                            let f01 = f(ay.lo, ax.hi, k);
                            let f10 = f(ay.hi, ax.lo, k);
                            let f11 = f(ay.hi, ax.hi, k);
                            dwy += gr[k] * ((1.0 - ax.frac) * (f10 - f00) + ax.frac * (f11 - f01));
                            dwx += gr[k] * ((1.0 - ay.frac) * (f01 - f00) + ay.frac * (f11 - f10));
                        }
                        s[gi * 2] += dwy * ay.dcoord;
                        s[gi * 2 + 1] += dwx * ax.dcoord;
                    }
                });
            }
            Op::Im2col { x, stride } => {
                let tx = self.value(*x);
                let &[h, w, c] = tx.shape() else { unreachable!() };
                let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
                acc(*x, &|s| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let row = (oy * wo + ox) * 9 * c;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let dst = ((iy as usize) * w + ix as usize) * c;
                                    let src = row + (ky * 3 + kx) * c;
                                    add_into(&mut s[dst..dst + c], &g[src..src + c]);
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn det3_raw(m: &[f64]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// Cofactor matrix, which is the gradient of the determinant.
fn cofactors3(m: &[f64]) -> [f64; 9] {
    [
        m[4] * m[8] - m[5] * m[7],
        m[5] * m[6] - m[3] * m[8],
        m[3] * m[7] - m[4] * m[6],
        m[2] * m[7] - m[1] * m[8],
        m[0] * m[8] - m[2] * m[6],
        m[1] * m[6] - m[0] * m[7],
        m[1] * m[5] - m[2] * m[4],
        m[2] * m[3] - m[0] * m[5],
        m[0] * m[4] - m[1] * m[3],
    ]
}

pub(crate) fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - max);
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn gelu_raw(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + libm::tanh(u))
}

fn gelu_grad_raw(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = libm::tanh(u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Interpolation cell along one axis.
struct AxisSample {
    lo: usize,
    hi: usize,
    frac: f64,
    /// d(pixel coordinate)/d(normalized coordinate); zero when clamped.
    dcoord: f64,
}

fn axis_sample(p: f64, size: usize) -> AxisSample {
    if size == 1 {
        return AxisSample {
            lo: 0,
            hi: 0,
            frac: 0.0,
            dcoord: 0.0,
        };
    }
    let span = (size - 1) as f64;
    let raw = (p + 1.0) * 0.5 * span;
    let (c, dcoord) = if raw < 0.0 {
        (0.0, 0.0)
    } else if raw > span {
        (span, 0.0)
    } else {
        (raw, 0.5 * span)
    };
    // The upper border uses the last full cell so its slope stays defined.
    let lo = (libm::floor(c) as usize).min(size - 2);
    AxisSample {
        lo,
        hi: lo + 1,
        frac: c - lo as f64,
        dcoord,
    }
}

fn corner_weights(ay: &AxisSample, ax: &AxisSample) -> [(f64, usize, usize); 4] {
    [
        ((1.0 - ay.frac) * (1.0 - ax.frac), ay.lo, ax.lo),
        ((1.0 - ay.frac) * ax.frac, ay.lo, ax.hi),
        (ay.frac * (1.0 - ax.frac), ay.hi, ax.lo),
        (ay.frac * ax.frac, ay.hi, ax.hi),
    ]
}
