//! Reverse-mode automatic differentiation over an explicit computation graph.
//!
//! A [`Graph`] is an append-only list of nodes. Every op evaluates eagerly,
//! stores its output and whatever it needs for the backward pass, and returns a
//! [`Var`] handle. [`Graph::backward`] walks the list in reverse once.
//!
//! Shapes are checked with assertions: a mismatch inside the graph is a bug in
//! the caller, not a data error. Public model entry points validate their
//! inputs before building graph nodes. Non-finite outputs do not panic; the
//! first offending op is remembered and reported by [`Graph::check`] and
//! [`Graph::backward`].

use super::rng::RngState;
use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel 2-D convolution over an `[H, W, C]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MulRows(Var, Vec<f64>),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Abs(Var),
    Min(Var, Var),
    Max(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gumbel {
        logits: Var,
        soft: Vec<f64>,
        tau: f64,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First op whose output was non-finite, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.fault
    }

    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(Error::NumericInput { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(name);
        }
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

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- leaves ----

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push("param", t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push("leaf", t, Op::Leaf, requires_grad)
    }

    // ---- elementwise ----

    fn zip_same(&self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "{name}: shapes {:?} and {:?} differ",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same("add", a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push("add", t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same("sub", a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push("sub", t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same("mul", a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push("mul", t, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same("div", a, b, |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push("div", t, Op::Div(a, b), rg)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same("minimum", a, b, f64::min);
        let rg = self.rg(&[a, b]);
        self.push("minimum", t, Op::Min(a, b), rg)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same("maximum", a, b, f64::max);
        let rg = self.rg(&[a, b]);
        self.push("maximum", t, Op::Max(a, b), rg)
    }

    /// `a[.., n] + b[n]`, broadcasting `b` over every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let n = ta.cols();
        assert_eq!(tb.len(), n, "add_row: row has {} values, expected {n}", tb.len());
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push("add_row", t, Op::AddRow(a, b), rg)
    }

    /// `a[.., n] - b[n]`.
    pub fn sub_row(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add_row(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.val(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push("scale", t, Op::Scale(a, c), rg)
    }

    /// Multiplies row `r` of `a` by the constant `factors[r]`.
    pub fn mul_rows(&mut self, a: Var, factors: &[f64]) -> Var {
        let ta = self.val(a);
        assert_eq!(ta.rows(), factors.len(), "mul_rows: row count");
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for (row, &f) in data.chunks_mut(n).zip(factors) {
            for x in row {
                *x *= f;
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push("mul_rows", t, Op::MulRows(a, factors.to_vec()), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.val(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push("relu", t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.val(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(&[a]);
        self.push("sigmoid", t, Op::Sigmoid(a), rg)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.val(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        self.push("sqrt", t, Op::Sqrt(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.val(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push("abs", t, Op::Abs(a), rg)
    }

    // ---- linear algebra ----

    fn dims2(&self, name: &str, v: Var) -> (usize, usize) {
        let s = self.val(v).shape();
        assert_eq!(s.len(), 2, "{name}: expected a matrix, got {s:?}");
        (s[0], s[1])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2("matmul", a);
        let (k2, n) = self.dims2("matmul", b);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_acc(self.val(a).data(), self.val(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// `a * b^T` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2("matmul_nt", a);
        let (n, k2) = self.dims2("matmul_nt", b);
        assert_eq!(k, k2, "matmul_nt: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.val(a).data(), self.val(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul_nt", Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2("transpose", a);
        let t = transpose_data(self.val(a).data(), m, n);
        let rg = self.rg(&[a]);
        self.push("transpose", Tensor::from_parts(vec![n, m], t), Op::Transpose(a), rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let tx = self.val(x);
        let n = tx.cols();
        assert_eq!(self.val(gamma).len(), n, "layer_norm: gamma length");
        assert_eq!(self.val(beta).len(), n, "layer_norm: beta length");
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        let (g, b) = (self.val(gamma).data(), self.val(beta).data());
        for r in 0..rows {
            let row = tx.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mu) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let n = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push("softmax", t, Op::Softmax(a), rg)
    }

    /// Row-wise Gumbel-softmax. With `hard`, the forward value is the one-hot
    /// argmax of the perturbed logits and the backward pass uses the soft
    /// sample (straight-through).
    pub fn gumbel_softmax(&mut self, logits: Var, tau: f64, hard: bool, rng: &mut RngState) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!("gumbel temperature must be > 0, got {tau}")));
        }
        let tl = self.val(logits);
        let n = tl.cols();
        let mut soft = Vec::with_capacity(tl.len());
        for &l in tl.data() {
            soft.push((l + rng.gumbel()) / tau);
        }
        for row in soft.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = if hard {
            let mut h = vec![0.0; soft.len()];
            for (hr, sr) in h.chunks_mut(n).zip(soft.chunks(n)) {
                hr[argmax(sr)] = 1.0;
            }
            h
        } else {
            soft.clone()
        };
        let t = Tensor::from_parts(tl.shape().to_vec(), value);
        let rg = self.rg(&[logits]);
        Ok(self.push("gumbel_softmax", t, Op::Gumbel { logits, soft, tau }, rg))
    }

    // ---- structure ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: nothing to concatenate");
        let n = self.val(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.val(p);
            assert_eq!(t.cols(), n, "concat_rows: column counts differ");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: nothing to concatenate");
        let m = self.val(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let t = self.val(p);
            assert_eq!(t.rows(), m, "concat_cols: row counts differ");
            let c = t.cols();
            for r in 0..m {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let rg = self.rg(parts);
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.val(a);
        let n = t.cols();
        assert!(start <= end && end <= t.rows(), "slice_rows: {start}..{end} of {}", t.rows());
        let data = t.data()[start * n..end * n].to_vec();
        let rg = self.rg(&[a]);
        self.push(
            "slice_rows",
            Tensor::from_parts(vec![end - start, n], data),
            Op::SliceRows(a, start),
            rg,
        )
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.val(a);
        let (m, n) = (t.rows(), t.cols());
        assert!(start <= end && end <= n, "slice_cols: {start}..{end} of {n}");
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let rg = self.rg(&[a]);
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![m, w], data),
            Op::SliceCols(a, start),
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.val(a).clone().reshape(shape).expect("reshape: element count");
        let rg = self.rg(&[a]);
        self.push("reshape", t, Op::Reshape(a), rg)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column sums of a matrix, shape `[n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let n = t.cols();
        let mut out = vec![0.0; n];
        for row in t.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        self.push("sum_rows", Tensor::from_parts(vec![n], out), Op::SumRows(a), rg)
    }

    // ---- composites ----

    /// `sum |a - b|`.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.sum(d)
    }

    /// Scaled dot-product attention `softmax(q k^T / sqrt(d) + bias) v` for one head.
    /// `key_bias`, when given, is added to every row of the scores.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_bias: Option<Var>) -> Var {
        let d = self.val(q).cols();
        let scores = self.matmul_nt(q, k);
        let mut scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        if let Some(b) = key_bias {
            scores = self.add_row(scores, b);
        }
        let w = self.softmax(scores);
        self.matmul(w, v)
    }

    // ---- convolution ----

    /// 2-D convolution of an `[H, W, Cin]` map with weights `[k*k*Cin, Cout]`
    /// (row order: kernel row, kernel column, input channel) and bias `[Cout]`.
    /// Zero padding. Output is `[Ho, Wo, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d: input must be [H, W, C], got {xs:?}");
        let (kk, out_c) = self.dims2("conv2d", w);
        let geom = ConvGeom {
            in_h: xs[0],
            in_w: xs[1],
            in_c: xs[2],
            out_c,
            kernel,
            stride,
            pad,
        };
        assert_eq!(kk, geom.patch_len(), "conv2d: weight rows");
        assert_eq!(self.val(b).len(), out_c, "conv2d: bias length");
        assert!(xs[0] + 2 * pad >= kernel && xs[1] + 2 * pad >= kernel, "conv2d: input smaller than kernel");
        let cols = im2col(self.val(x).data(), &geom);
        let (m, k) = (geom.out_h() * geom.out_w(), geom.patch_len());
        let mut out = vec![0.0; m * out_c];
        for row in out.chunks_mut(out_c) {
            row.copy_from_slice(self.val(b).data());
        }
        matmul_acc(&cols, self.val(w).data(), &mut out, m, k, out_c);
        let t = Tensor::from_parts(vec![geom.out_h(), geom.out_w(), out_c], out);
        let rg = self.rg(&[x, w, b]);
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check()?;
        if self.val(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.val(loss).shape(), 1.0));
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

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(self.val(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accum(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    self.accum(grads, *a, like(*a, d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.accum(grads, *b, like(*b, d));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(g, y)| g / y).collect();
                    self.accum(grads, *a, like(*a, d));
                }
                if self.wants(*b) {
                    let d = gd
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accum(grads, *b, like(*b, d));
                }
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (ta, tb) = (self.val(*a), self.val(*b));
                let mut da = vec![0.0; gd.len()];
                let mut db = vec![0.0; gd.len()];
                for i in 0..gd.len() {
                    let (x, y) = (ta.data()[i], tb.data()[i]);
                    let pick_a = if is_min { x <= y } else { x >= y };
                    if pick_a {
                        da[i] = gd[i];
                    } else {
                        db[i] = gd[i];
                    }
                }
                self.accum(grads, *a, like(*a, da));
                self.accum(grads, *b, like(*b, db));
            }
            Op::AddRow(a, b) => {
                self.accum(grads, *a, g.clone());
                if self.wants(*b) {
                    let n = g.cols();
                    let mut d = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (o, v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accum(grads, *b, like(*b, d));
                }
            }
            Op::Scale(a, c) => {
                self.accum(grads, *a, g.map(|x| x * c));
            }
            Op::MulRows(a, f) => {
                let n = g.cols();
                let mut d = gd.to_vec();
                for (row, &s) in d.chunks_mut(n).zip(f) {
                    for x in row {
                        *x *= s;
                    }
                }
                self.accum(grads, *a, like(*a, d));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let n = self.val(*b).shape()[1];
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    matmul_nt_acc(gd, self.val(*b).data(), &mut d, m, n, k);
                    self.accum(grads, *a, like(*a, d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; k * n];
                    matmul_tn_acc(self.val(*a).data(), gd, &mut d, m, k, n);
                    self.accum(grads, *b, like(*b, d));
                }
            }
            Op::MatMulNt(a, b) => {
                // out[m,n] = a[m,k] b[n,k]^T
                let (m, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let n = self.val(*b).shape()[0];
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    matmul_acc(gd, self.val(*b).data(), &mut d, m, n, k);
                    self.accum(grads, *a, like(*a, d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; n * k];
                    matmul_tn_acc(gd, self.val(*a).data(), &mut d, m, n, k);
                    self.accum(grads, *b, like(*b, d));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                self.accum(grads, *a, like(*a, transpose_data(gd, m, n)));
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(grads, *a, like(*a, d));
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accum(grads, *a, like(*a, d));
            }
            Op::Sqrt(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, &y)| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect();
                self.accum(grads, *a, like(*a, d));
            }
            Op::Abs(a) => {
                let d = gd
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accum(grads, *a, like(*a, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let gam = self.val(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (grow, hrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += grow[c] * hrow[c];
                            db[c] += grow[c];
                        }
                    }
                    self.accum(grads, *gamma, like(*gamma, dg));
                    self.accum(grads, *beta, like(*beta, db));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let nf = n as f64;
                    for (r, (grow, hrow)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dh = grow[c] * gam[c];
                            s1 += dh;
                            s2 += dh * hrow[c];
                        }
                        let inv = inv_std[r];
                        for c in 0..n {
                            let dh = grow[c] * gam[c];
                            dx[r * n + c] = inv / nf * (nf * dh - s1 - hrow[c] * s2);
                        }
                    }
                    self.accum(grads, *x, like(*x, dx));
                }
            }
            Op::Softmax(a) => {
                let d = softmax_vjp(node.value.data(), gd, g.cols(), 1.0);
                self.accum(grads, *a, like(*a, d));
            }
            Op::Gumbel { logits, soft, tau } => {
                let d = softmax_vjp(soft, gd, g.cols(), 1.0 / tau);
                self.accum(grads, *logits, like(*logits, d));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.val(p).len();
                    if self.wants(p) {
                        self.accum(grads, p, like(p, gd[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let m = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.val(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(m * c);
                        for r in 0..m {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                        }
                        self.accum(grads, p, like(p, d));
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = self.val(*a);
                let n = ta.cols();
                let mut d = vec![0.0; ta.len()];
                d[start * n..start * n + gd.len()].copy_from_slice(gd);
                self.accum(grads, *a, like(*a, d));
            }
            Op::SliceCols(a, start) => {
                let ta = self.val(*a);
                let n = ta.cols();
                let w = g.cols();
                let mut d = vec![0.0; ta.len()];
                for (r, grow) in gd.chunks(w).enumerate() {
                    d[r * n + start..r * n + start + w].copy_from_slice(grow);
                }
                self.accum(grads, *a, like(*a, d));
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, like(*a, gd.to_vec()));
            }
            Op::Sum(a) => {
                let len = self.val(*a).len();
                self.accum(grads, *a, like(*a, vec![gd[0]; len]));
            }
            Op::Mean(a) => {
                let len = self.val(*a).len();
                self.accum(grads, *a, like(*a, vec![gd[0] / len as f64; len]));
            }
            Op::SumRows(a) => {
                let ta = self.val(*a);
                let mut d = Vec::with_capacity(ta.len());
                for _ in 0..ta.rows() {
                    d.extend_from_slice(gd);
                }
                self.accum(grads, *a, like(*a, d));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let m = geom.out_h() * geom.out_w();
                let k = geom.patch_len();
                let n = geom.out_c;
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * n];
                    matmul_tn_acc(cols, gd, &mut dw, m, k, n);
                    self.accum(grads, *w, like(*w, dw));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accum(grads, *b, like(*b, db));
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; m * k];
                    matmul_nt_acc(gd, self.val(*w).data(), &mut dcols, m, n, k);
                    self.accum(grads, *x, like(*x, col2im(&dcols, geom)));
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Vector-Jacobian product of a row-wise softmax with outputs `y`, times `scale`.
fn softmax_vjp(y: &[f64], g: &[f64], n: usize, scale: f64) -> Vec<f64> {
    let mut d = vec![0.0; y.len()];
    for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
        for c in 0..n {
            drow[c] = scale * yrow[c] * (grow[c] - dot);
        }
    }
    d
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn transpose_data(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            t[c * m + r] = d[r * n + c];
        }
    }
    t
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.patch_len());
    let mut cols = vec![0.0; oh * ow * k];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * k;
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.in_w + ix as usize) * g.in_c;
                    let dst = base + (ky * g.kernel + kx) * g.in_c;
                    cols[dst..dst + g.in_c].copy_from_slice(&x[src..src + g.in_c]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.patch_len());
    let mut x = vec![0.0; g.in_h * g.in_w * g.in_c];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * k;
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.in_w + ix as usize) * g.in_c;
                    let src = base + (ky * g.kernel + kx) * g.in_c;
                    for c in 0..g.in_c {
                        x[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
    x
}
