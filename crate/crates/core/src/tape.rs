//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. Node order is a
//! topological order, so [`Tape::backward`] walks the nodes once in reverse.
//! Gradients of leaves accumulate across `backward` calls until
//! [`Tape::zero_grads`]; intermediate gradients are rebuilt on every call.
//!
//! Broadcasting is limited to [`Tape::add_row_bias`]; every other op requires
//! exactly matching shapes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluMode {
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
    #[default]
    Tanh,
    /// `x·Φ(x)` with the exact Gaussian CDF.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRowBias,
    Scale,
    Reshape,
    Sum,
    Mean,
    Square,
    LayerNorm,
    Softmax,
    Gelu,
    Dropout,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var, GeluMode),
    Dropout(Var, Vec<T>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Square(_) => OpKind::Square,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Dropout(..) => OpKind::Dropout,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::SliceCols(..) => OpKind::SliceCols,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

/// Ordered record of executed ops. Not shared across threads while recording.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    matmul_flops: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            matmul_flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs of every matrix product recorded so far, 2 per multiply-add.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if one has been computed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Values of every node produced by `kind`, in recording order.
    pub fn values_of(&self, kind: OpKind) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes
            .iter()
            .filter(move |n| n.op.kind() == kind)
            .map(|n| &n.value)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            &mut out,
            false,
        );
        self.matmul_flops += 2 * (m * k * n) as u64;
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Transposed,
            &mut out,
            false,
        );
        self.matmul_flops += 2 * (m * k * n) as u64;
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNt(a, b),
            &[a, b],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x]))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x[t,d] + bias[d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.dims2(x, "add_row_bias")?;
        let bshape = self.shape(bias);
        if bshape.iter().product::<usize>() != d || bshape.last() != Some(&d) {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {bshape:?} for width {d}"),
            ));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v * s).collect(),
        );
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.numel()).expect("count fits");
        let s: T = v.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v * v).collect(),
        );
        self.push(out, Op::Square(x), &[x])
    }

    /// Per-row standardization over the last axis followed by `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Param(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (t, d) = self.dims2(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).numel() != d {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine {:?} for width {d}", self.shape(p)),
                ));
            }
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).expect("width fits");
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); t * d];
        let mut rstd = vec![T::zero(); t];
        let mut out = vec![T::zero(); t * d];
        for r in 0..t {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::from_parts(vec![t, d], out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (t, c) = self.dims2(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![t, c], out), Op::Softmax(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var, mode: GeluMode) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| gelu_value(v, mode)).collect(),
        );
        self.push(out, Op::Gelu(x, mode), &[x])
    }

    /// Inverted dropout: identity unless `training`, otherwise survivors are
    /// scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout p must be in [0,1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        );
        Ok(self.push(out, Op::Dropout(x, mask), &[x]))
    }

    /// Stack 2-D parts along rows, in argument order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no parts"))?;
        let (_, d) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, dp) = self.dims2(p, "concat_rows")?;
            if dp != d {
                return Err(Error::shape("concat_rows", format!("width {dp} vs {d}")));
            }
            rows += r;
        }
        if parts.len() == 1 {
            return Ok(first);
        }
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    /// Join 2-D parts side by side; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no parts"))?;
        let (t, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (tp, w) = self.dims2(p, "concat_cols")?;
            if tp != t {
                return Err(Error::shape("concat_cols", format!("rows {tp} vs {t}")));
            }
            widths.push(w);
        }
        if parts.len() == 1 {
            return Ok(first);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(t * total);
        for r in 0..t {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![t, total], data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, d) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > t {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {t}", start + len),
            ));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![len, d], data),
            Op::SliceRows(x, start),
            &[x],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, d) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > d {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {d}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(t * len);
        for r in 0..t {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![t, len], data),
            Op::SliceCols(x, start),
            &[x],
        ))
    }

    /// Populate `d(loss)/d(leaf)` for every leaf that requires a gradient.
    /// Leaf gradients add onto whatever earlier calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                        *e += *v;
                    }
                }
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2("matmul").expect("2-D");
                let n = node.value.shape()[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA += dC · Bᵀ
                    gemm(m, n, k, g, Layout::Normal, nodes[b.0].value.data(), Layout::Transposed, ga, true);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    // dB += Aᵀ · dC
                    gemm(k, m, n, nodes[a.0].value.data(), Layout::Transposed, g, Layout::Normal, gb, true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[a.0].value.dims2("matmul_nt").expect("2-D");
                let n = node.value.shape()[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA += dC · B
                    gemm(m, n, k, g, Layout::Normal, nodes[b.0].value.data(), Layout::Normal, ga, true);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    // dB += dCᵀ · A
                    gemm(n, m, k, g, Layout::Transposed, nodes[a.0].value.data(), Layout::Normal, gb, true);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = nodes[x.0].value.dims2("transpose").expect("2-D");
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot(nodes, grads, *v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &v), &y) in ga.iter_mut().zip(g).zip(nodes[b.0].value.data()) {
                        *o += v * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((o, &v), &x) in gb.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *o += v * x;
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    let d = gb.len();
                    for row in g.chunks_exact(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v * *s;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let n = T::from_usize(gx.len()).expect("count fits");
                    let share = g[0] / n;
                    for o in gx.iter_mut() {
                        *o += share;
                    }
                }
            }
            Op::Square(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let two = T::one() + T::one();
                    for ((o, &v), &xv) in gx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                        *o += two * xv * v;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.numel();
                let gam = nodes[gamma.0].value.data();
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for row in g.chunks_exact(d) {
                        add_into(gb, row);
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (row, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let dn = T::from_usize(d).expect("width fits");
                    for (r, (row, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = row[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = row[j] * gam[j];
                            out[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let c = node.value.shape()[1];
                    let y = node.value.data();
                    for ((grow, yrow), orow) in g
                        .chunks_exact(c)
                        .zip(y.chunks_exact(c))
                        .zip(gx.chunks_exact_mut(c))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            orow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu(x, mode) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, &v), &xv) in gx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                        *o += v * gelu_derivative(xv, *mode);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, &v), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += v * m;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (t, total) = node.value.dims2("concat_cols").expect("2-D");
                let mut col = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for r in 0..t {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + col..r * total + col + w],
                            );
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows(x, start) => {
                let d = node.value.shape()[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(&mut gx[start * d..start * d + g.len()], g);
                }
            }
            Op::SliceCols(x, start) => {
                let (t, len) = node.value.dims2("slice_cols").expect("2-D");
                let d = nodes[x.0].value.shape()[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..t {
                        add_into(
                            &mut gx[r * d + start..r * d + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` does not
/// require a gradient.
fn slot<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub fn gelu_value<T: Scalar>(x: T, mode: GeluMode) -> T {
    let half = T::from_f64_lossy(0.5);
    match mode {
        GeluMode::Tanh => {
            let c = T::from_f64_lossy(SQRT_2_OVER_PI);
            let k = T::from_f64_lossy(GELU_CUBIC);
            half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
        }
        GeluMode::Exact => {
            let xf = x.as_f64();
            T::from_f64_lossy(xf * normal_cdf(xf))
        }
    }
}

pub fn gelu_derivative<T: Scalar>(x: T, mode: GeluMode) -> T {
    let half = T::from_f64_lossy(0.5);
    match mode {
        GeluMode::Tanh => {
            let c = T::from_f64_lossy(SQRT_2_OVER_PI);
            let k = T::from_f64_lossy(GELU_CUBIC);
            let three = T::from_f64_lossy(3.0);
            let th = (c * (x + k * x * x * x)).tanh();
            half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
        }
        GeluMode::Exact => {
            let xf = x.as_f64();
            let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
            T::from_f64_lossy(normal_cdf(xf) + xf * pdf)
        }
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}
