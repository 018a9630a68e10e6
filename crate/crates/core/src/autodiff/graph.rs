use std::borrow::Cow;

use super::kernels;
use super::params::{GradBuffer, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Hinge(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanPool {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
        sizes: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Cosine(Var, Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A define-by-run tape. Every op appends a node holding its value; when
/// recording is on, the op and its inputs are kept for [`Graph::backward`].
///
/// Parameters are borrowed from a [`ParamStore`], never copied. A graph is
/// confined to the thread that built it.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
    record: bool,
}

impl Graph<'static> {
    /// A graph without a parameter store, for free-standing computations.
    pub fn standalone() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            record: true,
        }
    }
}

impl<'p> Graph<'p> {
    /// Recording graph over `store`.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            record: true,
        }
    }

    /// Forward-only graph: values are computed, nothing is recorded.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            record: false,
            ..Self::new(store)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by tensors the graph owns (borrowed parameters excluded).
    pub fn live_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.value, Cow::Owned(_)))
            .map(|n| n.value.bytes())
            .sum()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            requires_grad: self.record,
            param: Some(id),
        });
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad: requires_grad && self.record,
            param: None,
        });
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            param: None,
        });
        v
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same numel");
        self.push(out, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a]))
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of `x` (the only broadcast supported).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn hinge(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Hinge(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Log(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = src.to_vec();
        if inner == 1 {
            for chunk in out.chunks_exact_mut(len) {
                kernels::softmax_in_place(chunk);
            }
        } else {
            let mut buf = vec![0.0; len];
            for o in 0..outer {
                for i in 0..inner {
                    for a in 0..len {
                        buf[a] = src[(o * len + a) * inner + i];
                    }
                    kernels::softmax_in_place(&mut buf);
                    for a in 0..len {
                        out[(o * len + a) * inner + i] = buf[a];
                    }
                }
            }
        }
        let op = Op::Softmax {
            x,
            outer,
            len,
            inner,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, &[x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(t.shape().to_vec(), out).expect("same numel");
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Normalizes each row over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// Rows of `table` at `ids`, as a `[ids.len(), d]` matrix.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims("embedding_gather", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "embedding_gather",
                format!("index {bad} into table [{rows}, {d}]"),
            ));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(out, op, &[table]))
    }

    /// Row `i` of a matrix as a vector.
    pub fn select_row(&mut self, x: Var, i: usize) -> Result<Var> {
        let rows = self.embedding_gather(x, &[i])?;
        let d = self.value(rows).cols();
        self.reshape(rows, vec![d])
    }

    /// Arithmetic mean of the rows of `x` listed in `idx`.
    pub fn mean_pool(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims("mean_pool", x)?;
        if idx.is_empty() {
            return Err(Error::shape("mean_pool", "empty index set"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "mean_pool",
                format!("index {bad} into [{rows}, {d}]"),
            ));
        }
        let src = self.data(x);
        let mut out = vec![0.0; d];
        for &i in idx {
            kernels::axpy(1.0, &src[i * d..(i + 1) * d], &mut out);
        }
        let inv = 1.0 / idx.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let op = Op::MeanPool {
            x,
            idx: idx.to_vec(),
        };
        Ok(self.push(Tensor::vector(out), op, &[x]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&sizes) {
                let src = self.data(v);
                out.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            outer,
            inner,
            sizes,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, inputs))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_cols", x)?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of [{m}, {n}]")));
        }
        let w = end - start;
        let src = self.data(x);
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.data(x).to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?}", self.shape(x))))?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Cosine similarity of two equally sized tensors, as a scalar.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.value(u).len() != self.value(v).len() {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(u), self.shape(v)),
            ));
        }
        let c = kernels::cosine(self.data(u), self.data(v));
        Ok(self.push(Tensor::scalar(c), Op::Cosine(u, v), &[u, v]))
    }

    /// `out[r] = x[r, idx[r]]`
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("pick", x)?;
        if idx.len() != m || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("pick", format!("{} indices into [{m}, {n}]", idx.len())));
        }
        let src = self.data(x);
        let out = idx.iter().enumerate().map(|(r, &c)| src[r * n + c]).collect();
        let op = Op::Pick {
            x,
            idx: idx.to_vec(),
        };
        Ok(self.push(Tensor::vector(out), op, &[x]))
    }

    /// Reverse sweep from a one-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Invalid(
                "backward: loss does not depend on any differentiable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(i, &gout, &mut grads);
        }

        let mut leaves = Vec::new();
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            if let Some(g) = grads[i].take() {
                match node.param {
                    Some(id) => params.push((id, g)),
                    None => leaves.push((Var(i), g)),
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn backward_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let len = |v: Var| nodes[v.0].value.len();
        // Returns the accumulator for `v`, or None when `v` needs no gradient.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len(v)]);
            f(slot);
        };
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                acc(*a, &mut |g| kernels::matmul_nt_acc(gout, val(*b), g, m, n, k));
                acc(*b, &mut |g| kernels::matmul_tn_acc(val(*a), gout, g, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                acc(*a, &mut |g| {
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += gout[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| kernels::axpy(1.0, gout, g));
                acc(*b, &mut |g| kernels::axpy(1.0, gout, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| kernels::axpy(1.0, gout, g));
                acc(*b, &mut |g| kernels::axpy(-1.0, gout, g));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |g| {
                    for ((gi, go), bv) in g.iter_mut().zip(gout).zip(val(*b)) {
                        *gi += go * bv;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, go), av) in g.iter_mut().zip(gout).zip(val(*a)) {
                        *gi += go * av;
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |g| kernels::axpy(1.0, gout, g));
                acc(*b, &mut |g| {
                    for row in gout.chunks_exact(g.len()) {
                        kernels::axpy(1.0, row, g);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| kernels::axpy(*c, gout, g)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |g| kernels::axpy(1.0, gout, g)),
            Op::Relu(x) | Op::Hinge(x) => acc(*x, &mut |g| {
                for ((gi, go), xv) in g.iter_mut().zip(gout).zip(val(*x)) {
                    if *xv > 0.0 {
                        *gi += go;
                    }
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for ((gi, go), y) in g.iter_mut().zip(gout).zip(out) {
                    *gi += go * y * (1.0 - y);
                }
            }),
            Op::Log(x) => acc(*x, &mut |g| {
                for ((gi, go), xv) in g.iter_mut().zip(gout).zip(val(*x)) {
                    *gi += go / xv;
                }
            }),
            Op::Clamp(x, lo, hi) => acc(*x, &mut |g| {
                for ((gi, go), xv) in g.iter_mut().zip(gout).zip(val(*x)) {
                    if xv > lo && xv < hi {
                        *gi += go;
                    }
                }
            }),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => acc(*x, &mut |g| {
                for o in 0..*outer {
                    for c in 0..*inner {
                        let at = |a: usize| (o * len + a) * inner + c;
                        let s: f64 = (0..*len).map(|a| gout[at(a)] * out[at(a)]).sum();
                        for a in 0..*len {
                            g[at(a)] += out[at(a)] * (gout[at(a)] - s);
                        }
                    }
                }
            }),
            Op::LogSoftmax(x) => {
                let n = nodes[x.0].value.cols();
                acc(*x, &mut |g| {
                    for ((grow, gorow), orow) in g
                        .chunks_exact_mut(n)
                        .zip(gout.chunks_exact(n))
                        .zip(out.chunks_exact(n))
                    {
                        let s: f64 = gorow.iter().sum();
                        for ((gi, go), lo) in grow.iter_mut().zip(gorow).zip(orow) {
                            *gi += go - lo.exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.len();
                let gm = val(*gamma);
                acc(*x, &mut |g| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let go = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = go[j] * gm[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        for j in 0..d {
                            let dxh = go[j] * gm[j];
                            g[r * d + j] +=
                                rs / d as f64 * (d as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for (go, xh) in gout.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            g[j] += go[j] * xh[j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for go in gout.chunks_exact(d) {
                        kernels::axpy(1.0, go, g);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].value.cols();
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(1.0, &gout[r * d..(r + 1) * d], &mut g[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::MeanPool { x, idx } => {
                let d = nodes[x.0].value.cols();
                let inv = 1.0 / idx.len() as f64;
                acc(*x, &mut |g| {
                    for &id in idx {
                        kernels::axpy(inv, gout, &mut g[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in inputs.iter().zip(sizes) {
                    acc(v, &mut |g| {
                        for o in 0..*outer {
                            let src = &gout[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                            kernels::axpy(1.0, src, &mut g[o * sz * inner..(o + 1) * sz * inner]);
                        }
                    });
                    offset += sz;
                }
            }
            Op::SliceCols { x, start } => {
                let n = nodes[x.0].value.cols();
                let w = nodes[i].value.cols();
                acc(*x, &mut |g| {
                    for (r, go) in gout.chunks_exact(w).enumerate() {
                        kernels::axpy(1.0, go, &mut g[r * n + start..r * n + start + w]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gout[0])),
            Op::Mean(x) => {
                let c = gout[0] / len(*x).max(1) as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += c));
            }
            Op::Cosine(u, v) => {
                let (uu, vv) = (val(*u), val(*v));
                let (nu, nv) = (kernels::norm(uu), kernels::norm(vv));
                if nu * nv > f64::MIN_POSITIVE {
                    let c = out[0];
                    let go = gout[0];
                    acc(*u, &mut |g| {
                        for ((gi, a), b) in g.iter_mut().zip(uu).zip(vv) {
                            *gi += go * (b / (nu * nv) - c * a / (nu * nu));
                        }
                    });
                    acc(*v, &mut |g| {
                        for ((gi, a), b) in g.iter_mut().zip(uu).zip(vv) {
                            *gi += go * (a / (nu * nv) - c * b / (nv * nv));
                        }
                    });
                }
            }
            Op::Pick { x, idx } => {
                let n = nodes[x.0].value.cols();
                acc(*x, &mut |g| {
                    for (r, &c) in idx.iter().enumerate() {
                        g[r * n + c] += gout[r];
                    }
                });
            }
        }
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<(Var, Vec<f64>)>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of a non-parameter leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves
            .iter()
            .find(|(l, _)| *l == v)
            .map(|(_, g)| g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Adds `scale` times every parameter gradient into `buf`.
    pub fn accumulate_into(&self, buf: &mut GradBuffer, scale: f64) {
        for (id, g) in &self.params {
            buf.add(*id, g, scale);
        }
    }
}
