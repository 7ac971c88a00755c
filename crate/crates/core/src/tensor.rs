//! Dense f64 tensors and a reverse-mode autodiff tape.
//!
//! The tape is a Wengert list: every operation appends one node holding the
//! op kind, its input node ids and the cached forward value, so insertion
//! order is already a topological order. `backward` sweeps the list once in
//! reverse, applying each op's exact vector-Jacobian product.
//!
//! The tape is rebuilt per batch and is strictly single-threaded; tensors
//! detached from any tape are plain immutable values and safe to share.

use thiserror::Error;

use crate::math;

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for a true scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of a node on a tape.
pub type NodeId = usize;

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid shape in {op}: {shape:?} ({detail})")]
    InvalidShape { op: &'static str, shape: Vec<usize>, detail: String },
    #[error("non-finite output of {op}; training must abort")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("index {index} out of range {len} in {op}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Sum of several same-shape nodes.
    AddN(Vec<NodeId>),
    /// Multiply by a compile-time constant.
    Scale(NodeId, f64),
    /// Add a compile-time constant elementwise.
    AddConst(NodeId),
    /// Broadcast-multiply a tensor by a scalar node.
    MulScalar(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Slice { src: NodeId, offset: usize, len: usize },
    /// Select one row of a rank-2 node (or one element of a rank-1 node).
    Gather { src: NodeId, row: usize },
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Recip(NodeId),
    Clamp { src: NodeId, lo: f64, hi: f64 },
    SoftmaxLast(NodeId),
    L2Norm(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Complex rotation of a length-2k vector by k phase angles.
    Rotate { src: NodeId, phase: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Per-parameter gradient of the same shape as the parameter.
pub type Gradient = Tensor;

/// Gradients indexed by tape node, as produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient that flowed to `id`, if any.
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zero-filled when nothing reached it.
    pub fn of_or_zeros(&self, id: NodeId, shape: &[usize]) -> Gradient {
        match self.of(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Reverse-mode autodiff tape.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(self.nodes.len() - 1)
    }

    /// Record an input tensor. Leaves are both constants and parameters;
    /// parameter bookkeeping (which leaf belongs to which parameter slot)
    /// is the caller's.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value });
        self.nodes.len() - 1
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    fn binary_same_shape(&mut self, name: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: name, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::Sub(a, b), out, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn add_n(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let first = *terms.first().ok_or(TensorError::InvalidShape {
            op: "add_n",
            shape: vec![],
            detail: "empty term list".into(),
        })?;
        let shape = self.value(first).shape().to_vec();
        let mut data = self.value(first).data().to_vec();
        for &t in &terms[1..] {
            if self.value(t).shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "add_n",
                    lhs: shape,
                    rhs: self.value(t).shape().to_vec(),
                });
            }
            for (o, v) in data.iter_mut().zip(self.value(t).data()) {
                *o += v;
            }
        }
        self.push(Op::AddN(terms.to_vec()), Tensor::new(shape, data), "add_n")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::Scale(a, c), out, "scale")
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::AddConst(a), out, "add_const")
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    /// Broadcast-multiply `a` by the scalar node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(TensorError::InvalidShape {
                op: "mul_scalar",
                shape: self.value(s).shape().to_vec(),
                detail: "scalar operand must have one element".into(),
            });
        }
        let sv = self.value(s).data()[0];
        let data = self.value(a).data().iter().map(|x| x * sv).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::MulScalar(a, s), out, "mul_scalar")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                for j in 0..n {
                    data[i * n + j] += aip * db[p * n + j];
                }
            }
        }
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, data), "matmul")
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (sw, sx) = (self.value(w).shape().to_vec(), self.value(x).shape().to_vec());
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(TensorError::ShapeMismatch { op: "matvec", lhs: sw, rhs: sx });
        }
        let out = math::matvec(self.value(w).data(), self.value(x).data(), sw[0], sw[1]);
        self.push(Op::MatVec(w, x), Tensor::vector(out), "matvec")
    }

    /// Concatenate along the last axis. All leading axes must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            detail: "empty part list".into(),
        })?;
        let lead = {
            let s = self.value(first).shape();
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut total_last = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total_last += s[s.len() - 1];
        }
        let mut data = vec![0.0; rows * total_last];
        let mut off = 0;
        for &p in parts {
            let last = self.value(p).last_dim();
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total_last + off..r * total_last + off + last]
                    .copy_from_slice(&src[r * last..(r + 1) * last]);
            }
            off += last;
        }
        let mut shape = lead;
        shape.push(total_last);
        self.push(Op::Concat(parts.to_vec()), Tensor::new(shape, data), "concat")
    }

    /// Slice `[offset, offset+len)` of the last axis.
    pub fn slice(&mut self, src: NodeId, offset: usize, len: usize) -> Result<NodeId> {
        let s = self.value(src).shape().to_vec();
        let last = *s.last().ok_or(TensorError::InvalidShape {
            op: "slice",
            shape: s.clone(),
            detail: "rank-0 input".into(),
        })?;
        if offset + len > last {
            return Err(TensorError::IndexOutOfRange { op: "slice", index: offset + len, len: last });
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let src_data = self.value(src).data();
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src_data[r * last + offset..r * last + offset + len]);
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(len);
        self.push(Op::Slice { src, offset, len }, Tensor::new(shape, data), "slice")
    }

    /// Row `row` of a rank-2 node, or element `row` of a rank-1 node (as `[1]`).
    pub fn gather(&mut self, src: NodeId, row: usize) -> Result<NodeId> {
        let s = self.value(src).shape().to_vec();
        match s.len() {
            2 => {
                if row >= s[0] {
                    return Err(TensorError::IndexOutOfRange { op: "gather", index: row, len: s[0] });
                }
                let cols = s[1];
                let data = self.value(src).data()[row * cols..(row + 1) * cols].to_vec();
                self.push(Op::Gather { src, row }, Tensor::vector(data), "gather")
            }
            1 => {
                if row >= s[0] {
                    return Err(TensorError::IndexOutOfRange { op: "gather", index: row, len: s[0] });
                }
                let v = self.value(src).data()[row];
                self.push(Op::Gather { src, row }, Tensor::scalar(v), "gather")
            }
            _ => Err(TensorError::InvalidShape {
                op: "gather",
                shape: s,
                detail: "expected rank 1 or 2".into(),
            }),
        }
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(op, out, name)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("log_sigmoid", a, math::log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("recip", a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp { src: a, lo, hi })
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let last = self.value(a).last_dim();
        if last == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape: self.value(a).shape().to_vec(),
                detail: "empty last axis".into(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(last) {
            math::softmax_in_place(row);
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::SoftmaxLast(a), out, "softmax")
    }

    /// Euclidean norm reduced to a scalar.
    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let n = math::l2_norm(self.value(a).data());
        self.push(Op::L2Norm(a), Tensor::scalar(n), "l2_norm")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), "mean")
    }

    /// Dot product as sum(a * b).
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let prod = self.mul(a, b)?;
        self.sum(prod)
    }

    /// Rotate a length-2k vector by k phase angles: the first k entries are
    /// real parts, the last k imaginary parts, each pair multiplied by
    /// (cos theta_i, sin theta_i).
    pub fn rotate(&mut self, src: NodeId, phase: NodeId) -> Result<NodeId> {
        let (ss, sp) = (self.value(src).shape().to_vec(), self.value(phase).shape().to_vec());
        if ss.len() != 1 || sp.len() != 1 || ss[0] != 2 * sp[0] {
            return Err(TensorError::ShapeMismatch { op: "rotate", lhs: ss, rhs: sp });
        }
        let out = math::rotate(self.value(src).data(), self.value(phase).data());
        self.push(Op::Rotate { src, phase }, Tensor::vector(out), "rotate")
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients;
    /// leaves unreachable from the root get no entry (read as zeros).
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(TensorError::NonScalarRoot { shape: self.value(root).shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_inputs(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64]) {
        match &mut grads[id] {
            Some(t) => {
                for (a, d) in t.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => {
                grads[id] = Some(Tensor::new(self.value(id).shape().to_vec(), delta.to_vec()));
            }
        }
    }

    fn accumulate_inputs(
        &self,
        id: NodeId,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd);
                self.accumulate(grads, *b, gd);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd);
                let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> =
                    gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> =
                    gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::AddN(terms) => {
                for &t in terms {
                    self.accumulate(grads, t, gd);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = gd.iter().map(|g| g * c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::AddConst(a) => self.accumulate(grads, *a, gd),
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                let da: Vec<f64> = gd.iter().map(|g| g * sv).collect();
                let ds = math::dot(gd, self.value(*a).data());
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *s, &[ds]);
            }
            Op::MatMul(a, b) => {
                let (m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let n = self.value(*b).shape()[1];
                let (da_src, db_src) = (self.value(*a).data(), self.value(*b).data());
                // dA = g @ B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gd[i * n + j] * db_src[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                // dB = A^T @ g
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let aip = da_src[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * gd[i * n + j];
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::MatVec(w, x) => {
                let cols = self.value(*w).shape()[1];
                let (wd, xd) = (self.value(*w).data(), self.value(*x).data());
                let mut dw = vec![0.0; wd.len()];
                let mut dx = vec![0.0; cols];
                for ((&gr, wrow), dwrow) in
                    gd.iter().zip(wd.chunks_exact(cols)).zip(dw.chunks_exact_mut(cols))
                {
                    for (((dwv, &wv), dxv), &xv) in
                        dwrow.iter_mut().zip(wrow).zip(dx.iter_mut()).zip(xd)
                    {
                        *dwv = gr * xv;
                        *dxv += gr * wv;
                    }
                }
                self.accumulate(grads, *w, &dw);
                self.accumulate(grads, *x, &dx);
            }
            Op::Concat(parts) => {
                let total_last = self.value(id).last_dim();
                let rows = self.value(id).numel() / total_last;
                let mut off = 0;
                for &p in parts {
                    let last = self.value(p).last_dim();
                    let mut dp = vec![0.0; rows * last];
                    for r in 0..rows {
                        dp[r * last..(r + 1) * last].copy_from_slice(
                            &gd[r * total_last + off..r * total_last + off + last],
                        );
                    }
                    self.accumulate(grads, p, &dp);
                    off += last;
                }
            }
            Op::Slice { src, offset, len } => {
                let last = self.value(*src).last_dim();
                let rows = self.value(*src).numel() / last;
                let mut ds = vec![0.0; self.value(*src).numel()];
                for r in 0..rows {
                    ds[r * last + offset..r * last + offset + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *src, &ds);
            }
            Op::Gather { src, row } => {
                let shape = self.value(*src).shape();
                let cols = if shape.len() == 2 { shape[1] } else { 1 };
                let mut ds = vec![0.0; self.value(*src).numel()];
                ds[row * cols..row * cols + cols].copy_from_slice(gd);
                self.accumulate(grads, *src, &ds);
            }
            Op::Exp(a) => {
                let da: Vec<f64> =
                    gd.iter().zip(self.value(id).data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Log(a) => {
                let da: Vec<f64> =
                    gd.iter().zip(self.value(*a).data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> =
                    gd.iter().zip(self.value(id).data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                // Subgradient 0 at exactly 0.
                let da: Vec<f64> = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = gd
                    .iter()
                    .zip(self.value(id).data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::LogSigmoid(a) => {
                // d/dx log sigmoid(x) = sigmoid(-x)
                let da: Vec<f64> = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| g * math::sigmoid(-x))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Recip(a) => {
                let da: Vec<f64> = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| -g / (x * x))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Clamp { src, lo, hi } => {
                let da: Vec<f64> = gd
                    .iter()
                    .zip(self.value(*src).data())
                    .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *src, &da);
            }
            Op::SoftmaxLast(a) => {
                let y = self.value(id).data();
                let last = self.value(id).last_dim();
                let mut da = vec![0.0; y.len()];
                for (row, (yr, gr)) in y.chunks(last).zip(gd.chunks(last)).enumerate() {
                    let inner = math::dot(gr, yr);
                    for c in 0..last {
                        da[row * last + c] = yr[c] * (gr[c] - inner);
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::L2Norm(a) => {
                let norm = self.value(id).data()[0];
                let scale = if norm > 0.0 { gd[0] / norm } else { 0.0 };
                let da: Vec<f64> = self.value(*a).data().iter().map(|x| x * scale).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Sum(a) => {
                let da = vec![gd[0]; self.value(*a).numel()];
                self.accumulate(grads, *a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let da = vec![gd[0] / n; self.value(*a).numel()];
                self.accumulate(grads, *a, &da);
            }
            Op::Rotate { src, phase } => {
                let k = self.value(*phase).numel();
                let (h, theta) = (self.value(*src).data(), self.value(*phase).data());
                let mut dh = vec![0.0; 2 * k];
                let mut dth = vec![0.0; k];
                for i in 0..k {
                    let (sin, cos) = theta[i].sin_cos();
                    let (g_re, g_im) = (gd[i], gd[k + i]);
                    let (re, im) = (h[i], h[k + i]);
                    // Inverse rotation of the upstream gradient.
                    dh[i] = g_re * cos + g_im * sin;
                    dh[k + i] = -g_re * sin + g_im * cos;
                    dth[i] = g_re * (-re * sin - im * cos) + g_im * (re * cos - im * sin);
                }
                self.accumulate(grads, *src, &dh);
                self.accumulate(grads, *phase, &dth);
            }
        }
        Ok(())
    }
}

/// Max relative error between the analytic gradient of `f` and a central
/// finite difference, over all coordinates of `x`.
///
/// `f` builds a scalar graph from a leaf on a fresh tape, so the numeric
/// side only ever exercises forward evaluation and stays independent of
/// the backward implementation it is checking.
pub fn grad_check(
    f: &dyn Fn(&mut Tape, NodeId) -> Result<NodeId>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone());
        let root = f(&mut tape, leaf)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    if !tape.value(root).is_scalar() {
        return Err(TensorError::NonScalarRoot { shape: tape.value(root).shape().to_vec() });
    }
    let grads = tape.backward(root)?;
    let analytic = grads.of_or_zeros(leaf, x.shape());

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        if !fd.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
