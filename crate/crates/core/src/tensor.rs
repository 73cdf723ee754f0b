//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! Forward computations are recorded on a [`Tape`] as they run. Every
//! recorded node keeps its value and a local backward rule; [`Tape::backward`]
//! walks the nodes in reverse insertion order (which is a reverse topological
//! order, since inputs must exist before the node that consumes them) and
//! returns the gradient of a scalar loss with respect to every node that
//! requires one.
//!
//! Broadcasting is limited to trailing-axis expansion: the right operand of a
//! binary op may have the shape of a suffix of the left operand's shape.

use thiserror::Error;

/// Position of a node on a [`Tape`].
pub type NodeId = usize;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("index {id} out of range for a table with {rows} rows")]
    IndexOutOfRange { id: usize, rows: usize },
    #[error("axis {axis} is invalid for a tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{op}: normalized axis has length 0")]
    EmptyAxis { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
}

/// Dense row-major tensor with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("length matches by construction")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("length matches by construction")
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self::new(&[], vec![value]).expect("scalar")
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("vector")
    }

    /// Rank-2 tensor from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data).expect("matrix")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values. The shape cannot change through it.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Resets the gradient slot to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Adds `g` into the gradient slot.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let slot = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, x) in slot.iter_mut().zip(g) {
            *s += x;
        }
    }

    /// The tape node this tensor was last registered as, if any.
    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// A trainable tensor with a stable name.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(NodeId);

impl Var {
    pub fn id(self) -> NodeId {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Binary {
        op: ElementwiseOp,
        a: Var,
        b: Var,
    },
    Unary {
        op: ElementwiseOp,
        a: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reduce {
        op: ReduceOp,
        a: Var,
        axis: Option<usize>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SelectRow {
        a: Var,
        row: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Bce {
        pred: Var,
        targets: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is single-use per forward pass; build a new one for every step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records `t` as a leaf and tags it with the node id so gradients can be
    /// routed back with [`Gradients::accumulate`].
    pub fn watch(&mut self, t: &mut Tensor) -> Var {
        let v = self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad);
        t.node = Some(v.0);
        v
    }

    /// Records a copy of `t` as a leaf without tagging it.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Copies a recorded value out as a fresh tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape values are well formed")
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, rg))
    }

    /// Applies `op`. Binary ops need `b`; unary ops ignore it.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        if !op.is_binary() {
            let out: Vec<f64> = self
                .value(a)
                .iter()
                .map(|&x| match op {
                    ElementwiseOp::Relu => x.max(0.0),
                    ElementwiseOp::Sigmoid => sigmoid(x),
                    ElementwiseOp::Tanh => x.tanh(),
                    _ => unreachable!(),
                })
                .collect();
            let rg = self.rg(&[a]);
            return Ok(self.push(self.shape(a).to_vec(), out, Op::Unary { op, a }, rg));
        }
        let b = b.unwrap_or_else(|| panic!("{} needs two operands", op.name()));
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op: op.name(),
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = if vb.is_empty() {
            Vec::new()
        } else {
            va.iter()
                .zip(vb.iter().cycle())
                .map(|(&x, &y)| match op {
                    ElementwiseOp::Add => x + y,
                    ElementwiseOp::Sub => x - y,
                    ElementwiseOp::Mul => x * y,
                    _ => unreachable!(),
                })
                .collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa.to_vec(), out, Op::Binary { op, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.elementwise(ElementwiseOp::Relu, a, None).expect("unary")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.elementwise(ElementwiseOp::Sigmoid, a, None).expect("unary")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.elementwise(ElementwiseOp::Tanh, a, None).expect("unary")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, factor }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", a)?;
        let va = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, rg))
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let va = self.value(a);
        let mut out = vec![0.0; va.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| va[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (va[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Softmax { a, axis }, rg))
    }

    /// Normalises each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::EmptyAxis { op: "layer_norm" })?;
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let rows = vx.len() / d;
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg[j] + vb[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.rank2("embedding", table)?;
        if let Some(&id) = ids.iter().find(|&&id| id >= rows) {
            return Err(TensorError::IndexOutOfRange { id, rows });
        }
        let vt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&vt[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Sum or mean over `axis` (removed from the shape), or over everything
    /// when `axis` is `None` (yielding a rank-0 tensor).
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let va = self.value(a);
        let (out_shape, out) = match axis {
            None => {
                let s: f64 = va.iter().sum();
                let v = match op {
                    ReduceOp::Sum => s,
                    ReduceOp::Mean => s / va.len() as f64,
                };
                (Vec::new(), vec![v])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(TensorError::InvalidAxis {
                        axis: ax,
                        rank: shape.len(),
                    });
                }
                let (outer, n, inner) = split_axis(&shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            out[o * inner + i] += va[o * n * inner + j * inner + i];
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    out.iter_mut().for_each(|x| *x /= n as f64);
                }
                let mut s = shape.clone();
                s.remove(ax);
                (s, out)
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::Reduce { op, a, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Sum, a, None).expect("full reduction")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Mean, a, None).expect("full reduction")
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_cols", a)?;
        if start + width > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, width],
            });
        }
        let va = self.value(a);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&va[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![r, width], out, Op::SliceCols { a, start }, rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rank2("concat_cols", p)?;
            if *rows.get_or_insert(r) != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: vec![r, c],
                });
            }
            widths.push(c);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// Row `row` of a matrix, as a `[1×c]` matrix.
    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (r, c) = self.rank2("select_row", a)?;
        if row >= r {
            return Err(TensorError::IndexOutOfRange { id: row, rows: r });
        }
        let out = self.value(a)[row * c..(row + 1) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![1, c], out, Op::SelectRow { a, row }, rg))
    }

    /// Stacks tensors along their first axis. All trailing shapes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().map(|&p| self.shape(p).to_vec()).unwrap_or_default();
        if first.is_empty() {
            return Err(TensorError::Rank {
                op: "concat_rows",
                expected: 1,
                shape: first,
            });
        }
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = first;
        shape[0] = lead;
        let rg = self.rg(parts);
        Ok(self.push(shape, out, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Mean binary cross-entropy of probabilities `pred` against 0/1 `targets`.
    /// Predictions are clamped to `[eps, 1 - eps]` before taking logs.
    pub fn bce(&mut self, pred: Var, targets: &[f64], eps: f64) -> Result<Var> {
        let vp = self.value(pred);
        if vp.len() != targets.len() || vp.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                left: self.shape(pred).to_vec(),
                right: vec![targets.len()],
            });
        }
        let total: f64 = vp.iter().zip(targets).map(|(&p, &y)| bce_value(p, y, eps)).sum();
        let loss = total / vp.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::Bce {
                pred,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients are returned rather than written into tensors; use
    /// [`Gradients::accumulate`] to add them into parameter gradient slots.
    /// Accumulation is additive, so callers zero gradients between steps.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            visited += 1;
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, contribution: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            contribution(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a), self.value(*b));
                send(*a, &|da| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                send(*b, &|db| {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        for p in 0..k {
                            let x = va[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Binary { op, a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let nb = vb.len();
                if nb == 0 {
                    return;
                }
                send(*a, &|da| match op {
                    ElementwiseOp::Mul => {
                        for (i, d) in da.iter_mut().enumerate() {
                            *d += g[i] * vb[i % nb];
                        }
                    }
                    _ => add_into(da, g),
                });
                send(*b, &|db| {
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % nb] += match op {
                            ElementwiseOp::Add => gi,
                            ElementwiseOp::Sub => -gi,
                            _ => gi * va[i],
                        };
                    }
                });
            }
            Op::Unary { op, a } => {
                let (x, y) = (self.value(*a), &node.value);
                send(*a, &|da| {
                    for i in 0..da.len() {
                        da[i] += g[i]
                            * match op {
                                ElementwiseOp::Relu => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                ElementwiseOp::Sigmoid => y[i] * (1.0 - y[i]),
                                _ => 1.0 - y[i] * y[i],
                            };
                    }
                });
            }
            Op::Scale { a, factor } => send(*a, &|da| {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi * factor;
                }
            }),
            Op::Transpose { a } => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                send(*a, &|da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape { a } => send(*a, &|da| add_into(da, g)),
            Op::Softmax { a, axis } => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                send(*a, &|da| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                da[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().expect("rank ≥ 1");
                let rows = rstd.len();
                let vg = self.value(*gain);
                send(*x, &|dx| {
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * vg[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * vg[j];
                            dx[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                send(*gain, &|dg| {
                    for (i, (gi, h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] += gi * h;
                    }
                });
                send(*bias, &|db| {
                    for (i, gi) in g.iter().enumerate() {
                        db[i % d] += gi;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                send(*table, &|dt| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                });
            }
            Op::Reduce { op, a, axis } => {
                let shape = self.shape(*a);
                let n_total = self.value(*a).len();
                match axis {
                    None => {
                        let scale = match op {
                            ReduceOp::Sum => 1.0,
                            ReduceOp::Mean => 1.0 / n_total as f64,
                        };
                        send(*a, &|da| da.iter_mut().for_each(|d| *d += g[0] * scale));
                    }
                    Some(ax) => {
                        let (outer, n, inner) = split_axis(shape, *ax);
                        let scale = match op {
                            ReduceOp::Sum => 1.0,
                            ReduceOp::Mean => 1.0 / n as f64,
                        };
                        send(*a, &|da| {
                            for o in 0..outer {
                                for j in 0..n {
                                    for i in 0..inner {
                                        da[o * n * inner + j * inner + i] += g[o * inner + i] * scale;
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let c = self.shape(*a)[1];
                let (r, w) = (node.shape[0], node.shape[1]);
                send(*a, &|da| {
                    for i in 0..r {
                        add_into(&mut da[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    send(p, &|dp| {
                        for i in 0..rows {
                            add_into(
                                &mut dp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SelectRow { a, row } => {
                let c = node.shape[1];
                send(*a, &|da| add_into(&mut da[row * c..(row + 1) * c], g));
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    send(p, &|dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Bce { pred, targets, eps } => {
                let vp = self.value(*pred);
                let n = vp.len() as f64;
                send(*pred, &|dp| {
                    for i in 0..dp.len() {
                        dp[i] += g[0] * bce_grad(vp[i], targets[i], *eps) / n;
                    }
                });
            }
        }
    }
}

/// Output of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed to it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of nodes whose backward rule ran.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }

    /// Adds the gradient for a watched tensor into its gradient slot.
    /// Returns false if the tensor was never watched, does not require a
    /// gradient, or received none.
    pub fn accumulate(&self, t: &mut Tensor) -> bool {
        match t.node {
            Some(id) if t.requires_grad => self.accumulate_var(Var(id), t),
            _ => false,
        }
    }

    /// Adds the gradient of `v` into `t`'s gradient slot.
    pub fn accumulate_var(&self, v: Var, t: &mut Tensor) -> bool {
        match self.get(v) {
            Some(g) if g.len() == t.numel() => {
                t.accumulate_grad(g);
                true
            }
            _ => false,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-example binary cross-entropy with clamped probability.
pub(crate) fn bce_value(p: f64, y: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d/dp of [`bce_value`], evaluated at the clamped probability.
pub(crate) fn bce_grad(p: f64, y: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p - y) / (p * (1.0 - p))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            for (o, &y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    out
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "step size must be positive");
    let mut probe = Tensor::new(x.shape(), x.data().to_vec()).expect("same shape");
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        *o = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
