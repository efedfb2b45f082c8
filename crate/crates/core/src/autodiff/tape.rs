//! Reverse-mode differentiation over a linear tape of matrix primitives.
//!
//! Nodes are appended in evaluation order, so the tape order is already a
//! topological order and the backward sweep is a single reverse pass.

use super::{ParamId, ParamStore, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Concat,
    Tanh,
    Sigmoid,
    Softmax,
    Log,
    Sum,
    Lookup,
    Slice,
    Transpose,
    Scale,
    Minimum,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat { inputs: Vec<NodeId>, axis: Axis },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Log { input: NodeId, floor: f64 },
    Sum(NodeId),
    Lookup { table: NodeId, ids: Vec<usize> },
    Slice { input: NodeId, axis: Axis, start: usize, end: usize },
    Transpose(NodeId),
    Scale(NodeId, f64),
    Minimum(NodeId, NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Concat { .. } => OpKind::Concat,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Log { .. } => OpKind::Log,
            Op::Sum(_) => OpKind::Sum,
            Op::Lookup { .. } => OpKind::Lookup,
            Op::Slice { .. } => OpKind::Slice,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Scale(..) => OpKind::Scale,
            Op::Minimum(..) => OpKind::Minimum,
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records primitives and replays them backwards once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, NodeId)>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    disconnected: Vec<NodeId>,
    bindings: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    /// Leaves that require a gradient but are not reachable from the loss.
    /// Their gradient is defined as zero.
    pub fn disconnected(&self) -> &[NodeId] {
        &self.disconnected
    }

    /// Dense per-parameter gradients in store order; unused or disconnected
    /// parameters get zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for &(pid, node) in &self.bindings {
            if let Some(g) = self.get(node) {
                out[pid.index()].add_assign(g);
            }
        }
        out
    }
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2], TensorError> {
    let mut out = [0; 2];
    for d in 0..2 {
        out[d] = if a[d] == b[d] {
            a[d]
        } else if a[d] == 1 {
            b[d]
        } else if b[d] == 1 {
            a[d]
        } else {
            return Err(TensorError::ShapeMismatch { op, lhs: a, rhs: b });
        };
    }
    Ok(out)
}

#[inline]
fn bidx(shape: [usize; 2], r: usize, c: usize) -> usize {
    let rr = if shape[0] == 1 { 0 } else { r };
    let cc = if shape[1] == 1 { 0 } else { c };
    rr * shape[1] + cc
}

/// Sum a gradient of `out_shape` down to a (possibly broadcast) `shape`.
fn reduce_to(grad: &Tensor, shape: [usize; 2]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    let [r, c] = grad.shape();
    let g = grad.data();
    let o = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            o[bidx(shape, i, j)] += g[i * c + j];
        }
    }
    out
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let [r, c] = x.shape();
    let mut out = x.clone();
    let d = out.data_mut();
    for i in 0..r {
        let row = &mut d[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
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

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn op_kind(&self, node: NodeId) -> OpKind {
        self.nodes[node.0].op.kind()
    }

    pub fn requires_grad(&self, node: NodeId) -> bool {
        self.nodes[node.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFiniteValue { op: op.kind() });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|n| self.nodes[n.0].requires_grad)
    }

    /// A leaf node. Leaves with `requires_grad` receive gradients in backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId, TensorError> {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, TensorError> {
        self.leaf(value, false)
    }

    /// The node bound to a stored parameter. Each parameter is materialised at
    /// most once per tape so that all its uses share one gradient slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.bindings.iter().find(|(p, _)| *p == id) {
            return node;
        }
        let value = store.get(id).clone();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.bindings.push((id, node));
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), value, rg)
    }

    fn binary(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, av.shape(), bv.shape())?;
        let (sa, sb) = (av.shape(), bv.shape());
        let mut out = Tensor::zeros(shape);
        let (ad, bd) = (av.data(), bv.data());
        let o = out.data_mut();
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                o[i * shape[1] + j] = f(ad[bidx(sa, i, j)], bd[bidx(sb, i, j)]);
            }
        }
        Ok(out)
    }

    /// Elementwise sum with broadcasting over unit extents.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), value, rg)
    }

    /// Elementwise product with broadcasting over unit extents.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), value, rg)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.binary("minimum", a, b, f64::min)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::Minimum(a, b), value, rg)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: Axis) -> Result<NodeId, TensorError> {
        let first = inputs.first().ok_or(TensorError::EmptyInput { op: OpKind::Concat })?;
        let base = self.value(*first).shape();
        let (keep, grow) = match axis {
            Axis::Rows => (1, 0),
            Axis::Cols => (0, 1),
        };
        let mut total = 0;
        for n in inputs {
            let s = self.value(*n).shape();
            if s[keep] != base[keep] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s,
                });
            }
            total += s[grow];
        }
        let value = match axis {
            Axis::Rows => {
                let mut data = Vec::with_capacity(total * base[1]);
                for n in inputs {
                    data.extend_from_slice(self.value(*n).data());
                }
                Tensor::new([total, base[1]], data)?
            }
            Axis::Cols => {
                let rows = base[0];
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for n in inputs {
                        data.extend_from_slice(self.value(*n).row_slice(r));
                    }
                }
                Tensor::new([rows, total], data)?
            }
        };
        let rg = self.rg(inputs);
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            rg,
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let value = map(self.value(a), f64::tanh);
        let rg = self.rg(&[a]);
        self.push(Op::Tanh(a), value, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let value = map(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(Op::Sigmoid(a), value, rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(Op::Softmax(a), value, rg)
    }

    /// Natural log. With `floor > 0` the input is clamped from below at
    /// `floor` (zero gradient in the clamped region); with `floor == 0`
    /// non-positive inputs are a `NonFiniteValue` error.
    pub fn log(&mut self, a: NodeId, floor: f64) -> Result<NodeId, TensorError> {
        let value = if floor > 0.0 {
            map(self.value(a), |x| x.max(floor).ln())
        } else {
            map(self.value(a), |x| if x > 0.0 { x.ln() } else { f64::NAN })
        };
        let rg = self.rg(&[a]);
        self.push(Op::Log { input: a, floor }, value, rg)
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), value, rg)
    }

    /// Gathers rows of `table` in the order of `ids`.
    pub fn lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        if ids.is_empty() {
            return Err(TensorError::EmptyInput { op: OpKind::Lookup });
        }
        let t = self.value(table);
        let [rows, cols] = t.shape();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, extent: rows });
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let value = Tensor::new([ids.len(), cols], data)?;
        let rg = self.rg(&[table]);
        self.push(
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
            value,
            rg,
        )
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: Axis, start: usize, end: usize) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let [rows, cols] = t.shape();
        let extent = if axis == Axis::Rows { rows } else { cols };
        if start >= end || end > extent {
            return Err(TensorError::IndexOutOfRange { index: end, extent });
        }
        let value = match axis {
            Axis::Rows => Tensor::new([end - start, cols], t.data()[start * cols..end * cols].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(rows * (end - start));
                for r in 0..rows {
                    data.extend_from_slice(&t.row_slice(r)[start..end]);
                }
                Tensor::new([rows, end - start], data)?
            }
        };
        let rg = self.rg(&[a]);
        self.push(Op::Slice { input: a, axis, start, end }, value, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(Op::Transpose(a), value, rg)
    }

    /// Multiplication by a fixed scalar.
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId, TensorError> {
        let value = map(self.value(a), |x| x * k);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, k), value, rg)
    }

    /// Reverse sweep from a `1 x 1` loss. A tape can be differentiated once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss { shape });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut disconnected = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                match &grads[i] {
                    None => disconnected.push(NodeId(i)),
                    Some(g) if !g.is_finite() => return Err(TensorError::NonFiniteGradient { node: i }),
                    Some(_) => {}
                }
            }
        }
        Ok(Gradients {
            grads,
            disconnected,
            bindings: self.bindings.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], node: NodeId, g: Tensor) {
        if !self.nodes[node.0].requires_grad {
            return;
        }
        match &mut grads[node.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = g.matmul(&bv.transpose()).expect("matmul grad shape");
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = av.transpose().matmul(g).expect("matmul grad shape");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                for n in [*a, *b] {
                    if self.requires_grad(n) {
                        let s = self.value(n).shape();
                        self.accumulate(grads, n, reduce_to(g, s));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (n, other) in [(*a, *b), (*b, *a)] {
                    if !self.requires_grad(n) {
                        continue;
                    }
                    let ov = self.value(other);
                    let so = ov.shape();
                    let mut full = g.clone();
                    let [r, c] = full.shape();
                    let fd = full.data_mut();
                    for ri in 0..r {
                        for ci in 0..c {
                            fd[ri * c + ci] *= ov.data()[bidx(so, ri, ci)];
                        }
                    }
                    let s = self.value(n).shape();
                    self.accumulate(grads, n, reduce_to(&full, s));
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let [r, c] = g.shape();
                let mut ga = Tensor::zeros([r, c]);
                let mut gb = Tensor::zeros([r, c]);
                for ri in 0..r {
                    for ci in 0..c {
                        let k = ri * c + ci;
                        if av.data()[bidx(sa, ri, ci)] <= bv.data()[bidx(sb, ri, ci)] {
                            ga.data_mut()[k] = g.data()[k];
                        } else {
                            gb.data_mut()[k] = g.data()[k];
                        }
                    }
                }
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, reduce_to(&ga, sa));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, reduce_to(&gb, sb));
                }
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for n in inputs {
                    let s = self.value(*n).shape();
                    let part = match axis {
                        Axis::Rows => {
                            let c = s[1];
                            Tensor::new(s, g.data()[offset * c..(offset + s[0]) * c].to_vec()).expect("concat grad")
                        }
                        Axis::Cols => {
                            let mut d = Vec::with_capacity(s[0] * s[1]);
                            for r in 0..s[0] {
                                d.extend_from_slice(&g.row_slice(r)[offset..offset + s[1]]);
                            }
                            Tensor::new(s, d).expect("concat grad")
                        }
                    };
                    offset += if *axis == Axis::Rows { s[0] } else { s[1] };
                    if self.requires_grad(*n) {
                        self.accumulate(grads, *n, part);
                    }
                }
            }
            Op::Tanh(a) => {
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(out.data()) {
                    *x *= 1.0 - y * y;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(out.data()) {
                    *x *= y * (1.0 - y);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let [r, c] = out.shape();
                let mut ga = Tensor::zeros([r, c]);
                for ri in 0..r {
                    let y = out.row_slice(ri);
                    let dy = g.row_slice(ri);
                    let dot: f64 = y.iter().zip(dy).map(|(p, q)| p * q).sum();
                    let row = &mut ga.data_mut()[ri * c..(ri + 1) * c];
                    for k in 0..c {
                        row[k] = y[k] * (dy[k] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Log { input, floor } => {
                let xv = self.value(*input);
                let mut ga = g.clone();
                for (d, &x) in ga.data_mut().iter_mut().zip(xv.data()) {
                    *d = if *floor > 0.0 && x <= *floor { 0.0 } else { *d / x };
                }
                self.accumulate(grads, *input, ga);
            }
            Op::Sum(a) => {
                let s = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::full(s, g.item()));
            }
            Op::Lookup { table, ids } => {
                if !self.requires_grad(*table) {
                    return;
                }
                let s = self.value(*table).shape();
                let cols = s[1];
                let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(s));
                let d = slot.data_mut();
                for (k, &id) in ids.iter().enumerate() {
                    let src = g.row_slice(k);
                    let dst = &mut d[id * cols..(id + 1) * cols];
                    for (x, y) in dst.iter_mut().zip(src) {
                        *x += y;
                    }
                }
            }
            Op::Slice { input, axis, start, end } => {
                let s = self.value(*input).shape();
                let mut ga = Tensor::zeros(s);
                let cols = s[1];
                match axis {
                    Axis::Rows => ga.data_mut()[start * cols..end * cols].copy_from_slice(g.data()),
                    Axis::Cols => {
                        let w = end - start;
                        for r in 0..s[0] {
                            ga.data_mut()[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                        }
                    }
                }
                self.accumulate(grads, *input, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Scale(a, k) => {
                let mut ga = g.clone();
                ga.scale_in_place(*k);
                self.accumulate(grads, *a, ga);
            }
        }
    }
}
