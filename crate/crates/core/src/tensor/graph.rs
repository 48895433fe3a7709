use std::sync::Arc;

use super::kernels;
use super::{invalid, Result, Tensor, TensorError, LOG_EPS};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed-row sparse matrix used for resampling as a linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from per-row `(column, value)` lists.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for &(c, v) in row {
                if c >= cols {
                    return Err(invalid("sparse", format!("column {c} out of {cols}")));
                }
                col_idx.push(c);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            vals,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &g) in y.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                out[c] += v * g;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op is indexed.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    /// `b[i / inner]`: b matches a leading prefix of a, trailing dims are 1.
    Trailing { inner: usize },
    /// `b[i % d]`: b matches a trailing suffix of a.
    Row { d: usize },
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Trailing { inner } => i / inner,
            Bcast::Row { d } => i % d,
        }
    }

    fn detect(a: &[usize], b: &[usize]) -> Option<Self> {
        let n: usize = a.iter().product();
        if a == b {
            return Some(Bcast::Same);
        }
        let bn: usize = b.iter().product();
        if bn == 1 {
            return Some(Bcast::Trailing { inner: n.max(1) });
        }
        if a.len() == b.len() {
            let k = b.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
            if a[..k] == b[..k] {
                return Some(Bcast::Trailing { inner: n / bn });
            }
            return None;
        }
        if b.len() < a.len() && a[a.len() - b.len()..] == *b {
            return Some(Bcast::Row { d: bn });
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Exp,
    Log,
    Relu,
    Gelu,
    Softplus,
    Sqrt,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    AddScalar(Var),
    MulScalar(Var, f64),
    Unary(UnaryKind, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    SumLast(Var),
    MaxAll(Var, usize),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    AvgPool(Var),
    Upsample(Var),
    Rotary {
        x: Var,
        positions: Vec<usize>,
        base: f64,
    },
    Sparse(Var, Arc<SparseMatrix>),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape recording a differentiable computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        if cfg!(debug_assertions)
            && !value.is_finite()
            && parents.iter().all(|p| self.nodes[p.0].value.is_finite())
        {
            panic!("non-finite output from {op:?} on finite inputs");
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast = Bcast::detect(ta.shape(), tb.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "binary",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            }
        })?;
        let bd = tb.data();
        if kind == BinaryKind::Div && bd.iter().any(|&v| v == 0.0) {
            return Err(TensorError::Domain { op: "div" });
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[bcast.index(i)];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Binary { kind, a, b, bcast }, &[a, b]))
    }

    /// Elementwise sum. `b` may equal `a`'s shape, be a scalar, match a
    /// leading prefix with trailing 1-dims, or match a trailing suffix.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise quotient; any zero in the divisor is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect())
            .expect("same shape");
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        self.push(value, Op::MulScalar(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let t = self.value(x);
        if kind == UnaryKind::Sqrt && t.data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain { op: "sqrt" });
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => |v| v.max(LOG_EPS).ln(),
            UnaryKind::Relu => |v| v.max(0.0),
            UnaryKind::Gelu => kernels::gelu,
            UnaryKind::Softplus => kernels::softplus,
            UnaryKind::Sqrt => f64::sqrt,
        };
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.push(value, Op::Unary(kind, x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x).expect("total")
    }

    /// Natural log with inputs floored at [`LOG_EPS`].
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x).expect("total")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x).expect("total")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x).expect("total")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x).expect("total")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    /// (M, K) x (K, N) or batched (B, M, K) x (B, K, N).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = kernels::permute(self.value(x), axes)?;
        Ok(self.push(value, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Swaps the last two dims.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(invalid("transpose", "needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of rank {}", first.len())));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sums the last dim, keeping it as size 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| invalid("sum_last", "rank 0"))?;
        if d == 0 {
            return Err(invalid("sum_last", "empty last dim"));
        }
        let out: Vec<f64> = t.data().chunks(d).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = 1;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SumLast(x), &[x]))
    }

    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1) as f64;
        let s = self.sum_last(x)?;
        Ok(self.mul_scalar(s, 1.0 / d))
    }

    /// Maximum over all elements; the gradient flows to the first argmax.
    pub fn max_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (idx, m) = t
            .data()
            .iter()
            .copied()
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, best)) if best >= v => acc,
                _ => Some((i, v)),
            })
            .ok_or_else(|| invalid("max_all", "empty tensor"))?;
        Ok(self.push(Tensor::scalar(m), Op::MaxAll(x, idx), &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = kernels::softmax_last(self.value(x))?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Last-dim normalisation to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (value, inv_std) = kernels::layer_norm_last(self.value(x), eps)?;
        Ok(self.push(value, Op::LayerNorm(x, inv_std), &[x]))
    }

    /// Layer norm followed by a learnable per-feature scale and shift.
    pub fn layer_norm_affine(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.layer_norm(x, eps)?;
        let s = self.mul(n, gamma)?;
        self.add(s, beta)
    }

    /// `x W + b` for x of shape (N, in), W (in, out), b (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), pad)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, &parents))
    }

    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let value = kernels::avg_pool2d(self.value(x))?;
        Ok(self.push(value, Op::AvgPool(x), &[x]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let value = kernels::upsample_nearest2x(self.value(x))?;
        Ok(self.push(value, Op::Upsample(x), &[x]))
    }

    /// Rotary position embedding; `positions` index the second-to-last dim.
    pub fn rotary(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let value = kernels::rotary(self.value(x), positions, base, 1.0)?;
        let op = Op::Rotary {
            x,
            positions: positions.to_vec(),
            base,
        };
        Ok(self.push(value, op, &[x]))
    }

    /// Applies a fixed linear map to the flattened input.
    pub fn sparse_map(
        &mut self,
        x: Var,
        map: Arc<SparseMatrix>,
        out_shape: &[usize],
    ) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != map.cols() || out_shape.iter().product::<usize>() != map.rows() {
            return Err(invalid(
                "sparse_map",
                format!(
                    "map {}x{} vs input {:?} -> {out_shape:?}",
                    map.rows(),
                    map.cols(),
                    t.shape()
                ),
            ));
        }
        let value = Tensor::new(out_shape.to_vec(), map.apply(t.data()))?;
        Ok(self.push(value, Op::Sparse(x, map), &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(shape, vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (parent, pg) in self.node_backward(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Binary { kind, a, b, bcast } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for (k, &gk) in gd.iter().enumerate() {
                    let j = bcast.index(k);
                    match kind {
                        BinaryKind::Add => {
                            ga[k] = gk;
                            gb[j] += gk;
                        }
                        BinaryKind::Sub => {
                            ga[k] = gk;
                            gb[j] -= gk;
                        }
                        BinaryKind::Mul => {
                            ga[k] = gk * bd[j];
                            gb[j] += gk * ad[k];
                        }
                        BinaryKind::Div => {
                            ga[k] = gk / bd[j];
                            gb[j] -= gk * ad[k] / (bd[j] * bd[j]);
                        }
                    }
                }
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::MulScalar(x, c) => vec![(*x, like(*x, gd.iter().map(|v| v * c).collect()))],
            Op::Unary(kind, x) => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                let out = gd
                    .iter()
                    .zip(xd)
                    .zip(yd)
                    .map(|((&g, &x), &y)| match kind {
                        UnaryKind::Exp => g * y,
                        UnaryKind::Log => {
                            if x > LOG_EPS {
                                g / x
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Relu => {
                            if x > 0.0 {
                                g
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Gelu => g * kernels::gelu_grad(x),
                        UnaryKind::Softplus => g * kernels::sigmoid(x),
                        UnaryKind::Sqrt => {
                            if y > 0.0 {
                                0.5 * g / y
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect();
                vec![(*x, like(*x, out))]
            }
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (batch, m, k, n) = kernels::matmul_dims(ta, tb).expect("checked");
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                kernels::matmul_into(gd, tb.data(), &mut ga, batch, m, n, k, false, true);
                kernels::matmul_into(ta.data(), gd, &mut gb, batch, k, m, n, true, false);
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Permute(x, axes) => {
                let back = kernels::permute(g, &kernels::inverse_axes(axes)).expect("valid");
                vec![(*x, back)]
            }
            Op::Reshape(x) => vec![(*x, like(*x, gd.to_vec()))],
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f64>> = xs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).numel()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, v) in parts.iter_mut().zip(xs) {
                        let chunk = self.value(*v).shape()[*axis] * inner;
                        p.extend_from_slice(&gd[off..off + chunk]);
                        off += chunk;
                    }
                }
                xs.iter()
                    .zip(parts)
                    .map(|(v, p)| (*v, like(*v, p)))
                    .collect()
            }
            Op::Slice { x, axis, start } => {
                let ishape = self.value(*x).shape();
                let len = node.value.shape()[*axis];
                let outer: usize = ishape[..*axis].iter().product();
                let inner: usize = ishape[axis + 1..].iter().product();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * ishape[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                vec![(*x, like(*x, gx))]
            }
            Op::Sum(x) => vec![(*x, like(*x, vec![gd[0]; self.value(*x).numel()]))],
            Op::SumLast(x) => {
                let t = self.value(*x);
                let d = *t.shape().last().expect("rank");
                vec![(*x, like(*x, (0..t.numel()).map(|k| gd[k / d]).collect()))]
            }
            Op::MaxAll(x, idx) => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                gx[*idx] = gd[0];
                vec![(*x, like(*x, gx))]
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("rank");
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in gd.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        out[k] = yr[k] * (gr[k] - dot);
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            Op::LayerNorm(x, inv_std) => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("rank");
                let mut gx = vec![0.0; y.len()];
                for (r, ((gr, yr), out)) in
                    gd.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for k in 0..d {
                        out[k] = inv_std[r] * (gr[k] - mg - yr[k] * mgy);
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            Op::Conv2d { x, w, b, pad } => {
                let (gx, gw, gb) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), *pad, g);
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, like(*b, gb.into_data())));
                }
                out
            }
            Op::AvgPool(x) => {
                vec![(*x, kernels::avg_pool2d_backward(g, self.value(*x).shape()))]
            }
            Op::Upsample(x) => vec![(
                *x,
                kernels::upsample_nearest2x_backward(g, self.value(*x).shape()),
            )],
            Op::Rotary { x, positions, base } => {
                vec![(*x, kernels::rotary(g, positions, *base, -1.0).expect("valid"))]
            }
            Op::Sparse(x, map) => vec![(*x, like(*x, map.apply_transpose(gd)))],
        }
    }
}
