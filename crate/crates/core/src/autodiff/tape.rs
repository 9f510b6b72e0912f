use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation with a hand-written backward pass, recorded via [`Tape::custom`].
///
/// `backward` receives the input values, the forward output and the upstream
/// gradient, and returns one gradient per input (`None` for inputs that do
/// not receive one).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Relu,
    Log,
    Sqrt,
    Exp,
}

/// Reduction / normalization axis for rank-2 tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Down the rows: one result per column.
    Rows,
    /// Across the columns: one result per row.
    Cols,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, x: Var },
    Affine { x: Var, mul: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: Axis },
    LayerNorm { x: Var, eps: f64 },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: Axis },
    Extremum { x: Var, index: usize },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MinMaxNorm { x: Var, extremes: Option<(usize, usize)> },
    Cosine { a: Var, b: Var },
    NormalizeRows(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
                BinaryKind::Min => "min",
                BinaryKind::Max => "max",
            },
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Relu => "relu",
                UnaryKind::Log => "log",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::Exp => "exp",
            },
            Op::Affine { .. } => "affine",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Extremum { .. } => "extremum",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::MinMaxNorm { .. } => "minmax_normalize",
            Op::Cosine { .. } => "cosine",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// index is a topological order and backward is a single reverse sweep.
///
/// Every forward op checks its output for NaN/Inf and fails with
/// [`Error::NonFinite`] instead of recording it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_dims(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::dim(op, format!("cannot broadcast {a:?} with {b:?}"))),
    }
}

#[inline]
fn bidx(shape: (usize, usize), i: usize, j: usize) -> usize {
    let r = if shape.0 == 1 { 0 } else { i };
    let c = if shape.1 == 1 { 0 } else { j };
    r * shape.1 + c
}

/// Sums a broadcast gradient back down to `target` shape.
fn unbroadcast(grad: Vec<f64>, full: (usize, usize), target: (usize, usize)) -> Tensor {
    if full == target {
        return Tensor::from_parts(target.0, target.1, grad);
    }
    let mut out = vec![0.0; target.0 * target.1];
    for i in 0..full.0 {
        for j in 0..full.1 {
            out[bidx(target, i, j)] += grad[i * full.1 + j];
        }
    }
    Tensor::from_parts(target.0, target.1, out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// First index of the maximum (`max = true`) or minimum.
fn arg_extremum(values: &[f64], max: bool) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        let better = if max { v > values[best] } else { v < values[best] };
        if better {
            best = i;
        }
    }
    best
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value as a new constant: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    /// `op(a) · op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (shape2(av), shape2(bv));
        let (m, k) = if ta { (sa.1, sa.0) } else { sa };
        let (kb, n) = if tb { (sb.1, sb.0) } else { sb };
        if k != kb {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions {m}x{k} · {kb}x{n} disagree"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(av.data(), sa, ta, bv.data(), sb, tb, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(m, n, out), Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (shape2(av), shape2(bv));
        let (r, c) = broadcast_dims("elementwise", sa, sb)?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = av.data()[bidx(sa, i, j)];
                let y = bv.data()[bidx(sb, i, j)];
                out.push(match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => {
                        if y == 0.0 {
                            return Err(Error::Domain {
                                op: "div",
                                detail: "division by zero".into(),
                            });
                        }
                        x / y
                    }
                    BinaryKind::Min => x.min(y),
                    BinaryKind::Max => x.max(y),
                });
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(r, c, out), Op::Binary { kind, a, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Elementwise minimum; on ties the gradient goes to `b`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Min, a, b)
    }

    /// Elementwise maximum; on ties the gradient goes to `b`, so a hinge
    /// written `maximum(x, zero)` has zero slope at the kink.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = match kind {
            UnaryKind::Sigmoid => xv.map(sigmoid),
            UnaryKind::Relu => xv.map(|v| v.max(0.0)),
            UnaryKind::Exp => xv.map(f64::exp),
            UnaryKind::Log => {
                if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                xv.map(f64::ln)
            }
            UnaryKind::Sqrt => {
                if let Some(bad) = xv.data().iter().find(|&&v| v < 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("negative input {bad}"),
                    });
                }
                xv.map(f64::sqrt)
            }
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    /// `x * mul + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * mul + add);
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine { x, mul }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// Gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = shape2(xv);
        if r == 0 || c == 0 {
            return Err(Error::dim("softmax", "empty axis"));
        }
        let value = match axis {
            Axis::Cols => softmax_rows(xv.data(), r, c),
            Axis::Rows => {
                let t = xv.transpose();
                Tensor::from_parts(c, r, softmax_rows(t.data(), c, r)).transpose().into_data()
            }
        };
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(r, c, value), Op::Softmax { x, axis }, rg)
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = shape2(xv);
        if c == 0 {
            return Err(Error::dim("layer_norm", "zero-width rows"));
        }
        let mut out = Vec::with_capacity(r * c);
        for row in xv.data().chunks(c) {
            let (mean, inv) = row_stats(row, eps);
            out.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(r, c, out), Op::LayerNorm { x, eps }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let m = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum_axis(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = shape2(xv);
        let value = match axis {
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for row in xv.data().chunks(c.max(1)) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::from_parts(1, c, out)
            }
            Axis::Cols => Tensor::from_parts(
                r,
                1,
                xv.data().chunks(c.max(1)).map(|row| row.iter().sum()).collect(),
            ),
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAxis { x, axis }, rg)
    }

    /// Maximum over all entries; the gradient flows to the first maximizer.
    pub fn max_all(&mut self, x: Var) -> Result<Var> {
        self.extremum(x, true)
    }

    /// Minimum over all entries; the gradient flows to the first minimizer.
    pub fn min_all(&mut self, x: Var) -> Result<Var> {
        self.extremum(x, false)
    }

    fn extremum(&mut self, x: Var, max: bool) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::dim("extremum", "empty tensor"));
        }
        let index = arg_extremum(xv.data(), max);
        let value = Tensor::scalar(xv.data()[index]);
        let rg = self.rg(&[x]);
        self.push(value, Op::Extremum { x, index }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = shape2(xv);
        if start >= end || end > r {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let value = Tensor::from_parts(end - start, c, xv.data()[start * c..end * c].to_vec());
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = shape2(xv);
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {c} cols")));
        }
        let out = xv
            .data()
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let value = Tensor::from_parts(r, end - start, out);
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::dim("concat_rows", "column counts differ"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_parts(rows, c, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_parts(r, total, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// `(x - min) / (max - min)` over all entries; a constant input maps to zeros.
    pub fn minmax_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::dim("minmax_normalize", "empty tensor"));
        }
        let (r, c) = shape2(xv);
        let lo = arg_extremum(xv.data(), false);
        let hi = arg_extremum(xv.data(), true);
        let (mn, mx) = (xv.data()[lo], xv.data()[hi]);
        let (value, extremes) = if mx > mn {
            let range = mx - mn;
            (xv.map(|v| (v - mn) / range), Some((lo, hi)))
        } else {
            (Tensor::zeros(r, c), None)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::MinMaxNorm { x, extremes }, rg)
    }

    /// Cosine similarity of two equally sized tensors viewed as flat vectors;
    /// zero when either has zero norm.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != bv.numel() {
            return Err(Error::dim("cosine", "length mismatch"));
        }
        let value = Tensor::scalar(cosine(av.data(), bv.data()));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Cosine { a, b }, rg)
    }

    /// Each row scaled to unit L2 norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = shape2(xv);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = xv.row(i);
            let n = norm(row);
            data.extend(row.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }));
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(r, c, data), Op::NormalizeRows(x), rg)
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("backward: unknown variable"))?;
        if !root.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        // Keep the gradient in the same shape as the value it belongs to.
        let g = if g.shape() == node.value.shape() {
            g
        } else {
            let data = g.into_data();
            Tensor::new(node.value.shape().to_vec(), data).expect("gradient size matches value")
        };
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (sa, sb) = (shape2(av), shape2(bv));
                let sg = shape2(out);
                if self.requires_grad(a) {
                    let mut da = vec![0.0; av.numel()];
                    if ta {
                        gemm(bv.data(), sb, tb, g.data(), sg, true, &mut da, false);
                    } else {
                        gemm(g.data(), sg, false, bv.data(), sb, !tb, &mut da, false);
                    }
                    self.accumulate(grads, a, Tensor::from_parts(sa.0, sa.1, da));
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; bv.numel()];
                    if tb {
                        gemm(g.data(), sg, true, av.data(), sa, ta, &mut db, false);
                    } else {
                        gemm(av.data(), sa, !ta, g.data(), sg, false, &mut db, false);
                    }
                    self.accumulate(grads, b, Tensor::from_parts(sb.0, sb.1, db));
                }
            }
            &Op::Transpose(x) => self.accumulate(grads, x, g.transpose()),
            &Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (sa, sb) = (shape2(av), shape2(bv));
                let full = shape2(out);
                let mut ga = vec![0.0; full.0 * full.1];
                let mut gb = vec![0.0; full.0 * full.1];
                for r in 0..full.0 {
                    for c in 0..full.1 {
                        let k = r * full.1 + c;
                        let x = av.data()[bidx(sa, r, c)];
                        let y = bv.data()[bidx(sb, r, c)];
                        let gk = g.data()[k];
                        let (dx, dy) = match kind {
                            BinaryKind::Add => (gk, gk),
                            BinaryKind::Sub => (gk, -gk),
                            BinaryKind::Mul => (gk * y, gk * x),
                            BinaryKind::Div => (gk / y, -gk * x / (y * y)),
                            BinaryKind::Max => {
                                if x > y {
                                    (gk, 0.0)
                                } else {
                                    (0.0, gk)
                                }
                            }
                            BinaryKind::Min => {
                                if x < y {
                                    (gk, 0.0)
                                } else {
                                    (0.0, gk)
                                }
                            }
                        };
                        ga[k] = dx;
                        gb[k] = dy;
                    }
                }
                if self.requires_grad(a) {
                    self.accumulate(grads, a, unbroadcast(ga, full, sa));
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, unbroadcast(gb, full, sb));
                }
            }
            &Op::Unary { kind, x } => {
                let xv = self.value(x);
                let d: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| match kind {
                        UnaryKind::Sigmoid => gi * yi * (1.0 - yi),
                        UnaryKind::Relu => {
                            if xi > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Log => gi / xi,
                        UnaryKind::Sqrt => gi * 0.5 / yi,
                        UnaryKind::Exp => gi * yi,
                    })
                    .collect();
                if d.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: node.op.name() });
                }
                self.accumulate(grads, x, Tensor::from_parts(xv.rows(), xv.cols(), d));
            }
            &Op::Affine { x, mul } => self.accumulate(grads, x, g.map(|v| v * mul)),
            &Op::Clamp { x, lo, hi } => {
                let xv = self.value(x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| if xi > lo && xi < hi { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, Tensor::from_parts(xv.rows(), xv.cols(), d));
            }
            &Op::Softmax { x, axis } => {
                let (r, c) = shape2(out);
                let d = match axis {
                    Axis::Cols => softmax_rows_backward(out.data(), g.data(), r, c),
                    Axis::Rows => {
                        let (yt, gt) = (out.transpose(), g.transpose());
                        let dt = softmax_rows_backward(yt.data(), gt.data(), c, r);
                        Tensor::from_parts(c, r, dt).transpose().into_data()
                    }
                };
                self.accumulate(grads, x, Tensor::from_parts(r, c, d));
            }
            &Op::LayerNorm { x, eps } => {
                let xv = self.value(x);
                let (r, c) = shape2(xv);
                let mut d = Vec::with_capacity(r * c);
                for ((row, yrow), grow) in xv.data().chunks(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                    let (_, inv) = row_stats(row, eps);
                    let gmean = grow.iter().sum::<f64>() / c as f64;
                    let gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    d.extend(grow.iter().zip(yrow).map(|(gi, yi)| inv * (gi - gmean - yi * gy)));
                }
                self.accumulate(grads, x, Tensor::from_parts(r, c, d));
            }
            &Op::Sum(x) => {
                let xv = self.value(x);
                self.accumulate(grads, x, Tensor::filled(xv.rows(), xv.cols(), g.item()));
            }
            &Op::Mean(x) => {
                let xv = self.value(x);
                let v = g.item() / xv.numel() as f64;
                self.accumulate(grads, x, Tensor::filled(xv.rows(), xv.cols(), v));
            }
            &Op::SumAxis { x, axis } => {
                let xv = self.value(x);
                let (r, c) = shape2(xv);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = match axis {
                            Axis::Rows => g.data()[j],
                            Axis::Cols => g.data()[i],
                        };
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(r, c, d));
            }
            &Op::Extremum { x, index } => {
                let xv = self.value(x);
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                d.data_mut()[index] = g.item();
                self.accumulate(grads, x, d);
            }
            &Op::SliceRows { x, start } => {
                let xv = self.value(x);
                let c = xv.cols();
                let mut d = Tensor::zeros(xv.rows(), c);
                d.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, x, d);
            }
            &Op::SliceCols { x, start } => {
                let xv = self.value(x);
                let (r, c) = shape2(xv);
                let w = out.cols();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let pv = self.value(p);
                    let piece = Tensor::from_parts(pv.rows(), pv.cols(), g.data()[offset..offset + n].to_vec());
                    offset += n;
                    self.accumulate(grads, p, piece);
                }
            }
            Op::ConcatCols(parts) => {
                let r = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut piece = Vec::with_capacity(r * w);
                    for i in 0..r {
                        piece.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    offset += w;
                    self.accumulate(grads, p, Tensor::from_parts(r, w, piece));
                }
            }
            &Op::MinMaxNorm { x, extremes } => {
                let xv = self.value(x);
                let (r, c) = shape2(xv);
                let mut d = vec![0.0; r * c];
                if let Some((lo, hi)) = extremes {
                    let range = xv.data()[hi] - xv.data()[lo];
                    let mut dmin = 0.0;
                    let mut dmax = 0.0;
                    for (k, (&yk, &gk)) in out.data().iter().zip(g.data()).enumerate() {
                        d[k] += gk / range;
                        // y = (x - mn)/(mx - mn): dy/dmn = (y - 1)/range, dy/dmx = -y/range
                        dmin += gk * (yk - 1.0) / range;
                        dmax -= gk * yk / range;
                    }
                    d[lo] += dmin;
                    d[hi] += dmax;
                }
                self.accumulate(grads, x, Tensor::from_parts(r, c, d));
            }
            &Op::Cosine { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (na, nb) = (norm(av.data()), norm(bv.data()));
                if na > 0.0 && nb > 0.0 {
                    let cval = out.item();
                    let gi = g.item();
                    let da = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| gi * (y / (na * nb) - cval * x / (na * na)))
                        .collect();
                    let db = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| gi * (x / (na * nb) - cval * y / (nb * nb)))
                        .collect();
                    self.accumulate(grads, a, Tensor::from_parts(av.rows(), av.cols(), da));
                    self.accumulate(grads, b, Tensor::from_parts(bv.rows(), bv.cols(), db));
                }
            }
            &Op::NormalizeRows(x) => {
                let xv = self.value(x);
                let (r, c) = shape2(xv);
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let n = norm(xv.row(i));
                    let (y, gi) = (out.row(i), g.row(i));
                    if n > 0.0 {
                        let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                        d.extend(y.iter().zip(gi).map(|(yj, gj)| (gj - dot * yj) / n));
                    } else {
                        d.extend(std::iter::repeat_n(0.0, c));
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(r, c, d));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let result = op.backward(&values, out, g);
                for (&v, d) in inputs.iter().zip(result) {
                    if let Some(d) = d {
                        if !d.is_finite() {
                            return Err(Error::NonFinite { op: op.name() });
                        }
                        self.accumulate(grads, v, d);
                    }
                }
            }
        }
        Ok(())
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn softmax_rows(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(r * c);
    for row in x.chunks(c).take(r) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for v in row {
            let e = (v - m).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    out
}

fn softmax_rows_backward(y: &[f64], g: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(r * c);
    for (yrow, grow) in y.chunks(c).zip(g.chunks(c)).take(r) {
        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
        out.extend(yrow.iter().zip(grow).map(|(yi, gi)| yi * (gi - dot)));
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}
