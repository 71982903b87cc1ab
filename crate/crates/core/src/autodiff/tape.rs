//! Define-by-run reverse-mode tape.
//!
//! Every operation evaluates eagerly, appends a node holding its value, and
//! remembers its inputs. [`Tape::backward`] walks the nodes in exact reverse
//! recording order, accumulating (`+=`) gradients into every node that
//! requires them. A tape can be differentiated once.

use crate::tensor::{gemm, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activations with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    /// `1 - x`
    OneMinus,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::OneMinus => 1.0 - x,
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::OneMinus => -1.0,
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Zero padding mode of [`Tape::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero-pad so the output keeps the input length.
    SameZero,
    /// No padding; output length is `L - kernel + 1`.
    Valid,
}

/// Backward rule of a [`Tape::custom`] node: receives the upstream gradient,
/// the input values and the output value, and returns one gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    len: usize,
    channels: usize,
    kernel: usize,
    filters: usize,
    out_len: usize,
    left: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add { a: Var, b: Var, bias: bool },
    Sub(Var, Var),
    Mul { a: Var, b: Var, bias: bool },
    Scale(Var, f64),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    /// `argmax[j]` is the flat input index that produced output element `j`.
    Max { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Select { x: Var, axis: usize, index: usize },
    Stack { inputs: Vec<Var>, axis: usize },
    Gather { table: Var, ids: Vec<usize> },
    RowSelect { take_new: Vec<bool>, new: Var, old: Var },
    MaskFill { x: Var, mask: Vec<bool> },
    MaskedMean { x: Var, mask: Vec<bool>, counts: Vec<usize> },
    WeightedSum { weights: Var, values: Var },
    Conv1d { x: Var, w: Var, cols: Vec<f64>, geom: ConvGeom },
    Nll { probs: Var, labels: Vec<usize> },
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

/// Splits `shape` around `axis` into `(outer, extent, inner)` products.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rank3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, l, c] => Ok((b, l, c)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
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

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. `v`; zeros when `v` was
    /// unreachable or no backward has run yet.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(self.value(v).shape().to_vec()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_with(value, Op::Leaf, requires_grad)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Whether `b` may be broadcast over `a` as a bias along the last axis.
    fn bias_compatible(a: &Tensor, b: &Tensor) -> bool {
        b.rank() == 1 && a.rank() >= 1 && a.shape()[a.rank() - 1] == b.len()
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok((ta.zip_map(tb, f)?, false));
        }
        if !Self::bias_compatible(ta, tb) {
            return Err(mismatch(op, ta, tb));
        }
        let n = tb.len();
        let bias = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bias[i % n]))
            .collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, true))
    }

    /// `a + b`; `b` may also be a bias vector over the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bias) = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b, bias }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .map_err(|_| mismatch("sub", self.value(a), self.value(b)))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise `a * b`; `b` may also be a vector over the last axis of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bias) = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b, bias }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        Ok(self.push(value, Op::Scale(a, factor), &[a]))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let value = self.value(a).map(|x| f.apply(x));
        Ok(self.push(value, Op::Unary(a, f), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::OneMinus)
    }

    /// Softmax along the last axis with max subtraction. `-inf` entries are
    /// masks and come out as exactly zero; a row of only `-inf` or any NaN
    /// is a numeric error.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = softmax_last_axis(self.value(x))?;
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        Ok(self.push(value, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push(value, Op::Mean(x), &[x]))
    }

    fn reduce_axis_value(&self, x: Var, axis: usize, scale_by_extent: bool) -> Result<Tensor> {
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let data = t.data();
        for o in 0..outer {
            for i in 0..n {
                let src = &data[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        if scale_by_extent {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_axis_value(x, axis, false)?;
        Ok(self.push(value, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_axis_value(x, axis, true)?;
        Ok(self.push(value, Op::MeanAxis(x, axis), &[x]))
    }

    /// Maximum along `axis`. Ties go to the first occurrence, which is also
    /// the only position that receives gradient.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis)?;
        let data = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut best = o * n * inner + j;
                for i in 1..n {
                    let idx = (o * n + i) * inner + j;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Max { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*inputs.first().ok_or_else(|| {
            TensorError::Contract("concat of zero tensors".into())
        })?);
        let (outer, _, inner) = axis_split(first.shape(), axis)?;
        let mut total = 0;
        for &v in inputs {
            let t = self.value(v);
            let same_rest = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same_rest {
                return Err(mismatch("concat", first, t));
            }
            total += t.shape()[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `x[.., index, ..]` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis)?;
        if index >= n {
            return Err(TensorError::IndexOutOfRange { index, extent: n });
        }
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * n + index) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = if shape.is_empty() {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, Op::Select { x, axis, index }, &[x]))
    }

    /// Stacks equal-shaped tensors along a new `axis`.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*inputs.first().ok_or_else(|| {
            TensorError::Contract("stack of zero tensors".into())
        })?);
        if axis > first.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: first.rank() + 1,
            });
        }
        for &v in inputs {
            if self.value(v).shape() != first.shape() {
                return Err(mismatch("stack", first, self.value(v)));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * inputs.len() * inner);
        for o in 0..outer {
            for &v in inputs {
                data.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape.insert(axis, inputs.len());
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Stack {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Row lookup into a `[rows × dim]` table; output is `[ids.len() × dim]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, dim) = crate::tensor::as_matrix(t, "gather")?;
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    index: id,
                    extent: rows,
                });
            }
            data.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise choice between two `[batch × ..]` tensors: row `r` comes from
    /// `new` when `take_new[r]`, otherwise from `old`. Values are copied, not
    /// blended, so rejected rows are bit-identical to `old`.
    pub fn row_select(&mut self, take_new: &[bool], new: Var, old: Var) -> Result<Var> {
        let (tn, to) = (self.value(new), self.value(old));
        if tn.shape() != to.shape() {
            return Err(mismatch("row_select", tn, to));
        }
        if tn.rank() == 0 || tn.shape()[0] != take_new.len() {
            return Err(TensorError::ShapeMismatch {
                op: "row_select",
                lhs: tn.shape().to_vec(),
                rhs: vec![take_new.len()],
            });
        }
        let width = tn.len() / take_new.len();
        let mut data = Vec::with_capacity(tn.len());
        for (r, &keep) in take_new.iter().enumerate() {
            let src = if keep { tn } else { to };
            data.extend_from_slice(&src.data()[r * width..(r + 1) * width]);
        }
        let value = Tensor::new(tn.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::RowSelect {
                take_new: take_new.to_vec(),
                new,
                old,
            },
            &[new, old],
        ))
    }

    /// Replaces every element whose mask entry is `false` by `-inf`.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != mask.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mask_fill",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { f64::NEG_INFINITY })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::MaskFill {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean over the time axis of `[batch × len × channels]`, counting only
    /// positions where `mask` (`[batch × len]`) is set.
    pub fn masked_mean_time(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (b, l, c) = rank3(t, "masked_mean_time")?;
        if mask.len() != b * l {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mean_time",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut out = vec![0.0; b * c];
        let mut counts = vec![0; b];
        for bi in 0..b {
            for ti in 0..l {
                if !mask[bi * l + ti] {
                    continue;
                }
                counts[bi] += 1;
                let src = &t.data()[(bi * l + ti) * c..(bi * l + ti + 1) * c];
                for (o, &s) in out[bi * c..(bi + 1) * c].iter_mut().zip(src) {
                    *o += s;
                }
            }
            if counts[bi] == 0 {
                return Err(TensorError::Contract(format!(
                    "sequence {bi} has no unmasked positions"
                )));
            }
            let n = counts[bi] as f64;
            out[bi * c..(bi + 1) * c].iter_mut().for_each(|v| *v /= n);
        }
        let value = Tensor::new(vec![b, c], out)?;
        Ok(self.push(
            value,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                counts,
            },
            &[x],
        ))
    }

    /// Per-channel max over the time axis of `[batch × len × channels]`,
    /// restricted to positions where `mask` is set. First occurrence wins ties.
    pub fn masked_max_time(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (b, l, c) = rank3(t, "masked_max_time")?;
        if mask.len() != b * l {
            return Err(TensorError::ShapeMismatch {
                op: "masked_max_time",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = t.data();
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::with_capacity(b * c);
        for bi in 0..b {
            let first = (0..l).find(|&ti| mask[bi * l + ti]).ok_or_else(|| {
                TensorError::Contract(format!("sequence {bi} has no unmasked positions"))
            })?;
            for ci in 0..c {
                let mut best = (bi * l + first) * c + ci;
                for ti in first + 1..l {
                    let idx = (bi * l + ti) * c + ci;
                    if mask[bi * l + ti] && data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![b, c], out)?;
        Ok(self.push(value, Op::Max { x, argmax }, &[x]))
    }

    /// `out[b] = Σ_t weights[b, t] · values[b, t, :]`.
    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (w, v) = (self.value(weights), self.value(values));
        let (b, l, e) = rank3(v, "weighted_sum")?;
        if w.shape() != [b, l] {
            return Err(mismatch("weighted_sum", w, v));
        }
        let mut out = vec![0.0; b * e];
        for bi in 0..b {
            for ti in 0..l {
                let a = w.data()[bi * l + ti];
                if a == 0.0 {
                    continue;
                }
                let src = &v.data()[(bi * l + ti) * e..(bi * l + ti + 1) * e];
                for (o, &s) in out[bi * e..(bi + 1) * e].iter_mut().zip(src) {
                    *o += a * s;
                }
            }
        }
        let value = Tensor::new(vec![b, e], out)?;
        Ok(self.push(value, Op::WeightedSum { weights, values }, &[weights, values]))
    }

    /// 1-D cross-correlation of `x: [batch × len × channels]` with
    /// `w: [kernel × channels × filters]` (no kernel flip, no bias).
    pub fn conv1d(&mut self, x: Var, w: Var, padding: Padding) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (batch, len, channels) = rank3(tx, "conv1d")?;
        let (kernel, wc, filters) = rank3(tw, "conv1d")?;
        if wc != channels {
            return Err(mismatch("conv1d", tx, tw));
        }
        let (out_len, left) = match padding {
            Padding::SameZero => (len, (kernel - 1) / 2),
            Padding::Valid => {
                if len < kernel {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv1d(valid): sequence shorter than kernel",
                        lhs: tx.shape().to_vec(),
                        rhs: tw.shape().to_vec(),
                    });
                }
                (len - kernel + 1, 0)
            }
        };
        let geom = ConvGeom {
            batch,
            len,
            channels,
            kernel,
            filters,
            out_len,
            left,
        };
        let row = kernel * channels;
        let mut cols = vec![0.0; batch * out_len * row];
        for b in 0..batch {
            for t in 0..out_len {
                let dst = &mut cols[(b * out_len + t) * row..(b * out_len + t + 1) * row];
                for k in 0..kernel {
                    let pos = (t + k) as isize - left as isize;
                    if pos < 0 || pos as usize >= len {
                        continue;
                    }
                    let src = (b * len + pos as usize) * channels;
                    dst[k * channels..(k + 1) * channels]
                        .copy_from_slice(&tx.data()[src..src + channels]);
                }
            }
        }
        let mut out = vec![0.0; batch * out_len * filters];
        gemm(batch * out_len, row, filters, &cols, false, tw.data(), false, &mut out, false);
        let value = Tensor::new(vec![batch, out_len, filters], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, cols, geom }, &[x, w]))
    }

    /// Mean negative log-likelihood of `labels` under `probs: [batch × classes]`,
    /// with probabilities clamped below at `1e-12`.
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(probs);
        let (b, classes) = crate::tensor::as_matrix(t, "nll")?;
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "nll",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(TensorError::Contract(format!(
                    "label {y} outside 0..{classes}"
                )));
            }
            total -= t.data()[r * classes + y].max(NLL_CLAMP).ln();
        }
        let value = Tensor::scalar(total / b as f64);
        Ok(self.push(
            value,
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        ))
    }

    /// Records an operation whose value is computed by the caller and whose
    /// gradient is given by `backward`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    /// Runs reverse accumulation from the scalar `loss`. Afterwards
    /// [`Tape::grad`] answers for every node; the tape cannot be
    /// differentiated again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add { a, b, bias } => {
                self.accumulate(grads, *a, g.clone());
                let gb = if *bias { column_sums(g, None) } else { g.clone() };
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul { a, b, bias } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if *bias {
                    let n = tb.len();
                    let ga = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * tb.data()[j % n])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                    self.accumulate(grads, *b, column_sums(g, Some(ta)));
                } else {
                    self.accumulate(grads, *a, g.zip_map(tb, |gv, bv| gv * bv)?);
                    self.accumulate(grads, *b, g.zip_map(ta, |gv, av| gv * av)?);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::Unary(a, f) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(&gv, (&xv, &yv))| gv * f.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::SoftmaxRows(a) => {
                let n = *y.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.item() / t.len() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape().to_vec(), v));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let t = self.value(*a);
                let (outer, n, inner) = axis_split(t.shape(), *axis)?;
                let factor = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; t.len()];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        let dst = &mut dx[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s * factor;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(t.shape().to_vec(), dx)?);
            }
            Op::Max { x, argmax } => {
                let t = self.value(*x);
                let mut dx = vec![0.0; t.len()];
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    dx[idx] += gv;
                }
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), dx)?);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshape(shape)?);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis)?;
                let mut offset = 0;
                for &v in inputs {
                    let t = self.value(v);
                    let n = t.shape()[*axis];
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + n * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(t.shape().to_vec(), d)?);
                    }
                    offset += n;
                }
            }
            Op::Select { x, axis, index } => {
                let t = self.value(*x);
                let (outer, n, inner) = axis_split(t.shape(), *axis)?;
                let mut dx = vec![0.0; t.len()];
                for o in 0..outer {
                    let start = (o * n + index) * inner;
                    dx[start..start + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), dx)?);
            }
            Op::Stack { inputs, axis } => {
                let (outer, n, inner) = axis_split(y.shape(), *axis)?;
                for (k, &v) in inputs.iter().enumerate() {
                    if !self.requires_grad(v) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        let start = (o * n + k) * inner;
                        d.extend_from_slice(&g.data()[start..start + inner]);
                    }
                    let shape = self.value(v).shape().to_vec();
                    self.accumulate(grads, v, Tensor::new(shape, d)?);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let dim = t.shape()[1];
                let mut dt = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * dim..(id + 1) * dim];
                    for (d, &s) in dst.iter_mut().zip(&g.data()[r * dim..(r + 1) * dim]) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(t.shape().to_vec(), dt)?);
            }
            Op::RowSelect { take_new, new, old } => {
                let width = y.len() / take_new.len();
                let mut dn = vec![0.0; y.len()];
                let mut dold = vec![0.0; y.len()];
                for (r, &keep) in take_new.iter().enumerate() {
                    let dst = if keep { &mut dn } else { &mut dold };
                    dst[r * width..(r + 1) * width]
                        .copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                }
                self.accumulate(grads, *new, Tensor::new(y.shape().to_vec(), dn)?);
                self.accumulate(grads, *old, Tensor::new(y.shape().to_vec(), dold)?);
            }
            Op::MaskFill { x, mask } => {
                let data = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&gv, &m)| if m { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::MaskedMean { x, mask, counts } => {
                let t = self.value(*x);
                let (b, l, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let mut dx = vec![0.0; t.len()];
                for bi in 0..b {
                    let inv = 1.0 / counts[bi] as f64;
                    for ti in 0..l {
                        if !mask[bi * l + ti] {
                            continue;
                        }
                        let dst = &mut dx[(bi * l + ti) * c..(bi * l + ti + 1) * c];
                        for (d, &s) in dst.iter_mut().zip(&g.data()[bi * c..(bi + 1) * c]) {
                            *d = s * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), dx)?);
            }
            Op::WeightedSum { weights, values } => {
                let (w, v) = (self.value(*weights), self.value(*values));
                let (b, l, e) = (v.shape()[0], v.shape()[1], v.shape()[2]);
                if self.requires_grad(*weights) {
                    let mut dw = vec![0.0; b * l];
                    for bi in 0..b {
                        let gr = &g.data()[bi * e..(bi + 1) * e];
                        for ti in 0..l {
                            let vr = &v.data()[(bi * l + ti) * e..(bi * l + ti + 1) * e];
                            dw[bi * l + ti] = gr.iter().zip(vr).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, *weights, Tensor::new(vec![b, l], dw)?);
                }
                if self.requires_grad(*values) {
                    let mut dv = vec![0.0; v.len()];
                    for bi in 0..b {
                        let gr = &g.data()[bi * e..(bi + 1) * e];
                        for ti in 0..l {
                            let a = w.data()[bi * l + ti];
                            let dst = &mut dv[(bi * l + ti) * e..(bi * l + ti + 1) * e];
                            for (d, &gv) in dst.iter_mut().zip(gr) {
                                *d = a * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *values, Tensor::new(v.shape().to_vec(), dv)?);
                }
            }
            Op::Conv1d { x, w, cols, geom } => {
                let ConvGeom {
                    batch,
                    len,
                    channels,
                    kernel,
                    filters,
                    out_len,
                    left,
                } = *geom;
                let rows = batch * out_len;
                let row = kernel * channels;
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; row * filters];
                    gemm(row, rows, filters, cols, true, g.data(), false, &mut dw, false);
                    self.accumulate(grads, *w, Tensor::new(vec![kernel, channels, filters], dw)?);
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![0.0; rows * row];
                    gemm(rows, filters, row, g.data(), false, self.value(*w).data(), true, &mut dcols, false);
                    let mut dx = vec![0.0; batch * len * channels];
                    for b in 0..batch {
                        for t in 0..out_len {
                            let src = &dcols[(b * out_len + t) * row..(b * out_len + t + 1) * row];
                            for k in 0..kernel {
                                let pos = (t + k) as isize - left as isize;
                                if pos < 0 || pos as usize >= len {
                                    continue;
                                }
                                let dst = &mut dx[(b * len + pos as usize) * channels..][..channels];
                                for (d, &s) in dst.iter_mut().zip(&src[k * channels..(k + 1) * channels]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![batch, len, channels], dx)?);
                }
            }
            Op::Nll { probs, labels } => {
                let p = self.value(*probs);
                let classes = p.shape()[1];
                let n = labels.len() as f64;
                let mut dp = vec![0.0; p.len()];
                for (r, &lab) in labels.iter().enumerate() {
                    let pv = p.data()[r * classes + lab];
                    if pv >= NLL_CLAMP {
                        dp[r * classes + lab] = -g.item() / (n * pv);
                    }
                }
                self.accumulate(grads, *probs, Tensor::new(p.shape().to_vec(), dp)?);
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = backward(g, &values, y);
                if input_grads.len() != inputs.len() {
                    return Err(TensorError::Contract(format!(
                        "custom backward returned {} gradients for {} inputs",
                        input_grads.len(),
                        inputs.len()
                    )));
                }
                for (&v, gv) in inputs.iter().zip(input_grads) {
                    if gv.shape() != self.value(v).shape() {
                        return Err(mismatch("custom backward", self.value(v), &gv));
                    }
                    self.accumulate(grads, v, gv);
                }
            }
        }
        Ok(())
    }
}

pub(crate) const NLL_CLAMP: f64 = 1e-12;

/// Sums `g` (optionally weighted by `weights`) over every axis but the last.
fn column_sums(g: &Tensor, weights: Option<&Tensor>) -> Tensor {
    let n = *g.shape().last().expect("bias broadcast needs rank >= 1");
    let mut out = vec![0.0; n];
    for (j, &gv) in g.data().iter().enumerate() {
        let w = weights.map_or(1.0, |t| t.data()[j]);
        out[j % n] += gv * w;
    }
    Tensor::new(vec![n], out).expect("n > 0")
}

/// Row softmax over the last axis with `-inf` as the mask sentinel.
pub fn softmax_last_axis(t: &Tensor) -> Result<Tensor> {
    let n = *t.shape().last().ok_or_else(|| {
        TensorError::Contract("softmax of a rank-0 tensor".into())
    })?;
    let mut out = vec![0.0; t.len()];
    for (dst, row) in out.chunks_mut(n).zip(t.data().chunks(n)) {
        if row.iter().any(|x| x.is_nan()) {
            return Err(TensorError::Numeric { op: "softmax" });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            // all entries masked, or +inf present
            return Err(TensorError::Numeric { op: "softmax" });
        }
        let mut total = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() };
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    Tensor::new(t.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let zero = tape.param(Tensor::scalar(0.0));
        let th = tape.tanh(zero).unwrap();
        let sg = tape.sigmoid(zero).unwrap();
        assert_eq!(tape.value(th).item(), 0.0);
        assert_eq!(tape.value(sg).item(), 0.5);
        tape.backward(th).unwrap();
        assert_eq!(tape.grad(zero).item(), 1.0);

        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let e = tape.exp(x).unwrap();
        let v = tape.value(e).data();
        assert_eq!(v[0], 1.0);
        assert!((v[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn add_rejects_non_bias_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        let c = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(tape.add(a, c).is_err());
        let bias = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.add(a, bias).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 5.0, 5.0, 5.0]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data().to_vec();
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        // hand computed: e^k / (e + e^2 + e^3)
        let expected = [0.0900, 0.2447, 0.6652];
        for (p, e) in v[3..6].iter().zip(expected) {
            assert!((p - e).abs() < 1e-4, "{p} vs {e}");
        }

        let m = tape.constant(t(&[1, 2], &[0.0, f64::NEG_INFINITY]));
        let y = tape.softmax_rows(m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        let nan = tape.constant(t(&[1, 2], &[0.0, f64::NAN]));
        assert_eq!(tape.softmax_rows(nan).unwrap_err(), TensorError::Numeric { op: "softmax" });
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.value(s).item(), 6.0);

        let m = tape.constant(t(&[2, 2], &[1.0, 5.0, 7.0, 2.0]));
        let mx = tape.max_axis(m, 0).unwrap();
        assert_eq!(tape.value(mx).data(), &[7.0, 5.0]);

        let c = tape.constant(Tensor::full(vec![4, 3], 2.5));
        let mean = tape.mean(c).unwrap();
        assert_eq!(tape.value(mean).item(), 2.5);
        let mean0 = tape.mean_axis(c, 1).unwrap();
        assert_eq!(tape.value(mean0).data(), &[2.5; 4]);

        assert_eq!(
            tape.sum_axis(m, 2).unwrap_err(),
            TensorError::AxisOutOfRange { axis: 2, rank: 2 }
        );
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(tape.grad(loss).item(), 1.0);
    }

    #[test]
    fn constant_loss_has_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(3.0));
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).item(), 2.0);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(TensorError::TapeConsumed));
    }

    #[test]
    fn max_tie_routes_to_first() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 2, 1], &[3.0, 3.0]));
        let m = tape.max_axis(x, 1).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 0.0]);
    }

    #[test]
    fn conv_lengths() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 5, 2], 1.0));
        let w = tape.constant(Tensor::full(vec![3, 2, 4], 1.0));
        let valid = tape.conv1d(x, w, Padding::Valid).unwrap();
        assert_eq!(tape.value(valid).shape(), &[1, 3, 4]);
        let same = tape.conv1d(x, w, Padding::SameZero).unwrap();
        assert_eq!(tape.value(same).shape(), &[1, 5, 4]);
        // edges see one zero-padded tap
        assert_eq!(&tape.value(same).data()[..4], &[4.0; 4]);
        assert_eq!(&tape.value(same).data()[4..8], &[6.0; 4]);
        let short = tape.constant(Tensor::zeros(vec![1, 2, 2]));
        assert!(tape.conv1d(short, w, Padding::Valid).is_err());
    }

    #[test]
    fn nll_values() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2, 3], &[0.0, 1.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]));
        let loss = tape.nll(p, &[1, 0]).unwrap();
        assert!((tape.value(loss).item() - 3f64.ln() / 2.0).abs() < 1e-12);
        assert!(matches!(tape.nll(p, &[3, 0]), Err(TensorError::Contract(_))));
    }
}
