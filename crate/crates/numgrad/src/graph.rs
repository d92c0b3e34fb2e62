//! Eager tape: every op is evaluated when it is recorded, and the tape keeps
//! whatever each op needs to run its pullback later.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// `sqrt(2/π)`, the tanh-GELU scale.
const GELU_K: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-GELU approximation.
const GELU_C: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Silu(Var),
    Softplus(Var),
    Ln(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax(Var),
    Transpose(Var),
    BlockTranspose { x: Var, blocks: usize },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    CombineRows { x: Var, terms: Vec<(usize, usize, f64)> },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu(_) => "gelu",
            Op::Silu(_) => "silu",
            Op::Softplus(_) => "softplus",
            Op::Ln(_) => "ln",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Transpose(_) => "transpose",
            Op::BlockTranspose { .. } => "block_transpose",
            Op::Reshape(_) => "reshape",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::CombineRows { .. } => "combine_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Topologically ordered record of ops. Inputs always precede consumers
/// because a node can only reference handles that already exist.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::input`] or [`Graph::param`].
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of the parameter bound under `key`, if it reached the loss.
    pub fn param(&self, key: usize) -> Option<&Tensor> {
        self.params.iter().find(|(k, _)| *k == key).and_then(|(_, v)| self.get(*v))
    }

    /// `(key, gradient)` for every bound parameter that reached the loss,
    /// in binding order.
    pub fn into_param_grads(mut self) -> Vec<(usize, Tensor)> {
        let mut out = Vec::with_capacity(self.params.len());
        for (k, v) in &self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.push((*k, g));
            }
        }
        out
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ar, ac) = dims(a);
    let (br, bc) = dims(b);
    let r = match (ar, br) {
        _ if ar == br => ar,
        (1, _) => br,
        (_, 1) => ar,
        _ => return Err(mismatch(op, a, b)),
    };
    let c = match (ac, bc) {
        _ if ac == bc => ac,
        (1, _) => bc,
        (_, 1) => ac,
        _ => return Err(mismatch(op, a, b)),
    };
    Ok((r, c))
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

/// Applies `f` over the broadcast of `a` and `b` to an `r × c` result.
fn zip_broadcast(a: &Tensor, b: &Tensor, r: usize, c: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (ar, ac) = dims(a);
    let (br, bc) = dims(b);
    let (ad, bd) = (a.data(), b.data());
    if (ar, ac) == (r, c) && (br, bc) == (r, c) {
        return ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
    }
    if (ar, ac) == (r, c) && (br, bc) == (1, c) {
        let mut out = Vec::with_capacity(r * c);
        for row in ad.chunks_exact(c) {
            out.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        return out;
    }
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ai = if ar == 1 { 0 } else { i * ac };
        let bi = if br == 1 { 0 } else { i * bc };
        for j in 0..c {
            let x = ad[ai + if ac == 1 { 0 } else { j }];
            let y = bd[bi + if bc == 1 { 0 } else { j }];
            out.push(f(x, y));
        }
    }
    out
}

/// Sums an `r × c` gradient down to the (possibly broadcast) shape of `target`.
fn reduce_to(grad: &[f64], r: usize, c: usize, target: &Tensor) -> Tensor {
    let (tr, tc) = dims(target);
    if tr == r && tc == c {
        return Tensor::new(target.shape().to_vec(), grad.to_vec()).expect("same element count");
    }
    let mut out = vec![0.0; tr * tc];
    if tr == 1 && tc == c {
        for row in grad.chunks_exact(c) {
            for (o, g) in out.iter_mut().zip(row) {
                *o += g;
            }
        }
        return Tensor::new(target.shape().to_vec(), out).expect("target element count");
    }
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i * tc };
        for j in 0..c {
            out[oi + if tc == 1 { 0 } else { j }] += grad[i * c + j];
        }
    }
    Tensor::new(target.shape().to_vec(), out).expect("target element count")
}

fn block_transpose(data: &[f64], blocks: usize, rows: usize, cols: usize) -> Vec<f64> {
    // Each block is `rows × cols`; the result stacks the `cols × rows` transposes.
    let mut out = vec![0.0; data.len()];
    let stride = rows * cols;
    for b in 0..blocks {
        let src = &data[b * stride..(b + 1) * stride];
        let dst = &mut out[b * stride..(b + 1) * stride];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}

/// `tanh` through one `exp`; the libm routine is several times slower and
/// dominates GELU-heavy graphs.
fn tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_K * (x + GELU_C * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let th = tanh(u);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes.get(v.0).map(|n| &n.value).ok_or(Error::UnknownNode(v.0))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    /// A differentiable leaf that is not a parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, true)
    }

    /// Binds parameter `key`. Repeated binds of the same key return the
    /// first handle so all uses accumulate into one gradient.
    pub fn param(&mut self, key: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(Op::Param, t.clone(), true);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let value = ta.matmul(tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// `x · w + b` with `b` a `1 × n` row, in one node.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.check(x)?, self.check(w)?, self.check(b)?);
        if tx.cols() != tw.rows() {
            return Err(mismatch("affine", tx, tw));
        }
        let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
        if tb.rows() != 1 || tb.cols() != n {
            return Err(mismatch("affine", tw, tb));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm(m, k, n, tx.data(), (k, 1), tw.data(), (n, 1), &mut out, 1.0);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Affine { x, w, b }, Tensor::matrix(m, n, out), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.cols() != tb.cols() {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (1, k), &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulNT(a, b), Tensor::matrix(m, n, out), rg))
    }

    fn binary(&mut self, a: Var, b: Var, kind: fn(Var, Var) -> Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (r, c) = broadcast_dims(name, ta, tb)?;
        let data = zip_broadcast(ta, tb, r, c, f);
        let value = if ta.rows() == r && ta.cols() == c {
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            Tensor::matrix(r, c, data)
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(kind(a, b), value, rg))
    }

    /// Elementwise sum with row/column broadcasting of either operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.check(a)?.map(|x| x * s);
        let rg = self.rg(a);
        Ok(self.push(Op::Scale(a, s), value, rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.check(a)?.map(|x| x + s);
        let rg = self.rg(a);
        Ok(self.push(Op::AddScalar(a), value, rg))
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.check(a)?.map(gelu);
        let rg = self.rg(a);
        Ok(self.push(Op::Gelu(a), value, rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.check(a)?.map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        Ok(self.push(Op::Silu(a), value, rg))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.check(a)?.map(softplus);
        let rg = self.rg(a);
        Ok(self.push(Op::Softplus(a), value, rg))
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        if let Some(x) = t.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::InvalidArgument { op: "ln", msg: format!("non-positive input {x}") });
        }
        let value = t.map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(Op::Ln(a), value, rg))
    }

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let (r, c) = dims(t);
        let mut out = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(s);
            out.extend(row.iter().map(|x| (x - mean) * s));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::LayerNorm { x: a, rstd }, value, rg))
    }

    /// Row-wise softmax with max subtraction. `-inf` entries get weight 0;
    /// a row must contain at least one finite entry.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let (r, _) = dims(t);
        let mut out = Vec::with_capacity(t.len());
        for i in 0..r {
            let row = t.row_slice(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument { op: "softmax", msg: format!("row {i} has no finite entry") });
            }
            let start = out.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - m).exp();
                z += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Softmax(a), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.check(a)?.transpose();
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), value, rg))
    }

    /// Treats `a` as `blocks` stacked `S × H` matrices and transposes each,
    /// giving `blocks` stacked `H × S` matrices.
    pub fn block_transpose(&mut self, a: Var, blocks: usize) -> Result<Var> {
        let t = self.check(a)?;
        let (r, c) = dims(t);
        if blocks == 0 || r % blocks != 0 {
            return Err(Error::InvalidArgument {
                op: "block_transpose",
                msg: format!("{r} rows do not split into {blocks} blocks"),
            });
        }
        let s = r / blocks;
        let data = block_transpose(t.data(), blocks, s, c);
        let value = Tensor::matrix(blocks * c, s, data);
        let rg = self.rg(a);
        Ok(self.push(Op::BlockTranspose { x: a, blocks }, value, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.check(a)?.reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::InvalidArgument { op: "concat_rows", msg: "no inputs".into() })?;
        let c = self.check(*first)?.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.check(p)?;
            if t.cols() != c {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::matrix(rows, c, data), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.check(a)?;
        if len == 0 || start + len > t.rows() {
            return Err(Error::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows [{start}, {}) out of {}", start + len, t.rows()),
            });
        }
        let c = t.cols();
        let value = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(a);
        Ok(self.push(Op::SliceRows { x: a, start }, value, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::InvalidArgument { op: "concat_cols", msg: "no inputs".into() })?;
        let r = self.check(*first)?.rows();
        let mut total = 0;
        for &p in parts {
            let t = self.check(p)?;
            if t.rows() != r {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(r, total, data), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.check(a)?;
        let (r, c) = dims(t);
        if len == 0 || start + len > c {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                msg: format!("cols [{start}, {}) out of {c}", start + len),
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols { x: a, start }, Tensor::matrix(r, len, data), rg))
    }

    /// Sparse row mixing: output row `o` is the sum of `w · a[i]` over every
    /// term `(o, i, w)`. Rows with no terms are zero. Covers gathers,
    /// segment means and overlap averaging without a dense matrix.
    pub fn combine_rows(&mut self, a: Var, rows_out: usize, terms: Vec<(usize, usize, f64)>) -> Result<Var> {
        let t = self.check(a)?;
        let (r, c) = dims(t);
        if rows_out == 0 {
            return Err(Error::InvalidArgument { op: "combine_rows", msg: "no output rows".into() });
        }
        if let Some(&(o, i, _)) = terms.iter().find(|&&(o, i, _)| o >= rows_out || i >= r) {
            return Err(Error::InvalidArgument {
                op: "combine_rows",
                msg: format!("term ({o}, {i}) outside {rows_out} x {r}"),
            });
        }
        let mut data = vec![0.0; rows_out * c];
        let src = t.data();
        for &(o, i, w) in &terms {
            let dst = &mut data[o * c..(o + 1) * c];
            for (d, s) in dst.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *d += w * s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::CombineRows { x: a, terms }, Tensor::matrix(rows_out, c, data), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a), Tensor::scalar(s), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Op::Mean(a), Tensor::scalar(s), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.check(loss)?;
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.pullback(node, &g, &mut grads)?;
            // Intermediate gradients are dropped as soon as they are used.
            if matches!(node.op, Op::Input | Op::Param) {
                grads[i] = Some(g);
            }
        }
        let params = self.params.iter().map(|(&k, &v)| (k, v)).filter(|(_, v)| v.0 <= loss.0);
        let mut params: Vec<_> = params.collect();
        params.sort_by_key(|(_, v)| v.0);
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn pullback(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), tb.data(), (1, n), &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), (1, k), g.data(), (n, 1), &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Affine { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), tw.data(), (1, n), &mut dx, 0.0);
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, tx.data(), (1, k), g.data(), (n, 1), &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::matrix(k, n, dw));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, reduce_to(g.data(), m, n, self.value(*b)));
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.rg(*a) {
                    // dA = G · B
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), tb.data(), (k, 1), &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.rg(*b) {
                    // dB = Gᵀ · A
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), (1, n), ta.data(), (k, 1), &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let (r, c) = dims(out);
                if self.rg(*a) {
                    self.accumulate(grads, *a, reduce_to(g.data(), r, c, self.value(*a)));
                }
                if self.rg(*b) {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let gb: Vec<f64> = g.data().iter().map(|x| sign * x).collect();
                    self.accumulate(grads, *b, reduce_to(&gb, r, c, self.value(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (r, c) = dims(out);
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = zip_broadcast(g, tb, r, c, |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(&ga, r, c, ta));
                }
                if self.rg(*b) {
                    let gb = zip_broadcast(g, ta, r, c, |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(&gb, r, c, tb));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = x.data().iter().zip(g.data()).map(|(&x, &gy)| gy * gelu_grad(x)).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let s = sigmoid(x);
                        gy * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let d = x.data().iter().zip(g.data()).map(|(&x, &gy)| gy * sigmoid(x)).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                let d = x.data().iter().zip(g.data()).map(|(&x, &gy)| gy / x).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::LayerNorm { x, rstd } => {
                let (r, c) = dims(out);
                let mut dx = Vec::with_capacity(out.len());
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gy = g.row_slice(i);
                    let mean_g = gy.iter().sum::<f64>() / c as f64;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    dx.extend(gy.iter().zip(y).map(|(gj, yj)| rstd[i] * (gj - mean_g - yj * mean_gy)));
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Softmax(a) => {
                let (r, _) = dims(out);
                let mut dx = Vec::with_capacity(out.len());
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gy = g.row_slice(i);
                    let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    dx.extend(gy.iter().zip(y).map(|(gj, yj)| yj * (gj - dot)));
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::BlockTranspose { x, blocks } => {
                let (r, c) = dims(out);
                let data = block_transpose(g.data(), *blocks, r / blocks, c);
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), data)?);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshaped(self.value(*a).shape().to_vec())?);
            }
            Op::ConcatRows(parts) => {
                let c = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let n = t.len();
                    if self.rg(p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::new(t.shape().to_vec(), slice)?);
                    }
                    offset += t.rows() * c;
                }
            }
            Op::SliceRows { x, start } => {
                let t = self.value(*x);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), d)?);
            }
            Op::ConcatCols(parts) => {
                let (r, c) = dims(out);
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let pc = t.cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(t.len());
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * c + offset..i * c + offset + pc]);
                        }
                        self.accumulate(grads, p, Tensor::new(t.shape().to_vec(), d)?);
                    }
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let t = self.value(*x);
                let (r, c) = dims(t);
                let len = out.cols();
                let mut d = vec![0.0; t.len()];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), d)?);
            }
            Op::CombineRows { x, terms } => {
                let t = self.value(*x);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for &(o, i, w) in terms {
                    let gs = &g.data()[o * c..(o + 1) * c];
                    for (di, gi) in d[i * c..(i + 1) * c].iter_mut().zip(gs) {
                        *di += w * gi;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                self.accumulate(grads, *a, Tensor::new(t.shape().to_vec(), vec![g.item(); t.len()])?);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.item() / t.len() as f64;
                self.accumulate(grads, *a, Tensor::new(t.shape().to_vec(), vec![v; t.len()])?);
            }
        }
        Ok(())
    }

    /// Name of the op that produced `v`, for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn identity_matmul_is_exact() {
        let mut g = Graph::new();
        let x = m(&[&[1.5, -2.0, 3.25], &[0.1, 0.2, 0.3], &[7.0, 8.0, -9.0]]);
        let i = g.constant(Tensor::identity(3));
        let xv = g.input(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masks_neg_infinity() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![1.0, f64::NEG_INFINITY, 1.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.0, 0.5]);
        let all_masked = g.input(Tensor::row(vec![f64::NEG_INFINITY; 2]));
        assert!(g.softmax(all_masked).is_err());
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![4.2; 8]));
        let y = g.layer_norm(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn half_squared_norm_gradient_is_input() {
        let mut g = Graph::new();
        let data = m(&[&[1.0, -2.0, 0.5]]);
        let x = g.input(data.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &data);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![1.0, 2.0]));
        assert_eq!(g.backward(x).unwrap_err(), Error::NonScalarLoss(vec![1, 2]));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(2, 3));
        let b = g.input(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err, Error::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
        let c = g.input(Tensor::zeros(3, 2));
        assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn repeated_param_binds_share_gradient() {
        let mut g = Graph::new();
        let w = Tensor::row(vec![2.0]);
        let a = g.param(7, &w);
        let b = g.param(7, &w);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(7).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::row(vec![1.0, 2.0]));
        let x = g.input(Tensor::row(vec![3.0, 4.0]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn block_transpose_round_trips() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(6, 2, (0..12).map(f64::from).collect()));
        let y = g.block_transpose(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 3]);
        // Block 0 is [[0,1],[2,3],[4,5]] so its transpose starts 0,2,4.
        assert_eq!(&g.value(y).data()[..3], &[0.0, 2.0, 4.0]);
        let z = g.block_transpose(y, 2).unwrap();
        assert_eq!(g.value(z), g.value(x));
    }

    #[test]
    fn combine_rows_gathers_and_averages() {
        let mut g = Graph::new();
        let x = g.input(m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let y = g.combine_rows(x, 2, vec![(0, 2, 1.0), (1, 0, 0.5), (1, 1, 0.5)]).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 2.0, 3.0]);
        assert!(g.combine_rows(x, 2, vec![(2, 0, 1.0)]).is_err());
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, 0.5, 0.5, 0.5, 1.0, 1.0]);
    }
}
