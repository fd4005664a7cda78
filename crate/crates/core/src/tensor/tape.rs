use super::linalg::{self, gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::Tensor;
use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask over `[rows, cols]`; `true` means the key may be attended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Shape {
                op: "mask",
                lhs: vec![rows, cols],
                rhs: vec![allowed.len()],
            });
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(t: usize) -> Self {
        let mut allowed = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                allowed[i * t + j] = true;
            }
        }
        Self {
            rows: t,
            cols: t,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[(i % self.rows) * self.cols + j]
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Relu(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    MeanRows(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Inverse(Var),
    LogAbsDet {
        x: Var,
        inv_t: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert-style tape. Nodes are appended in evaluation order, so the node
/// index is a valid topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Suffix broadcasting: the smaller shape must equal the trailing dims of the larger.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(shape_err(op, a, b))
}

fn last2(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    if s.len() < 2 {
        return Err(shape_err(op, s, &[]));
    }
    let r = s[s.len() - 2];
    let c = s[s.len() - 1];
    Ok((s[..s.len() - 2].iter().product(), r, c))
}

fn reduce_into(g: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (i, &v) in g.iter().enumerate() {
        out[i % len] += v;
    }
    out
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let shape = broadcast_shape(op, ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data = if da.len() == n && db.len() == n {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % da.len()], db[i % db.len()])).collect()
        };
        let rg = nodes[a.0].requires_grad || nodes[b.0].requires_grad;
        Ok((Tensor { shape, data }, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64) -> (Tensor, bool) {
        let nodes = self.nodes.borrow();
        (nodes[x.0].value.map(f), nodes[x.0].requires_grad)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let (t, rg) = self.unary(x, |v| v * c);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let (t, rg) = self.unary(x, |v| v + c);
        self.push(t, Op::Offset(x), rg)
    }

    pub fn exp(&self, x: Var) -> Var {
        let (t, rg) = self.unary(x, f64::exp);
        self.push(t, Op::Exp(x), rg)
    }

    pub fn log(&self, x: Var) -> Var {
        let (t, rg) = self.unary(x, f64::ln);
        self.push(t, Op::Log(x), rg)
    }

    pub fn powf(&self, x: Var, p: f64) -> Var {
        let (t, rg) = self.unary(x, |v| v.powf(p));
        self.push(t, Op::Powf(x, p), rg)
    }

    pub fn relu(&self, x: Var) -> Var {
        let (t, rg) = self.unary(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), rg)
    }

    pub fn tanh(&self, x: Var) -> Var {
        let (t, rg) = self.unary(x, f64::tanh);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (t, rg) = self.unary(x, |v| v.clamp(lo, hi));
        self.push(t, Op::Clamp(x, lo, hi), rg)
    }

    pub fn square(&self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.sum(), nodes[x.0].requires_grad)
        };
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means of a `[T, C]` tensor, giving `[C]`.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let (t, rg) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let (r, c) = v.dims2()?;
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, &e) in out.iter_mut().zip(v.row(i)) {
                    *o += e;
                }
            }
            out.iter_mut().for_each(|o| *o /= r as f64);
            (Tensor::new(vec![c], out)?, nodes[x.0].requires_grad)
        };
        Ok(self.push(t, Op::MeanRows(x), rg))
    }

    /// Batched matrix product over the last two dims. Leading batch dims must
    /// be equal, or one operand must be a plain matrix.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            let (ba, m, k) = last2("matmul", sa)?;
            let (bb, k2, n) = last2("matmul", sb)?;
            let lead_a = &sa[..sa.len() - 2];
            let lead_b = &sb[..sb.len() - 2];
            if k != k2 || !(lead_a == lead_b || lead_a.is_empty() || lead_b.is_empty()) {
                return Err(shape_err("matmul", sa, sb));
            }
            let batch = ba.max(bb);
            let mut shape = if lead_a.is_empty() { lead_b.to_vec() } else { lead_a.to_vec() };
            shape.extend([m, n]);
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let ao = if ba == 1 { 0 } else { bi * m * k };
                let bo = if bb == 1 { 0 } else { bi * k * n };
                gemm_acc(
                    &ta.data()[ao..ao + m * k],
                    &tb.data()[bo..bo + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            (Tensor { shape, data: out }, nodes[a.0].requires_grad || nodes[b.0].requires_grad)
        };
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Swap the last two dims.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (t, rg) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let (batch, r, c) = last2("transpose", v.shape())?;
            let mut data = Vec::with_capacity(v.len());
            for bi in 0..batch {
                data.extend(linalg::transpose(&v.data()[bi * r * c..(bi + 1) * r * c], r, c));
            }
            let mut shape = v.shape().to_vec();
            let l = shape.len();
            shape.swap(l - 1, l - 2);
            (Tensor { shape, data }, nodes[x.0].requires_grad)
        };
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// Softmax over the last axis. Masked entries are exactly zero; a row with
    /// every entry masked is an error.
    pub fn softmax_last(&self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let (t, rg) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let cols = *v.shape().last().ok_or_else(|| shape_err("softmax", v.shape(), &[]))?;
            let rows = v.len() / cols.max(1);
            let q_rows = if v.rank() >= 2 { v.shape()[v.rank() - 2] } else { 1 };
            if let Some(m) = mask {
                if m.cols != cols || !(m.rows == q_rows || m.rows == 1) {
                    return Err(shape_err("softmax mask", v.shape(), &[m.rows, m.cols]));
                }
            }
            let mut out = vec![0.0; v.len()];
            for r in 0..rows {
                let q = r % q_rows;
                let row = &v.data()[r * cols..(r + 1) * cols];
                let ok = |j: usize| mask.is_none_or(|m| m.allowed(q, j));
                if !(0..cols).any(ok) {
                    return Err(Error::DegenerateRow { row: q });
                }
                let mut mx = (0..cols)
                    .filter(|&j| ok(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if (0..cols).any(|j| ok(j) && row[j].is_nan()) {
                    mx = f64::NAN;
                }
                let orow = &mut out[r * cols..(r + 1) * cols];
                let mut z = 0.0;
                for j in 0..cols {
                    if ok(j) {
                        let e = (row[j] - mx).exp();
                        orow[j] = e;
                        z += e;
                    }
                }
                orow.iter_mut().for_each(|o| *o /= z);
            }
            (
                Tensor {
                    shape: v.shape().to_vec(),
                    data: out,
                },
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (t, xhat, inv_std, rg) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let d = *v.shape().last().ok_or_else(|| shape_err("layer_norm", v.shape(), &[]))?;
            let (g, b) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            if g.shape() != [d] || b.shape() != [d] {
                return Err(shape_err("layer_norm", v.shape(), g.shape()));
            }
            let rows = v.len() / d;
            let mut xhat = vec![0.0; v.len()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; v.len()];
            for r in 0..rows {
                let row = &v.data()[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mu) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g.data()[j] + b.data()[j];
                }
            }
            let rg = [x, gamma, beta].iter().any(|u| nodes[u.0].requires_grad);
            (
                Tensor {
                    shape: v.shape().to_vec(),
                    data: out,
                },
                xhat,
                inv_std,
                rg,
            )
        };
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Length-preserving 1-D convolution: `x[T, c_in]`, `w[k, c_in, c_out]`,
    /// zero padding of `(k - 1) / 2` on both sides. `k` must be odd.
    pub fn conv1d(&self, x: Var, w: Var) -> Result<Var> {
        let (t, rg) = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (len, cin) = tx.dims2()?;
            let &[k, wcin, cout] = tw.shape() else {
                return Err(shape_err("conv1d", tx.shape(), tw.shape()));
            };
            if k % 2 == 0 {
                return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
            }
            if wcin != cin || len == 0 {
                return Err(shape_err("conv1d", tx.shape(), tw.shape()));
            }
            let pad = k / 2;
            let mut out = vec![0.0; len * cout];
            for s in 0..k {
                let wk = &tw.data()[s * cin * cout..(s + 1) * cin * cout];
                // Output row t reads input row t + s - pad.
                let lo = pad.saturating_sub(s);
                let hi = (len + pad).saturating_sub(s).min(len);
                if lo >= hi {
                    continue;
                }
                let src0 = lo + s - pad;
                gemm_acc(
                    &tx.data()[src0 * cin..(src0 + hi - lo) * cin],
                    wk,
                    &mut out[lo * cout..hi * cout],
                    hi - lo,
                    cin,
                    cout,
                );
            }
            (
                Tensor {
                    shape: vec![len, cout],
                    data: out,
                },
                nodes[x.0].requires_grad || nodes[w.0].requires_grad,
            )
        };
        Ok(self.push(t, Op::Conv1d { x, w }, rg))
    }

    /// Columns `start..start + len` of a `[T, C]` tensor.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, rg) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let (r, c) = v.dims2()?;
            if start + len > c {
                return Err(shape_err("slice_cols", v.shape(), &[start, len]));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&v.row(i)[start..start + len]);
            }
            (
                Tensor {
                    shape: vec![r, len],
                    data,
                },
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&self, xs: &[Var]) -> Result<Var> {
        let (t, rg) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[xs[0].0].value;
            let (r, _) = first.dims2()?;
            let mut widths = Vec::with_capacity(xs.len());
            for v in xs {
                let (rv, cv) = nodes[v.0].value.dims2()?;
                if rv != r {
                    return Err(shape_err("concat_cols", first.shape(), nodes[v.0].value.shape()));
                }
                widths.push(cv);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for v in xs {
                    data.extend_from_slice(nodes[v.0].value.row(i));
                }
            }
            (
                Tensor {
                    shape: vec![r, total],
                    data,
                },
                xs.iter().any(|v| nodes[v.0].requires_grad),
            )
        };
        Ok(self.push(t, Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Rows `start..start + len` of a `[T, C]` tensor.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.slice_rows(start, len)?, nodes[x.0].requires_grad)
        };
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let (t, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.clone().reshape(shape)?, nodes[x.0].requires_grad)
        };
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Row lookup into a `[V, d]` table.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (t, rg) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[table.0].value;
            let (rows, d) = v.dims2()?;
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                if i >= rows {
                    return Err(shape_err("gather_rows", v.shape(), &[i]));
                }
                data.extend_from_slice(v.row(i));
            }
            (
                Tensor {
                    shape: vec![ids.len(), d],
                    data,
                },
                nodes[table.0].requires_grad,
            )
        };
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn inverse(&self, x: Var) -> Result<Var> {
        let (t, rg) = {
            let nodes = self.nodes.borrow();
            (linalg::inverse(&nodes[x.0].value)?, nodes[x.0].requires_grad)
        };
        Ok(self.push(t, Op::Inverse(x), rg))
    }

    /// `log|det x|` as a scalar; errors when `|det x| < 1e-12`.
    pub fn log_abs_det(&self, x: Var) -> Result<Var> {
        let (t, inv_t, rg) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let lad = linalg::log_abs_det(v)?;
            let inv = linalg::inverse(v)?;
            let n = v.shape()[0];
            (Tensor::scalar(lad), linalg::transpose(inv.data(), n, n), nodes[x.0].requires_grad)
        };
        Ok(self.push(t, Op::LogAbsDet { x, inv_t }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over every use of a value.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NotScalar(nodes[loss.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: Vec<f64>) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        let want = |v: Var| nodes[v.0].requires_grad;

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = node.value.data();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (la, lb) = (nodes[a.0].value.len(), nodes[b.0].value.len());
                    if want(*a) {
                        acc(&mut grads, &nodes, *a, reduce_into(&g, la));
                    }
                    if want(*b) {
                        let mut gb = reduce_into(&g, lb);
                        gb.iter_mut().for_each(|x| *x *= sign);
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if want(*a) {
                        let mut ga = vec![0.0; da.len()];
                        for (i, &gi) in g.iter().enumerate() {
                            ga[i % da.len()] += gi * db[i % db.len()];
                        }
                        acc(&mut grads, &nodes, *a, ga);
                    }
                    if want(*b) {
                        let mut gb = vec![0.0; db.len()];
                        for (i, &gi) in g.iter().enumerate() {
                            gb[i % db.len()] += gi * da[i % da.len()];
                        }
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Scale(x, c) => {
                    acc(&mut grads, &nodes, *x, g.iter().map(|v| v * c).collect());
                }
                Op::Offset(x) => acc(&mut grads, &nodes, *x, g),
                Op::Exp(x) => {
                    acc(&mut grads, &nodes, *x, g.iter().zip(out).map(|(a, b)| a * b).collect());
                }
                Op::Log(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(&mut grads, &nodes, *x, g.iter().zip(xv).map(|(a, b)| a / b).collect());
                }
                Op::Powf(x, p) => {
                    let xv = nodes[x.0].value.data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, &xi)| gi * p * xi.powf(p - 1.0))
                        .collect();
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    let gx = g.iter().zip(xv).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect();
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = nodes[x.0].value.data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, xi)| if xi >= lo && xi <= hi { *gi } else { 0.0 })
                        .collect();
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Sum(x) => {
                    let n = nodes[x.0].value.len();
                    acc(&mut grads, &nodes, *x, vec![g[0]; n]);
                }
                Op::MeanRows(x) => {
                    let (r, c) = nodes[x.0].value.dims2()?;
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = g[j] / r as f64;
                        }
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (ba, m, k) = last2("matmul", ta.shape())?;
                    let (bb, _, n) = last2("matmul", tb.shape())?;
                    let batch = ba.max(bb);
                    let mut ga = want(*a).then(|| vec![0.0; ta.len()]);
                    let mut gb = want(*b).then(|| vec![0.0; tb.len()]);
                    for bi in 0..batch {
                        let ao = if ba == 1 { 0 } else { bi * m * k };
                        let bo = if bb == 1 { 0 } else { bi * k * n };
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        if let Some(ga) = ga.as_mut() {
                            gemm_nt_acc(gs, &tb.data()[bo..bo + k * n], &mut ga[ao..ao + m * k], m, n, k);
                        }
                        if let Some(gb) = gb.as_mut() {
                            gemm_tn_acc(&ta.data()[ao..ao + m * k], gs, &mut gb[bo..bo + k * n], m, k, n);
                        }
                    }
                    if let Some(ga) = ga {
                        acc(&mut grads, &nodes, *a, ga);
                    }
                    if let Some(gb) = gb {
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Transpose(x) => {
                    // Output shape is [.., c, r]; transpose back.
                    let (batch, c, r) = last2("transpose", node.value.shape())?;
                    let mut gx = Vec::with_capacity(g.len());
                    for bi in 0..batch {
                        gx.extend(linalg::transpose(&g[bi * r * c..(bi + 1) * r * c], c, r));
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Softmax(x) => {
                    let cols = *node.value.shape().last().unwrap_or(&1);
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..g.len() / cols {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = nodes[gamma.0].value.data();
                    let d = gm.len();
                    let rows = g.len() / d;
                    if want(*gamma) {
                        let mut gg = vec![0.0; d];
                        for r in 0..rows {
                            for j in 0..d {
                                gg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                        acc(&mut grads, &nodes, *gamma, gg);
                    }
                    if want(*beta) {
                        acc(&mut grads, &nodes, *beta, reduce_into(&g, d));
                    }
                    if want(*x) {
                        let mut gx = vec![0.0; g.len()];
                        for r in 0..rows {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                let gh = g[r * d + j] * gm[j];
                                s1 += gh;
                                s2 += gh * xhat[r * d + j];
                            }
                            for j in 0..d {
                                let gh = g[r * d + j] * gm[j];
                                gx[r * d + j] =
                                    inv_std[r] / d as f64 * (d as f64 * gh - s1 - xhat[r * d + j] * s2);
                            }
                        }
                        acc(&mut grads, &nodes, *x, gx);
                    }
                }
                Op::Conv1d { x, w } => {
                    let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (len, cin) = tx.dims2()?;
                    let (k, cout) = (tw.shape()[0], tw.shape()[2]);
                    let pad = k / 2;
                    let mut gx = want(*x).then(|| vec![0.0; tx.len()]);
                    let mut gw = want(*w).then(|| vec![0.0; tw.len()]);
                    for s in 0..k {
                        let lo = pad.saturating_sub(s);
                        let hi = (len + pad).saturating_sub(s).min(len);
                        if lo >= hi {
                            continue;
                        }
                        let src0 = lo + s - pad;
                        let rows = hi - lo;
                        let gs = &g[lo * cout..hi * cout];
                        if let Some(gx) = gx.as_mut() {
                            let wk = &tw.data()[s * cin * cout..(s + 1) * cin * cout];
                            gemm_nt_acc(gs, wk, &mut gx[src0 * cin..(src0 + rows) * cin], rows, cout, cin);
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xs = &tx.data()[src0 * cin..(src0 + rows) * cin];
                            gemm_tn_acc(xs, gs, &mut gw[s * cin * cout..(s + 1) * cin * cout], rows, cin, cout);
                        }
                    }
                    if let Some(gx) = gx {
                        acc(&mut grads, &nodes, *x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(&mut grads, &nodes, *w, gw);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = nodes[x.0].value.dims2()?;
                    let w = node.value.shape()[1];
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::ConcatCols(xs) => {
                    let (r, total) = node.value.dims2()?;
                    let mut off = 0;
                    for v in xs {
                        let w = nodes[v.0].value.shape()[1];
                        if want(*v) {
                            let mut gv = Vec::with_capacity(r * w);
                            for i in 0..r {
                                gv.extend_from_slice(&g[i * total + off..i * total + off + w]);
                            }
                            acc(&mut grads, &nodes, *v, gv);
                        }
                        off += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (_, c) = nodes[x.0].value.dims2()?;
                    let mut gx = vec![0.0; nodes[x.0].value.len()];
                    gx[start * c..start * c + g.len()].copy_from_slice(&g);
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Reshape(x) => acc(&mut grads, &nodes, *x, g),
                Op::Gather { table, ids } => {
                    let tv = &nodes[table.0].value;
                    let d = tv.shape()[1];
                    let mut gt = vec![0.0; tv.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                    acc(&mut grads, &nodes, *table, gt);
                }
                Op::Inverse(x) => {
                    // d(A⁻¹) = -A⁻¹ dA A⁻¹  =>  gA = -A⁻ᵀ G A⁻ᵀ
                    let n = node.value.shape()[0];
                    let inv_t = linalg::transpose(out, n, n);
                    let mut tmp = vec![0.0; n * n];
                    gemm_acc(&inv_t, &g, &mut tmp, n, n, n);
                    let mut gx = vec![0.0; n * n];
                    gemm_acc(&tmp, &inv_t, &mut gx, n, n, n);
                    gx.iter_mut().for_each(|v| *v = -*v);
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::LogAbsDet { x, inv_t } => {
                    acc(&mut grads, &nodes, *x, inv_t.iter().map(|v| v * g[0]).collect());
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.map(|data| Tensor {
                    shape: n.value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Grads { grads })
    }
}
