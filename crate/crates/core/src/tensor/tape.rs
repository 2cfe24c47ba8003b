use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulScalar(Var, Var),
    Sum(Var),
    Mean(Var),
    ColMean(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    RowNormalize(Var),
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
        b: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    DeconvCols {
        x: Var,
        w: Var,
        b: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SmoothL1 {
        a: Var,
        b: Var,
        beta: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records a dynamic computation graph; rebuilt for every step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A leaf that accumulates gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.require_2d("matmul")?;
        let (k2, n) = tb.require_2d("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_2d("transpose")?;
        let src = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), tracked))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Elementwise `smooth_l1(a, b)` with transition point `beta`.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 || !beta.is_finite() {
            return Err(Error::Config(format!("smooth_l1 beta must be > 0, got {beta}")));
        }
        self.zip_same(a, b, Op::SmoothL1 { a, b, beta }, "smooth_l1", |x, y| {
            let d = (x - y).abs();
            if d < beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            }
        })
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| f(*x)).collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(&[a]);
        self.push(Tensor { shape, data: out }, op, tracked)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddConst(a), |x| x + c)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, sign: f64, name: &'static str) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(r));
        let (m, n) = tx.require_2d(name)?;
        if tr.shape() != [1, n] {
            return Err(shape_err(name, tx, tr));
        }
        let mut out = tx.data().to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *o += sign * b;
            }
        }
        let op = if sign > 0.0 { Op::AddRow(x, r) } else { Op::SubRow(x, r) };
        let tracked = self.tracked(&[x, r]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, op, tracked))
    }

    /// `x (m×n) + r (1×n)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, 1.0, "add_row")
    }

    /// `x (m×n) − r (1×n)` broadcast over rows.
    pub fn sub_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, -1.0, "sub_row")
    }

    /// Multiplies every entry of `x` by the 1×1 tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(shape_err("mul_scalar", self.value(x), ts));
        }
        let k = ts.data()[0];
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v * k).collect();
        let shape = tx.shape().to_vec();
        let tracked = self.tracked(&[x, s]);
        Ok(self.push(Tensor { shape, data: out }, Op::MulScalar(x, s), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), tracked)
    }

    /// Mean over rows: `m × n → 1 × n`.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.require_2d("col_mean")?;
        if m == 0 {
            return Err(Error::Length("col_mean over zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::ColMean(a), tracked))
    }

    /// Row-wise softmax with row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.require_2d("softmax_rows")?;
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows: NaN input".into()));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows(a), tracked))
    }

    /// Divides each row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.require_2d("row_normalize")?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            let s: f64 = row.iter().sum();
            if s == 0.0 || !s.is_finite() {
                return Err(Error::Numeric(format!("row_normalize: row sum {s}")));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::RowNormalize(a), tracked))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (each `1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.require_2d("layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, n] {
                return Err(shape_err("layer_norm", tx, self.value(p)));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let tracked = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Same-padded 1-D convolution along rows.
    ///
    /// `x: n × c_in`, `w: k × c_in × c_out` (k odd), `b: 1 × c_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, cin) = tx.require_2d("conv1d")?;
        if tw.shape().len() != 3 || tw.shape()[1] != cin {
            return Err(shape_err("conv1d", tx, tw));
        }
        let (k, cout) = (tw.shape()[0], tw.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        if tb.shape() != [1, cout] {
            return Err(shape_err("conv1d", tw, tb));
        }
        let mut out = vec![0.0; n * cout];
        for i in 0..n {
            out[i * cout..(i + 1) * cout].copy_from_slice(tb.data());
        }
        let half = (k / 2) as isize;
        for j in 0..k {
            let off = j as isize - half;
            let (lo, hi) = conv_range(n, off);
            if lo >= hi {
                continue;
            }
            let src = ((lo as isize + off) as usize) * cin;
            let wj = &tw.data()[j * cin * cout..(j + 1) * cin * cout];
            gemm(
                hi - lo,
                cin,
                cout,
                &tx.data()[src..],
                false,
                wj,
                false,
                &mut out[lo * cout..],
                true,
            );
        }
        let tracked = self.tracked(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, cout], out)?, Op::Conv1d { x, w, b }, tracked))
    }

    /// Window-2 stride-2 max pooling along rows; an unpaired last row is dropped.
    pub fn maxpool1d(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = tx.require_2d("maxpool1d")?;
        if n < 2 {
            return Err(Error::Length(format!("maxpool1d needs at least 2 rows, got {n}")));
        }
        let m = n / 2;
        let mut out = vec![0.0; m * c];
        let mut argmax = vec![0; m * c];
        let d = tx.data();
        for i in 0..m {
            for j in 0..c {
                let (a, b) = ((2 * i) * c + j, (2 * i + 1) * c + j);
                // ties go to the first element
                let src = if d[b] > d[a] { b } else { a };
                out[i * c + j] = d[src];
                argmax[i * c + j] = src;
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(vec![m, c], out)?, Op::MaxPool { x, argmax }, tracked))
    }

    /// Kernel-2 stride-2 transposed convolution along columns:
    /// `y[r, 2i + k] = w[k]·x[r, i] + b`, mapping `m × n → m × 2n`.
    pub fn deconv_cols(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (m, n) = tx.require_2d("deconv_cols")?;
        if tw.numel() != 2 || tb.numel() != 1 {
            return Err(shape_err("deconv_cols", tw, tb));
        }
        let (w0, w1, bias) = (tw.data()[0], tw.data()[1], tb.data()[0]);
        let mut out = vec![0.0; m * 2 * n];
        for r in 0..m {
            for i in 0..n {
                let v = tx.data()[r * n + i];
                out[r * 2 * n + 2 * i] = w0 * v + bias;
                out[r * 2 * n + 2 * i + 1] = w1 * v + bias;
            }
        }
        let tracked = self.tracked(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![m, 2 * n], out)?, Op::DeconvCols { x, w, b }, tracked))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.require_2d("gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Length(format!("gather_rows index {i} out of {m}")));
            }
            out.extend_from_slice(tx.row(i));
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            tracked,
        ))
    }

    /// Places row `k` of `x` at row `idx[k]` of a zero `rows × n` matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.require_2d("scatter_rows")?;
        if m != idx.len() {
            return Err(Error::Length(format!(
                "scatter_rows: {m} rows for {} indices",
                idx.len()
            )));
        }
        let mut out = vec![0.0; rows * n];
        let mut seen = vec![false; rows];
        for (k, &i) in idx.iter().enumerate() {
            if i >= rows || seen[i] {
                return Err(Error::Length(format!("scatter_rows: bad index {i} for {rows} rows")));
            }
            seen[i] = true;
            out[i * n..(i + 1) * n].copy_from_slice(tx.row(k));
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, n], out)?,
            Op::ScatterRows { x, idx: idx.to_vec() },
            tracked,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.require_2d("slice_rows")?;
        if start + len > m {
            return Err(Error::Length(format!("slice_rows {start}+{len} of {m}")));
        }
        let out = tx.data()[start * n..(start + len) * n].to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(vec![len, n], out)?, Op::SliceRows { x, start }, tracked))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.require_2d("slice_cols")?;
        if start + len > n {
            return Err(Error::Length(format!("slice_cols {start}+{len} of {n}")));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Length("concat_rows of nothing".into()))?;
        let n = self.value(*first).require_2d("concat_rows")?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let tp = self.value(p);
            let (pm, pn) = tp.require_2d("concat_rows")?;
            if pn != n {
                return Err(shape_err("concat_rows", self.value(*first), tp));
            }
            out.extend_from_slice(tp.data());
            m += pm;
        }
        let tracked = self.tracked(parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()), tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Length("concat_cols of nothing".into()))?;
        let m = self.value(*first).require_2d("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            let (pm, pn) = tp.require_2d("concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", self.value(*first), tp));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let tracked = self.tracked(parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Reverse pass from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.numel()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| {
                    g.filter(|_| n.tracked && matches!(n.op, Op::Leaf)).map(|data| Tensor {
                        shape: n.value.shape().to_vec(),
                        data,
                    })
                })
                .collect(),
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        // Runs `f` on the gradient buffer of `v` when `v` is tracked.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(buf);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |ga| gemm(m, n, k, g, false, tb.data(), true, ga, true));
                acc(*b, &mut |gb| gemm(k, m, n, ta.data(), true, g, false, gb, true));
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, d), x) in ga.iter_mut().zip(g).zip(db) {
                        *o += d * x;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, d), x) in gb.iter_mut().zip(g).zip(da) {
                        *o += d * x;
                    }
                });
            }
            Op::SmoothL1 { a, b, beta } => {
                let (da, db) = (val(*a).data(), val(*b).data());
                let dd: Vec<f64> = da
                    .iter()
                    .zip(db)
                    .zip(g)
                    .map(|((x, y), d)| {
                        let diff = x - y;
                        let slope = if diff.abs() < *beta { diff / beta } else { diff.signum() };
                        slope * d
                    })
                    .collect();
                acc(*a, &mut |ga| add_into(ga, &dd));
                acc(*b, &mut |gb| gb.iter_mut().zip(&dd).for_each(|(o, d)| *o -= d));
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, d)| *o += d * s)),
            Op::AddConst(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::AddRow(x, r) | Op::SubRow(x, r) => {
                let sign = if matches!(node.op, Op::AddRow(..)) { 1.0 } else { -1.0 };
                let n = val(*r).numel();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*r, &mut |gr| {
                    for row in g.chunks(n) {
                        gr.iter_mut().zip(row).for_each(|(o, d)| *o += sign * d);
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let k = val(*s).data()[0];
                let dx = val(*x).data();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, d)| *o += d * k));
                acc(*s, &mut |gs| gs[0] += g.iter().zip(dx).map(|(d, v)| d * v).sum::<f64>());
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let inv = 1.0 / val(*a).numel() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] * inv));
            }
            Op::ColMean(a) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                let inv = 1.0 / m as f64;
                acc(*a, &mut |ga| {
                    for row in ga.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(o, d)| *o += d * inv);
                    }
                });
            }
            Op::Sqrt(a) => acc(*a, &mut |ga| {
                for ((o, d), s) in ga.iter_mut().zip(g).zip(y) {
                    *o += d * 0.5 / s;
                }
            }),
            Op::Relu(a) => {
                let dx = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((o, d), x) in ga.iter_mut().zip(g).zip(dx) {
                        if *x > 0.0 {
                            *o += d;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let dx = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((o, d), x) in ga.iter_mut().zip(g).zip(dx) {
                        *o += d * gelu_grad(*x);
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((o, d), s) in ga.iter_mut().zip(g).zip(y) {
                    *o += d * s * (1.0 - s);
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let dx = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((o, d), x) in ga.iter_mut().zip(g).zip(dx) {
                        if *x >= *lo && *x <= *hi {
                            *o += d;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.cols().max(1);
                acc(*a, &mut |ga| {
                    for ((gr, dr), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, v)| d * v).sum();
                        for ((o, d), v) in gr.iter_mut().zip(dr).zip(yr) {
                            *o += v * (d - dot);
                        }
                    }
                });
            }
            Op::RowNormalize(a) => {
                let n = node.value.cols().max(1);
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    for (((gr, dr), yr), xr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).zip(x.chunks(n)) {
                        let s: f64 = xr.iter().sum();
                        let dot: f64 = dr.iter().zip(yr).map(|(d, v)| d * v).sum();
                        for (o, d) in gr.iter_mut().zip(dr) {
                            *o += (d - dot) / s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gm = val(*gamma).data();
                acc(*gamma, &mut |gg| {
                    for (dr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, d), h) in gg.iter_mut().zip(dr).zip(hr) {
                            *o += d * h;
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for dr in g.chunks(n) {
                        add_into(gb, dr);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dh = vec![0.0; n];
                    for (((gr, dr), hr), is) in gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).zip(inv_std) {
                        for j in 0..n {
                            dh[j] = dr[j] * gm[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gr[j] += is * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, cin) = (tx.rows(), tx.cols());
                let (k, cout) = (tw.shape()[0], tw.shape()[2]);
                let half = (k / 2) as isize;
                acc(*b, &mut |gb| {
                    for dr in g.chunks(cout) {
                        add_into(gb, dr);
                    }
                });
                acc(*w, &mut |gw| {
                    for j in 0..k {
                        let off = j as isize - half;
                        let (lo, hi) = conv_range(n, off);
                        if lo >= hi {
                            continue;
                        }
                        let src = ((lo as isize + off) as usize) * cin;
                        gemm(
                            cin,
                            hi - lo,
                            cout,
                            &tx.data()[src..],
                            true,
                            &g[lo * cout..],
                            false,
                            &mut gw[j * cin * cout..(j + 1) * cin * cout],
                            true,
                        );
                    }
                });
                acc(*x, &mut |gx| {
                    for j in 0..k {
                        let off = j as isize - half;
                        let (lo, hi) = conv_range(n, off);
                        if lo >= hi {
                            continue;
                        }
                        let dst = ((lo as isize + off) as usize) * cin;
                        gemm(
                            hi - lo,
                            cout,
                            cin,
                            &g[lo * cout..],
                            false,
                            &tw.data()[j * cin * cout..(j + 1) * cin * cout],
                            true,
                            &mut gx[dst..],
                            true,
                        );
                    }
                });
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |gx| {
                for (d, &src) in g.iter().zip(argmax) {
                    gx[src] += d;
                }
            }),
            Op::DeconvCols { x, w, b } => {
                let tx = val(*x);
                let (m, n) = (tx.rows(), tx.cols());
                let wd = val(*w).data();
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        for i in 0..n {
                            let base = r * 2 * n + 2 * i;
                            gx[r * n + i] += wd[0] * g[base] + wd[1] * g[base + 1];
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for r in 0..m {
                        for i in 0..n {
                            let base = r * 2 * n + 2 * i;
                            let v = tx.data()[r * n + i];
                            gw[0] += v * g[base];
                            gw[1] += v * g[base + 1];
                        }
                    }
                });
                acc(*b, &mut |gb| gb[0] += g.iter().sum::<f64>());
            }
            Op::GatherRows { x, idx } => {
                let n = val(*x).cols();
                acc(*x, &mut |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::ScatterRows { x, idx } => {
                let n = val(*x).cols();
                acc(*x, &mut |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[k * n..(k + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = val(*x).cols();
                acc(*x, &mut |gx| add_into(&mut gx[start * n..start * n + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).cols();
                let len = node.value.cols();
                acc(*x, &mut |gx| {
                    for (i, dr) in g.chunks(len.max(1)).enumerate() {
                        add_into(&mut gx[i * n + start..i * n + start + len], dr);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let pn = val(p).cols();
                    acc(p, &mut |gp| {
                        for (i, row) in gp.chunks_mut(pn.max(1)).enumerate() {
                            add_into(row, &g[i * n + col..i * n + col + pn]);
                        }
                    });
                    col += pn;
                }
            }
        }
    }
}

/// Output rows `[lo, hi)` that read input row `t + off` inside `[0, n)`.
fn conv_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(n), hi)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
}

/// Gradients of the tracked leaves after a [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a tracked leaf, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences over every entry of every input.
    fn grad_check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (slot, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[slot])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            for e in 0..input.numel() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(s, x)| {
                            let mut x = x.clone();
                            if s == slot {
                                x.data_mut()[e] += delta;
                            }
                            t.param(x)
                        })
                        .collect();
                    let o = f(&mut t, &vs);
                    t.value(o).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                assert!(err <= tol, "input {slot} entry {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Weighted sum so every output entry gets a distinct upstream gradient.
    fn weighted(t: &mut Tape, v: Var) -> Var {
        let shape = t.value(v).shape().to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
        let w = t.constant(w);
        let p = t.mul(v, w).unwrap();
        t.sum(p)
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p), t.value(m));
        let sel = t.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let col = t.constant(Tensor::from_rows(&[vec![2.5], vec![-7.0]]));
        let s = t.matmul(sel, col).unwrap();
        assert_eq!(t.value(s).data(), &[2.5]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_of_sum_is_row_sums_of_b() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        let mut t = Tape::new();
        let (va, vb) = (t.param(a), t.param(b.clone()));
        let p = t.matmul(va, vb).unwrap();
        let s = t.sum(p);
        let g = t.backward(s);
        let ga = g.get(va).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let want: f64 = b.row(k).iter().sum();
                assert!((ga.get(i, k) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![1000.0, 1000.0],
            vec![0.0, 3f64.ln()],
        ]));
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        assert_eq!(v.row(1), &[0.5, 0.5]);
        assert!((v.get(2, 0) - 0.25).abs() < 1e-15 && (v.get(2, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![0.0, f64::NAN]]));
        assert!(matches!(t.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn conv1d_closed_forms() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![1.0]]));
        let w = t.constant(Tensor::full(&[3, 1, 1], 1.0));
        let b = t.constant(Tensor::zeros(&[1, 1]));
        let y = t.conv1d(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 3.0, 3.0, 2.0]);

        let mut r = rng();
        let xs = Tensor::randn(&[5, 3], 1.0, &mut r);
        let x = t.constant(xs.clone());
        let id = Tensor::new(vec![1, 3, 3], Tensor::identity(3).into_data()).unwrap();
        let w = t.constant(id);
        let b = t.constant(Tensor::zeros(&[1, 3]));
        let y = t.conv1d(x, w, b).unwrap();
        assert_eq!(t.value(y), &xs);
    }

    #[test]
    fn conv1d_even_kernel_is_config_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[4, 1]));
        let w = t.constant(Tensor::zeros(&[2, 1, 1]));
        let b = t.constant(Tensor::zeros(&[1, 1]));
        assert!(matches!(t.conv1d(x, w, b), Err(Error::Config(_))));
    }

    #[test]
    fn maxpool_closed_form_floor_and_tie_break() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_rows(&[vec![1.0], vec![3.0], vec![2.0], vec![5.0]]));
        let y = t.maxpool1d(x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 5.0]);

        let x = t.param(Tensor::full(&[9, 1], 2.0));
        let y = t.maxpool1d(x).unwrap();
        assert_eq!(t.value(y).rows(), 4);
        let s = t.sum(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);

        let x = t.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(t.maxpool1d(x), Err(Error::Length(_))));
    }

    #[test]
    fn deconv_replication_kernel() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::full(&[4, 4], 0.5));
        let w = t.constant(Tensor::from_rows(&[vec![1.0, 1.0]]));
        let b = t.constant(Tensor::zeros(&[1, 1]));
        let y = t.deconv_cols(a, w, b).unwrap();
        let yt = t.transpose(y).unwrap();
        let z = t.deconv_cols(yt, w, b).unwrap();
        let z = t.transpose(z).unwrap();
        assert_eq!(t.value(z).shape(), &[8, 8]);
        assert!(t.value(z).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn smooth_l1_closed_forms() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![0.0, 0.0, 3.0]]));
        let b = t.constant(Tensor::from_rows(&[vec![2.0, 0.5, 3.0]]));
        let y = t.smooth_l1(a, b, 1.0).unwrap();
        assert_eq!(t.value(y).data(), &[1.5, 0.125, 0.0]);
        assert!(matches!(t.smooth_l1(a, b, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let a = t.scale(x, 2.0);
        let b = t.mul(x, x).unwrap();
        let s = t.add(a, b).unwrap();
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap().item(), 2.0 + 6.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(1.0));
        let p = t.param(Tensor::scalar(2.0));
        let y = t.mul(c, p).unwrap();
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }

    #[test]
    fn gradient_checks_for_every_op() {
        let mut r = rng();
        let mut rn = |s: &[usize]| Tensor::randn(s, 1.0, &mut r);
        grad_check(
            vec![rn(&[3, 4]), rn(&[4, 2])],
            |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                weighted(t, y)
            },
            1e-6,
        );
        grad_check(
            vec![rn(&[3, 5])],
            |t, v| {
                let y = t.transpose(v[0]).unwrap();
                weighted(t, y)
            },
            1e-6,
        );
        grad_check(
            vec![rn(&[2, 3]), rn(&[2, 3])],
            |t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let b = t.sub(a, v[1]).unwrap();
                let c = t.mul(b, v[1]).unwrap();
                weighted(t, c)
            },
            1e-6,
        );
        grad_check(
            vec![rn(&[3, 4])],
            |t, v| {
                let y = t.softmax_rows(v[0]).unwrap();
                weighted(t, y)
            },
            1e-6,
        );
        grad_check(
            vec![rn(&[6, 3]), rn(&[3, 3, 4]), rn(&[1, 4])],
            |t, v| {
                let y = t.conv1d(v[0], v[1], v[2]).unwrap();
                weighted(t, y)
            },
            1e-6,
        );
        grad_check(
            vec![rn(&[7, 3])],
            |t, v| {
                let y = t.maxpool1d(v[0]).unwrap();
                weighted(t, y)
            },
            1e-6,
        );
        grad_check(
            vec![rn(&[3, 3]), rn(&[1, 2]), rn(&[1, 1])],
            |t, v| {
                let y = t.deconv_cols(v[0], v[1], v[2]).unwrap();
                let y = t.transpose(y).unwrap();
                let y = t.deconv_cols(y, v[1], v[2]).unwrap();
                let y = t.transpose(y).unwrap();
                weighted(t, y)
            },
            1e-6,
        );
        grad_check(
            vec![rn(&[4, 5]), rn(&[1, 5]), rn(&[1, 5])],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                weighted(t, y)
            },
            1e-6,
        );
        grad_check(
            vec![rn(&[3, 4]), rn(&[3, 4])],
            |t, v| {
                let y = t.smooth_l1(v[0], v[1], 1.0).unwrap();
                weighted(t, y)
            },
            1e-6,
        );
        grad_check(
            vec![rn(&[3, 4])],
            |t, v| {
                let a = t.gelu(v[0]);
                let b = t.sigmoid(a);
                let c = t.relu(v[0]);
                let d = t.add(b, c).unwrap();
                weighted(t, d)
            },
            1e-6,
        );
        grad_check(
            vec![rn(&[4, 3]), rn(&[1, 3]), rn(&[1, 1])],
            |t, v| {
                let a = t.add_row(v[0], v[1]).unwrap();
                let b = t.sub_row(a, v[1]).unwrap();
                let c = t.add_row(b, v[1]).unwrap();
                let m = t.col_mean(c).unwrap();
                let c = t.sub_row(c, m).unwrap();
                let d = t.mul_scalar(c, v[2]).unwrap();
                weighted(t, d)
            },
            1e-6,
        );
        grad_check(
            vec![rn(&[5, 3])],
            |t, v| {
                let g = t.gather_rows(v[0], &[4, 0, 0, 2]).unwrap();
                let s = t.scatter_rows(g, &[1, 3, 0, 5], 6);
                let s = s.unwrap();
                let a = t.slice_rows(s, 1, 4).unwrap();
                let b = t.slice_cols(a, 1, 2).unwrap();
                let c = t.concat_cols(&[b, a]).unwrap();
                let d = t.concat_rows(&[c, c]).unwrap();
                weighted(t, d)
            },
            1e-6,
        );
        // strictly positive inputs for sqrt / row_normalize
        let pos = Tensor::new(vec![3, 3], (0..9).map(|i| 0.5 + i as f64 * 0.3).collect()).unwrap();
        grad_check(
            vec![pos],
            |t, v| {
                let a = t.sqrt(v[0]);
                let b = t.row_normalize(a).unwrap();
                let c = t.add_const(b, 0.25);
                let d = t.scale(c, -1.5);
                let e = t.clamp(d, -10.0, 10.0);
                let m = t.mean(e);
                let w = weighted(t, e);
                t.add(m, w).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut r = rng();
            let mut t = Tape::new();
            let a = t.param(Tensor::randn(&[6, 4], 1.0, &mut r));
            let b = t.param(Tensor::randn(&[4, 4], 1.0, &mut r));
            let y = t.matmul(a, b).unwrap();
            let y = t.softmax_rows(y).unwrap();
            let s = weighted(&mut t, y);
            let g = t.backward(s);
            (t.value(s).item().to_bits(), g.get(a).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
