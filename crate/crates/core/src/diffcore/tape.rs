//! Dynamic tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes in exact reverse order of recording and accumulates gradients
//! additively into each input, so a value used twice receives the sum of both
//! branch gradients.

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use super::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct GruCache {
    r: Vec<f64>,
    u: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddConst(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    StackRows(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Sqrt(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    L1Loss(Var, Vec<f64>),
    L2Loss(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    Embedding(Var, Vec<usize>),
    Gru {
        gi: Var,
        h: Var,
        w_hh: Var,
        b_hh: Var,
        cache: GruCache,
    },
    CumsumRows(Var),
    Grl(Var, f64),
    Gmm {
        logits: Var,
        mu: Var,
        sigma: Var,
        weights: Vec<f64>,
        resp: Vec<f64>,
    },
    Unfold {
        x: Var,
        kernel: usize,
        dilation: usize,
        pad: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed to it.
    pub fn take_or_zeros(&mut self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::Shape(format!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
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

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols)).data_mut()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite(name.to_string()));
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

    /// Differentiable input (a parameter or a probed input).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        matmul_acc(ta.data(), tb.data(), out.data_mut(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Matmul(a, b), rg, "matmul")
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let out = Tensor::new(ta.rows(), ta.cols(), data)?;
            self.push(out, Op::Add(a, b), rg, "add")
        } else if tb.rows() == 1 && tb.cols() == ta.cols() {
            let c = ta.cols();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data()[i % c])
                .collect();
            let out = Tensor::new(ta.rows(), c, data)?;
            self.push(out, Op::AddRow(a, b), rg, "add")
        } else {
            Err(shape_err("add", ta, tb))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("sub", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// Elementwise product with a fixed array (dropout masks, for example).
    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if k.len() != ta.len() {
            return Err(DiffError::Shape(format!(
                "mul_const: {} factors for {:?}",
                k.len(),
                ta.shape()
            )));
        }
        let data = ta.data().iter().zip(&k).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::MulConst(a, k), rg, "mul_const")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * k).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, k), rg, "scale")
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x + k).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::AddConst(a), rg, "add_const")
    }

    /// Concatenate along columns; all inputs must share a row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::Shape("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(shape_err("concat", self.value(*first), t));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::Concat(parts.to_vec()), rg, "concat")
    }

    /// Columns `start..start + width`.
    pub fn slice(&mut self, a: Var, start: usize, width: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if start + width > ta.cols() || width == 0 {
            return Err(DiffError::Shape(format!(
                "slice {start}..{} out of {} columns",
                start + width,
                ta.cols()
            )));
        }
        let mut data = Vec::with_capacity(ta.rows() * width);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row(r)[start..start + width]);
        }
        let out = Tensor::new(ta.rows(), width, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols(a, start), rg, "slice")
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if start + count > ta.rows() || count == 0 {
            return Err(DiffError::Shape(format!(
                "row slice {start}..{} out of {} rows",
                start + count,
                ta.rows()
            )));
        }
        let c = ta.cols();
        let data = ta.data()[start * c..(start + count) * c].to_vec();
        let out = Tensor::new(count, c, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceRows(a, start), rg, "slice_rows")
    }

    /// Stack inputs vertically; all inputs must share a column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::Shape("stack of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(shape_err("stack_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::StackRows(parts.to_vec()), rg, "stack_rows")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(&[a]);
        self.push(out, op, rg, name)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a), "relu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, softplus, Op::Softplus(a), "softplus")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f64::exp, Op::Exp(a), "exp")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(DiffError::NonFinite("sqrt of non-positive value".into()));
        }
        self.unary(a, f64::sqrt, Op::Sqrt(a), "sqrt")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let mut out = ta.clone();
        let c = ta.cols();
        for row in out.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(DiffError::Shape("mean of empty tensor".into()));
        }
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Column means: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(ta.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::row_vector(out), Op::MeanRows(a), rg, "mean_rows")
    }

    /// Mean absolute error against a fixed target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var, DiffError> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(shape_err("l1_loss", tp, target));
        }
        let s: f64 = tp.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum();
        let v = s / tp.len() as f64;
        let rg = self.rg(&[pred]);
        self.push(
            Tensor::scalar(v),
            Op::L1Loss(pred, target.data().to_vec()),
            rg,
            "l1_loss",
        )
    }

    /// Mean squared error against a fixed target.
    pub fn l2_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var, DiffError> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(shape_err("l2_loss", tp, target));
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let v = s / tp.len() as f64;
        let rg = self.rg(&[pred]);
        self.push(
            Tensor::scalar(v),
            Op::L2Loss(pred, target.data().to_vec()),
            rg,
            "l2_loss",
        )
    }

    /// Row-averaged softmax cross-entropy; one label per logit row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, DiffError> {
        let tl = self.value(logits);
        let (m, c) = (tl.rows(), tl.cols());
        if labels.len() != m || m == 0 {
            return Err(DiffError::Shape(format!(
                "cross_entropy: {} labels for {m} rows",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(DiffError::Shape(format!("label {bad} out of {c} classes")));
        }
        let mut probs = Vec::with_capacity(m * c);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = tl.row(r);
            let lse = log_sum_exp(row);
            total += lse - row[label];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / m as f64),
            Op::CrossEntropy(logits, labels.to_vec(), probs),
            rg,
            "cross_entropy",
        )
    }

    /// Gather rows of `table` by id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let tt = self.value(table);
        if ids.is_empty() {
            return Err(DiffError::Shape("embedding lookup of no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= tt.rows()) {
            return Err(DiffError::Shape(format!(
                "id {bad} out of table with {} rows",
                tt.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * tt.cols());
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(ids.len(), tt.cols(), data)?;
        let rg = self.rg(&[table]);
        self.push(out, Op::Embedding(table, ids.to_vec()), rg, "embedding_lookup")
    }

    /// One GRU step with gate blocks ordered `[reset | update | candidate]`:
    ///
    /// ```text
    /// r  = σ(x·Wir + bir + h·Whr + bhr)
    /// u  = σ(x·Wiu + biu + h·Whu + bhu)
    /// n  = tanh(x·Win + bin + r ⊙ (h·Whn + bhn))
    /// h' = (1 − u) ⊙ n + u ⊙ h
    /// ```
    pub fn gru_cell(&mut self, x: Var, h: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var) -> Result<Var, DiffError> {
        let xw = self.matmul(x, w_ih)?;
        let gi = self.add(xw, b_ih)?;
        self.gru_step(gi, h, w_hh, b_hh)
    }

    /// [`gru_cell`](Self::gru_cell) with the input half precomputed:
    /// `gi = x·W_ih + b_ih`, shape `m × 3·dh`. Lets a caller project a whole
    /// known input sequence with one matmul and recur only over `h`.
    pub fn gru_step(&mut self, gi: Var, h: Var, w_hh: Var, b_hh: Var) -> Result<Var, DiffError> {
        let (tgi, th) = (self.value(gi), self.value(h));
        let (twh, tbh) = (self.value(w_hh), self.value(b_hh));
        let (m, dh) = (th.rows(), th.cols());
        let g3 = 3 * dh;
        if tgi.shape() != [m, g3] || twh.shape() != [dh, g3] || tbh.shape() != [1, g3] {
            return Err(DiffError::Shape(format!(
                "gru_step: gi {:?}, h {:?}, w_hh {:?}, b_hh {:?}",
                tgi.shape(),
                th.shape(),
                twh.shape(),
                tbh.shape()
            )));
        }
        let gi_v = tgi.data();
        let mut gh = vec![0.0; m * g3];
        for r in 0..m {
            gh[r * g3..(r + 1) * g3].copy_from_slice(tbh.data());
        }
        matmul_acc(th.data(), twh.data(), &mut gh, m, dh, g3);

        let mut cache = GruCache {
            r: vec![0.0; m * dh],
            u: vec![0.0; m * dh],
            n: vec![0.0; m * dh],
            gh_n: vec![0.0; m * dh],
        };
        let mut out = vec![0.0; m * dh];
        for row in 0..m {
            for j in 0..dh {
                let o = row * g3;
                let r = sigmoid(gi_v[o + j] + gh[o + j]);
                let u = sigmoid(gi_v[o + dh + j] + gh[o + dh + j]);
                let ghn = gh[o + 2 * dh + j];
                let n = (gi_v[o + 2 * dh + j] + r * ghn).tanh();
                let k = row * dh + j;
                cache.r[k] = r;
                cache.u[k] = u;
                cache.n[k] = n;
                cache.gh_n[k] = ghn;
                out[k] = (1.0 - u) * n + u * th.data()[k];
            }
        }
        let out = Tensor::new(m, dh, out)?;
        let rg = self.rg(&[gi, h, w_hh, b_hh]);
        self.push(
            out,
            Op::Gru {
                gi,
                h,
                w_hh,
                b_hh,
                cache,
            },
            rg,
            "gru_step",
        )
    }

    /// Running sum down the rows: `out[t] = Σ_{s ≤ t} a[s]`.
    pub fn cumsum_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for row in 1..r {
            for j in 0..c {
                data[row * c + j] += data[(row - 1) * c + j];
            }
        }
        let out = Tensor::new(r, c, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::CumsumRows(a), rg, "cumsum_rows")
    }

    /// Gradient reversal: identity forward, `−λ · upstream` backward.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Result<Var, DiffError> {
        if !(lambda >= 0.0) {
            return Err(DiffError::Config(format!("GRL lambda must be >= 0, got {lambda}")));
        }
        let out = self.value(a).clone();
        let rg = self.rg(&[a]);
        self.push(out, Op::Grl(a, lambda), rg, "grl")
    }

    /// Normalized Gaussian-mixture weights over positions `0..n`, one row per
    /// row of the inputs.
    ///
    /// Inputs are `T × K`: mixture logits, means and standard deviations. Row
    /// `t` of the `T × n` result is `αⱼ ∝ Σₖ wₖ·exp(−(j − μₖ)² / 2σₖ²)` with
    /// `w = softmax(logits[t])`, evaluated in the log domain so that far-away
    /// means cannot underflow.
    pub fn gmm_weights(&mut self, logits: Var, mu: Var, sigma: Var, n: usize) -> Result<Var, DiffError> {
        let (tw, tm, ts) = (self.value(logits), self.value(mu), self.value(sigma));
        let (rows, k) = (tw.rows(), tw.cols());
        if tm.shape() != [rows, k] || ts.shape() != [rows, k] || n == 0 || k == 0 {
            return Err(DiffError::Shape(format!(
                "gmm_weights: logits {:?}, mu {:?}, sigma {:?}, n {n}",
                tw.shape(),
                tm.shape(),
                ts.shape()
            )));
        }
        if ts.data().iter().any(|&s| s <= 0.0) {
            return Err(DiffError::NonFinite("gmm_weights: sigma must be positive".into()));
        }
        let mut weights = vec![0.0; rows * k];
        let mut resp = vec![0.0; rows * n * k];
        let mut alpha = vec![0.0; rows * n];
        let mut log_phi = vec![0.0; n];
        let mut a = vec![0.0; k];
        for t in 0..rows {
            let lw = tw.row(t);
            let (mu_t, s_t) = (tm.row(t), ts.row(t));
            let lse_w = log_sum_exp(lw);
            for kk in 0..k {
                weights[t * k + kk] = (lw[kk] - lse_w).exp();
            }
            for j in 0..n {
                for kk in 0..k {
                    let d = j as f64 - mu_t[kk];
                    let s = s_t[kk];
                    a[kk] = lw[kk] - lse_w - d * d / (2.0 * s * s);
                }
                let l = log_sum_exp(&a);
                log_phi[j] = l;
                for kk in 0..k {
                    resp[(t * n + j) * k + kk] = (a[kk] - l).exp();
                }
            }
            let lse_phi = log_sum_exp(&log_phi);
            for j in 0..n {
                alpha[t * n + j] = (log_phi[j] - lse_phi).exp();
            }
        }
        let rg = self.rg(&[logits, mu, sigma]);
        self.push(
            Tensor::new(rows, n, alpha)?,
            Op::Gmm {
                logits,
                mu,
                sigma,
                weights,
                resp,
            },
            rg,
            "gmm_weights",
        )
    }

    /// Im2col for 1-D convolution over rows: `T × C → T_out × (kernel·C)` where
    /// output row `t` holds input rows `t + i·dilation − pad` for `i in 0..kernel`
    /// (zeros outside the input).
    pub fn unfold(&mut self, x: Var, kernel: usize, dilation: usize, pad: usize) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let (t, c) = (tx.rows(), tx.cols());
        let span = dilation * (kernel - 1);
        if kernel == 0 || dilation == 0 || t + 2 * pad <= span {
            return Err(DiffError::Shape(format!(
                "unfold: {t} rows too short for kernel {kernel} dilation {dilation}"
            )));
        }
        let t_out = t + 2 * pad - span;
        let mut data = vec![0.0; t_out * kernel * c];
        for row in 0..t_out {
            for i in 0..kernel {
                let src = (row + i * dilation) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    let dst = row * kernel * c + i * c;
                    data[dst..dst + c].copy_from_slice(tx.row(src as usize));
                }
            }
        }
        let out = Tensor::new(t_out, kernel * c, data)?;
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::Unfold {
                x,
                kernel,
                dilation,
                pad,
            },
            rg,
            "unfold",
        )
    }

    /// Backpropagate from a scalar output with seed gradient 1.
    pub fn backward(&self, output: Var) -> Result<Gradients, DiffError> {
        let t = self.value(output);
        if t.len() != 1 {
            return Err(DiffError::Shape(format!(
                "backward needs a scalar output, got {:?}",
                t.shape()
            )));
        }
        self.backward_with(output, Tensor::scalar(1.0))
    }

    /// Backpropagate an explicit upstream gradient from any node.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients, DiffError> {
        if seed.shape() != self.value(output).shape() {
            return Err(shape_err("backward seed", &seed, self.value(output)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape_of(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn acc_elementwise(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.wants(v) {
            return;
        }
        let (r, c) = self.shape_of(v);
        let buf = accumulate(grads, v, r, c);
        for (i, b) in buf.iter_mut().enumerate() {
            *b += f(i);
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.shape_of(*a);
                let n = self.shape_of(*b).1;
                if self.wants(*a) {
                    let bv = self.nodes[b.0].value.data();
                    let buf = accumulate(grads, *a, m, k);
                    matmul_bt_acc(gd, bv, buf, m, n, k);
                }
                if self.wants(*b) {
                    let av = self.nodes[a.0].value.data();
                    let buf = accumulate(grads, *b, k, n);
                    matmul_at_acc(av, gd, buf, m, k, n);
                }
            }
            Op::Add(a, b) => {
                self.acc_elementwise(grads, *a, |i| gd[i]);
                self.acc_elementwise(grads, *b, |i| gd[i]);
            }
            Op::AddRow(a, b) => {
                self.acc_elementwise(grads, *a, |i| gd[i]);
                if self.wants(*b) {
                    let c = self.shape_of(*b).1;
                    let buf = accumulate(grads, *b, 1, c);
                    for (i, v) in gd.iter().enumerate() {
                        buf[i % c] += v;
                    }
                }
            }
            Op::Sub(a, b) => {
                self.acc_elementwise(grads, *a, |i| gd[i]);
                self.acc_elementwise(grads, *b, |i| -gd[i]);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                self.acc_elementwise(grads, *a, |i| gd[i] * bv[i]);
                self.acc_elementwise(grads, *b, |i| gd[i] * av[i]);
            }
            Op::MulConst(a, k) => self.acc_elementwise(grads, *a, |i| gd[i] * k[i]),
            Op::Scale(a, k) => self.acc_elementwise(grads, *a, |i| gd[i] * k),
            Op::AddConst(a) => self.acc_elementwise(grads, *a, |i| gd[i]),
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape_of(*p);
                    if self.wants(*p) {
                        let buf = accumulate(grads, *p, r, c);
                        for row in 0..r {
                            for j in 0..c {
                                buf[row * c + j] += gd[row * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let (r, c) = self.shape_of(*a);
                    let w = node.value.cols();
                    let buf = accumulate(grads, *a, r, c);
                    for row in 0..r {
                        for j in 0..w {
                            buf[row * c + start + j] += gd[row * w + j];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if self.wants(*a) {
                    let (r, c) = self.shape_of(*a);
                    let buf = accumulate(grads, *a, r, c);
                    for (i, v) in gd.iter().enumerate() {
                        buf[start * c + i] += v;
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape_of(*p);
                    if self.wants(*p) {
                        let buf = accumulate(grads, *p, r, c);
                        for (b, v) in buf.iter_mut().zip(&gd[offset..offset + r * c]) {
                            *b += v;
                        }
                    }
                    offset += r * c;
                }
            }
            Op::Tanh(a) => self.acc_elementwise(grads, *a, |i| gd[i] * (1.0 - y[i] * y[i])),
            Op::Sigmoid(a) => self.acc_elementwise(grads, *a, |i| gd[i] * y[i] * (1.0 - y[i])),
            Op::Relu(a) => self.acc_elementwise(grads, *a, |i| if y[i] > 0.0 { gd[i] } else { 0.0 }),
            Op::Softplus(a) => {
                let av = self.nodes[a.0].value.data();
                self.acc_elementwise(grads, *a, |i| gd[i] * sigmoid(av[i]))
            }
            Op::Exp(a) => self.acc_elementwise(grads, *a, |i| gd[i] * y[i]),
            Op::Sqrt(a) => self.acc_elementwise(grads, *a, |i| gd[i] * 0.5 / y[i]),
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let c = node.value.cols();
                    let (r, _) = self.shape_of(*a);
                    let buf = accumulate(grads, *a, r, c);
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &gd[row * c..(row + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            buf[row * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => self.acc_elementwise(grads, *a, |_| gd[0]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                self.acc_elementwise(grads, *a, |_| gd[0] / n)
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape_of(*a);
                self.acc_elementwise(grads, *a, |i| gd[i % c] / r as f64)
            }
            Op::L1Loss(p, target) => {
                let pv = self.nodes[p.0].value.data();
                let n = pv.len() as f64;
                self.acc_elementwise(grads, *p, |i| {
                    let d = pv[i] - target[i];
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gd[0] * s / n
                })
            }
            Op::L2Loss(p, target) => {
                let pv = self.nodes[p.0].value.data();
                let n = pv.len() as f64;
                self.acc_elementwise(grads, *p, |i| gd[0] * 2.0 * (pv[i] - target[i]) / n)
            }
            Op::CrossEntropy(logits, labels, probs) => {
                let (m, c) = self.shape_of(*logits);
                self.acc_elementwise(grads, *logits, |i| {
                    let (row, col) = (i / c, i % c);
                    let onehot = if labels[row] == col { 1.0 } else { 0.0 };
                    gd[0] * (probs[i] - onehot) / m as f64
                })
            }
            Op::Embedding(table, ids) => {
                if self.wants(*table) {
                    let (r, c) = self.shape_of(*table);
                    let buf = accumulate(grads, *table, r, c);
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            buf[id * c + j] += gd[k * c + j];
                        }
                    }
                }
            }
            Op::Gru {
                gi,
                h,
                w_hh,
                b_hh,
                cache,
            } => self.backprop_gru(gd, [*gi, *h, *w_hh, *b_hh], cache, grads),
            Op::CumsumRows(a) => {
                if self.wants(*a) {
                    let (r, c) = self.shape_of(*a);
                    let mut run = vec![0.0; c];
                    let buf = accumulate(grads, *a, r, c);
                    for row in (0..r).rev() {
                        for j in 0..c {
                            run[j] += gd[row * c + j];
                            buf[row * c + j] += run[j];
                        }
                    }
                }
            }
            Op::Grl(a, lambda) => self.acc_elementwise(grads, *a, |i| -lambda * gd[i]),
            Op::Gmm {
                logits,
                mu,
                sigma,
                weights,
                resp,
            } => {
                let (rows, n) = (node.value.rows(), node.value.cols());
                let k = weights.len() / rows;
                let mu_v = self.nodes[mu.0].value.data();
                let sg_v = self.nodes[sigma.0].value.data();
                let mut g_logw = vec![0.0; rows * k];
                let mut g_mu = vec![0.0; rows * k];
                let mut g_sigma = vec![0.0; rows * k];
                for t in 0..rows {
                    let (yt, gt) = (&y[t * n..(t + 1) * n], &gd[t * n..(t + 1) * n]);
                    let dot: f64 = yt.iter().zip(gt).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        let gl = yt[j] * (gt[j] - dot);
                        for kk in 0..k {
                            let i = t * k + kk;
                            let ga = gl * resp[(t * n + j) * k + kk];
                            let d = j as f64 - mu_v[i];
                            let s2 = sg_v[i] * sg_v[i];
                            g_logw[i] += ga;
                            g_mu[i] += ga * d / s2;
                            g_sigma[i] += ga * d * d / (s2 * sg_v[i]);
                        }
                    }
                }
                let totals: Vec<f64> = g_logw.chunks(k).map(|c| c.iter().sum()).collect();
                self.acc_elementwise(grads, *logits, |i| g_logw[i] - weights[i] * totals[i / k]);
                self.acc_elementwise(grads, *mu, |i| g_mu[i]);
                self.acc_elementwise(grads, *sigma, |i| g_sigma[i]);
            }
            Op::Unfold {
                x,
                kernel,
                dilation,
                pad,
            } => {
                if self.wants(*x) {
                    let (t, c) = self.shape_of(*x);
                    let t_out = node.value.rows();
                    let buf = accumulate(grads, *x, t, c);
                    for row in 0..t_out {
                        for i in 0..*kernel {
                            let src = (row + i * dilation) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let s = src as usize * c;
                                let d = row * kernel * c + i * c;
                                for j in 0..c {
                                    buf[s + j] += gd[d + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backprop_gru(&self, gd: &[f64], vars: [Var; 4], cache: &GruCache, grads: &mut [Option<Tensor>]) {
        let [gi, h, w_hh, b_hh] = vars;
        let (m, dh) = self.shape_of(h);
        let g3 = 3 * dh;
        let hv = self.nodes[h.0].value.data();
        let mut d_gi = vec![0.0; m * g3];
        let mut d_gh = vec![0.0; m * g3];
        let mut d_h_direct = vec![0.0; m * dh];
        for row in 0..m {
            for j in 0..dh {
                let k = row * dh + j;
                let (r, u, n, ghn) = (cache.r[k], cache.u[k], cache.n[k], cache.gh_n[k]);
                let g = gd[k];
                let du = g * (hv[k] - n);
                let dn = g * (1.0 - u);
                d_h_direct[k] = g * u;
                let dpre_n = dn * (1.0 - n * n);
                let dr = dpre_n * ghn;
                let dpre_r = dr * r * (1.0 - r);
                let dpre_u = du * u * (1.0 - u);
                let o = row * g3;
                d_gi[o + j] = dpre_r;
                d_gi[o + dh + j] = dpre_u;
                d_gi[o + 2 * dh + j] = dpre_n;
                d_gh[o + j] = dpre_r;
                d_gh[o + dh + j] = dpre_u;
                d_gh[o + 2 * dh + j] = dpre_n * r;
            }
        }
        if self.wants(gi) {
            let buf = accumulate(grads, gi, m, g3);
            for (b, v) in buf.iter_mut().zip(&d_gi) {
                *b += v;
            }
        }
        if self.wants(h) {
            let w = self.nodes[w_hh.0].value.data();
            let buf = accumulate(grads, h, m, dh);
            for (b, v) in buf.iter_mut().zip(&d_h_direct) {
                *b += v;
            }
            matmul_bt_acc(&d_gh, w, buf, m, g3, dh);
        }
        if self.wants(w_hh) {
            let buf = accumulate(grads, w_hh, dh, g3);
            matmul_at_acc(hv, &d_gh, buf, m, dh, g3);
        }
        if self.wants(b_hh) {
            let buf = accumulate(grads, b_hh, 1, g3);
            for (i, v) in d_gh.iter().enumerate() {
                buf[i % g3] += v;
            }
        }
    }
}
