//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks
//! the tape in reverse and accumulates `∂loss/∂node` into every node that
//! (transitively) depends on a leaf created with `requires_grad = true`.
//! Nodes that do not depend on such a leaf are skipped entirely, so a
//! frozen sub-network costs nothing on the way back.
//!
//! Graphs are cheap and single-threaded: the training loop builds one per
//! example, borrowing parameter tensors instead of copying them.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a 2-D convolution expressed as patch extraction.
///
/// Activations are stored as `[height*width, channels]` (pixel-major).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(out_row, out_col, in_index)` for every non-padding tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                for ky in 0..self.kernel {
                    let y = (oy * self.stride + ky) as isize - self.pad as isize;
                    if y < 0 || y >= self.height as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let x = (ox * self.stride + kx) as isize - self.pad as isize;
                        if x < 0 || x >= self.width as isize {
                            continue;
                        }
                        let pix = y as usize * self.width + x as usize;
                        let col0 = (ky * self.kernel + kx) * self.channels;
                        for c in 0..self.channels {
                            f(row, col0 + c, pix * self.channels + c);
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRow(Var, Var),
    MulConst(Var, Vec<f32>),
    Gelu(Var),
    Map {
        x: Var,
        df: fn(f32) -> f32,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax {
        x: Var,
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
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f32>,
        count: usize,
    },
    BceLogits {
        logit: Var,
        target: f32,
    },
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Tensor>>,
}

impl<'p> Graph<'p> {
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
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// A leaf that borrows its value instead of copying it.
    pub fn leaf_ref(&mut self, value: &'p Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to leaf `v`;
    /// `None` if `v` is not trainable or not connected to the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(Cow::Owned(value), op, rg)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    // ----- forward operations ------------------------------------------

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bad = || Error::shape("matmul", ta.shape(), tb.shape());
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(bad());
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(bad());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.derived(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let value = self.value(x).scale(s);
        self.derived(value, Op::Scale(x, s), &[x])
    }

    /// `x[m×n] + bias[n]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != n {
            return Err(Error::shape("add_row", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let data = tx
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.derived(value, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f32>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::shape("mul_const", tx.shape(), &[mask.len()]));
        }
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.derived(value, Op::MulConst(x, mask), &[x]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044_715 * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(tx.shape(), data).expect("same shape");
        self.derived(value, Op::Gelu(x), &[x])
    }

    /// Elementwise `f` whose backward multiplies by `df(x)`. The caller is
    /// responsible for `df` actually being the derivative of `f`.
    pub fn map(&mut self, x: Var, f: fn(f32) -> f32, df: fn(f32) -> f32) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(tx.shape(), data).expect("same shape");
        self.derived(value, Op::Map { x, df }, &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length n.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + f64::from(LAYER_NORM_EPS)).sqrt();
            rstd[r] = rs as f32;
            for j in 0..n {
                let h = ((f64::from(row[j]) - mean) * rs) as f32;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        Ok(self.derived(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise stable softmax. With `causal`, entry `(i, j)` for `j > i`
    /// is masked out (exactly zero).
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let tx = self.value(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let valid = if causal { (r + 1).min(n) } else { n };
            let row = &tx.data()[r * n..r * n + valid];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[r * n + j] = e;
                sum += f64::from(e);
            }
            for o in &mut out[r * n..r * n + valid] {
                *o = (f64::from(*o) / sum) as f32;
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        Ok(self.derived(value, Op::Softmax { x }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > n {
            return Err(Error::shape("slice_cols", &[m, n], &[start, len]));
        }
        let tx = self.value(x);
        let data = tx
            .data()
            .chunks(n.max(1))
            .take(m)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(&[m, len], data)?;
        Ok(self.derived(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(&[m, total], data)?;
        Ok(self.derived(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > m {
            return Err(Error::shape("slice_rows", &[m, n], &[start, len]));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(&[len, n], data)?;
        Ok(self.derived(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let (_, n) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pn != n {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, n], data)?;
        Ok(self.derived(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Column means: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if m == 0 {
            return Err(Error::Input("mean over zero rows".into()));
        }
        let mut out = vec![0.0f64; n];
        for row in self.value(x).data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += f64::from(v);
            }
        }
        let data = out.into_iter().map(|s| (s / m as f64) as f32).collect();
        let value = Tensor::new(&[1, n], data)?;
        Ok(self.derived(value, Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| f64::from(v)).sum();
        self.derived(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims2(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "row id {bad} out of range for table of {rows} rows"
            )));
        }
        let t = self.value(table).data();
        let data = ids
            .iter()
            .flat_map(|&i| t[i * n..(i + 1) * n].iter().copied())
            .collect();
        let value = Tensor::new(&[ids.len(), n], data)?;
        Ok(self.derived(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean token-level cross-entropy of `logits: T×V` against `targets`,
    /// skipping positions whose target equals `ignore`. Accumulates in f64.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let (t, v) = self.dims2(logits)?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", &[t, v], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y != ignore && y >= v) {
            return Err(Error::Input(format!("target {bad} out of range for vocabulary {v}")));
        }
        let tl = self.value(logits).data();
        let mut probs = vec![0.0f32; t * v];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &y) in targets.iter().enumerate() {
            let row = &tl[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = row.iter().map(|&x| f64::from(x - max).exp()).sum();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (f64::from(x - max).exp() / z) as f32;
            }
            if y != ignore {
                total += z.ln() - f64::from(row[y] - max);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let value = Tensor::scalar((total / count as f64) as f32);
        Ok(self.derived(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Binary cross-entropy on a single logit, target in {0, 1}.
    pub fn bce_with_logits(&mut self, logit: Var, target: f32) -> Result<Var> {
        let tl = self.value(logit);
        if tl.numel() != 1 {
            return Err(Error::shape("bce_with_logits", tl.shape(), &[1]));
        }
        let z = f64::from(tl.item());
        let y = f64::from(target);
        let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        Ok(self.derived(Tensor::scalar(loss as f32), Op::BceLogits { logit, target }, &[logit]))
    }

    /// Patch extraction for convolution: `[h*w, c] → [oh*ow, k*k*c]`.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let tx = self.value(x);
        let expect = [geom.height * geom.width, geom.channels];
        if tx.shape() != expect {
            return Err(Error::shape("im2col", tx.shape(), &expect));
        }
        let rows = geom.out_height() * geom.out_width();
        let cols = geom.patch_len();
        let mut out = vec![0.0; rows * cols];
        let src = tx.data();
        geom.for_each_tap(|r, c, i| out[r * cols + c] = src[i]);
        let value = Tensor::new(&[rows, cols], out)?;
        Ok(self.derived(value, Op::Im2Col { x, geom }, &[x]))
    }

    // ----- reverse pass -------------------------------------------------

    /// Populates gradients for every `requires_grad` leaf connected to
    /// `loss`. Replaces the gradients of any previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let Graph { nodes, grads } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::ones(&shape));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let g = g.data();
            let rg = |v: &Var| nodes[v.0].requires_grad;
            let val = |v: &Var| -> &Tensor { &nodes[v.0].value };

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b, trans_b } => {
                    let (ta, tb) = (val(a), val(b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = node.value.shape()[1];
                    if rg(a) {
                        let da = buf(grads, nodes, *a);
                        // da = g · op(b)ᵀ
                        gemm(m, n, k, g, false, tb.data(), !trans_b, da, true);
                    }
                    if rg(b) {
                        let db = buf(grads, nodes, *b);
                        if *trans_b {
                            gemm(n, m, k, g, true, ta.data(), false, db, true);
                        } else {
                            gemm(k, m, n, ta.data(), true, g, false, db, true);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if rg(v) {
                            axpy(buf(grads, nodes, *v), g, 1.0);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        let other = val(b).data();
                        for ((d, gi), o) in buf(grads, nodes, *a).iter_mut().zip(g).zip(other) {
                            *d += gi * o;
                        }
                    }
                    if rg(b) {
                        let other = val(a).data();
                        for ((d, gi), o) in buf(grads, nodes, *b).iter_mut().zip(g).zip(other) {
                            *d += gi * o;
                        }
                    }
                }
                Op::Scale(x, s) => axpy(buf(grads, nodes, *x), g, *s),
                Op::AddRow(x, bias) => {
                    if rg(x) {
                        axpy(buf(grads, nodes, *x), g, 1.0);
                    }
                    if rg(bias) {
                        let db = buf(grads, nodes, *bias);
                        let n = db.len();
                        for row in g.chunks(n) {
                            axpy(db, row, 1.0);
                        }
                    }
                }
                Op::MulConst(x, mask) => {
                    for ((d, gi), m) in buf(grads, nodes, *x).iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
                Op::Gelu(x) => {
                    let xs = val(x).data();
                    for ((d, gi), &v) in buf(grads, nodes, *x).iter_mut().zip(g).zip(xs) {
                        let t = (GELU_C * (v + 0.044_715 * v * v * v)).tanh();
                        let dt = GELU_C * (1.0 + 3.0 * 0.044_715 * v * v);
                        *d += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dt);
                    }
                }
                Op::Map { x, df } => {
                    let xs = val(x).data();
                    for ((d, gi), &v) in buf(grads, nodes, *x).iter_mut().zip(g).zip(xs) {
                        *d += gi * df(v);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let n = val(gamma).numel();
                    if rg(gamma) {
                        let dg = buf(grads, nodes, *gamma);
                        for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] += grow[j] * hrow[j];
                            }
                        }
                    }
                    if rg(beta) {
                        let db = buf(grads, nodes, *beta);
                        for grow in g.chunks(n) {
                            axpy(db, grow, 1.0);
                        }
                    }
                    if rg(x) {
                        let gam = val(gamma).data();
                        let dx = buf(grads, nodes, *x);
                        let mut dh = vec![0.0f32; n];
                        for (r, rs) in rstd.iter().enumerate() {
                            let grow = &g[r * n..(r + 1) * n];
                            let hrow = &xhat[r * n..(r + 1) * n];
                            let mut mean_dh = 0.0f64;
                            let mut mean_dh_h = 0.0f64;
                            for j in 0..n {
                                dh[j] = grow[j] * gam[j];
                                mean_dh += f64::from(dh[j]);
                                mean_dh_h += f64::from(dh[j] * hrow[j]);
                            }
                            let mean_dh = (mean_dh / n as f64) as f32;
                            let mean_dh_h = (mean_dh_h / n as f64) as f32;
                            for j in 0..n {
                                dx[r * n + j] += rs * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                            }
                        }
                    }
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let n = node.value.shape()[1];
                    let dx = buf(grads, nodes, *x);
                    for r in 0..y.len() / n.max(1) {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let n = val(x).shape()[1];
                    let len = node.value.shape()[1];
                    let dx = buf(grads, nodes, *x);
                    for (r, grow) in g.chunks(len.max(1)).enumerate() {
                        axpy(&mut dx[r * n + start..r * n + start + len], grow, 1.0);
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = val(p).shape()[1];
                        if rg(p) {
                            let dp = buf(grads, nodes, *p);
                            for (r, drow) in dp.chunks_mut(w.max(1)).enumerate() {
                                axpy(drow, &g[r * total + offset..r * total + offset + w], 1.0);
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let n = node.value.shape()[1];
                    let dx = buf(grads, nodes, *x);
                    axpy(&mut dx[start * n..start * n + g.len()], g, 1.0);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = val(p).numel();
                        if rg(p) {
                            axpy(buf(grads, nodes, *p), &g[offset..offset + len], 1.0);
                        }
                        offset += len;
                    }
                }
                Op::MeanRows(x) => {
                    let m = val(x).shape()[0];
                    let dx = buf(grads, nodes, *x);
                    let n = g.len();
                    for drow in dx.chunks_mut(n) {
                        axpy(drow, g, 1.0 / m as f32);
                    }
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    for d in buf(grads, nodes, *x) {
                        *d += g0;
                    }
                }
                Op::Gather { table, ids } => {
                    let n = node.value.shape()[1];
                    let dt = buf(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * n..(id + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    probs,
                    count,
                } => {
                    let v = val(logits).shape()[1];
                    let scale = g[0] / *count as f32;
                    let dl = buf(grads, nodes, *logits);
                    for (r, &y) in targets.iter().enumerate() {
                        if y == *ignore {
                            continue;
                        }
                        let row = &mut dl[r * v..(r + 1) * v];
                        for (d, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *d += scale * p;
                        }
                        row[y] -= scale;
                    }
                }
                Op::BceLogits { logit, target } => {
                    let z = val(logit).item();
                    let s = 1.0 / (1.0 + (-z).exp());
                    buf(grads, nodes, *logit)[0] += g[0] * (s - target);
                }
                Op::Im2Col { x, geom } => {
                    let cols = geom.patch_len();
                    let dx = buf(grads, nodes, *x);
                    geom.for_each_tap(|r, c, i| dx[i] += g[r * cols + c]);
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffer for `v`, zero-initialized on first use.
fn buf<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node<'_>], v: Var) -> &'a mut [f32] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
        .data_mut()
}

fn axpy(dst: &mut [f32], src: &[f32], alpha: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
