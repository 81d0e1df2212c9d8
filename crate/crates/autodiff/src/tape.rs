use crate::attention::{self, AttentionLayout, MacCounter};
use crate::error::{AutodiffError, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    StraightThrough(Var),
    CrossEntropySoft {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    SquaredDistance {
        x: Var,
        target: Vec<f64>,
        scale: f64,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of evaluated operations.
///
/// Values are immutable once recorded. A tape belongs to one training
/// context; [`Tape::clear`] drops every node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: MacCounter,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when no path connects it to the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.macs = MacCounter::default();
    }

    pub fn macs(&self) -> MacCounter {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.macs.matmul += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector of length `cols(x)` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * s).collect()).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(shape_err("mul_const", tx, c));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MulConst(x, c.data().to_vec()), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let value = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| kernels::gelu(*v)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(shape_err("layer_norm", tx, self.value(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let xr = &tx.data()[r * n..(r + 1) * n];
            let hr = &mut xhat[r * n..(r + 1) * n];
            inv_std.push(kernels::layer_norm_row(xr, hr, eps));
            for (j, o) in out[r * n..(r + 1) * n].iter_mut().enumerate() {
                *o = hr[j] * g[j] + b[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax where entries with `masked[i] == true` are excluded
    /// and come out as exact zeros.
    pub fn masked_softmax(&mut self, x: Var, masked: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if masked.len() != tx.numel() {
            return Err(AutodiffError::Shape {
                op: "masked_softmax",
                lhs: tx.shape().to_vec(),
                rhs: vec![masked.len()],
            });
        }
        let n = tx.cols();
        let mut out = vec![0.0; tx.numel()];
        for (r, ((xr, mr), or)) in tx
            .data()
            .chunks_exact(n)
            .zip(masked.chunks_exact(n))
            .zip(out.chunks_exact_mut(n))
            .enumerate()
        {
            let max = xr
                .iter()
                .zip(mr)
                .filter(|(_, m)| !**m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY && mr.iter().all(|m| *m) {
                return Err(AutodiffError::InvalidMask { row: r });
            }
            let mut sum = 0.0;
            for ((o, v), m) in or.iter_mut().zip(xr).zip(mr) {
                if !*m {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            or.iter_mut().for_each(|o| *o /= sum);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskedSoftmax(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.masked_softmax(x, &vec![false; n])
    }

    /// Fused multi-head causal self-attention; see [`AttentionLayout`].
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let tq = self.value(q);
        for other in [k, v] {
            if self.value(other).shape() != tq.shape() {
                return Err(shape_err("causal_attention", tq, self.value(other)));
            }
        }
        let width = tq.cols();
        if tq.shape().len() != 2 || tq.rows() != layout.rows() || layout.heads == 0 || !width.is_multiple_of(layout.heads) {
            return Err(AutodiffError::Shape {
                op: "causal_attention",
                lhs: tq.shape().to_vec(),
                rhs: vec![layout.groups, layout.seq_len, layout.heads],
            });
        }
        let (out, probs) = attention::forward(tq.data(), self.value(k).data(), self.value(v).data(), width, &layout);
        let value = Tensor::new(tq.shape().to_vec(), out)?;
        self.macs.record_attention(&layout, width);
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, layout, probs }, rg))
    }

    /// `out[i] = src[rows[i]]`.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let ts = self.value(src);
        let (n, c) = (ts.rows(), ts.cols());
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(AutodiffError::Index { index: r, len: n });
            }
            data.extend_from_slice(ts.row(r));
        }
        let value = Tensor::new(vec![rows.len(), c], data)?;
        let rg = self.rg(&[src]);
        Ok(self.push(value, Op::GatherRows(src, rows.to_vec()), rg))
    }

    /// `out` has `total` zero rows, then `out[rows[i]] += src[i]`.
    pub fn scatter_rows(&mut self, src: Var, rows: &[usize], total: usize) -> Result<Var> {
        let ts = self.value(src);
        let c = ts.cols();
        if rows.len() != ts.rows() {
            return Err(AutodiffError::Shape {
                op: "scatter_rows",
                lhs: ts.shape().to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let mut data = vec![0.0; total * c];
        for (i, &r) in rows.iter().enumerate() {
            if r >= total {
                return Err(AutodiffError::Index { index: r, len: total });
            }
            for (o, v) in data[r * c..(r + 1) * c].iter_mut().zip(ts.row(i)) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![total, c], data)?;
        let rg = self.rg(&[src]);
        Ok(self.push(value, Op::ScatterRows(src, rows.to_vec()), rg))
    }

    /// Forward value is `replacement`; the backward pass hands the incoming
    /// gradient to `z` unchanged.
    pub fn straight_through(&mut self, z: Var, replacement: &Tensor) -> Result<Var> {
        let tz = self.value(z);
        if tz.shape() != replacement.shape() {
            return Err(shape_err("straight_through", tz, replacement));
        }
        let rg = self.rg(&[z]);
        Ok(self.push(replacement.clone(), Op::StraightThrough(z), rg))
    }

    /// Mean over rows of `-Σ_k target_k · log_softmax(logits)_k`.
    pub fn cross_entropy_soft(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape() != target.shape() {
            return Err(shape_err("cross_entropy_soft", tl, target));
        }
        let k = tl.cols();
        for (r, row) in target.data().chunks_exact(k).enumerate() {
            let mut sum = 0.0;
            for &t in row {
                if !(t >= 0.0 && t.is_finite()) {
                    return Err(AutodiffError::InvalidTarget(format!("row {r} has entry {t}")));
                }
                sum += t;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(AutodiffError::InvalidTarget(format!("row {r} sums to {sum}")));
            }
        }
        let rows = tl.rows();
        let mut logp = vec![0.0; k];
        let mut probs = vec![0.0; tl.numel()];
        let mut total = 0.0;
        for r in 0..rows {
            kernels::log_softmax(tl.row(r), &mut logp);
            let mut row_loss = 0.0;
            for j in 0..k {
                row_loss -= target.data()[r * k + j] * logp[j];
                probs[r * k + j] = logp[j].exp();
            }
            total += row_loss;
        }
        let value = Tensor::scalar(total / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropySoft {
                logits,
                target: target.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `scale · Σ (x − target)²` against a constant target.
    pub fn squared_distance(&mut self, x: Var, target: &Tensor, scale: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != target.shape() {
            return Err(shape_err("squared_distance", tx, target));
        }
        let s = kernels::squared_distance(tx.data(), target.data()) * scale;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SquaredDistance {
                x,
                target: target.data().to_vec(),
                scale,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse-mode sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.value(output).shape().to_vec();
        if self.value(output).numel() != 1 {
            return Err(AutodiffError::NotScalar(out_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let ga = accumulate(grads, *a, m * k);
                    kernels::matmul_nt_acc(g, tb.data(), ga, m, n, k);
                }
                if self.wants(*b) {
                    let gb = accumulate(grads, *b, k * n);
                    kernels::matmul_tn_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.wants(*b) {
                    let gb = accumulate(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let tb = self.value(*b).data();
                    let ga = accumulate(grads, *a, g.len());
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(tb) {
                        *x += y * w;
                    }
                }
                if self.wants(*b) {
                    let ta = self.value(*a).data();
                    let gb = accumulate(grads, *b, g.len());
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(ta) {
                        *x += y * w;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).numel();
                    let gb = accumulate(grads, *bias, c);
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
                }
            }
            Op::MulConst(x, c) => {
                if self.wants(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    for ((a, b), m) in gx.iter_mut().zip(g).zip(c) {
                        *a += b * m;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x).data();
                    let gx = accumulate(grads, *x, g.len());
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(tx) {
                        *a += b * kernels::gelu_grad(*v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).numel();
                if self.wants(*gain) {
                    let gg = accumulate(grads, *gain, n);
                    for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = accumulate(grads, *bias, n);
                    for grow in g.chunks_exact(n) {
                        gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                }
                if self.wants(*x) {
                    let gain_v = self.value(*gain).data();
                    let gx = accumulate(grads, *x, g.len());
                    let mut dh = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            dh[j] = grow[j] * gain_v[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        let s = inv_std[r];
                        for j in 0..n {
                            gx[r * n + j] += s * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let gx = accumulate(grads, *x, g.len());
                    for ((yr, gr), xr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                        let dotp = kernels::dot(yr, gr);
                        for j in 0..n {
                            xr[j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                let tq = self.value(*q);
                let len = tq.numel();
                let width = tq.cols();
                let mut gq = vec![0.0; len];
                let mut gk = vec![0.0; len];
                let mut gv = vec![0.0; len];
                attention::backward(
                    tq.data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    width,
                    layout,
                    &mut gq,
                    &mut gk,
                    &mut gv,
                );
                for (var, part) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.wants(var) {
                        let acc = accumulate(grads, var, len);
                        acc.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::GatherRows(src, rows) => {
                if self.wants(*src) {
                    let ts = self.value(*src);
                    let c = ts.cols();
                    let gs = accumulate(grads, *src, ts.numel());
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gs[r * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::ScatterRows(src, rows) => {
                if self.wants(*src) {
                    let ts = self.value(*src);
                    let c = ts.cols();
                    let gs = accumulate(grads, *src, ts.numel());
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gs[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::StraightThrough(z) => {
                if self.wants(*z) {
                    let gz = accumulate(grads, *z, g.len());
                    gz.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::CrossEntropySoft { logits, target, probs } => {
                if self.wants(*logits) {
                    let rows = self.value(*logits).rows() as f64;
                    let s = g[0] / rows;
                    let gl = accumulate(grads, *logits, probs.len());
                    for ((a, p), t) in gl.iter_mut().zip(probs).zip(target) {
                        *a += s * (p - t);
                    }
                }
            }
            Op::SquaredDistance { x, target, scale } => {
                if self.wants(*x) {
                    let tx = self.value(*x).data();
                    let s = 2.0 * scale * g[0];
                    let gx = accumulate(grads, *x, tx.len());
                    for ((a, v), t) in gx.iter_mut().zip(tx).zip(target) {
                        *a += s * (v - t);
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    let gx = accumulate(grads, *x, n);
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }
}
