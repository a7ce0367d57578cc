//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value plus whatever
//! it needs for the backward rule. Nodes are only ever appended after their
//! inputs, so the tape is topologically ordered by construction and a single
//! reverse sweep visits each node once, summing gradients at fan-out points.

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask; `true` marks an allowed (unmasked) entry.
///
/// A mask with `rows` rows applies to every consecutive group of `rows` score
/// rows, so one mask covers all sequences of a block-batched score matrix.
#[derive(Debug, Clone, PartialEq)]
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
                left: vec![rows, cols],
                right: vec![allowed.len()],
            });
        }
        Ok(Mask {
            rows,
            cols,
            allowed,
        })
    }

    /// Lower-triangular mask: row `t` may see columns `0..=t`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|i| i % n <= i / n).collect();
        Mask {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allowed[(r % self.rows) * self.cols + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a[B*p x q] . b[B*q x r]`, block-diagonal over `blocks` when `b` is per-block.
    MatMul {
        a: Var,
        b: Var,
        blocks: usize,
    },
    /// `a[B*p x q] . b[B*r x q]^T` per block.
    MatMulNt {
        a: Var,
        b: Var,
        blocks: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVector(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Activate(Var, Activation),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node on a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; the backward pass produces its gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is propagated into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.block_matmul(a, b, 1)
    }

    /// Per-block product: `a` holds `blocks` stacked `p x q` matrices and `b`
    /// holds `blocks` stacked `q x r` matrices.
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let err = || Error::Shape {
            op: "matmul",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        };
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(err());
        }
        if av.rows() % blocks != 0 || bv.rows() % blocks != 0 {
            return Err(err());
        }
        let (p, q, r) = (av.rows() / blocks, av.cols(), bv.cols());
        if bv.rows() / blocks != q {
            return Err(err());
        }
        let mut out = vec![0.0; blocks * p * r];
        for blk in 0..blocks {
            matmul_into(
                &av.data()[blk * p * q..(blk + 1) * p * q],
                &bv.data()[blk * q * r..(blk + 1) * q * r],
                &mut out[blk * p * r..(blk + 1) * p * r],
                p,
                q,
                r,
            );
        }
        let value = Tensor::matrix(blocks * p, r, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, blocks }, rg))
    }

    /// Per-block `a . b^T`.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let err = || Error::Shape {
            op: "matmul_nt",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        };
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(err());
        }
        if av.rows() % blocks != 0 || bv.rows() % blocks != 0 {
            return Err(err());
        }
        let (p, q, r) = (av.rows() / blocks, av.cols(), bv.rows() / blocks);
        let mut out = vec![0.0; blocks * p * r];
        for blk in 0..blocks {
            matmul_nt_into(
                &av.data()[blk * p * q..(blk + 1) * p * q],
                &bv.data()[blk * r * q..(blk + 1) * r * q],
                &mut out[blk * p * r..(blk + 1) * p * r],
                p,
                q,
                r,
            );
        }
        let value = Tensor::matrix(blocks * p, r, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNt { a, b, blocks }, rg))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.block_matmul_nt(a, b, 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "mul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row_vector(&mut self, a: Var, v: Var) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        if vv.len() != av.cols() {
            return Err(Error::Shape {
                op: "add_row_vector",
                left: av.shape().to_vec(),
                right: vv.shape().to_vec(),
            });
        }
        let c = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vv.data()[i % c])
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(value, Op::AddRowVector(a, v), rg))
    }

    /// Row-wise softmax with per-row max subtraction. Masked entries are
    /// treated as `-inf` and come out exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let value = softmax_rows_masked(self.value(a), mask)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Per-row normalization by mean and population variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let m = xv.cols();
        if gv.len() != m || bv.len() != m {
            return Err(Error::Shape {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let n = xv.rows();
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out[i * m + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
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

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).map(|v| act.apply(v));
        let rg = self.rg(a);
        self.push(value, Op::Activate(a, act), rg)
    }

    /// Selects rows of `table` by id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, m) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Input(format!(
                "id {bad} out of range for table with {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::matrix(ids.len(), m, out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Tensor::concat_cols(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Weighted mean token cross-entropy of `logits[N x V]` against `targets`.
    ///
    /// Rows with zero weight do not contribute. The result is a 1-element tensor.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = (lv.rows(), lv.cols());
        if targets.len() != n || weights.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!(
                "target {bad} out of range for {v} classes"
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Input(
                "cross-entropy needs positive total weight".into(),
            ));
        }
        let probs = softmax_rows_masked(lv, None)?.into_data();
        let mut loss = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += weights[i] * (lse - row[targets[i]]);
        }
        let value = Tensor::vector(vec![loss / total]);
        let rg = self.rg(logits);
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::vector(vec![self.value(a).sum()]);
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Gradients of the single-element `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, blocks } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (p, q, r) = (av.rows() / blocks, av.cols(), bv.cols());
                self.accumulate(grads, a, |ga| {
                    for blk in 0..blocks {
                        matmul_nt_into(
                            &g[blk * p * r..(blk + 1) * p * r],
                            &bv.data()[blk * q * r..(blk + 1) * q * r],
                            &mut ga[blk * p * q..(blk + 1) * p * q],
                            p,
                            r,
                            q,
                        );
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for blk in 0..blocks {
                        matmul_tn_into(
                            &av.data()[blk * p * q..(blk + 1) * p * q],
                            &g[blk * p * r..(blk + 1) * p * r],
                            &mut gb[blk * q * r..(blk + 1) * q * r],
                            p,
                            q,
                            r,
                        );
                    }
                });
            }
            &Op::MatMulNt { a, b, blocks } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (p, q, r) = (av.rows() / blocks, av.cols(), bv.rows() / blocks);
                self.accumulate(grads, a, |ga| {
                    for blk in 0..blocks {
                        matmul_into(
                            &g[blk * p * r..(blk + 1) * p * r],
                            &bv.data()[blk * r * q..(blk + 1) * r * q],
                            &mut ga[blk * p * q..(blk + 1) * p * q],
                            p,
                            r,
                            q,
                        );
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for blk in 0..blocks {
                        matmul_tn_into(
                            &g[blk * p * r..(blk + 1) * p * r],
                            &av.data()[blk * p * q..(blk + 1) * p * q],
                            &mut gb[blk * r * q..(blk + 1) * r * q],
                            p,
                            r,
                            q,
                        );
                    }
                });
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(grads, v, |gv| add_assign(gv, g));
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            &Op::Scale(a, c) => {
                self.accumulate(grads, a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                });
            }
            &Op::AddRowVector(a, v) => {
                self.accumulate(grads, a, |ga| add_assign(ga, g));
                let c = self.value(v).len();
                self.accumulate(grads, v, |gv| {
                    for (i, &y) in g.iter().enumerate() {
                        gv[i % c] += y;
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                self.accumulate(grads, a, |ga| {
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let m = node.value.cols();
                let n = node.value.rows();
                let gamma = self.value(*gain).data();
                self.accumulate(grads, *gain, |gg| {
                    for i in 0..n {
                        for j in 0..m {
                            gg[j] += g[i * m + j] * xhat[i * m + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for i in 0..n {
                        for j in 0..m {
                            gb[j] += g[i * m + j];
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; m];
                    for i in 0..n {
                        let xh = &xhat[i * m..(i + 1) * m];
                        for j in 0..m {
                            dxhat[j] = g[i * m + j] * gamma[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dx = dot(&dxhat, xh) / m as f64;
                        for j in 0..m {
                            gx[i * m + j] += inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            &Op::Activate(a, act) => {
                let av = self.value(a).data();
                self.accumulate(grads, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * act.derivative(av[i]);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let m = node.value.cols();
                self.accumulate(grads, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_assign(&mut gt[id * m..(id + 1) * m], &g[i * m..(i + 1) * m]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for i in 0..node.value.rows() {
                            add_assign(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.value(*logits).cols();
                self.accumulate(grads, *logits, |gl| {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * v + j] += g[0] * w * (probs[i * v + j] - onehot);
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                self.accumulate(grads, a, |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                });
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-wise softmax of a plain tensor, honoring an optional mask.
pub fn softmax_rows_masked(m: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
    let (n, k) = (m.rows(), m.cols());
    if let Some(mask) = mask {
        if mask.cols != k || n % mask.rows != 0 {
            return Err(Error::Shape {
                op: "softmax_rows",
                left: m.shape().to_vec(),
                right: vec![mask.rows, mask.cols],
            });
        }
    }
    let allowed = |i: usize, j: usize| mask.is_none_or(|mk| mk.allows(i, j));
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = m.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed(i, j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let mut z = 0.0;
        for j in 0..k {
            if allowed(i, j) {
                let e = (row[j] - max).exp();
                out[i * k + j] = e;
                z += e;
            }
        }
        for v in &mut out[i * k..(i + 1) * k] {
            *v /= z;
        }
    }
    Tensor::new(m.shape().to_vec(), out)
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    softmax_rows_masked(m, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![5.0]])).unwrap();
        assert_eq!(s.data(), &[1.0]);
        // exp-normalize evaluated independently: e^k / (e + e^2 + e^3)
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let want: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / z).collect();
        let s = softmax_rows(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]])).unwrap();
        for (got, (w, frozen)) in s
            .data()
            .iter()
            .zip(want.iter().zip([0.090031, 0.244728, 0.665241]))
        {
            assert!((got - w).abs() < 1e-15);
            assert!((got - frozen).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_large_entries_do_not_overflow() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 1000.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mask = Mask::new(1, 2, vec![false, false]).unwrap();
        let err = softmax_rows_masked(&Tensor::zeros(&[1, 2]), Some(&mask)).unwrap_err();
        assert_eq!(err, Error::FullyMaskedRow { row: 0 });
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let mut rng = RngStream::new(0, 0);
        let x = rng.uniform_tensor(&[6, 3], -2.0, 2.0);
        let s = softmax_rows_masked(&x, Some(&Mask::causal(3))).unwrap();
        for i in 0..6 {
            for j in 0..3 {
                if j > i % 3 {
                    assert_eq!(s.get(i, j), 0.0);
                }
            }
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
            let t = Tensor::matrix(3, 4, vals).unwrap();
            let s = softmax_rows(&t).unwrap();
            for i in 0..3 {
                prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn softmax_is_shift_invariant(vals in prop::collection::vec(-10.0f64..10.0, 8), c in -30.0f64..30.0) {
            let t = Tensor::matrix(2, 4, vals).unwrap();
            let a = softmax_rows(&t).unwrap();
            let b = softmax_rows(&t.map(|v| v + c)).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }

    fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor {
        rng.uniform_tensor(shape, -2.0, 2.0)
    }

    /// Every primitive's backward rule against central differences, 100 seeds.
    #[test]
    fn primitive_backward_rules_match_finite_differences() {
        type Case = fn(&mut Tape, Var, &Tensor) -> Var;
        let cases: Vec<(&str, Vec<usize>, Case)> = vec![
            ("matmul_lhs", vec![3, 4], |t, x, w| {
                let w = t.constant(w.reshape_to(&[4, 2]));
                let y = t.matmul(x, w).unwrap();
                let y2 = t.mul(y, y).unwrap();
                t.sum(y2)
            }),
            ("matmul_rhs", vec![4, 2], |t, x, w| {
                let a = t.constant(w.reshape_to(&[3, 4]));
                let y = t.matmul(a, x).unwrap();
                let y2 = t.mul(y, y).unwrap();
                t.sum(y2)
            }),
            ("block_matmul_nt", vec![4, 3], |t, x, w| {
                let b = t.constant(w.reshape_to(&[6, 3]));
                let y = t.block_matmul_nt(x, b, 2).unwrap();
                let y2 = t.mul(y, y).unwrap();
                t.sum(y2)
            }),
            ("block_matmul_rhs", vec![6, 2], |t, x, w| {
                let a = t.constant(w.reshape_to(&[4, 3]));
                let y = t.block_matmul(a, x, 2).unwrap();
                let y2 = t.mul(y, y).unwrap();
                t.sum(y2)
            }),
            ("softmax", vec![3, 4], |t, x, w| {
                let s = t.softmax_rows(x, None).unwrap();
                let c = t.constant(w.reshape_to(&[3, 4]));
                let y = t.mul(s, c).unwrap();
                t.sum(y)
            }),
            ("softmax_causal", vec![4, 2], |t, x, w| {
                let s = t.softmax_rows(x, Some(&Mask::causal(2))).unwrap();
                let c = t.constant(w.reshape_to(&[4, 2]));
                let y = t.mul(s, c).unwrap();
                t.sum(y)
            }),
            ("layer_norm", vec![3, 5], |t, x, w| {
                let g = t.constant(Tensor::vector(w.data()[..5].to_vec()));
                let b = t.constant(Tensor::vector(w.data()[5..10].to_vec()));
                let y = t.layer_norm(x, g, b, 1e-5).unwrap();
                let c = t.constant(w.reshape_to(&[3, 5]));
                let y = t.mul(y, c).unwrap();
                t.sum(y)
            }),
            ("layer_norm_gain", vec![5], |t, g, w| {
                let x = t.constant(w.reshape_to(&[3, 5]));
                let b = t.constant(Tensor::vector(w.data()[..5].to_vec()));
                let y = t.layer_norm(x, g, b, 1e-5).unwrap();
                let y2 = t.mul(y, y).unwrap();
                t.sum(y2)
            }),
            ("gelu", vec![3, 4], |t, x, w| {
                let y = t.activate(x, Activation::Gelu);
                let c = t.constant(w.reshape_to(&[3, 4]));
                let y = t.mul(y, c).unwrap();
                t.sum(y)
            }),
            ("gather", vec![5, 3], |t, x, w| {
                let y = t.gather(x, &[0, 2, 2, 4]).unwrap();
                let c = t.constant(w.reshape_to(&[4, 3]));
                let y = t.mul(y, c).unwrap();
                let y = t.mul(y, y).unwrap();
                t.sum(y)
            }),
            ("concat_scale_rowvec", vec![3, 2], |t, x, w| {
                let y = t.scale(x, -1.5);
                let c = t.concat_cols(&[x, y]).unwrap();
                let v = t.constant(Tensor::vector(w.data()[..4].to_vec()));
                let z = t.add_row_vector(c, v).unwrap();
                let z = t.mul(z, z).unwrap();
                t.sum(z)
            }),
            ("cross_entropy", vec![3, 5], |t, x, _| {
                t.cross_entropy(x, &[1, 4, 0], &[1.0, 0.0, 2.0]).unwrap()
            }),
        ];
        for (name, shape, f) in cases {
            for seed in 0..100u64 {
                let mut rng = RngStream::new(seed, 11);
                let x = random(&mut rng, &shape);
                let w = random(&mut rng, &[24]);
                let err = grad_check(|t, v| Ok(f(t, v, &w)), &x, 1e-5).unwrap();
                assert!(err <= 1e-6, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn relu_backward_away_from_kink() {
        let x = Tensor::from_rows(&[vec![-1.3, 0.7, 2.0, -0.2]]);
        let err = grad_check(
            |t, v| {
                let y = t.activate(v, Activation::Relu);
                let y = t.mul(y, y).unwrap();
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8);
    }

    #[test]
    fn fan_out_gradients_are_summed() {
        let mut rng = RngStream::new(4, 0);
        let x = random(&mut rng, &[2, 3]);
        let w = random(&mut rng, &[3, 3]);
        // f(x) = sum(x W), g(x) = sum(x * x); d/dx [f + g] = rowsum(W) + 2x
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let wv = t.constant(w.clone());
        let f = t.matmul(xv, wv).unwrap();
        let f = t.sum(f);
        let g = t.mul(xv, xv).unwrap();
        let g = t.sum(g);
        let total = t.add(f, g).unwrap();
        let grads = t.backward(total);
        let got = grads.get(xv).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let want = w.row(j).iter().sum::<f64>() + 2.0 * x.get(i, j);
                assert!((got[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::ones(&[2, 2]));
        let p = t.param(Tensor::ones(&[2, 2]));
        let y = t.mul(c, p).unwrap();
        let s = t.sum(y);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn recorded_values_are_bit_deterministic() {
        let run = || {
            let mut rng = RngStream::new(13, 2);
            let mut t = Tape::new();
            let a = t.param(random(&mut rng, &[4, 4]));
            let b = t.param(random(&mut rng, &[4, 4]));
            let c = t.matmul(a, b).unwrap();
            let s = t.softmax_rows(c, None).unwrap();
            let out = t.sum(s);
            let g = t.backward(out);
            (t.value(s).clone(), g.get(a).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    trait ReshapeTo {
        fn reshape_to(&self, shape: &[usize]) -> Tensor;
    }

    impl ReshapeTo for Tensor {
        fn reshape_to(&self, shape: &[usize]) -> Tensor {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), self.data()[..n].to_vec()).unwrap()
        }
    }
}
