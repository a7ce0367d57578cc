//! Transformer sub-layer primitives and the within-layer decompositions.
//!
//! Layers come in two flavors: tape-level builders (`*_on_tape`) used by the
//! model and trainer, and plain-tensor wrappers that run a throwaway tape.
//! `general_attention` is deliberately computed with plain tensor products so
//! it can serve as an independent route for the multi-head identity.

use crate::error::{Error, Result};
use crate::tape::{softmax_rows_masked, Activation, Mask, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T = Tensor> {
    pub gain: T,
    pub bias: T,
    pub eps: f64,
}

impl LayerNormParams<Tensor> {
    pub fn identity(width: usize, eps: f64) -> Self {
        LayerNormParams {
            gain: Tensor::ones(&[width]),
            bias: Tensor::zeros(&[width]),
            eps,
        }
    }
}

impl<T> LayerNormParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
            eps: self.eps,
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a T>) {
        out.extend([&self.gain, &self.bias]);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([&mut self.gain, &mut self.bias]);
    }
}

/// Multi-head attention weights.
///
/// Head `i` projects with `query[i]`, `key[i]`, `value[i]` (each
/// `d_model x d_head`). `output` is the full `heads*d_head x d_model` matrix;
/// its `i`-th block of `d_head` rows mixes head `i` back into the model width.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub query: Vec<T>,
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub output: T,
    pub d_model: usize,
    pub d_head: usize,
}

impl AttentionParams<Tensor> {
    pub fn new(
        query: Vec<Tensor>,
        key: Vec<Tensor>,
        value: Vec<Tensor>,
        output: Tensor,
    ) -> Result<Self> {
        let heads = query.len();
        if heads == 0 || key.len() != heads || value.len() != heads {
            return Err(Error::Config(format!(
                "head count mismatch: {} query, {} key, {} value blocks",
                query.len(),
                key.len(),
                value.len()
            )));
        }
        let (d_model, d_head) = (query[0].rows(), query[0].cols());
        for t in query.iter().chain(&key).chain(&value) {
            if t.shape() != [d_model, d_head] {
                return Err(Error::Shape {
                    op: "attention_params",
                    left: vec![d_model, d_head],
                    right: t.shape().to_vec(),
                });
            }
        }
        if output.shape() != [heads * d_head, d_model] {
            return Err(Error::Shape {
                op: "attention_params",
                left: vec![heads * d_head, d_model],
                right: output.shape().to_vec(),
            });
        }
        Ok(AttentionParams {
            query,
            key,
            value,
            output,
            d_model,
            d_head,
        })
    }

    /// Row block of the output projection belonging to head `i`.
    pub fn output_block(&self, i: usize) -> Tensor {
        self.output.row_block(i * self.d_head, self.d_head)
    }

    /// Column-concatenation of the per-head value projections.
    pub fn value_full(&self) -> Tensor {
        Tensor::concat_cols(&self.value).expect("value blocks share a row count")
    }
}

impl<T> AttentionParams<T> {
    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            query: self.query.iter().map(&mut *f).collect(),
            key: self.key.iter().map(&mut *f).collect(),
            value: self.value.iter().map(&mut *f).collect(),
            output: f(&self.output),
            d_model: self.d_model,
            d_head: self.d_head,
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a T>) {
        out.extend(self.query.iter().chain(&self.key).chain(&self.value));
        out.push(&self.output);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend(
            self.query
                .iter_mut()
                .chain(&mut self.key)
                .chain(&mut self.value),
        );
        out.push(&mut self.output);
    }
}

/// Single attention with a full score matrix and value-output matrix:
/// `softmax(Q W1 K^T) V W2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralAttentionParams {
    pub score: Tensor,
    pub value_output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<T = Tensor> {
    /// `d_model x d_ffn`
    pub w1: T,
    /// `d_ffn x d_model`
    pub w2: T,
    pub activation: Activation,
}

impl FfnParams<Tensor> {
    pub fn new(w1: Tensor, w2: Tensor, activation: Activation) -> Result<Self> {
        if w1.shape().len() != 2
            || w2.shape().len() != 2
            || w1.cols() != w2.rows()
            || w1.rows() != w2.cols()
        {
            return Err(Error::Shape {
                op: "ffn_params",
                left: w1.shape().to_vec(),
                right: w2.shape().to_vec(),
            });
        }
        Ok(FfnParams { w1, w2, activation })
    }

    pub fn d_ffn(&self) -> usize {
        self.w1.cols()
    }
}

impl<T> FfnParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FfnParams<U> {
        FfnParams {
            w1: f(&self.w1),
            w2: f(&self.w2),
            activation: self.activation,
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a T>) {
        out.extend([&self.w1, &self.w2]);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([&mut self.w1, &mut self.w2]);
    }
}

// ---- tape-level builders -------------------------------------------------

pub fn layer_norm_on_tape(tape: &mut Tape, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    tape.layer_norm(x, p.gain, p.bias, p.eps)
}

/// Scaled dot-product attention over `blocks` stacked sequences.
///
/// Returns the context and the attention weights.
pub fn attention_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    blocks: usize,
    mask: Option<&Mask>,
) -> Result<(Var, Var)> {
    let d = tape.value(q).cols();
    let scores = tape.block_matmul_nt(q, k, blocks)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(scores, mask)?;
    let context = tape.block_matmul(weights, v, blocks)?;
    Ok((context, weights))
}

/// `[head_1; ...; head_h] W_O` with per-head scale `1/sqrt(d_head)`.
///
/// Returns the output and each head's attention weights.
pub fn multi_head_on_tape(
    tape: &mut Tape,
    queries: Var,
    memory: Var,
    p: &AttentionParams<Var>,
    blocks: usize,
    mask: Option<&Mask>,
) -> Result<(Var, Vec<Var>)> {
    let mut heads = Vec::with_capacity(p.heads());
    let mut weights = Vec::with_capacity(p.heads());
    for i in 0..p.heads() {
        let q = tape.matmul(queries, p.query[i])?;
        let k = tape.matmul(memory, p.key[i])?;
        let v = tape.matmul(memory, p.value[i])?;
        let (ctx, w) = attention_on_tape(tape, q, k, v, blocks, mask)?;
        heads.push(ctx);
        weights.push(w);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    Ok((tape.matmul(joined, p.output)?, weights))
}

pub fn ffn_on_tape(tape: &mut Tape, x: Var, p: &FfnParams<Var>) -> Result<Var> {
    let hidden = tape.matmul(x, p.w1)?;
    let hidden = tape.activate(hidden, p.activation);
    tape.matmul(hidden, p.w2)
}

// ---- plain-tensor wrappers ------------------------------------------------

pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = p.map(&mut |t| tape.constant(t.clone()));
    let out = layer_norm_on_tape(&mut tape, xv, &pv)?;
    Ok(tape.value(out).clone())
}

/// Attention weights `softmax(Q K^T / sqrt(d))` with masked entries at zero.
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
    if q.cols() != k.cols() {
        return Err(Error::Shape {
            op: "attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let scores = q
        .matmul(&k.transpose())?
        .scale(1.0 / (q.cols() as f64).sqrt());
    softmax_rows_masked(&scores, mask)
}

pub fn scaled_dot_product_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Mask>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Shape {
            op: "attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let (out, _) = attention_on_tape(&mut tape, qv, kv, vv, 1, mask)?;
    Ok(tape.value(out).clone())
}

/// Multi-head attention over queries `q` and keys/values `k`, `v`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p: &AttentionParams,
    mask: Option<&Mask>,
) -> Result<Tensor> {
    for t in [q, k, v] {
        if t.cols() != p.d_model {
            return Err(Error::Shape {
                op: "multi_head_attention",
                left: t.shape().to_vec(),
                right: vec![p.d_model],
            });
        }
    }
    let mut tape = Tape::new();
    let pv = p.map(&mut |t| tape.constant(t.clone()));
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let vv = tape.constant(v.clone());
    let mut heads = Vec::with_capacity(p.heads());
    for i in 0..p.heads() {
        let qh = tape.matmul(qv, pv.query[i])?;
        let kh = tape.matmul(kv, pv.key[i])?;
        let vh = tape.matmul(vv, pv.value[i])?;
        heads.push(attention_on_tape(&mut tape, qh, kh, vh, 1, mask)?.0);
    }
    let joined = tape.concat_cols(&heads)?;
    let out = tape.matmul(joined, pv.output)?;
    Ok(tape.value(out).clone())
}

/// Rewrites each head as a general attention with rank-`d_head` factors:
/// `W1_i = Wq_i Wk_i^T / sqrt(d_head)` and `W2_i = Wv_i Wo_i`.
pub fn decompose_attention(p: &AttentionParams) -> Vec<GeneralAttentionParams> {
    let scale = 1.0 / (p.d_head as f64).sqrt();
    (0..p.heads())
        .map(|i| GeneralAttentionParams {
            score: p.query[i]
                .matmul(&p.key[i].transpose())
                .expect("query and key blocks share shape")
                .scale(scale),
            value_output: p.value[i]
                .matmul(&p.output_block(i))
                .expect("value block and output block agree"),
        })
        .collect()
}

/// `softmax(Q W1 K^T) V W2`, computed with plain tensor products.
pub fn general_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &GeneralAttentionParams,
    mask: Option<&Mask>,
) -> Result<Tensor> {
    let scores = q.matmul(&g.score)?.matmul(&k.transpose())?;
    let weights = softmax_rows_masked(&scores, mask)?;
    weights.matmul(v)?.matmul(&g.value_output)
}

pub fn ffn_forward(x: &Tensor, p: &FfnParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = p.map(&mut |t| tape.constant(t.clone()));
    let out = ffn_on_tape(&mut tape, xv, &pv)?;
    Ok(tape.value(out).clone())
}

/// Splits a feedforward layer into `h` narrower ones whose outputs sum to the
/// original: part `i` takes the `i`-th column block of `w1` and the matching
/// row block of `w2`.
pub fn split_ffn(p: &FfnParams, h: usize) -> Result<Vec<FfnParams>> {
    let d_ffn = p.d_ffn();
    if h == 0 || d_ffn % h != 0 {
        return Err(Error::Split {
            width: d_ffn,
            parts: h,
        });
    }
    let w = d_ffn / h;
    Ok((0..h)
        .map(|i| FfnParams {
            w1: p.w1.col_block(i * w, w),
            w2: p.w2.row_block(i * w, w),
            activation: p.activation,
        })
        .collect())
}
