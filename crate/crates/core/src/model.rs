//! Post-LN encoder / encoder-decoder stacks.
//!
//! Every residual sub-layer computes `LN(ω·x + f(x))`, where `ω` is 1 for a
//! vanilla model and the Admin residual scale otherwise. Encoder layers
//! contribute (self-attention, feedforward) sub-layers, decoder layers
//! (causal self-attention, encoder-decoder attention, feedforward).

use serde::Serialize;

use crate::config::{ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::init::{InitSpec, ParamInit};
use crate::nn::{
    ffn_on_tape, layer_norm_on_tape, multi_head_on_tape, AttentionParams, FfnParams,
    LayerNormParams, DEFAULT_LN_EPS,
};
use crate::rng::RngStream;
use crate::tape::{Mask, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubLayerKind {
    SelfAttention,
    EncoderDecoderAttention,
    Feedforward,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubLayerParams<T = Tensor> {
    Attention(AttentionParams<T>),
    Feedforward(FfnParams<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubLayer<T = Tensor> {
    pub kind: SubLayerKind,
    pub params: SubLayerParams<T>,
    pub norm: LayerNormParams<T>,
    /// Multiplier on the identity path; fixed, never trained.
    pub residual_scale: f64,
}

impl<T> SubLayer<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SubLayer<U> {
        SubLayer {
            kind: self.kind,
            params: match &self.params {
                SubLayerParams::Attention(a) => SubLayerParams::Attention(a.map(f)),
                SubLayerParams::Feedforward(p) => SubLayerParams::Feedforward(p.map(f)),
            },
            norm: self.norm.map(f),
            residual_scale: self.residual_scale,
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a T>) {
        match &self.params {
            SubLayerParams::Attention(a) => a.collect(out),
            SubLayerParams::Feedforward(p) => p.collect(out),
        }
        self.norm.collect(out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        match &mut self.params {
            SubLayerParams::Attention(a) => a.collect_mut(out),
            SubLayerParams::Feedforward(p) => p.collect_mut(out),
        }
        self.norm.collect_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub config: ModelConfig,
    /// `vocab x d_model`, shared by source, target and (when tied) the output head.
    pub token_embedding: T,
    /// `max_pos x d_model`, learned.
    pub position_embedding: T,
    pub encoder: Vec<SubLayer<T>>,
    pub decoder: Vec<SubLayer<T>>,
    /// `d_model x vocab`; `None` when the output head reuses the token embedding.
    pub output: Option<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            token_embedding: f(&self.token_embedding),
            position_embedding: f(&self.position_embedding),
            encoder: self.encoder.iter().map(|s| s.map(f)).collect(),
            decoder: self.decoder.iter().map(|s| s.map(f)).collect(),
            output: self.output.as_ref().map(&mut *f),
        }
    }

    /// Every trainable tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for s in self.encoder.iter().chain(&self.decoder) {
            s.collect(&mut out);
        }
        out.extend(self.output.as_ref());
        out
    }

    /// Mutable view of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for s in self.encoder.iter_mut().chain(&mut self.decoder) {
            s.collect_mut(&mut out);
        }
        out.extend(self.output.as_mut());
        out
    }

    /// All sub-layers, encoder first.
    pub fn sublayers(&self) -> impl Iterator<Item = &SubLayer<T>> {
        self.encoder.iter().chain(self.decoder.iter())
    }

    pub fn sublayers_mut(&mut self) -> impl Iterator<Item = &mut SubLayer<T>> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }
}

impl ModelParams<Tensor> {
    /// Learnable scalars actually materialized in this model.
    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn residual_scales(&self) -> Vec<f64> {
        self.sublayers().map(|s| s.residual_scale).collect()
    }

    /// Registers every tensor on `tape`, as parameters or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelParams<Var> {
        self.map(&mut |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}

/// Variables recorded while running a forward pass.
#[derive(Debug, Default, Clone)]
pub struct ForwardTrace {
    /// Residual-branch output `f_i(x_i)` of every sub-layer, in sub-layer order.
    pub branches: Vec<Var>,
    /// `(sub-layer index, per-head attention weights)` for every attention sub-layer.
    pub attention: Vec<(usize, Vec<Var>)>,
}

/// Token ids for one batch. All sequences on a side share one length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub source: Vec<Vec<usize>>,
    pub target: Option<Vec<Vec<usize>>>,
}

fn check_tokens(config: &ModelConfig, seqs: &[Vec<usize>]) -> Result<usize> {
    let Some(first) = seqs.first() else {
        return Err(Error::Input("empty batch".into()));
    };
    let n = first.len();
    if n == 0 {
        return Err(Error::Input("empty sequence".into()));
    }
    if seqs.iter().any(|s| s.len() != n) {
        return Err(Error::Input(
            "sequences in a batch must share one length".into(),
        ));
    }
    if n > config.max_pos {
        return Err(Error::Input(format!(
            "sequence length {n} exceeds max_pos {}",
            config.max_pos
        )));
    }
    if let Some(&bad) = seqs.iter().flatten().find(|&&t| t >= config.vocab) {
        return Err(Error::Input(format!(
            "token {bad} out of range for vocab {}",
            config.vocab
        )));
    }
    Ok(n)
}

impl ModelParams<Var> {
    fn embed(&self, tape: &mut Tape, seqs: &[Vec<usize>]) -> Result<Var> {
        let n = check_tokens(&self.config, seqs)?;
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..n).collect();
        let tok = tape.gather(self.token_embedding, &ids)?;
        let pos = tape.gather(self.position_embedding, &positions)?;
        tape.add(tok, pos)
    }

    #[allow(clippy::too_many_arguments)]
    fn sublayer(
        &self,
        tape: &mut Tape,
        index: usize,
        sub: &SubLayer<Var>,
        x: Var,
        memory: Option<Var>,
        blocks: usize,
        mask: Option<&Mask>,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let branch = match &sub.params {
            SubLayerParams::Attention(p) => {
                let kv = memory.unwrap_or(x);
                let (out, weights) = multi_head_on_tape(tape, x, kv, p, blocks, mask)?;
                trace.attention.push((index, weights));
                out
            }
            SubLayerParams::Feedforward(p) => ffn_on_tape(tape, x, p)?,
        };
        trace.branches.push(branch);
        let identity = if sub.residual_scale == 1.0 {
            x
        } else {
            tape.scale(x, sub.residual_scale)
        };
        let sum = tape.add(identity, branch)?;
        layer_norm_on_tape(tape, sum, &sub.norm)
    }

    /// Encoder hidden states, `batch*n x d_model`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        source: &[Vec<usize>],
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let mut x = self.embed(tape, source)?;
        for (i, sub) in self.encoder.iter().enumerate() {
            x = self.sublayer(tape, i, sub, x, None, source.len(), None, trace)?;
        }
        Ok(x)
    }

    /// Decoder hidden states over `target` attending to `memory`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        target: &[Vec<usize>],
        memory: Var,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        if self.config.kind != ModelKind::EncoderDecoder {
            return Err(Error::Config("encoder-only config has no decoder".into()));
        }
        let blocks = target.len();
        if !tape.value(memory).rows().is_multiple_of(blocks.max(1)) {
            return Err(Error::Input(
                "encoder output does not match the target batch".into(),
            ));
        }
        let mut x = self.embed(tape, target)?;
        let mask = Mask::causal(target[0].len());
        let offset = self.encoder.len();
        for (i, sub) in self.decoder.iter().enumerate() {
            x = match sub.kind {
                SubLayerKind::SelfAttention => {
                    self.sublayer(tape, offset + i, sub, x, None, blocks, Some(&mask), trace)?
                }
                SubLayerKind::EncoderDecoderAttention => {
                    self.sublayer(tape, offset + i, sub, x, Some(memory), blocks, None, trace)?
                }
                SubLayerKind::Feedforward => {
                    self.sublayer(tape, offset + i, sub, x, None, blocks, None, trace)?
                }
            };
        }
        Ok(x)
    }

    /// Vocabulary logits from hidden states.
    pub fn project(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        match self.output {
            Some(w) => tape.matmul(hidden, w),
            None => tape.matmul_nt(hidden, self.token_embedding),
        }
    }

    /// Logits for a batch: decoder logits for encoder-decoder models, per
    /// source position logits for encoder-only models.
    pub fn logits(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let memory = self.encode(tape, &input.source, trace)?;
        match self.config.kind {
            ModelKind::EncoderOnly => self.project(tape, memory),
            ModelKind::EncoderDecoder => {
                let target = input.target.as_ref().ok_or_else(|| {
                    Error::Input("encoder-decoder model needs target tokens".into())
                })?;
                if target.len() != input.source.len() {
                    return Err(Error::Input("source and target batch sizes differ".into()));
                }
                let hidden = self.decode(tape, target, memory, trace)?;
                self.project(tape, hidden)
            }
        }
    }
}

/// Encoder output `n x d_model` for one token sequence.
pub fn encoder_forward(p: &ModelParams, tokens: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let out = bound.encode(&mut tape, &[tokens.to_vec()], &mut ForwardTrace::default())?;
    Ok(tape.value(out).clone())
}

/// Decoder logits `n x vocab` for one target sequence given encoder output.
pub fn decoder_forward(
    p: &ModelParams,
    target: &[usize],
    encoder_output: &Tensor,
) -> Result<Tensor> {
    if p.config.kind != ModelKind::EncoderDecoder {
        return Err(Error::Config("encoder-only config has no decoder".into()));
    }
    if encoder_output.cols() != p.config.d_model {
        return Err(Error::Shape {
            op: "decoder_forward",
            left: encoder_output.shape().to_vec(),
            right: vec![p.config.d_model],
        });
    }
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let memory = tape.constant(encoder_output.clone());
    let hidden = bound.decode(
        &mut tape,
        &[target.to_vec()],
        memory,
        &mut ForwardTrace::default(),
    )?;
    let logits = bound.project(&mut tape, hidden)?;
    Ok(tape.value(logits).clone())
}

/// Materializes parameters for `config` with the requested initialization.
///
/// Admin specs build with their base scheme and all residual scales at 1;
/// profiling and applying the scales is a separate step.
pub fn build(config: &ModelConfig, init: &InitSpec, rng: &RngStream) -> Result<ModelParams> {
    config.validate()?;
    init.validate()?;
    let pi = ParamInit::new(config, init);
    let (m, a) = (config.d_model, config.d_head);
    let mut label = 0u64;
    let mut next = || {
        label += 1;
        rng.split(label)
    };

    let token_embedding = pi.embedding(&[config.vocab, m], &mut next());
    let position_embedding = pi.embedding(&[config.max_pos, m], &mut next());

    let attention = |next: &mut dyn FnMut() -> RngStream| -> AttentionParams {
        let blocks = |next: &mut dyn FnMut() -> RngStream| -> Vec<Tensor> {
            (0..config.heads)
                .map(|_| pi.attention_in(&[m, a], &mut next()))
                .collect()
        };
        let query = blocks(next);
        let key = blocks(next);
        let value = blocks(next);
        let output = pi.attention_out(&[config.attn_width(), m], &mut next());
        AttentionParams::new(query, key, value, output).expect("shapes built consistently")
    };
    let ffn = |next: &mut dyn FnMut() -> RngStream| -> FfnParams {
        let w1 = pi.ffn_in(&[m, config.d_ffn], &mut next());
        let w2 = pi.ffn_out(&[config.d_ffn, m], &mut next());
        FfnParams::new(w1, w2, config.activation.into()).expect("shapes built consistently")
    };
    let sub = |kind, params| SubLayer {
        kind,
        params,
        norm: LayerNormParams::identity(m, DEFAULT_LN_EPS),
        residual_scale: 1.0,
    };

    let mut encoder = Vec::with_capacity(2 * config.enc_layers);
    for _ in 0..config.enc_layers {
        encoder.push(sub(
            SubLayerKind::SelfAttention,
            SubLayerParams::Attention(attention(&mut next)),
        ));
        encoder.push(sub(
            SubLayerKind::Feedforward,
            SubLayerParams::Feedforward(ffn(&mut next)),
        ));
    }
    let mut decoder = Vec::with_capacity(3 * config.dec_layers);
    for _ in 0..config.dec_layers {
        decoder.push(sub(
            SubLayerKind::SelfAttention,
            SubLayerParams::Attention(attention(&mut next)),
        ));
        decoder.push(sub(
            SubLayerKind::EncoderDecoderAttention,
            SubLayerParams::Attention(attention(&mut next)),
        ));
        decoder.push(sub(
            SubLayerKind::Feedforward,
            SubLayerParams::Feedforward(ffn(&mut next)),
        ));
    }
    let output = (!config.tie_embeddings).then(|| pi.output(&[m, config.vocab], &mut next()));

    Ok(ModelParams {
        config: config.clone(),
        token_embedding,
        position_embedding,
        encoder,
        decoder,
        output,
    })
}
