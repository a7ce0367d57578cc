//! Deep single-head reconstruction and size / compute accounting.
//!
//! Counting convention:
//! - encoder-only models follow BERT: token, position and 2 segment
//!   embeddings, an embedding LayerNorm, and a pooler (`m*m + m`); no MLM head.
//! - encoder-decoder models share one token table between source, target and
//!   output, plus one learned position table.
//! - every linear map carries a bias and every LayerNorm a gain and bias,
//!   whether or not the built model materializes them.
//! - an untied output head adds `m*V + V`.
//!
//! FLOPs count multiply-accumulates of one forward pass (1 MAC = 1 FLOP);
//! softmax, LayerNorm and activations are free.

use serde::Serialize;

use crate::config::{ModelConfig, ModelKind};
use crate::error::{Error, Result};

pub const CONVENTION: &str = "biases and LayerNorm affine counted; encoder-only: token+position+2 segment embeddings, \
embedding LayerNorm, pooler, no MLM head; encoder-decoder: one shared token table (source/target/output) and one \
learned position table; FLOPs = forward multiply-accumulates, softmax/LayerNorm/activation excluded";

/// The `γH-αL(-βL)` model re-stacked as `1H-γαL(-γβL)` with `d_ffn / γ`.
///
/// Head width is kept, so every deep layer holds one of the shallow model's
/// heads and a `1/γ` slice of its feedforward network.
pub fn reconstruct(config: &ModelConfig) -> Result<ModelConfig> {
    config.validate()?;
    let g = config.heads;
    if !config.d_ffn.is_multiple_of(g) {
        return Err(Error::Config(format!(
            "cannot reconstruct: d_ffn {} is not divisible by {g} heads",
            config.d_ffn
        )));
    }
    Ok(ModelConfig {
        heads: 1,
        enc_layers: g * config.enc_layers,
        dec_layers: g * config.dec_layers,
        d_ffn: config.d_ffn / g,
        ..config.clone()
    })
}

/// Parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub embeddings: u64,
    pub encoder: u64,
    pub decoder: u64,
    pub head: u64,
    pub total: u64,
}

pub fn linear_params(inputs: u64, outputs: u64) -> u64 {
    inputs * outputs + outputs
}

fn attention_params(c: &ModelConfig) -> u64 {
    let (m, a) = (c.d_model as u64, c.attn_width() as u64);
    3 * linear_params(m, a) + linear_params(a, m)
}

fn ffn_params(c: &ModelConfig) -> u64 {
    let (m, f) = (c.d_model as u64, c.d_ffn as u64);
    linear_params(m, f) + linear_params(f, m)
}

pub fn param_breakdown(c: &ModelConfig) -> ParamBreakdown {
    let (m, v, p) = (c.d_model as u64, c.vocab as u64, c.max_pos as u64);
    let ln = 2 * m;
    let (embeddings, mut head) = match c.kind {
        ModelKind::EncoderOnly => (v * m + p * m + 2 * m + ln, linear_params(m, m)),
        ModelKind::EncoderDecoder => (v * m + p * m, 0),
    };
    if !c.tie_embeddings {
        head += linear_params(m, v);
    }
    let encoder = c.enc_layers as u64 * (attention_params(c) + ffn_params(c) + 2 * ln);
    let decoder = c.dec_layers as u64 * (2 * attention_params(c) + ffn_params(c) + 3 * ln);
    ParamBreakdown {
        embeddings,
        encoder,
        decoder,
        head,
        total: embeddings + encoder + decoder + head,
    }
}

pub fn count_params(c: &ModelConfig) -> u64 {
    param_breakdown(c).total
}

pub fn linear_flops(tokens: u64, inputs: u64, outputs: u64) -> u64 {
    tokens * inputs * outputs
}

/// Attention over `nq` queries and `nk` keys: projections plus score and context products.
fn attention_flops(c: &ModelConfig, nq: u64, nk: u64) -> u64 {
    let (m, a) = (c.d_model as u64, c.attn_width() as u64);
    let proj = linear_flops(nq, m, a) + 2 * linear_flops(nk, m, a) + linear_flops(nq, a, m);
    proj + 2 * nq * nk * a
}

fn ffn_flops(c: &ModelConfig, n: u64) -> u64 {
    let (m, f) = (c.d_model as u64, c.d_ffn as u64);
    linear_flops(n, m, f) + linear_flops(n, f, m)
}

/// Forward MACs for one sequence of `seq_len` tokens (source and target alike).
pub fn count_flops(c: &ModelConfig, seq_len: usize) -> u64 {
    let n = seq_len as u64;
    let (m, v) = (c.d_model as u64, c.vocab as u64);
    let enc = c.enc_layers as u64 * (attention_flops(c, n, n) + ffn_flops(c, n));
    let dec = c.dec_layers as u64 * (2 * attention_flops(c, n, n) + ffn_flops(c, n));
    let head = match c.kind {
        // pooler over the first token
        ModelKind::EncoderOnly => linear_flops(1, m, m),
        ModelKind::EncoderDecoder => linear_flops(n, m, v),
    };
    enc + dec + head
}

/// Relative difference `|a - b| / b`.
pub fn relative_gap(a: u64, b: u64) -> f64 {
    (a as f64 - b as f64).abs() / b as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Defaults;
    use crate::init::InitSpec;
    use crate::model::build;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn cfg(d: Defaults, s: &str) -> ModelConfig {
        d.expand(s.parse().unwrap())
    }

    #[test]
    fn unit_cases() {
        assert_eq!(linear_params(7, 3), 24);
        assert_eq!(linear_flops(5, 7, 3), 105);
    }

    #[test]
    fn reconstruct_examples() {
        let r = reconstruct(&cfg(Defaults::TransformerBase, "8H-6L-6L")).unwrap();
        assert_eq!(
            (r.heads, r.enc_layers, r.dec_layers, r.d_ffn, r.d_head),
            (1, 48, 48, 256, 64)
        );
        let r = reconstruct(&cfg(Defaults::BertBase, "12H-12L")).unwrap();
        assert_eq!(
            (r.heads, r.enc_layers, r.dec_layers, r.d_ffn),
            (1, 144, 0, 256)
        );
        let one = cfg(Defaults::BertBase, "1H-5L");
        assert_eq!(reconstruct(&one).unwrap(), one);
        let mut bad = cfg(Defaults::Desk, "4H-2L");
        bad.d_ffn = 250;
        assert!(reconstruct(&bad).is_err());
    }

    #[test]
    fn bert_base_counts() {
        let c = cfg(Defaults::BertBase, "12H-12L");
        assert_eq!(count_params(&c), 109_482_240);
        assert_eq!(count_params(&reconstruct(&c).unwrap()), 110_090_496);
        assert_eq!(count_flops(&c, 512), 48_318_971_904);
    }

    #[test]
    fn minimal_model_hand_count() {
        let c = ModelConfig {
            d_model: 4,
            d_head: 4,
            d_ffn: 8,
            vocab: 10,
            max_pos: 6,
            ..cfg(Defaults::Desk, "1H-1L")
        };
        // embeddings 40 + 24 + 8 + 8, attention 4*(16+4), ffn 40 + 36, 2 LN 16, pooler 20
        assert_eq!(count_params(&c), 80 + 80 + 76 + 16 + 20);
        // n=2: projections 4*2*16, scores+context 2*4*4, ffn 2*2*32, pooler 16
        assert_eq!(count_flops(&c, 2), 128 + 32 + 128 + 16);
    }

    #[test]
    fn materialized_weights_match_weight_count() {
        // the built model has no biases, segments, pooler or embedding LN
        let c = cfg(Defaults::Desk, "2H-1L-1L");
        let model = build(&c, &InitSpec::xavier(), &RngStream::new(0, 0)).unwrap();
        let (m, a, f) = (c.d_model, c.attn_width(), c.d_ffn);
        let weights = c.vocab * m + c.max_pos * m + 3 * (4 * m * a) + 2 * (2 * m * f) + 5 * 2 * m;
        assert_eq!(model.num_scalars(), weights);
    }

    #[test]
    fn untied_head_adds_projection() {
        let mut c = cfg(Defaults::Desk, "2H-1L-1L");
        let tied = count_params(&c);
        c.tie_embeddings = false;
        assert_eq!(
            count_params(&c) - tied,
            (c.d_model * c.vocab + c.vocab) as u64
        );
    }

    proptest! {
        #[test]
        fn head_count_neutral(
            h1 in prop::sample::select(vec![1usize, 2, 3, 4, 6, 8, 12, 16]),
            h2 in prop::sample::select(vec![1usize, 2, 3, 4, 6, 8, 12, 16]),
            layers in 1usize..8, dec in 0usize..4) {
            let mk = |h: usize| {
                let mut c = cfg(Defaults::BertBase, "1H-1L");
                c.heads = h;
                c.d_head = 768 / h;
                c.d_ffn = 3072;
                c.enc_layers = layers;
                if dec > 0 {
                    c.kind = ModelKind::EncoderDecoder;
                    c.dec_layers = dec;
                }
                c
            };
            let (a, b) = (mk(h1), mk(h2));
            prop_assert_eq!(count_params(&a), count_params(&b));
        }

        #[test]
        fn reconstruction_preserves_size_and_compute(
            heads in 1usize..17,
            enc in 1usize..25,
            dec in prop::option::of(1usize..13),
            ffn_per_head in prop::sample::select(vec![128usize, 256, 512]),
        ) {
            let d_model = (heads * 64).max(256);
            let c = ModelConfig {
                kind: if dec.is_some() { ModelKind::EncoderDecoder } else { ModelKind::EncoderOnly },
                heads,
                enc_layers: enc,
                dec_layers: dec.unwrap_or(0),
                d_model,
                d_head: 64,
                d_ffn: heads * ffn_per_head,
                vocab: 30_000,
                max_pos: 512,
                activation: crate::config::ActivationKind::Relu,
                tie_embeddings: true,
            };
            let r = reconstruct(&c).unwrap();
            prop_assert_eq!(r.sublayer_count() , heads * c.sublayer_count());
            prop_assert!(relative_gap(count_params(&r), count_params(&c)) <= 0.015);
            prop_assert!(relative_gap(count_flops(&r, 512), count_flops(&c, 512)) <= 0.02);
        }
    }
}
