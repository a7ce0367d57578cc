//! Model configurations, the `γH-αL(-βL)` shorthand, and named defaults.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    EncoderOnly,
    EncoderDecoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Gelu,
}

impl From<ActivationKind> for Activation {
    fn from(a: ActivationKind) -> Self {
        match a {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Gelu => Activation::Gelu,
        }
    }
}

/// Full architectural description of a post-LN transformer.
///
/// Field names double as the keys of the TOML config file format.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    pub max_pos: usize,
    pub activation: ActivationKind,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ffn", self.d_ffn),
            ("vocab", self.vocab),
            ("max_pos", self.max_pos),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        match (self.kind, self.dec_layers) {
            (ModelKind::EncoderOnly, 0) => Ok(()),
            (ModelKind::EncoderOnly, _) => Err(Error::Config(
                "encoder-only config must have dec_layers = 0".into(),
            )),
            (ModelKind::EncoderDecoder, 0) => Err(Error::Config(
                "encoder-decoder config needs dec_layers > 0".into(),
            )),
            (ModelKind::EncoderDecoder, _) => Ok(()),
        }
    }

    /// Width of the concatenated heads, `heads * d_head`.
    pub fn attn_width(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn shorthand(&self) -> Shorthand {
        Shorthand {
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: match self.kind {
                ModelKind::EncoderOnly => None,
                ModelKind::EncoderDecoder => Some(self.dec_layers),
            },
        }
    }

    /// Number of residual sub-layers: two per encoder layer, three per decoder layer.
    pub fn sublayer_count(&self) -> usize {
        2 * self.enc_layers + 3 * self.dec_layers
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// The `γH-αL` / `γH-αL-βL` model shorthand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shorthand {
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: Option<usize>,
}

impl FromStr for Shorthand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "cannot parse model shorthand {s:?} (expected e.g. 8H-6L-6L or 12H-12L)"
            ))
        };
        let parts: Vec<&str> = s.trim().split('-').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(bad());
        }
        let number = |part: &str, suffix: char| -> Result<usize> {
            let digits = part.strip_suffix(suffix).ok_or_else(bad)?;
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            digits.parse().map_err(|_| bad())
        };
        let heads = number(parts[0], 'H')?;
        let enc_layers = number(parts[1], 'L')?;
        let dec_layers = parts.get(2).map(|p| number(p, 'L')).transpose()?;
        if heads == 0 || dec_layers == Some(0) {
            return Err(bad());
        }
        Ok(Shorthand {
            heads,
            enc_layers,
            dec_layers,
        })
    }
}

impl fmt::Display for Shorthand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}H-{}L", self.heads, self.enc_layers)?;
        if let Some(d) = self.dec_layers {
            write!(f, "-{d}L")?;
        }
        Ok(())
    }
}

/// Named dimension profiles that turn a shorthand into a full config.
///
/// Every profile fixes `d_model` and the per-head width and scales the
/// feedforward width with the head count (`d_ffn = heads * ffn_per_head`),
/// so `8H-6L-6L` under `transformer-base` gets `d_ffn = 2048` and its
/// reconstruction `1H-48L-48L` gets 256.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Defaults {
    TransformerBase,
    BertBase,
    BertLarge,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Profile {
    pub d_model: usize,
    pub d_head: usize,
    pub ffn_per_head: usize,
    pub vocab: usize,
    pub max_pos: usize,
    pub activation: ActivationKind,
    pub tie_embeddings: bool,
}

impl Defaults {
    pub const ALL: [Defaults; 4] = [
        Defaults::TransformerBase,
        Defaults::BertBase,
        Defaults::BertLarge,
        Defaults::Desk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Defaults::TransformerBase => "transformer-base",
            Defaults::BertBase => "bert-base",
            Defaults::BertLarge => "bert-large",
            Defaults::Desk => "desk",
        }
    }

    pub fn profile(self) -> Profile {
        match self {
            // 37k shared BPE vocabulary of the WMT'14 EN-DE setup
            Defaults::TransformerBase => Profile {
                d_model: 512,
                d_head: 64,
                ffn_per_head: 256,
                vocab: 37_000,
                max_pos: 512,
                activation: ActivationKind::Relu,
                tie_embeddings: true,
            },
            Defaults::BertBase => Profile {
                d_model: 768,
                d_head: 64,
                ffn_per_head: 256,
                vocab: 30_522,
                max_pos: 512,
                activation: ActivationKind::Gelu,
                tie_embeddings: true,
            },
            Defaults::BertLarge => Profile {
                d_model: 1024,
                d_head: 64,
                ffn_per_head: 256,
                vocab: 30_522,
                max_pos: 512,
                activation: ActivationKind::Gelu,
                tie_embeddings: true,
            },
            Defaults::Desk => Profile {
                d_model: 64,
                d_head: 16,
                ffn_per_head: 64,
                vocab: 64,
                max_pos: 64,
                activation: ActivationKind::Relu,
                tie_embeddings: true,
            },
        }
    }

    pub fn expand(self, sh: Shorthand) -> ModelConfig {
        let p = self.profile();
        let cfg = ModelConfig {
            kind: if sh.dec_layers.is_some() {
                ModelKind::EncoderDecoder
            } else {
                ModelKind::EncoderOnly
            },
            heads: sh.heads,
            enc_layers: sh.enc_layers,
            dec_layers: sh.dec_layers.unwrap_or(0),
            d_model: p.d_model,
            d_head: p.d_head,
            d_ffn: sh.heads * p.ffn_per_head,
            vocab: p.vocab,
            max_pos: p.max_pos,
            activation: p.activation,
            tie_embeddings: p.tie_embeddings,
        };
        debug_assert!(cfg.validate().is_ok());
        cfg
    }
}

impl FromStr for Defaults {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Defaults::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown defaults profile {s:?}")))
    }
}

/// Parses either a shorthand string or a TOML config file body.
pub fn resolve_model(spec: &str, defaults: Defaults) -> Result<ModelConfig> {
    match spec.parse::<Shorthand>() {
        Ok(sh) => Ok(defaults.expand(sh)),
        Err(_) if spec.contains('=') => ModelConfig::from_toml(spec),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_reference_shorthands() {
        let s: Shorthand = "8H-6L-6L".parse().unwrap();
        assert_eq!(
            s,
            Shorthand {
                heads: 8,
                enc_layers: 6,
                dec_layers: Some(6)
            }
        );
        assert_eq!(s.to_string(), "8H-6L-6L");
        let s: Shorthand = "12H-12L".parse().unwrap();
        assert_eq!(s.dec_layers, None);
        assert_eq!(s.to_string(), "12H-12L");
    }

    #[test]
    fn rejects_malformed_shorthand() {
        for bad in [
            "",
            "8H",
            "8-6L",
            "H-6L",
            "8H-6",
            "8H-6L-6L-6L",
            "0H-6L",
            "8h-6l",
            "8H-6L-0L",
            "-8H-6L",
            "8H-+6L",
        ] {
            assert!(bad.parse::<Shorthand>().is_err(), "{bad}");
        }
    }

    #[test]
    fn expands_with_profile() {
        let c = Defaults::BertBase.expand("12H-12L".parse().unwrap());
        assert_eq!(c.kind, ModelKind::EncoderOnly);
        assert_eq!((c.d_model, c.d_head, c.d_ffn), (768, 64, 3072));
        let c = Defaults::TransformerBase.expand("8H-6L-6L".parse().unwrap());
        assert_eq!((c.d_ffn, c.dec_layers), (2048, 6));
        assert_eq!(c.sublayer_count(), 30);
    }

    #[test]
    fn toml_round_trip_uses_documented_keys() {
        let c = Defaults::Desk.expand("4H-2L-2L".parse().unwrap());
        let text = c.to_toml();
        for key in [
            "kind",
            "heads",
            "enc_layers",
            "dec_layers",
            "d_model",
            "d_head",
            "d_ffn",
            "vocab",
            "max_pos",
            "activation",
            "tie_embeddings",
        ] {
            assert!(
                text.contains(&format!("{key} = ")),
                "{key} missing in {text}"
            );
        }
        assert_eq!(ModelConfig::from_toml(&text).unwrap(), c);
        assert!(ModelConfig::from_toml(&format!("{text}\nextra = 1\n")).is_err());
    }

    #[test]
    fn validation() {
        let mut c = Defaults::Desk.expand("2H-2L".parse().unwrap());
        assert!(c.validate().is_ok());
        c.dec_layers = 1;
        assert!(c.validate().is_err());
        c.kind = ModelKind::EncoderDecoder;
        assert!(c.validate().is_ok());
        c.dec_layers = 0;
        assert!(c.validate().is_err());
        c.kind = ModelKind::EncoderOnly;
        c.d_ffn = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn resolve_accepts_both_forms() {
        let c = resolve_model("4H-4L", Defaults::Desk).unwrap();
        let text = c.to_toml();
        assert_eq!(resolve_model(&text, Defaults::BertBase).unwrap(), c);
        assert!(resolve_model("nonsense", Defaults::Desk).is_err());
    }
}
