//! Synthetic sequence tasks small enough to train on a desk.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::rng::RngStream;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
/// First id available for content tokens.
pub const FIRST_CONTENT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    MaskedToken,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::MaskedToken => "masked-token",
        }
    }

    /// Output sequence for copy/reverse; masked-token has none.
    pub fn transform(self, seq: &[usize]) -> Option<Vec<usize>> {
        match self {
            TaskKind::Copy => Some(seq.to_vec()),
            TaskKind::Reverse => Some(seq.iter().rev().copied().collect()),
            TaskKind::MaskedToken => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TaskKind::Copy, TaskKind::Reverse, TaskKind::MaskedToken]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown task {s:?} (copy, reverse, masked-token)"))
            })
    }
}

/// How a sequence-to-sequence task is fed to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Source through the encoder, `bos + output[..n-1]` through the decoder.
    Pairs,
    /// One encoder stream `input, bos, mask * n`; the output is read off the
    /// trailing mask positions. Lets encoder-only models run copy/reverse.
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub mask_fraction: f64,
    pub layout: Layout,
}

/// One training batch. `targets` and `weights` have one entry per logits row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: ModelInput,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.input.source.len()
    }

    /// Indices of the logits rows that carry loss.
    pub fn scored_rows(&self) -> Vec<usize> {
        (0..self.weights.len())
            .filter(|&i| self.weights[i] > 0.0)
            .collect()
    }
}

impl ToyTask {
    pub const DEFAULT_MASK_FRACTION: f64 = 0.15;

    /// Picks the layout that fits `config` and checks the task fits its vocabulary and positions.
    pub fn for_model(kind: TaskKind, config: &ModelConfig, seq_len: usize) -> Result<Self> {
        let layout = match (kind, config.kind) {
            (TaskKind::MaskedToken, ModelKind::EncoderDecoder) => {
                return Err(Error::Config(
                    "masked-token needs an encoder-only model".into(),
                ))
            }
            (_, ModelKind::EncoderDecoder) => Layout::Pairs,
            (_, ModelKind::EncoderOnly) => Layout::Stream,
        };
        let task = ToyTask {
            kind,
            vocab: config.vocab,
            seq_len,
            mask_fraction: Self::DEFAULT_MASK_FRACTION,
            layout,
        };
        task.validate()?;
        if task.input_len() > config.max_pos {
            return Err(Error::Config(format!(
                "{kind} with seq_len {seq_len} needs {} positions, model has {}",
                task.input_len(),
                config.max_pos
            )));
        }
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab <= FIRST_CONTENT {
            return Err(Error::Config(format!(
                "vocab {} leaves no content tokens",
                self.vocab
            )));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        if self.kind == TaskKind::MaskedToken {
            if self.layout != Layout::Stream {
                return Err(Error::Config("masked-token uses the stream layout".into()));
            }
            if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "mask fraction {} outside (0, 1)",
                    self.mask_fraction
                )));
            }
        }
        Ok(())
    }

    /// Longest sequence the model sees.
    pub fn input_len(&self) -> usize {
        match (self.kind, self.layout) {
            (TaskKind::MaskedToken, _) | (_, Layout::Pairs) => self.seq_len,
            (_, Layout::Stream) => 2 * self.seq_len + 1,
        }
    }

    /// Number of masked positions per masked-token sequence, at least one.
    pub fn masked_count(&self) -> usize {
        ((self.mask_fraction * self.seq_len as f64).floor() as usize).clamp(1, self.seq_len)
    }

    fn content(&self, rng: &mut RngStream) -> usize {
        rng.below(FIRST_CONTENT, self.vocab)
    }

    pub fn make_batch(&self, batch_size: usize, rng: &mut RngStream) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.validate()?;
        let n = self.seq_len;
        let mut source = Vec::with_capacity(batch_size);
        let mut target_in = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..batch_size {
            match self.kind {
                TaskKind::Copy | TaskKind::Reverse => {
                    let x: Vec<usize> = (0..n).map(|_| self.content(rng)).collect();
                    let y = self.kind.transform(&x).expect("seq2seq task");
                    match self.layout {
                        Layout::Pairs => {
                            let mut dec = vec![BOS];
                            dec.extend_from_slice(&y[..n - 1]);
                            target_in.push(dec);
                            source.push(x);
                            targets.extend_from_slice(&y);
                            weights.extend(std::iter::repeat_n(1.0, n));
                        }
                        Layout::Stream => {
                            let mut s = x;
                            s.push(BOS);
                            s.extend(std::iter::repeat_n(MASK, n));
                            source.push(s);
                            targets.extend(std::iter::repeat_n(PAD, n + 1));
                            targets.extend_from_slice(&y);
                            weights.extend(std::iter::repeat_n(0.0, n + 1));
                            weights.extend(std::iter::repeat_n(1.0, n));
                        }
                    }
                }
                TaskKind::MaskedToken => {
                    // second half repeats the first, so a masked token is recoverable from its twin
                    let half = n.div_ceil(2);
                    let first: Vec<usize> = (0..half).map(|_| self.content(rng)).collect();
                    let orig: Vec<usize> = (0..n).map(|i| first[i % half]).collect();
                    let mut positions: Vec<usize> = (0..n).collect();
                    rng.shuffle(&mut positions);
                    let mut s = orig.clone();
                    let mut w = vec![0.0; n];
                    for &p in &positions[..self.masked_count()] {
                        s[p] = MASK;
                        w[p] = 1.0;
                    }
                    source.push(s);
                    targets.extend(
                        orig.iter()
                            .zip(&w)
                            .map(|(&t, &wt)| if wt > 0.0 { t } else { PAD }),
                    );
                    weights.extend(w);
                }
            }
        }
        Ok(Batch {
            input: ModelInput {
                source,
                target: (self.layout == Layout::Pairs).then_some(target_in),
            },
            targets,
            weights,
        })
    }
}
