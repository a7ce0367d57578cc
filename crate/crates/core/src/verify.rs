//! Numerical identity suite: multi-head attention as a sum of general
//! attentions, feedforward layers as sums of narrow ones, and finite-difference
//! gradient checks of every sub-layer and of whole tiny models.

use serde::Serialize;

use crate::config::{ActivationKind, Defaults, ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::gradcheck::grad_check;
use crate::init::InitSpec;
use crate::model::{build, ForwardTrace, ModelInput, ModelParams};
use crate::nn::{
    decompose_attention, ffn_forward, general_attention, multi_head_attention, split_ffn,
    AttentionParams, FfnParams,
};
use crate::rng::RngStream;
use crate::tape::{Activation, Mask};
use crate::tensor::Tensor;

pub const ATTENTION_TOL: f64 = 1e-9;
pub const FFN_TOL: f64 = 1e-11;
pub const GRAD_TOL: f64 = 1e-6;
pub const GRAD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub max_residual: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_residual <= self.tolerance
    }
}

/// Dimensions swept by the identity checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub heads: Vec<usize>,
    pub widths: Vec<usize>,
    pub lens: Vec<usize>,
    pub ffn_widths: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            heads: vec![1, 2, 4, 8],
            widths: vec![8, 16, 64],
            lens: vec![1, 3, 17],
            ffn_widths: vec![16, 64, 256],
            seeds: (0..20).collect(),
        }
    }
}

impl Grid {
    /// A grid pinned to one model's head count and width.
    pub fn for_config(c: &ModelConfig, seeds: Vec<u64>) -> Result<Self> {
        if !c.d_model.is_multiple_of(c.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model {}",
                c.heads, c.d_model
            )));
        }
        Ok(Grid {
            heads: vec![c.heads],
            widths: vec![c.d_model],
            ffn_widths: vec![c.d_ffn],
            seeds,
            ..Grid::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [&self.heads, &self.widths, &self.lens, &self.ffn_widths];
        if lists.iter().any(|l| l.is_empty() || l.contains(&0)) || self.seeds.is_empty() {
            return Err(Error::Config(
                "verification grid needs non-empty positive lists".into(),
            ));
        }
        Ok(())
    }
}

fn random_attention(rng: &mut RngStream, m: usize, h: usize) -> AttentionParams {
    let dh = m / h;
    let bound = (3.0 / m as f64).sqrt();
    let mut block = |rows, cols| rng.uniform_tensor(&[rows, cols], -bound, bound);
    let query = (0..h).map(|_| block(m, dh)).collect();
    let key = (0..h).map(|_| block(m, dh)).collect();
    let value = (0..h).map(|_| block(m, dh)).collect();
    let output = block(m, m);
    AttentionParams::new(query, key, value, output).expect("consistent random shapes")
}

/// Largest `max|multi-head - Σ general| / max|multi-head|` over the grid.
/// Odd seeds run with a causal mask.
pub fn attention_identity(grid: &Grid, tol: f64) -> Result<Check> {
    grid.validate()?;
    let (mut cases, mut worst) = (0, 0.0f64);
    for &h in &grid.heads {
        for &m in grid.widths.iter().filter(|&&m| m % h == 0) {
            for &n in &grid.lens {
                for &seed in &grid.seeds {
                    let mut rng = RngStream::new(seed, (h * 1_000_000 + m * 1000 + n) as u64);
                    let p = random_attention(&mut rng, m, h);
                    let q = rng.uniform_tensor(&[n, m], -1.0, 1.0);
                    let k = rng.uniform_tensor(&[n, m], -1.0, 1.0);
                    let v = rng.uniform_tensor(&[n, m], -1.0, 1.0);
                    let mask = (seed % 2 == 1).then(|| Mask::causal(n));
                    let full = multi_head_attention(&q, &k, &v, &p, mask.as_ref())?;
                    let mut sum = Tensor::zeros(&[n, m]);
                    for g in decompose_attention(&p) {
                        sum = sum.add(&general_attention(&q, &k, &v, &g, mask.as_ref())?)?;
                    }
                    let scale = full.max_abs().max(f64::MIN_POSITIVE);
                    worst = worst.max(full.max_abs_diff(&sum) / scale);
                    cases += 1;
                }
            }
        }
    }
    if cases == 0 {
        return Err(Error::Config(
            "no head count divides any width in the grid".into(),
        ));
    }
    Ok(Check {
        name: "multi-head attention = sum of per-head general attentions (relative)".into(),
        cases,
        max_residual: worst,
        tolerance: tol,
    })
}

/// Largest absolute gap between a feedforward layer and the sum of its split parts.
pub fn ffn_identity(grid: &Grid, tol: f64) -> Result<Check> {
    grid.validate()?;
    let (mut cases, mut worst) = (0, 0.0f64);
    for &f in &grid.ffn_widths {
        for &h in grid.heads.iter().filter(|&&h| f % h == 0) {
            for &m in &grid.widths {
                for &n in &grid.lens {
                    for &seed in &grid.seeds {
                        let mut rng =
                            RngStream::new(seed, (f * 1_000_000 + h * 10_000 + m * 100 + n) as u64);
                        let act = if seed % 2 == 0 {
                            Activation::Relu
                        } else {
                            Activation::Gelu
                        };
                        let p = FfnParams::new(
                            rng.uniform_tensor(
                                &[m, f],
                                -(6.0 / (m + f) as f64).sqrt(),
                                (6.0 / (m + f) as f64).sqrt(),
                            ),
                            rng.uniform_tensor(
                                &[f, m],
                                -(6.0 / (m + f) as f64).sqrt(),
                                (6.0 / (m + f) as f64).sqrt(),
                            ),
                            act,
                        )?;
                        let x = rng.uniform_tensor(&[n, m], -1.0, 1.0);
                        let full = ffn_forward(&x, &p)?;
                        let mut sum = Tensor::zeros(&[n, m]);
                        for part in split_ffn(&p, h)? {
                            sum = sum.add(&ffn_forward(&x, &part)?)?;
                        }
                        worst = worst.max(full.max_abs_diff(&sum));
                        cases += 1;
                    }
                }
            }
        }
    }
    if cases == 0 {
        return Err(Error::Config(
            "no head count divides any feedforward width in the grid".into(),
        ));
    }
    Ok(Check {
        name: "feedforward = sum of split feedforwards (absolute)".into(),
        cases,
        max_residual: worst,
        tolerance: tol,
    })
}

/// Tiny models used by the gradient checks.
pub fn tiny_config(kind: ModelKind) -> ModelConfig {
    let mut c = Defaults::Desk.expand("2H-1L".parse().expect("static shorthand"));
    c.d_model = 8;
    c.d_head = 4;
    c.d_ffn = 12;
    c.vocab = 11;
    c.max_pos = 6;
    c.activation = ActivationKind::Gelu;
    if kind == ModelKind::EncoderDecoder {
        c.kind = kind;
        c.dec_layers = 1;
    }
    c
}

/// A tiny model with non-trivial LayerNorm affine parameters and residual scales.
fn tiny_model(c: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut rng = RngStream::new(seed, 77);
    let mut p = build(c, &InitSpec::xavier(), &RngStream::new(seed, 0))?;
    for sub in p.sublayers_mut() {
        sub.residual_scale = rng.uniform_range(1.0, 2.0);
        let w = sub.norm.gain.len();
        sub.norm.gain = rng.uniform_tensor(&[w], 0.5, 1.5);
        sub.norm.bias = rng.uniform_tensor(&[w], -0.3, 0.3);
    }
    Ok(p)
}

fn tiny_batch(c: &ModelConfig, rng: &mut RngStream) -> (ModelInput, Vec<usize>) {
    let n = 4;
    let mut seq = |len| {
        (0..len)
            .map(|_| rng.below(0, c.vocab))
            .collect::<Vec<usize>>()
    };
    let source = vec![seq(n), seq(n)];
    let target = (c.kind == ModelKind::EncoderDecoder).then(|| vec![seq(3), seq(3)]);
    let rows = if target.is_some() { 6 } else { 2 * n };
    let labels = seq(rows);
    (ModelInput { source, target }, labels)
}

/// Worst finite-difference error of the loss gradient with respect to every
/// parameter tensor of a tiny model. Covers every sub-layer kind, LayerNorm,
/// residual scaling, embeddings and the tied output head.
pub fn model_gradient_error(c: &ModelConfig, seed: u64, eps: f64) -> Result<f64> {
    let p = tiny_model(c, seed)?;
    let (input, labels) = tiny_batch(c, &mut RngStream::new(seed, 78));
    let weights: Vec<f64> = (0..labels.len())
        .map(|i| 0.5 + (i % 3) as f64 * 0.25)
        .collect();
    let count = p.tensors().len();
    let mut worst = 0.0f64;
    for i in 0..count {
        let probe = p.tensors()[i].clone();
        let err = grad_check(
            |tape, v| {
                let mut bound = p.bind(tape, false);
                *bound.tensors_mut()[i] = v;
                let logits = bound.logits(tape, &input, &mut ForwardTrace::default())?;
                tape.cross_entropy(logits, &labels, &weights)
            },
            &probe,
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Finite-difference checks of the tiny encoder-only and encoder-decoder models.
pub fn gradient_checks(seeds: &[u64], eps: f64, tol: f64) -> Result<Vec<Check>> {
    [ModelKind::EncoderOnly, ModelKind::EncoderDecoder]
        .into_iter()
        .map(|kind| {
            let c = tiny_config(kind);
            let mut worst = 0.0f64;
            for &s in seeds {
                worst = worst.max(model_gradient_error(&c, s, eps)?);
            }
            Ok(Check {
                name: format!(
                    "gradients of every parameter, tiny {} {}",
                    c.shorthand(),
                    kind_name(kind)
                ),
                cases: seeds.len(),
                max_residual: worst,
                tolerance: tol,
            })
        })
        .collect()
}

fn kind_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::EncoderOnly => "encoder",
        ModelKind::EncoderDecoder => "encoder-decoder",
    }
}

/// Tolerances for one verification run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    pub attention: f64,
    pub ffn: f64,
    pub gradient: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            attention: ATTENTION_TOL,
            ffn: FFN_TOL,
            gradient: GRAD_TOL,
        }
    }
}

impl Tolerances {
    pub fn uniform(tol: f64) -> Self {
        Tolerances {
            attention: tol,
            ffn: tol,
            gradient: tol,
        }
    }
}

/// The whole suite. Gradient checks use the first ten seeds of the grid.
pub fn run_suite(grid: &Grid, tol: Tolerances) -> Result<Vec<Check>> {
    if [tol.attention, tol.ffn, tol.gradient]
        .iter()
        .any(|t| t.is_nan() || *t < 0.0)
    {
        return Err(Error::Config("tolerances must be non-negative".into()));
    }
    let mut checks = vec![
        attention_identity(grid, tol.attention)?,
        ffn_identity(grid, tol.ffn)?,
    ];
    let seeds: Vec<u64> = grid.seeds.iter().copied().take(10).collect();
    checks.extend(gradient_checks(&seeds, GRAD_EPS, tol.gradient)?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> Grid {
        Grid {
            heads: vec![1, 2, 4],
            widths: vec![8],
            lens: vec![1, 3],
            ffn_widths: vec![16],
            seeds: vec![0, 1],
        }
    }

    #[test]
    fn identities_hold_on_small_grid() {
        let a = attention_identity(&small_grid(), ATTENTION_TOL).unwrap();
        assert!(a.passed(), "{a:?}");
        assert_eq!(a.cases, 12);
        let f = ffn_identity(&small_grid(), FFN_TOL).unwrap();
        assert!(f.passed(), "{f:?}");
    }

    #[test]
    fn zero_tolerance_is_violated() {
        let mut g = small_grid();
        g.heads = vec![4];
        g.lens = vec![3];
        let a = attention_identity(&g, 0.0).unwrap();
        assert!(a.max_residual > 0.0 && !a.passed());
    }

    #[test]
    fn grid_for_config_rejects_indivisible_heads() {
        let mut c = Defaults::Desk.expand("3H-1L".parse().unwrap());
        assert!(Grid::for_config(&c, vec![0]).is_err());
        c.heads = 4;
        assert_eq!(Grid::for_config(&c, vec![0]).unwrap().heads, vec![4]);
    }

    #[test]
    fn tiny_model_gradients() {
        for kind in [ModelKind::EncoderOnly, ModelKind::EncoderDecoder] {
            let err = model_gradient_error(&tiny_config(kind), 3, GRAD_EPS).unwrap();
            assert!(err <= GRAD_TOL, "{kind:?}: {err}");
        }
    }
}
