//! Weight initialization: Xavier, fixed-scale truncated normal, and Admin.
//!
//! Admin profiles the output variance of every residual branch on a few
//! batches of real input, then fixes the identity-path multiplier of
//! sub-layer `i` to `ω_i = sqrt(max(1, Σ_{j<i} v_j))`, accumulating
//! separately along the encoder chain and the decoder chain. The trained
//! parameter set is unchanged; only the fixed `ω_i` differ from vanilla.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, ModelInput, ModelParams};
use crate::rng::RngStream;
use crate::tape::Tape;
use crate::task::ToyTask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseScheme {
    Xavier,
    TruncatedNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    Xavier,
    TruncatedNormal,
    Admin,
}

/// Reference matrix widths used for Xavier fans.
///
/// A reconstructed deep model reuses the per-matrix scales of the shallow
/// model it came from, so its narrow heads and feedforward blocks are scaled
/// as if they were slices of the shallow model's full matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReferenceWidths {
    pub attn: usize,
    pub ffn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub scheme: InitScheme,
    /// Underlying weight distribution; for non-Admin schemes it mirrors `scheme`.
    pub base: BaseScheme,
    /// Standard deviation for the truncated normal; unused by Xavier.
    pub scale: f64,
    /// Profiling batches for Admin.
    pub profile_batches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_widths: Option<ReferenceWidths>,
}

pub const BERT_INIT_STD: f64 = 0.02;

impl InitSpec {
    pub fn xavier() -> Self {
        InitSpec {
            scheme: InitScheme::Xavier,
            base: BaseScheme::Xavier,
            scale: 1.0,
            profile_batches: 1,
            reference_widths: None,
        }
    }

    pub fn truncated_normal(std: f64) -> Self {
        InitSpec {
            scheme: InitScheme::TruncatedNormal,
            base: BaseScheme::TruncatedNormal,
            scale: std,
            profile_batches: 1,
            reference_widths: None,
        }
    }

    pub fn admin(base: BaseScheme) -> Self {
        InitSpec {
            scheme: InitScheme::Admin,
            base,
            scale: BERT_INIT_STD,
            profile_batches: 4,
            reference_widths: None,
        }
    }

    pub fn with_reference_widths(mut self, widths: ReferenceWidths) -> Self {
        self.reference_widths = Some(widths);
        self
    }

    pub fn is_admin(&self) -> bool {
        self.scheme == InitScheme::Admin
    }

    pub fn validate(&self) -> Result<()> {
        let consistent = match self.scheme {
            InitScheme::Xavier => self.base == BaseScheme::Xavier,
            InitScheme::TruncatedNormal => self.base == BaseScheme::TruncatedNormal,
            InitScheme::Admin => true,
        };
        if !consistent {
            return Err(Error::Config(format!(
                "{:?} init cannot use base {:?}",
                self.scheme, self.base
            )));
        }
        if self.base == BaseScheme::TruncatedNormal && !(self.scale > 0.0 && self.scale.is_finite())
        {
            return Err(Error::Config(format!(
                "truncated-normal scale must be positive, got {}",
                self.scale
            )));
        }
        if self.profile_batches == 0 {
            return Err(Error::Config("profile batches must be at least 1".into()));
        }
        if let Some(w) = self.reference_widths {
            if w.attn == 0 || w.ffn == 0 {
                return Err(Error::Config("reference widths must be positive".into()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for InitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.scheme, self.base) {
            (InitScheme::Xavier, _) => write!(f, "xavier"),
            (InitScheme::TruncatedNormal, _) => write!(f, "truncated-normal"),
            (InitScheme::Admin, BaseScheme::Xavier) => write!(f, "admin"),
            (InitScheme::Admin, BaseScheme::TruncatedNormal) => write!(f, "admin-truncated-normal"),
        }
    }
}

impl FromStr for InitSpec {
    type Err = Error;

    /// Accepts `vanilla`/`xavier`, `truncated-normal`, `admin`/`admin-xavier`
    /// and `admin-truncated-normal`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" | "xavier" => Ok(InitSpec::xavier()),
            "truncated-normal" => Ok(InitSpec::truncated_normal(BERT_INIT_STD)),
            "admin" | "admin-xavier" => Ok(InitSpec::admin(BaseScheme::Xavier)),
            "admin-truncated-normal" => Ok(InitSpec::admin(BaseScheme::TruncatedNormal)),
            _ => Err(Error::Config(format!("unknown init scheme {s:?}"))),
        }
    }
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))` with fans taken from `shape`.
pub fn xavier_init(shape: &[usize], rng: &mut RngStream) -> Tensor {
    assert_eq!(shape.len(), 2, "xavier init needs a 2-D shape");
    xavier_init_with_fans(shape, shape[0], shape[1], rng)
}

pub fn xavier_init_with_fans(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut RngStream,
) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.uniform_tensor(shape, -bound, bound)
}

/// `N(0, std²)` redrawn until the sample lies within `±2·std`.
pub fn truncated_normal_init(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z = rng.normal();
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
}

/// Per-tensor initializer derived from a config and an init spec.
pub(crate) struct ParamInit {
    base: BaseScheme,
    std: f64,
    d_model: usize,
    attn: usize,
    ffn: usize,
}

impl ParamInit {
    pub(crate) fn new(config: &ModelConfig, spec: &InitSpec) -> Self {
        let widths = spec.reference_widths.unwrap_or(ReferenceWidths {
            attn: config.attn_width(),
            ffn: config.d_ffn,
        });
        ParamInit {
            base: spec.base,
            std: spec.scale,
            d_model: config.d_model,
            attn: widths.attn,
            ffn: widths.ffn,
        }
    }

    fn draw(&self, shape: &[usize], fans: (usize, usize), rng: &mut RngStream) -> Tensor {
        match self.base {
            BaseScheme::Xavier => xavier_init_with_fans(shape, fans.0, fans.1, rng),
            BaseScheme::TruncatedNormal => truncated_normal_init(shape, self.std, rng),
        }
    }

    pub(crate) fn embedding(&self, shape: &[usize], rng: &mut RngStream) -> Tensor {
        self.draw(shape, (shape[0], shape[1]), rng)
    }

    pub(crate) fn attention_in(&self, shape: &[usize], rng: &mut RngStream) -> Tensor {
        self.draw(shape, (self.d_model, self.attn), rng)
    }

    pub(crate) fn attention_out(&self, shape: &[usize], rng: &mut RngStream) -> Tensor {
        self.draw(shape, (self.attn, self.d_model), rng)
    }

    pub(crate) fn ffn_in(&self, shape: &[usize], rng: &mut RngStream) -> Tensor {
        self.draw(shape, (self.d_model, self.ffn), rng)
    }

    pub(crate) fn ffn_out(&self, shape: &[usize], rng: &mut RngStream) -> Tensor {
        self.draw(shape, (self.ffn, self.d_model), rng)
    }

    pub(crate) fn output(&self, shape: &[usize], rng: &mut RngStream) -> Tensor {
        self.draw(shape, (shape[0], shape[1]), rng)
    }
}

/// What the profiling pass ran on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileBatch {
    pub seed: u64,
    pub batches: usize,
    pub batch_size: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdminProfile {
    /// Branch output variance `v_i` per sub-layer, encoder first.
    pub variances: Vec<f64>,
    /// Residual scale `ω_i` per sub-layer.
    pub omegas: Vec<f64>,
    pub batch: ProfileBatch,
}

/// Row of the serialized profile record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileEntry {
    pub sublayer: usize,
    pub variance: f64,
    pub omega: f64,
}

impl AdminProfile {
    pub fn entries(&self) -> Vec<ProfileEntry> {
        self.variances
            .iter()
            .zip(&self.omegas)
            .enumerate()
            .map(|(i, (&variance, &omega))| ProfileEntry {
                sublayer: i,
                variance,
                omega,
            })
            .collect()
    }
}

/// `ω_i = sqrt(max(1, Σ_{j<i} v_j))` with the sum restarting at each index in
/// `chain_starts` (the first decoder sub-layer starts a new chain).
pub fn residual_scales(variances: &[f64], chain_starts: &[usize]) -> Vec<f64> {
    let mut acc = 0.0f64;
    variances
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if chain_starts.contains(&i) {
                acc = 0.0;
            }
            let omega = acc.max(1.0).sqrt();
            acc += v;
            omega
        })
        .collect()
}

/// Profiles branch variances on explicit inputs.
pub fn admin_profile_inputs(
    model: &ModelParams,
    inputs: &[ModelInput],
    batch: ProfileBatch,
) -> Result<AdminProfile> {
    if model.sublayers().any(|s| s.residual_scale != 1.0) {
        return Err(Error::Config(
            "admin profiling expects a model with all residual scales at 1".into(),
        ));
    }
    if inputs.is_empty() {
        return Err(Error::Config(
            "admin profiling needs at least one batch".into(),
        ));
    }
    let count = model.config.sublayer_count();
    let mut sums = vec![0.0; count];
    let mut sq = vec![0.0; count];
    let mut n = vec![0usize; count];
    for input in inputs {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let mut trace = ForwardTrace::default();
        let result = bound.logits(&mut tape, input, &mut trace);
        // report the first sub-layer whose branch went non-finite, even if a
        // later op failed because of it
        for (i, &b) in trace.branches.iter().enumerate() {
            let value = tape.value(b);
            if !value.is_finite() {
                return Err(Error::Profiling { sublayer: i });
            }
            sums[i] += value.sum();
            sq[i] += value.data().iter().map(|x| x * x).sum::<f64>();
            n[i] += value.len();
        }
        result?;
    }
    let variances: Vec<f64> = (0..count)
        .map(|i| {
            let mean = sums[i] / n[i] as f64;
            (sq[i] / n[i] as f64 - mean * mean).max(0.0)
        })
        .collect();
    let omegas = residual_scales(&variances, &[model.encoder.len()]);
    Ok(AdminProfile {
        variances,
        omegas,
        batch,
    })
}

/// Profiles branch variances on `batches` freshly drawn task batches.
pub fn admin_profile(
    model: &ModelParams,
    task: &ToyTask,
    rng: &RngStream,
    batches: usize,
    batch_size: usize,
) -> Result<AdminProfile> {
    if batches == 0 {
        return Err(Error::Config("profile batches must be at least 1".into()));
    }
    let mut draw = rng.clone();
    let inputs: Vec<ModelInput> = (0..batches)
        .map(|_| task.make_batch(batch_size, &mut draw).map(|b| b.input))
        .collect::<Result<_>>()?;
    admin_profile_inputs(
        model,
        &inputs,
        ProfileBatch {
            seed: rng.seed(),
            batches,
            batch_size,
            seq_len: task.seq_len,
        },
    )
}

/// Installs the profiled residual scales.
pub fn apply_admin(model: &ModelParams, profile: &AdminProfile) -> Result<ModelParams> {
    let count = model.config.sublayer_count();
    if profile.omegas.len() != count {
        return Err(Error::Config(format!(
            "profile has {} residual scales, model has {count} sub-layers",
            profile.omegas.len()
        )));
    }
    if let Some(bad) = profile
        .omegas
        .iter()
        .find(|w| !(w.is_finite() && **w > 0.0))
    {
        return Err(Error::Config(format!(
            "residual scale must be positive, got {bad}"
        )));
    }
    let mut out = model.clone();
    for (sub, &omega) in out.sublayers_mut().zip(&profile.omegas) {
        sub.residual_scale = omega;
    }
    Ok(out)
}
