//! Training loop, divergence detection, and the stability / head-count sweeps.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accounting::{count_params, reconstruct};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::init::{admin_profile, apply_admin, AdminProfile, InitSpec, ReferenceWidths};
use crate::model::{build, ForwardTrace, ModelParams};
use crate::optim::{AdamConfig, OptimState};
use crate::rng::RngStream;
use crate::tape::Tape;
use crate::task::{Batch, TaskKind, ToyTask};
use crate::tensor::Tensor;

const STREAM_BUILD: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_VALID: u64 = 3;
const STREAM_PROFILE: u64 = 4;

/// Explosion rule: after `reference_steps` losses, the run diverges once the
/// loss stays above `factor` times their mean for `patience` consecutive steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub reference_steps: usize,
    pub factor: f64,
    pub patience: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            reference_steps: 50,
            factor: 10.0,
            patience: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Converged,
    DivergedNan { step: usize },
    DivergedExplosion { step: usize },
}

impl RunStatus {
    pub fn diverged(self) -> bool {
        self != RunStatus::Converged
    }

    pub fn name(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::DivergedNan { .. } => "diverged-nan",
            RunStatus::DivergedExplosion { .. } => "diverged-explosion",
        }
    }
}

/// Streaming divergence detector over a loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    seen: usize,
    reference_sum: f64,
    streak: usize,
    status: RunStatus,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Self {
        Detector {
            config,
            seen: 0,
            reference_sum: 0.0,
            streak: 0,
            status: RunStatus::Converged,
        }
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    /// Feeds the loss of 1-based `step`. Once flagged, the status never changes.
    pub fn observe(&mut self, step: usize, loss: f64) -> RunStatus {
        if self.status.diverged() {
            return self.status;
        }
        if !loss.is_finite() {
            self.status = RunStatus::DivergedNan { step };
            return self.status;
        }
        self.seen += 1;
        let c = self.config;
        if self.seen <= c.reference_steps {
            self.reference_sum += loss;
            return self.status;
        }
        let reference = self.reference_sum / c.reference_steps as f64;
        if loss > c.factor * reference {
            self.streak += 1;
            if self.streak >= c.patience {
                self.status = RunStatus::DivergedExplosion {
                    step: step + 1 - self.streak,
                };
            }
        } else {
            self.streak = 0;
        }
        self.status
    }

    /// Status of a whole trace whose first entry is step 1.
    pub fn scan(config: DetectorConfig, losses: &[f64]) -> RunStatus {
        let mut d = Detector::new(config);
        for (i, &l) in losses.iter().enumerate() {
            if d.observe(i + 1, l).diverged() {
                break;
            }
        }
        d.status
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub detector: DetectorConfig,
    /// Steps per epoch; validation runs at the end of every epoch and of training.
    pub epoch_steps: usize,
    pub valid_batches: usize,
    /// Batch size of the Admin profiling pass.
    pub profile_batch_size: usize,
    /// Replaces one gradient entry with NaN at this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject_nan_at: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 16,
            optimizer: AdamConfig::default(),
            detector: DetectorConfig::default(),
            epoch_steps: 100,
            valid_batches: 4,
            profile_batch_size: 16,
            inject_nan_at: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.valid_batches == 0
            || self.epoch_steps == 0
            || self.profile_batch_size == 0
        {
            return Err(Error::Config(
                "batch sizes, epoch length and validation batches must be positive".into(),
            ));
        }
        let d = self.detector;
        if d.reference_steps == 0 || d.patience == 0 || d.factor.is_nan() || d.factor <= 0.0 {
            return Err(Error::Config("detector settings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean row entropy (nats) and mean row maximum of attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    pub entropy: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub model: String,
    pub config: ModelConfig,
    pub init: InitSpec,
    pub task: ToyTask,
    pub seed: u64,
    pub steps: usize,
    pub status: RunStatus,
    pub trace: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub attention_initial: Option<Concentration>,
    pub attention_final: Option<Concentration>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub admin_profile: Option<AdminProfile>,
    /// Not serialized, so records written to disk replay byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn final_eval(&self) -> Option<EvalRecord> {
        self.evals.last().copied()
    }

    pub fn initial_loss(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, |s| s.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |s| s.loss)
    }
}

/// Hex SHA-256 of the config's TOML form.
pub fn config_hash(config: &ModelConfig) -> String {
    let digest = Sha256::digest(config.to_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Summary over the rows of one attention map.
pub fn attention_concentration(weights: &Tensor) -> Result<Concentration> {
    let (rows, cols) = (weights.rows(), weights.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::Input("empty attention map".into()));
    }
    let mut entropy = 0.0;
    let mut max = 0.0;
    for r in 0..rows {
        let row = weights.row(r);
        let sum: f64 = row.iter().sum();
        if sum.is_nan() || (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Input(format!(
                "attention row {r} is not a distribution (sum {sum})"
            )));
        }
        entropy -= row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
        max += row.iter().copied().fold(0.0, f64::max);
    }
    Ok(Concentration {
        entropy: entropy / rows as f64,
        max: max / rows as f64,
    })
}

fn mean_concentration(maps: &[Tensor]) -> Result<Option<Concentration>> {
    if maps.is_empty() {
        return Ok(None);
    }
    let all = maps
        .iter()
        .map(attention_concentration)
        .collect::<Result<Vec<_>>>()?;
    let k = all.len() as f64;
    Ok(Some(Concentration {
        entropy: all.iter().map(|c| c.entropy).sum::<f64>() / k,
        max: all.iter().map(|c| c.max).sum::<f64>() / k,
    }))
}

/// Weighted cross-entropy and token accuracy over the scored rows of `batches`.
pub fn evaluate(model: &ModelParams, batches: &[Batch]) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut total) = (0.0, 0.0, 0.0);
    for b in batches {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let logits = bound.logits(&mut tape, &b.input, &mut ForwardTrace::default())?;
        let ce = tape.cross_entropy(logits, &b.targets, &b.weights)?;
        let w: f64 = b.weights.iter().sum();
        loss += tape.value(ce).data()[0] * w;
        let lv = tape.value(logits);
        for r in b.scored_rows() {
            let row = lv.row(r);
            let best = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            if best == b.targets[r] {
                correct += b.weights[r];
            }
        }
        total += w;
    }
    Ok((loss / total, correct / total))
}

/// Attention concentration of `model` on one batch.
pub fn concentration_on(model: &ModelParams, batch: &Batch) -> Result<Option<Concentration>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let mut trace = ForwardTrace::default();
    bound.logits(&mut tape, &batch.input, &mut trace)?;
    let maps: Vec<Tensor> = trace
        .attention
        .iter()
        .flat_map(|(_, heads)| heads.iter().map(|&w| tape.value(w).clone()))
        .collect();
    mean_concentration(&maps)
}

/// Builds (and for Admin, profiles) the model a run starts from.
pub fn initial_model(
    config: &ModelConfig,
    init: &InitSpec,
    task: &ToyTask,
    seed: u64,
    profile_batch_size: usize,
) -> Result<(ModelParams, Option<AdminProfile>)> {
    let root = RngStream::new(seed, 0);
    let model = build(config, init, &root.split(STREAM_BUILD))?;
    if !init.is_admin() {
        return Ok((model, None));
    }
    let profile = admin_profile(
        &model,
        task,
        &root.split(STREAM_PROFILE),
        init.profile_batches,
        profile_batch_size,
    )?;
    let model = apply_admin(&model, &profile)?;
    Ok((model, Some(profile)))
}

fn all_finite(model: &ModelParams) -> bool {
    model.tensors().iter().all(|t| t.is_finite())
}

/// One full training run. Divergence is an outcome recorded in the result, not an error.
pub fn train(
    config: &ModelConfig,
    init: &InitSpec,
    task: &ToyTask,
    seed: u64,
    steps: usize,
    options: &TrainOptions,
) -> Result<RunRecord> {
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    config.validate()?;
    init.validate()?;
    task.validate()?;
    options.validate()?;
    if task.input_len() > config.max_pos || task.vocab > config.vocab {
        return Err(Error::Config(
            "task does not fit the model's positions or vocabulary".into(),
        ));
    }
    let started = Instant::now();
    let root = RngStream::new(seed, 0);
    let (mut model, profile) = initial_model(config, init, task, seed, options.profile_batch_size)?;

    let mut valid_rng = root.split(STREAM_VALID);
    let valid: Vec<Batch> = (0..options.valid_batches)
        .map(|_| task.make_batch(options.batch_size, &mut valid_rng))
        .collect::<Result<_>>()?;
    let attention_initial = concentration_on(&model, &valid[0])?;

    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut opt = OptimState::new(options.optimizer, &sizes);
    let mut detector = Detector::new(options.detector);
    let mut data = root.split(STREAM_TRAIN);
    let mut trace = Vec::with_capacity(steps);
    let mut evals = Vec::new();
    let lr_at = |step| options.optimizer.schedule.lr(step);

    for step in 1..=steps {
        let batch = task.make_batch(options.batch_size, &mut data)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let forward = bound
            .logits(&mut tape, &batch.input, &mut ForwardTrace::default())
            .and_then(|logits| tape.cross_entropy(logits, &batch.targets, &batch.weights));
        let loss_var = match forward {
            Ok(v) => v,
            Err(_) if !all_finite(&model) => {
                trace.push(StepRecord {
                    step,
                    loss: f64::NAN,
                    lr: lr_at(step),
                    grad_norm: f64::NAN,
                });
                detector.observe(step, f64::NAN);
                break;
            }
            Err(e) => return Err(e),
        };
        let loss = tape.value(loss_var).data()[0];
        let mut grads = tape.backward(loss_var);
        let mut flat: Vec<Vec<f64>> = bound
            .tensors()
            .iter()
            .zip(&sizes)
            .map(|(&&v, &n)| grads.take(v).unwrap_or_else(|| vec![0.0; n]))
            .collect();
        if options.inject_nan_at == Some(step) {
            flat[0][0] = f64::NAN;
        }
        let grads_finite = flat.iter().flatten().all(|g| g.is_finite());
        if !loss.is_finite() || !grads_finite {
            trace.push(StepRecord {
                step,
                loss,
                lr: lr_at(step),
                grad_norm: crate::optim::global_norm(&flat),
            });
            detector.observe(step, f64::NAN);
            break;
        }
        let stats = opt.update(&mut model.tensors_mut(), &flat)?;
        trace.push(StepRecord {
            step,
            loss,
            lr: stats.lr,
            grad_norm: stats.grad_norm,
        });
        if detector.observe(step, loss).diverged() {
            break;
        }
        if step % options.epoch_steps == 0 || step == steps {
            if !all_finite(&model) {
                detector.observe(step, f64::NAN);
                break;
            }
            let (l, a) = evaluate(&model, &valid)?;
            evals.push(EvalRecord {
                step,
                loss: l,
                accuracy: a,
            });
        }
    }

    let status = detector.status();
    let attention_final = if status.diverged() {
        None
    } else {
        concentration_on(&model, &valid[0])?
    };
    Ok(RunRecord {
        config_hash: config_hash(config),
        model: config.shorthand().to_string(),
        config: config.clone(),
        init: *init,
        task: *task,
        seed,
        steps,
        status,
        trace,
        evals,
        attention_initial,
        attention_final,
        admin_profile: profile,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// One unit of sweep work.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub config: ModelConfig,
    pub init: InitSpec,
    pub task: ToyTask,
    pub seed: u64,
    pub steps: usize,
}

/// Runs `specs` on at most `workers` threads; results keep the order of `specs`.
pub fn run_all(
    specs: &[RunSpec],
    options: &TrainOptions,
    workers: usize,
) -> Result<Vec<RunRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        specs
            .par_iter()
            .map(|s| train(&s.config, &s.init, &s.task, s.seed, s.steps, options))
            .collect()
    })
}

/// The deep single-head model of `shallow`, initialized with the shallow model's fans.
pub fn deep_counterpart(shallow: &ModelConfig, init: &InitSpec) -> Result<(ModelConfig, InitSpec)> {
    let deep = reconstruct(shallow)?;
    let widths = init.reference_widths.unwrap_or(ReferenceWidths {
        attn: shallow.attn_width(),
        ffn: shallow.d_ffn,
    });
    Ok((deep, init.with_reference_widths(widths)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCell {
    pub model: String,
    pub init: String,
    pub runs: usize,
    pub diverged: usize,
    pub rate: f64,
    /// Seeds whose run diverged, with the status name.
    pub failures: Vec<(u64, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityTable {
    pub task: ToyTask,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub cells: Vec<StabilityCell>,
}

impl StabilityTable {
    pub fn cell(&self, model: &str, init: &str) -> Option<&StabilityCell> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.init == init)
    }
}

/// Trains `shallow` and its deep reconstruction under every init and seed.
#[allow(clippy::too_many_arguments)]
pub fn stability_sweep(
    shallow: &ModelConfig,
    seeds: &[u64],
    inits: &[InitSpec],
    task: TaskKind,
    seq_len: usize,
    steps: usize,
    options: &TrainOptions,
    workers: usize,
) -> Result<(StabilityTable, Vec<RunRecord>)> {
    if shallow.heads < 2 {
        return Err(Error::Config(
            "stability sweep needs a multi-head shallow model".into(),
        ));
    }
    if seeds.is_empty() || inits.is_empty() {
        return Err(Error::Config(
            "seed and init lists must be non-empty".into(),
        ));
    }
    let mut cells_specs = Vec::new();
    for init in inits {
        let (deep, deep_init) = deep_counterpart(shallow, init)?;
        cells_specs.push((shallow.clone(), *init));
        cells_specs.push((deep, deep_init));
    }
    let toy = ToyTask::for_model(task, shallow, seq_len)?;
    let specs: Vec<RunSpec> = cells_specs
        .iter()
        .flat_map(|(c, i)| {
            seeds.iter().map(|&seed| RunSpec {
                config: c.clone(),
                init: *i,
                task: toy,
                seed,
                steps,
            })
        })
        .collect();
    let runs = run_all(&specs, options, workers)?;
    let cells = cells_specs
        .iter()
        .zip(runs.chunks(seeds.len()))
        .map(|((c, i), group)| {
            let failures: Vec<(u64, String)> = group
                .iter()
                .filter(|r| r.status.diverged())
                .map(|r| (r.seed, r.status.name().to_string()))
                .collect();
            StabilityCell {
                model: c.shorthand().to_string(),
                init: i.to_string(),
                runs: group.len(),
                diverged: failures.len(),
                rate: failures.len() as f64 / group.len() as f64,
                failures,
            }
        })
        .collect();
    Ok((
        StabilityTable {
            task: toy,
            steps,
            seeds: seeds.to_vec(),
            cells,
        },
        runs,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub shallow_loss: f64,
    pub shallow_accuracy: f64,
    pub deep_loss: f64,
    pub deep_accuracy: f64,
}

impl SeedResult {
    /// Validation-loss advantage of the deep model (positive when deep is better).
    pub fn gap(&self) -> f64 {
        self.shallow_loss - self.deep_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSweepRow {
    pub heads: usize,
    pub layers: usize,
    pub shallow: String,
    pub deep: String,
    pub shallow_params: u64,
    pub deep_params: u64,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSweepTable {
    pub task: TaskKind,
    pub steps: usize,
    pub shallow_init: String,
    pub deep_init: String,
    pub rows: Vec<HeadSweepRow>,
}

impl HeadSweepTable {
    pub fn row(&self, heads: usize, layers: usize) -> Option<&HeadSweepRow> {
        self.rows
            .iter()
            .find(|r| r.heads == heads && r.layers == layers)
    }
}

/// Trains `γH-kL` (vanilla `shallow_init`) against its `1H-γkL` reconstruction
/// (`deep_init`) for every head count `γ` and layer count `k`.
///
/// `base` supplies every dimension except heads and layers; its `d_ffn` is
/// read per head, so the shallow model gets `γ * base.d_ffn`.
#[allow(clippy::too_many_arguments)]
pub fn head_sweep(
    base: &ModelConfig,
    head_counts: &[usize],
    layer_counts: &[usize],
    task: TaskKind,
    seq_len: usize,
    steps: usize,
    seeds: &[u64],
    shallow_init: &InitSpec,
    deep_init: &InitSpec,
    options: &TrainOptions,
    workers: usize,
) -> Result<(HeadSweepTable, Vec<RunRecord>)> {
    if head_counts.is_empty() || layer_counts.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "head, layer and seed lists must be non-empty".into(),
        ));
    }
    let mut points = Vec::new();
    for &heads in head_counts {
        for &layers in layer_counts {
            let shallow = ModelConfig {
                heads,
                enc_layers: layers,
                dec_layers: if base.dec_layers > 0 { layers } else { 0 },
                d_ffn: heads * base.d_ffn,
                ..base.clone()
            };
            shallow.validate()?;
            let (deep, d_init) = deep_counterpart(&shallow, deep_init)?;
            points.push((heads, layers, shallow, deep, d_init));
        }
    }
    let toy = ToyTask::for_model(task, base, seq_len)?;
    let mut specs = Vec::new();
    for (_, _, shallow, deep, d_init) in &points {
        for (c, i) in [(shallow, *shallow_init), (deep, *d_init)] {
            specs.extend(seeds.iter().map(|&seed| RunSpec {
                config: c.clone(),
                init: i,
                task: toy,
                seed,
                steps,
            }));
        }
    }
    let runs = run_all(&specs, options, workers)?;
    let k = seeds.len();
    let rows = points
        .iter()
        .enumerate()
        .map(|(p, (heads, layers, shallow, deep, _))| {
            let s = &runs[2 * p * k..(2 * p + 1) * k];
            let d = &runs[(2 * p + 1) * k..(2 * p + 2) * k];
            let metric = |r: &RunRecord| {
                r.final_eval()
                    .map_or((f64::INFINITY, 0.0), |e| (e.loss, e.accuracy))
            };
            HeadSweepRow {
                heads: *heads,
                layers: *layers,
                shallow: shallow.shorthand().to_string(),
                deep: deep.shorthand().to_string(),
                shallow_params: count_params(shallow),
                deep_params: count_params(deep),
                seeds: s
                    .iter()
                    .zip(d)
                    .map(|(a, b)| {
                        let ((sl, sa), (dl, da)) = (metric(a), metric(b));
                        SeedResult {
                            seed: a.seed,
                            shallow_loss: if a.status.diverged() {
                                f64::INFINITY
                            } else {
                                sl
                            },
                            shallow_accuracy: sa,
                            deep_loss: if b.status.diverged() {
                                f64::INFINITY
                            } else {
                                dl
                            },
                            deep_accuracy: da,
                        }
                    })
                    .collect(),
            }
        })
        .collect();
    Ok((
        HeadSweepTable {
            task,
            steps,
            shallow_init: shallow_init.to_string(),
            deep_init: deep_init.to_string(),
            rows,
        },
        runs,
    ))
}
