//! On-disk formats: one CSV per run, one JSON summary per sweep, and the
//! accounting table.
//!
//! Floats are written in Rust's shortest round-trip form, so identical runs
//! produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::accounting::{
    count_flops, count_params, param_breakdown, reconstruct, relative_gap, ParamBreakdown,
    CONVENTION,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::init::{AdminProfile, ProfileEntry};
use crate::train::{HeadSweepTable, RunRecord, StabilityCell, StabilityTable};

pub const RUN_CSV_HEADER: &str = "step,loss,lr,grad_norm";

pub fn run_csv(record: &RunRecord) -> String {
    let mut out = String::from(RUN_CSV_HEADER);
    out.push('\n');
    for s in &record.trace {
        writeln!(out, "{},{},{},{}", s.step, s.loss, s.lr, s.grad_norm).expect("write to string");
    }
    out
}

/// File stem identifying a run: `<model>_<init>_seed<seed>`.
pub fn run_stem(record: &RunRecord) -> String {
    format!("{}_{}_seed{}", record.model, record.init, record.seed)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Writes one CSV per run into `dir` and returns the paths written.
pub fn write_run_csvs(dir: &Path, records: &[RunRecord]) -> Result<Vec<std::path::PathBuf>> {
    records
        .iter()
        .map(|r| {
            let path = dir.join(format!("{}.csv", run_stem(r)));
            write_file(&path, &run_csv(r))?;
            Ok(path)
        })
        .collect()
}

/// Per-run line of a sweep summary; the full trace lives in the run's CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub model: String,
    pub init: String,
    pub seed: u64,
    pub config_hash: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<usize>,
    pub steps_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_max_initial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_max_final: Option<f64>,
    pub csv: String,
}

impl RunSummary {
    pub fn of(r: &RunRecord) -> Self {
        use crate::train::RunStatus;
        let eval = r.final_eval();
        RunSummary {
            model: r.model.clone(),
            init: r.init.to_string(),
            seed: r.seed,
            config_hash: r.config_hash.clone(),
            status: r.status.name().to_string(),
            diverged_at: match r.status {
                RunStatus::Converged => None,
                RunStatus::DivergedNan { step } | RunStatus::DivergedExplosion { step } => {
                    Some(step)
                }
            },
            steps_run: r.trace.len(),
            initial_loss: r.initial_loss(),
            final_loss: r.final_loss(),
            valid_loss: eval.map(|e| e.loss),
            valid_accuracy: eval.map(|e| e.accuracy),
            attention_max_initial: r.attention_initial.map(|c| c.max),
            attention_max_final: r.attention_final.map(|c| c.max),
            csv: format!("{}.csv", run_stem(r)),
        }
    }

    pub fn line(&self) -> String {
        let mut s = format!(
            "{} {} seed {}: {} after {} steps, loss {:.4} -> {:.4}",
            self.model,
            self.init,
            self.seed,
            self.status,
            self.steps_run,
            self.initial_loss,
            self.final_loss
        );
        if let (Some(l), Some(a)) = (self.valid_loss, self.valid_accuracy) {
            write!(s, ", valid loss {l:.4} acc {a:.3}").expect("write to string");
        }
        s
    }
}

/// Summary of plain training runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary<'a> {
    pub runs: Vec<RunSummary>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub admin_profiles: BTreeMap<String, Vec<ProfileEntry>>,
    pub config: &'a ModelConfig,
}

pub fn train_summary_json(config: &ModelConfig, records: &[RunRecord]) -> String {
    let admin_profiles = records
        .iter()
        .filter_map(|r| r.admin_profile.as_ref().map(|p| (run_stem(r), p.entries())))
        .collect();
    to_json(&TrainSummary {
        runs: records.iter().map(RunSummary::of).collect(),
        admin_profiles,
        config,
    })
}

/// Stability sweep summary, cells keyed `<model> x <init>`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilitySummary<'a> {
    pub task: String,
    pub seq_len: usize,
    pub steps: usize,
    pub seeds: &'a [u64],
    pub cells: BTreeMap<String, &'a StabilityCell>,
    pub runs: Vec<RunSummary>,
}

pub fn cell_key(model: &str, init: &str) -> String {
    format!("{model} x {init}")
}

pub fn stability_json(table: &StabilityTable, records: &[RunRecord]) -> String {
    to_json(&StabilitySummary {
        task: table.task.kind.to_string(),
        seq_len: table.task.seq_len,
        steps: table.steps,
        seeds: &table.seeds,
        cells: table
            .cells
            .iter()
            .map(|c| (cell_key(&c.model, &c.init), c))
            .collect(),
        runs: records.iter().map(RunSummary::of).collect(),
    })
}

pub fn stability_text(table: &StabilityTable) -> String {
    let mut out = format!(
        "{:<12} {:<24} {:>8} {:>6}\n",
        "model", "init", "diverged", "rate"
    );
    for c in &table.cells {
        writeln!(
            out,
            "{:<12} {:<24} {:>5}/{:<2} {:>6.2}",
            c.model, c.init, c.diverged, c.runs, c.rate
        )
        .expect("write");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadSweepSummary<'a> {
    pub table: &'a HeadSweepTable,
    pub runs: Vec<RunSummary>,
}

pub fn head_sweep_json(table: &HeadSweepTable, records: &[RunRecord]) -> String {
    to_json(&HeadSweepSummary {
        table,
        runs: records.iter().map(RunSummary::of).collect(),
    })
}

pub fn head_sweep_text(table: &HeadSweepTable) -> String {
    let mut out = format!(
        "{:<10} {:<10} {:>12} {:>12} {:>12} {:>12}\n",
        "shallow", "deep", "params", "params", "loss", "loss"
    );
    for r in &table.rows {
        let k = r.seeds.len() as f64;
        let sl = r.seeds.iter().map(|s| s.shallow_loss).sum::<f64>() / k;
        let dl = r.seeds.iter().map(|s| s.deep_loss).sum::<f64>() / k;
        writeln!(
            out,
            "{:<10} {:<10} {:>12} {:>12} {:>12.5} {:>12.5}",
            r.shallow, r.deep, r.shallow_params, r.deep_params, sl, dl
        )
        .expect("write");
    }
    out
}

/// Row of the accounting table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountRow {
    pub model: String,
    pub params: u64,
    pub flops: u64,
    pub breakdown: ParamBreakdown,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountReport {
    pub seq_len: usize,
    pub convention: &'static str,
    pub original: CountRow,
    pub reconstructed: CountRow,
    /// `|deep - shallow| / shallow`, in percent.
    pub param_gap_percent: f64,
    pub flop_gap_percent: f64,
}

fn count_row(c: &ModelConfig, seq_len: usize) -> CountRow {
    CountRow {
        model: c.shorthand().to_string(),
        params: count_params(c),
        flops: count_flops(c, seq_len),
        breakdown: param_breakdown(c),
        config: c.clone(),
    }
}

pub fn count_report(config: &ModelConfig, seq_len: usize) -> Result<CountReport> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be at least 1".into()));
    }
    let original = count_row(config, seq_len);
    let reconstructed = count_row(&reconstruct(config)?, seq_len);
    Ok(CountReport {
        seq_len,
        convention: CONVENTION,
        param_gap_percent: 100.0 * relative_gap(reconstructed.params, original.params),
        flop_gap_percent: 100.0 * relative_gap(reconstructed.flops, original.flops),
        original,
        reconstructed,
    })
}

/// Human-readable millions / billions.
pub fn human(n: u64) -> String {
    let x = n as f64;
    if x >= 1e9 {
        format!("{:.1}B", x / 1e9)
    } else if x >= 1e6 {
        format!("{:.1}M", x / 1e6)
    } else {
        n.to_string()
    }
}

pub fn count_text(r: &CountReport) -> String {
    let mut out = format!(
        "{:<14} {:>14} {:>8} {:>18} {:>8}\n",
        "model", "params", "", "flops", ""
    );
    for row in [&r.original, &r.reconstructed] {
        writeln!(
            out,
            "{:<14} {:>14} {:>8} {:>18} {:>8}",
            row.model,
            row.params,
            human(row.params),
            row.flops,
            human(row.flops)
        )
        .expect("write");
    }
    writeln!(
        out,
        "parity: params {:.2}%, flops {:.2}% (seq {})",
        r.param_gap_percent, r.flop_gap_percent, r.seq_len
    )
    .expect("write");
    writeln!(out, "convention: {}", r.convention).expect("write");
    out
}

pub fn profile_json(profile: &AdminProfile) -> String {
    #[derive(Serialize)]
    struct Record<'a> {
        batch: &'a crate::init::ProfileBatch,
        sublayers: Vec<ProfileEntry>,
    }
    to_json(&Record {
        batch: &profile.batch,
        sublayers: profile.entries(),
    })
}
