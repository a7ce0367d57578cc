use std::fs;
use std::path::Path;

use headfold::config::{resolve_model, Defaults, ModelConfig};
use headfold::init::InitSpec;
use headfold::optim::{AdamConfig, Schedule};
use headfold::report::{
    count_report, count_text, head_sweep_json, head_sweep_text, stability_json, stability_text,
    to_json, train_summary_json, write_file, write_run_csvs, RunSummary,
};
use headfold::task::{TaskKind, ToyTask};
use headfold::train::{head_sweep, run_all, stability_sweep, RunSpec, TrainOptions};
use headfold::verify::{run_suite, Grid, Tolerances};
use headfold::{Error, Result};

use crate::{
    Cli, Command, CountArgs, ModelArgs, ReportArgs, RunArgs, SweepArgs, SweepKind, TrainArgs,
    VerifyArgs,
};

pub const WORKERS_ENV: &str = "HEADFOLD_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok = 0,
    Violation = 2,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Verify(a) => verify(a),
        Command::Count(a) => count(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}

/// `a..b` (inclusive) or `a,b,c`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || {
        Error::Config(format!(
            "cannot parse seeds {s:?} (expected e.g. 0..4 or 1,5,9)"
        ))
    };
    let seeds: Vec<u64> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

fn parse_usizes(s: &str, what: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse {what} {s:?}")))
        })
        .collect::<Result<_>>()?;
    if v.contains(&0) {
        return Err(Error::Config(format!("{what} must be positive")));
    }
    Ok(v)
}

fn resolve(m: &ModelArgs) -> Result<Option<ModelConfig>> {
    let defaults: Defaults = m.defaults.parse()?;
    let Some(spec) = &m.model else {
        return Ok(None);
    };
    let path = Path::new(spec);
    if path.is_file() {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        return ModelConfig::from_toml(&text).map(Some);
    }
    resolve_model(spec, defaults).map(Some)
}

fn require_model(m: &ModelArgs) -> Result<ModelConfig> {
    resolve(m)?.ok_or_else(|| Error::Config("--model is required".into()))
}

fn workers(flag: usize) -> Result<usize> {
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV}={v:?} is not a worker count")))?,
        Err(_) => flag,
    };
    if n == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    Ok(n)
}

fn options(a: &RunArgs) -> Result<TrainOptions> {
    if !(a.lr > 0.0 && a.lr.is_finite()) || a.clip < 0.0 || a.batch_size == 0 || a.steps == 0 {
        return Err(Error::Config(
            "--lr, --steps and --batch-size must be positive and --clip non-negative".into(),
        ));
    }
    Ok(TrainOptions {
        batch_size: a.batch_size,
        optimizer: AdamConfig {
            schedule: Schedule {
                peak: a.lr,
                warmup: a.warmup,
            },
            clip_norm: (a.clip > 0.0).then_some(a.clip),
            ..AdamConfig::default()
        },
        epoch_steps: (a.steps / 5).max(1),
        ..TrainOptions::default()
    })
}

fn verify(a: VerifyArgs) -> Result<Outcome> {
    let seeds = parse_seeds(&a.seeds)?;
    let mut grid = match resolve(&a.model)? {
        Some(c) => Grid::for_config(&c, seeds)?,
        None => Grid {
            seeds,
            ..Grid::default()
        },
    };
    if let Some(n) = a.seq_len {
        if n == 0 {
            return Err(Error::Config("--seq-len must be positive".into()));
        }
        grid.lens = vec![n];
    }
    let tol = match a.tol {
        Some(t) if t.is_nan() || t < 0.0 => {
            return Err(Error::Config("--tol must be non-negative".into()))
        }
        Some(t) => Tolerances::uniform(t),
        None => Tolerances::default(),
    };
    let checks = run_suite(&grid, tol)?;
    let mut ok = true;
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "VIOLATION" };
        println!(
            "{verdict:<9} max residual {:.3e} (tol {:.1e}, {} cases)  {}",
            c.max_residual, c.tolerance, c.cases, c.name
        );
        ok &= c.passed();
    }
    if let Some(dir) = &a.out {
        write_file(&dir.join("verify.json"), &to_json(&checks))?;
    }
    Ok(if ok { Outcome::Ok } else { Outcome::Violation })
}

fn count(a: CountArgs) -> Result<Outcome> {
    let c = require_model(&a.model)?;
    let r = count_report(&c, a.seq_len)?;
    print!("{}", count_text(&r));
    if let Some(dir) = &a.out {
        write_file(&dir.join("count.json"), &to_json(&r))?;
    }
    Ok(Outcome::Ok)
}

fn inits(s: &str) -> Result<Vec<InitSpec>> {
    parse_list(s)
}

fn train(a: TrainArgs) -> Result<Outcome> {
    let r = &a.run;
    let c = require_model(&r.model)?;
    let seeds = parse_seeds(&r.seeds)?;
    let inits = inits(&r.init)?;
    let task = ToyTask::for_model(r.task.parse()?, &c, r.seq_len)?;
    let opts = TrainOptions {
        inject_nan_at: a.inject_nan_at,
        ..options(r)?
    };
    let workers = workers(r.workers)?;
    let specs: Vec<RunSpec> = inits
        .iter()
        .flat_map(|i| {
            seeds.iter().map(|&seed| RunSpec {
                config: c.clone(),
                init: *i,
                task,
                seed,
                steps: r.steps,
            })
        })
        .collect();
    // fail on an unwritable directory before any training
    fs::create_dir_all(&r.out).map_err(|e| Error::Io(format!("{}: {e}", r.out.display())))?;
    let records = run_all(&specs, &opts, workers)?;
    write_run_csvs(&r.out, &records)?;
    write_file(&r.out.join("train.json"), &train_summary_json(&c, &records))?;
    for rec in &records {
        println!("{}", RunSummary::of(rec).line());
    }
    Ok(Outcome::Ok)
}

fn sweep(a: SweepArgs) -> Result<Outcome> {
    let r = &a.run;
    let c = require_model(&r.model)?;
    let seeds = parse_seeds(&r.seeds)?;
    let task: TaskKind = r.task.parse()?;
    let opts = options(r)?;
    let workers = workers(r.workers)?;
    fs::create_dir_all(&r.out).map_err(|e| Error::Io(format!("{}: {e}", r.out.display())))?;
    match a.kind {
        SweepKind::Stability => {
            let inits = inits(&r.init)?;
            let (table, records) =
                stability_sweep(&c, &seeds, &inits, task, r.seq_len, r.steps, &opts, workers)?;
            write_run_csvs(&r.out, &records)?;
            write_file(
                &r.out.join("stability.json"),
                &stability_json(&table, &records),
            )?;
            for rec in &records {
                println!("{}", RunSummary::of(rec).line());
            }
            print!("{}", stability_text(&table));
        }
        SweepKind::Heads => {
            let heads = parse_usizes(&a.heads, "--heads")?;
            let [shallow_init] = inits(&r.init)?[..] else {
                return Err(Error::Config(
                    "a head sweep takes exactly one --init".into(),
                ));
            };
            let deep_init: InitSpec = a.deep_init.parse()?;
            // the model flag supplies the per-head feedforward width and the layer count
            let base = ModelConfig {
                d_ffn: c.d_ffn / c.heads,
                ..c.clone()
            };
            let (table, records) = head_sweep(
                &base,
                &heads,
                &[c.enc_layers],
                task,
                r.seq_len,
                r.steps,
                &seeds,
                &shallow_init,
                &deep_init,
                &opts,
                workers,
            )?;
            write_run_csvs(&r.out, &records)?;
            write_file(
                &r.out.join("heads.json"),
                &head_sweep_json(&table, &records),
            )?;
            print!("{}", head_sweep_text(&table));
        }
    }
    Ok(Outcome::Ok)
}

fn report(a: ReportArgs) -> Result<Outcome> {
    let dir = &a.out;
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Io(format!("no JSON summaries in {}", dir.display())));
    }
    for name in names {
        let path = dir.join(&name);
        let text =
            fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        println!("== {name}");
        print!("{}", render(&v));
    }
    Ok(Outcome::Ok)
}

/// Text table for any of the summaries this tool writes.
fn render(v: &serde_json::Value) -> String {
    let mut out = String::new();
    if let Some(cells) = v.get("cells").and_then(|c| c.as_object()) {
        for (key, cell) in cells {
            out.push_str(&format!(
                "{key:<40} diverged {}/{}\n",
                cell["diverged"], cell["runs"]
            ));
        }
    }
    if let Some(rows) = v.pointer("/table/rows").and_then(|r| r.as_array()) {
        for row in rows {
            out.push_str(&format!(
                "{} ({} params) vs {} ({} params)\n",
                row["shallow"].as_str().unwrap_or("?"),
                row["shallow_params"],
                row["deep"].as_str().unwrap_or("?"),
                row["deep_params"]
            ));
        }
    }
    if let Some(runs) = v.get("runs").and_then(|r| r.as_array()) {
        for run in runs {
            out.push_str(&format!(
                "{} {} seed {}: {} (final loss {})\n",
                run["model"].as_str().unwrap_or("?"),
                run["init"].as_str().unwrap_or("?"),
                run["seed"],
                run["status"].as_str().unwrap_or("?"),
                run["final_loss"]
            ));
        }
    }
    if let Some(checks) = v.as_array() {
        for c in checks {
            out.push_str(&format!(
                "{} max residual {} (tol {})\n",
                c["name"].as_str().unwrap_or("?"),
                c["max_residual"],
                c["tolerance"]
            ));
        }
    }
    if v.get("original").is_some() {
        for key in ["original", "reconstructed"] {
            out.push_str(&format!(
                "{:<14} params {} flops {}\n",
                v[key]["model"].as_str().unwrap_or("?"),
                v[key]["params"],
                v[key]["flops"]
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges_are_inclusive() {
        assert_eq!(parse_seeds("0..4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_seeds("3, 1,2").unwrap(), vec![3, 1, 2]);
        for bad in ["", "4..1", "a..3", "1,,2", "-1"] {
            assert!(parse_seeds(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn head_lists_reject_zero() {
        assert_eq!(parse_usizes("1,2,4", "x").unwrap(), vec![1, 2, 4]);
        assert!(parse_usizes("0,2", "x").is_err());
    }
}
