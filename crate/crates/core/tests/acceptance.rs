//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the lines are always printed. Exits non-zero
//! when a criterion fails that is not listed in `KNOWN_SHORTFALLS`; every
//! entry there is explained in the README.

use std::process::ExitCode;
use std::time::Instant;

use headfold::accounting::{count_flops, count_params, reconstruct, relative_gap};
use headfold::config::{resolve_model, Defaults, ModelConfig, ModelKind};
use headfold::init::{apply_admin, AdminProfile, InitSpec, ProfileBatch};
use headfold::model::{
    build, decoder_forward, encoder_forward, ForwardTrace, ModelInput, ModelParams,
};
use headfold::nn::{attention_weights, layer_norm, LayerNormParams};
use headfold::optim::{AdamConfig, Schedule};
use headfold::report::{count_report, run_csv, stability_json, to_json, train_summary_json};
use headfold::rng::RngStream;
use headfold::tape::{Mask, Tape};
use headfold::task::{TaskKind, ToyTask};
use headfold::train::{
    deep_counterpart, head_sweep, run_all, stability_sweep, RunRecord, RunSpec, TrainOptions,
};
use headfold::verify::{
    attention_identity, ffn_identity, gradient_checks, Grid, ATTENTION_TOL, FFN_TOL, GRAD_EPS,
    GRAD_TOL,
};

/// Criteria that fail under a faithful implementation; see the README.
const KNOWN_SHORTFALLS: &[usize] = &[7, 8];

/// The aggressive schedule of the stability check, chosen once from a pilot
/// scan and frozen: peak lr 4e-3 after 20 warmup steps, no gradient clipping,
/// 300 steps, copy of 8 tokens.
const STABILITY_LR: f64 = 4e-3;
const STABILITY_WARMUP: usize = 20;
const STABILITY_STEPS: usize = 300;

const SWEEP_LR: f64 = 1e-3;
const SWEEP_WARMUP: usize = 100;
const SWEEP_STEPS: usize = 300;

const SEQ_LEN: usize = 8;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn model(spec: &str, defaults: Defaults) -> ModelConfig {
    resolve_model(spec, defaults).expect("valid shorthand")
}

fn within(value: u64, target: f64, tol: f64) -> bool {
    ((value as f64 - target) / target).abs() <= tol
}

fn c1_attention_identity() -> Outcome {
    let t = Instant::now();
    let check = attention_identity(&Grid::default(), ATTENTION_TOL).expect("grid is valid");
    let secs = t.elapsed().as_secs_f64();
    outcome(
        check.passed() && secs < 10.0,
        format!(
            "{} cases, max rel residual {:.2e} (<= 1e-9), {secs:.2}s (< 10s)",
            check.cases, check.max_residual
        ),
    )
}

fn c2_ffn_identity() -> Outcome {
    let t = Instant::now();
    let check = ffn_identity(&Grid::default(), FFN_TOL).expect("grid is valid");
    let secs = t.elapsed().as_secs_f64();
    outcome(
        check.passed() && secs < 5.0,
        format!(
            "{} cases, max abs residual {:.2e} (<= 1e-11), {secs:.2}s (< 5s)",
            check.cases, check.max_residual
        ),
    )
}

fn c3_gradients() -> Outcome {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let checks = gradient_checks(&seeds, GRAD_EPS, GRAD_TOL).expect("tiny models build");
    let secs = t.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_residual).fold(0.0, f64::max);
    outcome(
        checks.iter().all(|c| c.passed()) && secs < 60.0,
        format!("encoder and encoder-decoder, 10 seeds, max rel error {worst:.2e} (<= 1e-6), {secs:.1}s (< 60s)"),
    )
}

fn c4_params() -> Outcome {
    let bert = model("12H-12L", Defaults::BertBase);
    let large = model("16H-24L", Defaults::BertLarge);
    let wmt = model("8H-6L-6L", Defaults::TransformerBase);
    let rows = [
        ("12H-12L", count_params(&bert), 109.5e6, 0.02),
        (
            "1H-144L",
            count_params(&reconstruct(&bert).unwrap()),
            110.0e6,
            0.02,
        ),
        ("16H-24L", count_params(&large), 335.1e6, 0.02),
        (
            "1H-384L",
            count_params(&reconstruct(&large).unwrap()),
            337.4e6,
            0.02,
        ),
        ("8H-6L-6L", count_params(&wmt), 63.2e6, 0.03),
    ];
    let ok = rows
        .iter()
        .all(|&(_, n, target, tol)| within(n, target, tol));
    let detail = rows
        .iter()
        .map(|(name, n, target, _)| format!("{name} {:.2}M/{:.1}M", *n as f64 / 1e6, target / 1e6))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(ok, detail)
}

fn c5_flops() -> Outcome {
    let bert = model("12H-12L", Defaults::BertBase);
    let large = model("16H-24L", Defaults::BertLarge);
    let rows = [
        ("12H-12L", count_flops(&bert, 512), 46.3e9),
        ("16H-24L", count_flops(&large, 512), 161.8e9),
        (
            "1H-144L",
            count_flops(&reconstruct(&bert).unwrap(), 512),
            46.9e9,
        ),
    ];
    let ok = rows.iter().all(|&(_, n, target)| within(n, target, 0.05));
    let detail = rows
        .iter()
        .map(|(name, n, target)| format!("{name} {:.2}B/{:.1}B", *n as f64 / 1e9, target / 1e9))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(ok, format!("MACs at seq 512: {detail}"))
}

fn random_config(rng: &mut RngStream) -> ModelConfig {
    let heads = [1, 2, 3, 4, 6, 8, 12, 16][rng.below(0, 8)];
    let enc_layers = rng.below(1, 25);
    let dec_layers = rng.below(0, 13);
    let d_head = 64;
    let sh = if dec_layers == 0 {
        format!("{heads}H-{enc_layers}L")
    } else {
        format!("{heads}H-{enc_layers}L-{dec_layers}L")
    };
    let mut c = model(&sh, Defaults::BertBase);
    c.d_head = d_head;
    c.d_model = (heads * d_head).max(256);
    c.d_ffn = heads * [128, 256, 512][rng.below(0, 3)];
    c
}

fn c6_parity() -> Outcome {
    let mut configs = vec![
        model("12H-12L", Defaults::BertBase),
        model("16H-24L", Defaults::BertLarge),
        model("8H-6L-6L", Defaults::TransformerBase),
    ];
    let mut rng = RngStream::new(6, 0);
    configs.extend((0..50).map(|_| random_config(&mut rng)));
    let mut worst = 0.0f64;
    for c in &configs {
        c.validate().expect("random config is valid");
        let r = reconstruct(c).expect("reconstructible");
        worst = worst.max(relative_gap(count_params(&r), count_params(c)));
    }
    outcome(
        worst <= 0.015,
        format!(
            "3 reference configs + 50 random, worst param gap {:.3}% (<= 1.5%)",
            worst * 100.0
        ),
    )
}

fn options(lr: f64, warmup: usize, steps: usize, clip_norm: Option<f64>) -> TrainOptions {
    TrainOptions {
        optimizer: AdamConfig {
            schedule: Schedule { peak: lr, warmup },
            clip_norm,
            ..AdamConfig::default()
        },
        epoch_steps: steps / 5,
        ..TrainOptions::default()
    }
}

fn learned(r: &RunRecord) -> bool {
    r.final_eval().is_some_and(|e| e.accuracy >= 0.5)
}

fn c7_stability() -> Outcome {
    let t = Instant::now();
    let shallow = model("4H-4L", Defaults::Desk);
    let vanilla = InitSpec::xavier();
    let admin: InitSpec = "admin".parse().unwrap();
    let (deep_vanilla, deep_vanilla_init) = deep_counterpart(&shallow, &vanilla).unwrap();
    let (deep_admin, deep_admin_init) = deep_counterpart(&shallow, &admin).unwrap();
    let task = ToyTask::for_model(TaskKind::Copy, &shallow, SEQ_LEN).unwrap();
    let groups = [
        (shallow, vanilla),
        (deep_admin, deep_admin_init),
        (deep_vanilla, deep_vanilla_init),
    ];
    let specs: Vec<RunSpec> = groups
        .iter()
        .flat_map(|(c, i)| {
            SEEDS.map(|seed| RunSpec {
                config: c.clone(),
                init: *i,
                task,
                seed,
                steps: STABILITY_STEPS,
            })
        })
        .collect();
    let records = run_all(
        &specs,
        &options(STABILITY_LR, STABILITY_WARMUP, STABILITY_STEPS, None),
        1,
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    let group = |g: usize| &records[g * SEEDS.len()..(g + 1) * SEEDS.len()];
    let converged = |g: usize| group(g).iter().filter(|r| !r.status.diverged()).count();
    let learned_count = |g: usize| group(g).iter().filter(|r| learned(r)).count();
    let max_loss = records
        .iter()
        .flat_map(|r| r.trace.iter().map(|s| s.loss))
        .fold(f64::NEG_INFINITY, f64::max);
    let (a, b, c) = (converged(0), converged(1), SEEDS.len() - converged(2));
    outcome(
        a == 5 && b == 5 && c >= 1 && secs < 1200.0,
        format!(
            "4H-4L vanilla converged {a}/5, 1H-16L admin converged {b}/5, 1H-16L vanilla diverged {c}/5 (need >= 1); \
             learned (val acc >= 0.5) {}/5, {}/5, {}/5; max train loss {max_loss:.2}; {secs:.0}s (< 1200s)",
            learned_count(0),
            learned_count(1),
            learned_count(2)
        ),
    )
}

fn c8_effectiveness() -> Outcome {
    let t = Instant::now();
    let base = ModelConfig {
        d_ffn: 64,
        ..model("1H-4L", Defaults::Desk)
    };
    let (table, _) = head_sweep(
        &base,
        &[2, 4],
        &[4],
        TaskKind::Copy,
        SEQ_LEN,
        SWEEP_STEPS,
        &SEEDS,
        &InitSpec::xavier(),
        &"admin".parse().unwrap(),
        &options(SWEEP_LR, SWEEP_WARMUP, SWEEP_STEPS, Some(1.0)),
        1,
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    let two = table.row(2, 4).unwrap();
    let four = table.row(4, 4).unwrap();
    let deep_wins = four
        .seeds
        .iter()
        .filter(|s| s.deep_loss <= s.shallow_loss)
        .count();
    let gap_grows = four
        .seeds
        .iter()
        .zip(&two.seeds)
        .filter(|(f, t)| f.gap() >= t.gap())
        .count();
    let losses = |r: &headfold::train::HeadSweepRow, deep: bool| {
        r.seeds
            .iter()
            .map(|s| format!("{:.3}", if deep { s.deep_loss } else { s.shallow_loss }))
            .collect::<Vec<_>>()
            .join("/")
    };
    outcome(
        deep_wins >= 3 && gap_grows >= 3,
        format!(
            "1H-16L admin <= 4H-4L on {deep_wins}/5 (need 3), gap(4) >= gap(2) on {gap_grows}/5 (need 3); \
             val loss 4H-4L {} 1H-16L {} 2H-4L {} 1H-8L {}; {secs:.0}s",
            losses(four, false),
            losses(four, true),
            losses(two, false),
            losses(two, true)
        ),
    )
}

fn logits(p: &ModelParams, input: &ModelInput) -> Vec<u64> {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let out = bound
        .logits(&mut tape, input, &mut ForwardTrace::default())
        .unwrap();
    tape.value(out).data().iter().map(|v| v.to_bits()).collect()
}

fn c9_admin_neutrality() -> Outcome {
    let mut ok = true;
    let mut cases = 0;
    for (spec, kind) in [
        ("2H-2L", ModelKind::EncoderOnly),
        ("2H-2L-2L", ModelKind::EncoderDecoder),
    ] {
        let c = model(spec, Defaults::Desk);
        assert_eq!(c.kind, kind);
        for seed in 0..5 {
            let p = build(&c, &InitSpec::xavier(), &RngStream::new(seed, 0)).unwrap();
            let n = c.sublayer_count();
            let unit = AdminProfile {
                variances: vec![1.0; n],
                omegas: vec![1.0; n],
                batch: ProfileBatch {
                    seed,
                    batches: 1,
                    batch_size: 1,
                    seq_len: 4,
                },
            };
            let scaled = apply_admin(&p, &unit).unwrap();
            let mut rng = RngStream::new(seed, 9);
            let mut seq = |len| {
                (0..len)
                    .map(|_| rng.below(4, c.vocab))
                    .collect::<Vec<usize>>()
            };
            let input = ModelInput {
                source: vec![seq(6), seq(6)],
                target: (kind == ModelKind::EncoderDecoder).then(|| vec![seq(5), seq(5)]),
            };
            ok &= logits(&p, &input) == logits(&scaled, &input);
            // a real, non-unit profile leaves every count alone
            let omegas: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.5).collect();
            let real = AdminProfile { omegas, ..unit };
            let wide = apply_admin(&p, &real).unwrap();
            ok &= wide.num_scalars() == p.num_scalars()
                && count_params(&wide.config) == count_params(&c);
            cases += 1;
        }
    }
    outcome(ok, format!("{cases} models: unit scales bit-identical logits, scalar and parameter counts unchanged"))
}

fn c10_invariants() -> Outcome {
    // decoder causality: changing target position j leaves earlier rows untouched
    let c = model("2H-2L-2L", Defaults::Desk);
    let mut causal = 0.0f64;
    for seed in 0..5 {
        let p = build(&c, &InitSpec::xavier(), &RngStream::new(seed, 0)).unwrap();
        let mut rng = RngStream::new(seed, 1);
        let source: Vec<usize> = (0..7).map(|_| rng.below(4, c.vocab)).collect();
        let target: Vec<usize> = (0..9).map(|_| rng.below(4, c.vocab)).collect();
        let memory = encoder_forward(&p, &source).unwrap();
        let base = decoder_forward(&p, &target, &memory).unwrap();
        for j in 0..target.len() {
            let mut changed = target.clone();
            changed[j] = 4 + (changed[j] - 4 + 1) % (c.vocab - 4);
            let out = decoder_forward(&p, &changed, &memory).unwrap();
            for r in 0..j {
                let d = base
                    .row(r)
                    .iter()
                    .zip(out.row(r))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                causal = causal.max(d);
            }
        }
    }

    // attention rows, free-standing and inside a model
    let mut rows = 0.0f64;
    let mut rng = RngStream::new(10, 0);
    for n in [1, 3, 17] {
        for masked in [false, true] {
            let q = rng.uniform_tensor(&[n, 16], -3.0, 3.0);
            let k = rng.uniform_tensor(&[n, 16], -3.0, 3.0);
            let mask = masked.then(|| Mask::causal(n));
            let w = attention_weights(&q, &k, mask.as_ref()).unwrap();
            for r in 0..n {
                rows = rows.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let p = build(&c, &InitSpec::xavier(), &RngStream::new(3, 0)).unwrap();
    let input = ModelInput {
        source: vec![vec![5, 6, 7, 8, 9]],
        target: Some(vec![vec![1, 10, 11, 12]]),
    };
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let mut trace = ForwardTrace::default();
    bound.logits(&mut tape, &input, &mut trace).unwrap();
    for (_, heads) in &trace.attention {
        for &h in heads {
            let w = tape.value(h);
            for r in 0..w.rows() {
                rows = rows.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    // layer norm with a vanishing guard ignores positive rescaling
    let ln = LayerNormParams::identity(16, 1e-300);
    let mut scale = 0.0f64;
    for _ in 0..50 {
        let x = rng.uniform_tensor(&[4, 16], -2.0, 2.0);
        let k = rng.uniform_range(0.01, 100.0);
        let a = layer_norm(&x, &ln).unwrap();
        let b = layer_norm(&x.scale(k), &ln).unwrap();
        scale = scale.max(a.max_abs_diff(&b));
    }
    outcome(
        causal <= 1e-12 && rows <= 1e-12 && scale <= 1e-9,
        format!("causal leak {causal:.1e} (<= 1e-12), row-sum error {rows:.1e} (<= 1e-12), LN scale diff {scale:.1e} (<= 1e-9)"),
    )
}

fn outputs() -> Vec<String> {
    let c = model("2H-2L", Defaults::Desk);
    let task = ToyTask::for_model(TaskKind::Copy, &c, 4).unwrap();
    let opts = options(1e-3, 5, 20, Some(1.0));
    let specs: Vec<RunSpec> = [InitSpec::xavier(), "admin".parse().unwrap()]
        .into_iter()
        .flat_map(|init| {
            [0, 1].map(|seed| RunSpec {
                config: c.clone(),
                init,
                task,
                seed,
                steps: 20,
            })
        })
        .collect();
    let records = run_all(&specs, &opts, 2).unwrap();
    let (table, sweep) = stability_sweep(
        &c,
        &[0, 1],
        &[InitSpec::xavier()],
        TaskKind::Reverse,
        4,
        15,
        &opts,
        2,
    )
    .unwrap();
    let mut out: Vec<String> = records.iter().chain(&sweep).map(run_csv).collect();
    out.push(train_summary_json(&c, &records));
    out.push(stability_json(&table, &sweep));
    out.push(to_json(
        &count_report(&model("12H-12L", Defaults::BertBase), 512).unwrap(),
    ));
    out
}

fn c11_determinism() -> Outcome {
    let a = outputs();
    let b = outputs();
    outcome(
        a == b,
        format!(
            "{} CSV/JSON documents regenerated byte-identically",
            a.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        (1, "attention decomposition identity", c1_attention_identity),
        (2, "feedforward split identity", c2_ffn_identity),
        (3, "gradient checks", c3_gradients),
        (4, "parameter accounting", c4_params),
        (5, "FLOP accounting", c5_flops),
        (6, "reconstruction parity", c6_parity),
        (7, "stability at desk scale", c7_stability),
        (8, "effectiveness trend", c8_effectiveness),
        (9, "Admin neutrality", c9_admin_neutrality),
        (10, "causality and normalization", c10_invariants),
        (11, "determinism", c11_determinism),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let o = run();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        let note = if !o.passed && KNOWN_SHORTFALLS.contains(&id) {
            " [known shortfall]"
        } else {
            ""
        };
        println!("criterion {id:>2} {verdict}{note}: {name}: {}", o.detail);
        if !o.passed && !KNOWN_SHORTFALLS.contains(&id) {
            unexpected.push(id);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
