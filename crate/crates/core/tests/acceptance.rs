//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{fill, random};
use iffnet::gradcheck::{standard_suite, NetCheckShape};
use iffnet::model::{
    param_count, BufferStore, Ctx, IffArchConfig, IffNet, ParamLayout, ParamStore, ParamVars,
};
use iffnet::tape::Tape;
use iffnet::tensor::{reshape_axis, reshape_axis_inv};
use iffnet::train::{evaluate, lr_schedule, split_datasets, train, TrainConfig};
use iffnet::{AttentionAxis, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn store(cfg: &IffArchConfig, seed: u64) -> (ParamStore<f64>, BufferStore<f64>) {
    let layout = ParamLayout::new(cfg);
    (ParamStore::init(&layout, seed), BufferStore::new(&layout))
}

fn parameter_counts() -> Outcome {
    let count = |b, c| param_count(&IffArchConfig::sized(b, c));
    let (big, small) = (count(4, 64), count(2, 32));
    let in_band = |n: usize, target: f64| (n as f64 - target).abs() <= 0.15 * target;
    // table order by reported size: (2,32) < (4,32) < (2,64) < (4,64)
    let ordered = [count(2, 32), count(4, 32), count(2, 64), count(4, 64)];
    let monotone = count(2, 32) < count(4, 32)
        && count(2, 64) < count(4, 64)
        && count(2, 32) < count(2, 64)
        && count(4, 32) < count(4, 64);
    check(
        in_band(big, 1.49e6)
            && in_band(small, 0.19e6)
            && monotone
            && ordered.windows(2).all(|w| w[0] < w[1]),
        format!("(4,64)={big} (2,32)={small} order={ordered:?}"),
    )
}

fn gradient_suite() -> Outcome {
    let entries = standard_suite(0, &[NetCheckShape::SMALL, NetCheckShape::LARGE])
        .map_err(|e| e.to_string())?;
    let worst = entries
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("empty suite")?;
    check(
        entries.iter().all(|e| e.max_rel_error < 1e-5),
        format!(
            "{} checks, worst {} at {:.2e}",
            entries.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

fn merge_endpoints_and_convexity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Forced masks through the full network: the gate logits are pinned far
    // enough out that the sigmoid returns exactly 0 or 1.
    let mut endpoints = true;
    for (bias, to_enh) in [(1000.0, true), (-1000.0, false)] {
        let mut model = IffNet::<f64>::init(IffArchConfig::sized(1, 3), 40).unwrap();
        fill(&mut model.params, "merge.conv2.weight", 0.0);
        fill(&mut model.params, "merge.conv2.bias", bias);
        let x_e = random::<f64>(&[6, 5], 41);
        let x_n = random::<f64>(&[6, 5], 42);
        let out = model.fuse(&x_e, &x_n).map_err(|e| e.to_string())?;
        let want = if to_enh { &out.x_e_in } else { &out.x_n_in };
        endpoints &= out.fused.data() == want.data();
    }
    let cfg = IffArchConfig::sized(1, 2);
    let mut violations = 0usize;
    for i in 0..1000u64 {
        let (params, buffers) = store(&cfg, i);
        let s = [1, 1, rng.random_range(1..7), rng.random_range(1..7)];
        let scale = rng.random_range(0.1..20.0);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let ins: Vec<_> = (0..4)
            .map(|k| tape.constant(random(&s, 10_000 + 4 * i + k).map(|v| scale * v)))
            .collect();
        let mut ctx = Ctx::new(&mut tape, &vars, &buffers, i % 2 == 0);
        let m = ctx
            .merge(ins[0], ins[1], ins[2], ins[3])
            .map_err(|e| e.to_string())?;
        let (a, b, y) = (
            tape.value(ins[0]).data(),
            tape.value(ins[1]).data(),
            tape.value(m.fused).data(),
        );
        violations += (0..y.len())
            .filter(|&j| y[j] < a[j].min(b[j]) || y[j] > a[j].max(b[j]))
            .count();
    }
    check(
        endpoints && violations == 0,
        format!("endpoints bit-exact={endpoints}, hull violations in 1000 merges={violations}"),
    )
}

fn interaction_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let c = rng.random_range(1..5);
        let s = [
            rng.random_range(1..3),
            c,
            rng.random_range(1..7),
            rng.random_range(1..7),
        ];
        let scale = rng.random_range(0.1..10.0);
        let x_e = random::<f64>(&s, 2 * i).map(|v| scale * v);
        let x_n = random::<f64>(&s, 2 * i + 1).map(|v| scale * v);
        let (mut params, buffers) = store(&IffArchConfig::sized(1, c), i);
        for dir in ["n2e", "e2n"] {
            fill(&mut params, &format!("inter0.{dir}.conv.weight"), 0.0);
            fill(&mut params, &format!("inter0.{dir}.conv.bias"), -40.0);
        }
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let (e, n) = (tape.constant(x_e.clone()), tape.constant(x_n.clone()));
        let mut ctx = Ctx::new(&mut tape, &vars, &buffers, false);
        let out = ctx.interaction("inter0", e, n).map_err(|e| e.to_string())?;
        worst = worst
            .max(max_abs_diff(tape.value(out.x_e).data(), x_e.data()))
            .max(max_abs_diff(tape.value(out.x_n).data(), x_n.data()));
    }
    check(
        worst < 1e-12,
        format!("max deviation over 100 inputs {worst:.2e}"),
    )
}

fn attention_structure() -> Outcome {
    let axes = [AttentionAxis::Temporal, AttentionAxis::Frequency];
    let mut row_err = 0.0f64;
    let mut const_err = 0.0f64;
    for (k, &axis) in axes.iter().enumerate() {
        let x = random::<f64>(&[2, 3, 7, 5], 60 + k as u64).map(|v| 5.0 * v);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let params = ParamVars::default();
        let buffers = BufferStore::empty();
        let mut ctx = Ctx::new(&mut tape, &params, &buffers, true);
        let (_, attn) = ctx.self_attention(xv, axis).map_err(|e| e.to_string())?;
        let a = tape.value(attn);
        let d = *a.shape().last().unwrap();
        for row in a.data().chunks(d) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        for v in [-3.0, 0.0, 0.7, 12.0] {
            let x = Tensor::full(&[1, 4, 6, 5], v);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let mut ctx = Ctx::new(&mut tape, &params, &buffers, true);
            let y = ctx
                .separable_self_attention(xv, axis)
                .map_err(|e| e.to_string())?;
            for &o in tape.value(y).data() {
                const_err = const_err.max((o - 2.0 * v).abs());
            }
        }
    }
    let mut round_trips = 0usize;
    let mut exact = true;
    for c in 1..=8 {
        for t in 1..=8 {
            for f in 1..=8 {
                let x = random::<f32>(&[1, c, t, f], (c * 100 + t * 10 + f) as u64);
                for axis in axes {
                    let r = reshape_axis(&x, axis).map_err(|e| e.to_string())?;
                    exact &= reshape_axis_inv(&r, axis, x.shape()).map_err(|e| e.to_string())? == x;
                    round_trips += 1;
                }
            }
        }
    }
    check(
        row_err < 1e-6 && const_err < 1e-6 && exact,
        format!("row-sum err {row_err:.1e}, constant err {const_err:.1e}, {round_trips} round trips exact={exact}"),
    )
}

fn schedule() -> Outcome {
    let lr = |s| lr_schedule(s, 0.002, 25_000).map_err(|e| e.to_string());
    let at_peak = lr(25_000)?;
    let later = lr(100_000)?;
    let (before, after) = (lr(24_999)?, lr(25_001)?);
    let continuous = (at_peak - before).abs() <= 0.002 / 25_000.0 + 1e-18
        && (after - at_peak).abs() <= 0.002 / 25_000.0;
    check(
        at_peak == 0.002 && (later - 0.001).abs() < 1e-12 && continuous,
        format!(
            "lr(25000)={at_peak} lr(100000)={later} lr(24999)={before:.9} lr(25001)={after:.9}"
        ),
    )
}

fn synthetic_recovery() -> Outcome {
    let cfg = TrainConfig::desk();
    let (items, held_out) = split_datasets(&cfg).map_err(|e| e.to_string())?;
    let out = train(&cfg, &items, |_| {}).map_err(|e| e.to_string())?;
    let m = evaluate(&out.model, &held_out).map_err(|e| e.to_string())?;
    let bound = m.mse_enh_input.min(m.mse_noisy_input);
    check(
        m.mse_fused < 0.95 * bound,
        format!(
            "{} held-out: fused {:.5} enh {:.5} noisy {:.5} ({:.1}% below best input)",
            held_out.len(),
            m.mse_fused,
            m.mse_enh_input,
            m.mse_noisy_input,
            100.0 * (1.0 - m.mse_fused / bound)
        ),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let cfg = TrainConfig {
        steps: 40,
        ..TrainConfig::desk()
    };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (items, _) = split_datasets(&cfg).map_err(|e| e.to_string())?;
        train(&cfg, &items, |_| {})
            .and_then(|o| o.save(dir.path(), &cfg))
            .map_err(|e| e.to_string())?;
        runs.push(dir_bytes(dir.path()));
    }
    check(
        runs[0] == runs[1] && !runs[0].is_empty(),
        format!("{} files compared after {} steps", runs[0].len(), cfg.steps),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (2, "parameter counts", parameter_counts),
        (3, "gradient suite", gradient_suite),
        (
            4,
            "merge endpoints and convexity",
            merge_endpoints_and_convexity,
        ),
        (5, "interaction identity limit", interaction_identity),
        (6, "attention structure", attention_structure),
        (7, "learning-rate schedule", schedule),
        (8, "synthetic recovery", synthetic_recovery),
        (9, "determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("criterion {n}: PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
