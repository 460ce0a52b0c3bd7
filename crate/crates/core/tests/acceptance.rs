//! Acceptance gate: one PASS/FAIL line per criterion, then a single verdict.
//!
//! Run with `cargo test -p lbmtrack --test acceptance -- --nocapture` to see
//! the per-check detail. The learnability criterion trains the default
//! configuration end to end and dominates the runtime.

use std::time::{Duration, Instant};

use lbmtrack::assoc::AssocConfig;
use lbmtrack::io::encode_checkpoint;
use lbmtrack::model::Model;
use lbmtrack::pipeline::{associate, gen_clip, synthetic_detections, track_points};
use lbmtrack::selftest::{assoc, grad, oracle, props, Check};
use lbmtrack::supervision::LossBreakdown;
use lbmtrack::synth::SceneSpec;
use lbmtrack::train::{eval_samples, evaluate, train, TrainConfig};

const SEED: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const DELTA_GAIN: f64 = 3.0;
const MIN_OA: f64 = 0.75;
const MIN_LOSS_DROP: f64 = 0.5;
/// Steps averaged on each side when measuring the loss drop.
const LOSS_WINDOW: usize = 21;
const LOSS_START_STEP: usize = 50;

struct Criterion {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn from_checks(id: usize, name: &'static str, checks: &[Check], extra: Option<(bool, String)>) -> Criterion {
    for c in checks {
        println!("    {}", c.line());
    }
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| format!("{}/{}", c.suite, c.name)).collect();
    let mut detail = format!("{} checks, {} failed", checks.len(), failed.len());
    if !failed.is_empty() {
        detail.push_str(&format!(" ({})", failed.join(", ")));
    }
    let mut passed = failed.is_empty();
    if let Some((ok, d)) = extra {
        passed &= ok;
        detail.push_str(&format!("; {d}"));
    }
    Criterion { id, name, passed, detail }
}

fn window_mean(losses: &[LossBreakdown], from: usize, len: usize) -> f64 {
    let w = &losses[from..from + len];
    w.iter().map(|l| l.total).sum::<f64>() / len as f64
}

fn learnability() -> Criterion {
    let cfg = TrainConfig { seed: SEED, ..TrainConfig::default() };
    let eval = eval_samples(&cfg).expect("held-out clips");
    let base = evaluate(&Model::<f32>::new(&cfg.model, cfg.seed).expect("model"), &eval).expect("baseline eval");
    let t0 = Instant::now();
    let mut log = Vec::new();
    let outcome = train(&cfg, &mut log, &mut |r, _| {
        if (r.step + 1) % 250 == 0 {
            println!(
                "    step {}/{} loss {:.4} ({:.0}s)",
                r.step + 1,
                r.total_steps,
                r.loss.total,
                t0.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })
    .expect("training");
    let took = t0.elapsed();
    let m = evaluate(&outcome.model, &eval).expect("trained eval");
    let n = outcome.losses.len();
    let start = window_mean(&outcome.losses, LOSS_START_STEP - LOSS_WINDOW / 2, LOSS_WINDOW);
    let end = window_mean(&outcome.losses, n - LOSS_WINDOW, LOSS_WINDOW);
    let drop = 1.0 - end / start;
    let passed =
        m.delta_avg >= DELTA_GAIN * base.delta_avg && m.oa >= MIN_OA && drop >= MIN_LOSS_DROP && took <= TRAIN_BUDGET;
    let detail = format!(
        "{n} steps in {:.0}s; delta_avg {:.4} vs untrained {:.4} (x{:.1}); oa {:.3}; aj {:.4}; loss {start:.3} -> {end:.3} (drop {:.0}%)",
        took.as_secs_f64(),
        m.delta_avg,
        base.delta_avg,
        m.delta_avg / base.delta_avg,
        m.oa,
        m.aj,
        100.0 * drop
    );
    Criterion { id: 6, name: "desk-scale learnability", passed, detail }
}

/// Trains a short run, then tracks points and associates objects with the
/// result; returns the three artifacts as bytes.
fn artifacts() -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let cfg = TrainConfig { seed: SEED, epochs: 1, train_clips: 8, eval_clips: 1, ..TrainConfig::default() };
    let out = train(&cfg, &mut Vec::new(), &mut |_, _| Ok(())).expect("training");
    let ckpt = encode_checkpoint(&out.model).expect("checkpoint");
    let (clip, gt) = gen_clip(&SceneSpec { seed: SEED + 1, ..SceneSpec::default() }, 8).expect("clip");
    let tracks = track_points(&out.model, &clip.frames, &gt.header).expect("tracks").encode().expect("encode");
    let run = associate(
        &out.model,
        &clip.frames,
        &synthetic_detections(&clip),
        &AssocConfig { seed: SEED, ..AssocConfig::default() },
    )
    .expect("association");
    (ckpt, tracks, run.event_log().into_bytes())
}

fn reproducibility() -> Criterion {
    let (a, b) = (artifacts(), artifacts());
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2];
    let events = String::from_utf8_lossy(&a.2).lines().count() - 1;
    Criterion {
        id: 9,
        name: "reproducibility",
        passed: same.iter().all(|&s| s) && events > 0,
        detail: format!(
            "checkpoint {} B identical {}; track file {} B identical {}; event log {events} events identical {}",
            a.0.len(),
            same[0],
            a.1.len(),
            same[1],
            same[2]
        ),
    }
}

#[test]
fn acceptance() {
    let mut results = Vec::new();

    let t0 = Instant::now();
    let checks = grad::suite(SEED);
    let took = t0.elapsed();
    results.push(from_checks(
        1,
        "gradient suite",
        &checks,
        Some((took < GRAD_BUDGET, format!("{:.1}s", took.as_secs_f64()))),
    ));
    results.push(from_checks(2, "oracle suite", &oracle::suite(SEED), None));
    results.push(from_checks(3, "online contract", &props::online_suite(SEED), None));
    results.push(from_checks(4, "loss semantics", &props::loss_suite(SEED), None));
    results.push(from_checks(5, "metrics", &props::metric_suite(SEED), None));
    results.push(learnability());
    results.push(from_checks(7, "layer and K schedule", &props::schedule_suite(SEED), None));
    results.push(from_checks(8, "association suite", &assoc::suite(SEED), None));
    results.push(reproducibility());

    println!();
    for c in &results {
        println!("AC{} {} {}: {}", c.id, if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|c| !c.passed).map(|c| c.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
