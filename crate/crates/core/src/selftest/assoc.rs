//! Association checks: matcher oracle, lifecycle counter walk, pixel
//! conservation, and scripted dropout / crossing scenarios.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{rng, Check};
use crate::assoc::{
    lifecycle_update, match_greedy, track_objects, AssocConfig, AssocRun, BBox, Detection, FnPredictor, TrackedInstance,
};
use crate::tensor::Tensor;

/// Greedy matching by rescanning the whole matrix after every pick.
pub fn greedy_oracle(s: &[Vec<f64>], tau: f64) -> Vec<(usize, usize)> {
    let m = s.len();
    let n = s.first().map_or(0, Vec::len);
    let (mut rows, mut cols) = (vec![false; m], vec![false; n]);
    let mut out = Vec::new();
    loop {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..m {
            for j in 0..n {
                if rows[i] || cols[j] || s[i][j] <= tau {
                    continue;
                }
                if best.is_none_or(|(bi, bj)| s[i][j] > s[bi][bj]) {
                    best = Some((i, j));
                }
            }
        }
        match best {
            Some((i, j)) => {
                rows[i] = true;
                cols[j] = true;
                out.push((i, j));
            }
            None => return out,
        }
    }
}

fn greedy_vs_oracle(r: &mut ChaCha8Rng) -> Check {
    let mut bad = 0;
    for _ in 0..100 {
        let (m, n) = (r.gen_range(1..7), r.gen_range(1..7));
        // Coarse grid of values so ties occur.
        let s: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| r.gen_range(0..10) as f64 / 10.0).collect()).collect();
        let a = match_greedy(&s, 0.3);
        let want = greedy_oracle(&s, 0.3);
        let one_to_one = {
            let mut rs: Vec<_> = a.pairs.iter().map(|p| p.0).collect();
            let mut cs: Vec<_> = a.pairs.iter().map(|p| p.1).collect();
            rs.sort_unstable();
            cs.sort_unstable();
            rs.windows(2).all(|w| w[0] != w[1]) && cs.windows(2).all(|w| w[0] != w[1])
        };
        if a.pairs != want || !one_to_one {
            bad += 1;
        }
    }
    Check::new("assoc", "greedy_matches_exhaustive_oracle", bad == 0, format!("{bad} of 100 random matrices differ"))
}

fn bare_instance(n: usize, bbox: BBox) -> TrackedInstance {
    TrackedInstance {
        id: 0,
        bbox,
        label: 0,
        score: 1.0,
        area: bbox.area(),
        pixel_ids: (0..n as u64).collect(),
        pixels: vec![[5.0, 5.0]; n],
        visible: vec![true; n],
        streak: vec![0; n],
        frames_since_matched: 0,
    }
}

/// Pixel 0 follows a random inside/outside walk; an independent counter
/// predicts on which frames it is replaced.
fn timeout_walk(r: &mut ChaCha8Rng) -> Check {
    let cfg = AssocConfig::default();
    let bbox = BBox::new(0.0, 0.0, 10.0, 10.0);
    let det = Detection { bbox, label: 0, score: 1.0 };
    let mut mismatches = 0;
    let mut scripted = false;
    for walk in 0..20 {
        let mut inst = bare_instance(4, bbox);
        let mut counter = 0u32;
        let len = 12;
        // First walk is the fixed three-frames-outside case.
        let outside: Vec<bool> = if walk == 0 { vec![true; 3] } else { (0..len).map(|_| r.gen_bool(0.6)).collect() };
        for (f, &out) in outside.iter().enumerate() {
            inst.pixels[0] = if out { [20.0, 20.0] } else { [5.0, 5.0] };
            let res = lifecycle_update(&mut inst, Some(&det), &cfg, r);
            let expect_removed = if out {
                counter += 1;
                counter > cfg.timeout
            } else {
                counter = 0;
                false
            };
            if expect_removed {
                counter = 0;
            }
            let removed = res.replaced == vec![0];
            if removed != expect_removed || (!expect_removed && !res.replaced.is_empty()) || inst.pixels.len() != 4 {
                mismatches += 1;
            }
            if walk == 0 && f == 2 {
                scripted = removed && bbox.contains(inst.pixels[0]);
            }
            if walk == 0 && f < 2 && removed {
                scripted = false;
            }
        }
    }
    let ok = mismatches == 0 && scripted;
    Check::new(
        "assoc",
        "timeout_counter_walk",
        ok,
        format!("{mismatches} mismatching frames; 3-frame case removed on frame 3: {scripted}"),
    )
}

fn lost_walk() -> Check {
    let cfg = AssocConfig::default();
    let mut r = rng(3);
    let mut inst = bare_instance(2, BBox::new(0.0, 0.0, 10.0, 10.0));
    let mut ends = Vec::new();
    for _ in 0..cfg.t_lost {
        ends.push(lifecycle_update(&mut inst, None, &cfg, &mut r).terminated);
    }
    let ok = ends[..cfg.t_lost - 1].iter().all(|&e| !e) && ends[cfg.t_lost - 1];
    Check::new("assoc", "terminate_after_t_lost", ok, format!("terminated flags {ends:?}"))
}

/// Box of side `size` centred on `c`.
fn square(c: [f64; 2], size: f64) -> BBox {
    BBox::new(c[0] - size / 2.0, c[1] - size / 2.0, c[0] + size / 2.0, c[1] + size / 2.0)
}

fn dummy_frames(n: usize) -> Vec<Tensor<f32>> {
    (0..n).map(|_| Tensor::zeros(vec![0])).collect()
}

/// Every frame: every live instance holds exactly `n_px` pixels with
/// distinct ids.
fn conserved(run: &AssocRun, n_px: usize) -> bool {
    run.frames.iter().all(|f| {
        f.instances.iter().all(|i| {
            let mut ids = i.pixel_ids.clone();
            ids.sort_unstable();
            ids.dedup();
            i.pixels.len() == n_px && ids.len() == n_px && i.streak.len() == n_px && i.visible.len() == n_px
        })
    })
}

/// Objects drift with jitter while the predictor adds noise, so pixels
/// regularly leave boxes and get replaced.
fn conservation(r: &mut ChaCha8Rng) -> Check {
    let cfg = AssocConfig::default();
    let frames = 30;
    let starts: Vec<[f64; 2]> = (0..3).map(|_| [r.gen_range(10.0..50.0), r.gen_range(10.0..50.0)]).collect();
    let vel: Vec<[f64; 2]> = (0..3).map(|_| [r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5)]).collect();
    let dets: Vec<Vec<Detection>> = (0..frames)
        .map(|t| {
            let mut row = Vec::new();
            for k in 0..3 {
                if r.gen_bool(0.85) {
                    let c = [starts[k][0] + vel[k][0] * t as f64, starts[k][1] + vel[k][1] * t as f64];
                    let bbox = square(c, 12.0 + r.gen_range(-2.0..2.0));
                    row.push(Detection { bbox, label: k as u32, score: r.gen_range(0.6..1.0) });
                }
            }
            row
        })
        .collect();
    let noise = rng(99);
    let noise = std::cell::RefCell::new(noise);
    let mut pred = FnPredictor::new(|t, t0, p0: [f64; 2]| {
        let mut n = noise.borrow_mut();
        let drift = (t - t0) as f64;
        ([p0[0] + 0.8 * drift + n.gen_range(-2.0..2.0), p0[1] + n.gen_range(-2.0..2.0)], n.gen_bool(0.9))
    });
    let run = track_objects(&dummy_frames(frames), &dets, &mut pred, &cfg).unwrap();
    let prunes = run.events.iter().filter(|e| e.kind == crate::assoc::EventKind::Prune).count();
    let ok = conserved(&run, cfg.n_px) && prunes > 0;
    Check::new("assoc", "pixel_count_conservation", ok, format!("{frames} frames, {prunes} prune events"))
}

/// One object moving at constant velocity; detections vanish for `gap`
/// frames. Ideal pixel predictions follow the object.
pub fn dropout_run(gap: usize) -> (AssocRun, Vec<Vec<Detection>>, impl Fn(usize) -> BBox) {
    let frames = 6 + gap + 6;
    let v = [1.5, 0.5];
    let obj = move |t: usize| square([20.0 + v[0] * t as f64, 20.0 + v[1] * t as f64], 10.0);
    let dets: Vec<Vec<Detection>> = (0..frames)
        .map(|t| {
            if (6..6 + gap).contains(&t) {
                Vec::new()
            } else {
                vec![Detection { bbox: obj(t), label: 1, score: 0.9 }]
            }
        })
        .collect();
    let mut pred = FnPredictor::new(move |t, t0, p0: [f64; 2]| {
        let dt = (t - t0) as f64;
        ([p0[0] + v[0] * dt, p0[1] + v[1] * dt], true)
    });
    let run = track_objects(&dummy_frames(frames), &dets, &mut pred, &AssocConfig::default()).unwrap();
    (run, dets, obj)
}

fn dropout() -> Check {
    let cfg = AssocConfig::default();
    let gap = cfg.t_lost - 1;
    let (run, dets, obj) = dropout_run(gap);
    let spawns = run.events.iter().filter(|e| e.kind == crate::assoc::EventKind::Spawn).count();
    let ids: Vec<Vec<u64>> = run.frames.iter().map(|f| f.instances.iter().map(|i| i.id).collect()).collect();
    let resumed = run
        .frames
        .iter()
        .enumerate()
        .filter(|(t, _)| !dets[*t].is_empty())
        .all(|(_, f)| f.instances.len() == 1 && f.instances[0].id == 0 && f.instances[0].frames_since_matched == 0);
    // Geometry oracle: during the gap every pixel stays inside the true box.
    let inside = run
        .frames
        .iter()
        .enumerate()
        .all(|(t, f)| f.instances.iter().all(|i| i.pixels.iter().all(|&p| obj(t).contains(p))));
    let ok = spawns == 1 && resumed && inside && conserved(&run, cfg.n_px);
    Check::new(
        "assoc",
        "detection_dropout_keeps_identity",
        ok,
        format!("gap {gap}, spawns {spawns}, ids per frame {ids:?}"),
    )
}

fn dropout_too_long() -> Check {
    let gap = AssocConfig::default().t_lost;
    let (run, _, _) = dropout_run(gap);
    let spawns = run.events.iter().filter(|e| e.kind == crate::assoc::EventKind::Spawn).count();
    let last_id = run.frames.last().and_then(|f| f.instances.first()).map(|i| i.id);
    let ok = spawns == 2 && last_id == Some(1);
    Check::new(
        "assoc",
        "dropout_beyond_t_lost_respawns",
        ok,
        format!("gap {gap}, spawns {spawns}, final id {last_id:?}"),
    )
}

/// Two equal boxes with different labels crossing head-on; area and score
/// factors are identical, so only the label term separates them.
pub fn crossing_run() -> (AssocRun, Vec<Vec<Detection>>) {
    let frames = 21;
    let ya = 30.0;
    let pa = move |t: usize| [10.0 + 2.0 * t as f64, ya];
    let pb = move |t: usize| [50.0 - 2.0 * t as f64, ya];
    let dets: Vec<Vec<Detection>> = (0..frames)
        .map(|t| {
            vec![
                Detection { bbox: square(pb(t), 12.0), label: 2, score: 0.9 },
                Detection { bbox: square(pa(t), 12.0), label: 1, score: 0.9 },
            ]
        })
        .collect();
    // Each pixel follows the object whose box it was born in.
    let mut pred = FnPredictor::new(move |t, t0, p0: [f64; 2]| {
        let dir = if square(pa(t0), 12.0).contains(p0) && !square(pb(t0), 12.0).contains(p0) {
            2.0
        } else if square(pb(t0), 12.0).contains(p0) && !square(pa(t0), 12.0).contains(p0) {
            -2.0
        } else {
            0.0
        };
        ([p0[0] + dir * (t - t0) as f64, p0[1]], true)
    });
    let run = track_objects(&dummy_frames(frames), &dets, &mut pred, &AssocConfig::default()).unwrap();
    (run, dets)
}

fn crossing() -> Check {
    let (run, _) = crossing_run();
    let stable = run.frames.iter().all(|f| {
        f.instances.len() == 2 && f.instances.iter().all(|i| (i.id == 0 && i.label == 2) || (i.id == 1 && i.label == 1))
    });
    let swaps = run
        .events
        .iter()
        .filter(|e| e.kind == crate::assoc::EventKind::Match)
        .filter(|e| !e.payload.starts_with(&format!("det={} ", e.instance)))
        .count();
    Check::new(
        "assoc",
        "label_crossing_no_swap",
        stable && swaps == 0,
        format!("{swaps} swapped matches over {} frames", run.frames.len()),
    )
}

pub fn suite(seed: u64) -> Vec<Check> {
    let mut r = rng(seed);
    vec![
        greedy_vs_oracle(&mut r),
        timeout_walk(&mut r),
        lost_walk(),
        conservation(&mut r),
        dropout(),
        dropout_too_long(),
        crossing(),
    ]
}
