//! Brute-force oracles for the sampling, correlation, selection and
//! association primitives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{rng, Check};
use crate::assoc::{aggregate, similarity, AssocConfig, BBox, Detection, TrackedInstance};
use crate::gradcheck::random;
use crate::model::{correlation, select_references, CorrelationKind, COSINE_TEMPERATURE};
use crate::tensor::{Tape, Tensor};

pub const TOL: f64 = 1e-5;
pub const INSTANCES: usize = 20;

/// Bilinear sampling as a tent-kernel sum over every cell, border-clamped.
pub fn bilinear_oracle(fm: &Tensor<f64>, x: f64, y: f64) -> Vec<f64> {
    let (c, h, w) = (fm.shape()[0], fm.shape()[1], fm.shape()[2]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    (0..c)
        .map(|ch| {
            let mut acc = 0.0;
            for j in 0..h {
                for i in 0..w {
                    let k = (1.0 - (x - i as f64).abs()).max(0.0) * (1.0 - (y - j as f64).abs()).max(0.0);
                    acc += k * fm.data()[ch * h * w + j * w + i];
                }
            }
            acc
        })
        .collect()
}

pub fn correlation_oracle(f: &Tensor<f64>, o: &Tensor<f64>, kind: CorrelationKind) -> Vec<Vec<f64>> {
    let (n, d) = (f.shape()[0], f.shape()[1]);
    let hw = o.shape()[1] * o.shape()[2];
    (0..n)
        .map(|q| {
            (0..hw)
                .map(|cell| {
                    let (mut dot, mut ff, mut oo) = (0.0, 0.0, 0.0);
                    for k in 0..d {
                        let (a, b) = (f.data()[q * d + k], o.data()[k * hw + cell]);
                        dot += a * b;
                        ff += a * a;
                        oo += b * b;
                    }
                    match kind {
                        CorrelationKind::Dot => dot / (d as f64).sqrt(),
                        CorrelationKind::Cosine => {
                            COSINE_TEMPERATURE * dot / (ff.sqrt().max(1e-12) * oo.sqrt().max(1e-12))
                        }
                    }
                })
                .collect()
        })
        .collect()
}

/// Full stable sort by (value descending, index ascending), first `k`.
pub fn topk_oracle(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    for a in 0..idx.len() {
        for b in 0..idx.len() - 1 - a {
            let (i, j) = (idx[b], idx[b + 1]);
            if row[j] > row[i] || (row[j] == row[i] && j < i) {
                idx.swap(b, b + 1);
            }
        }
    }
    idx.truncate(k);
    idx
}

pub fn aggregate_oracle(s: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, n) = (s.len(), s[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let row: f64 = (0..n).map(|k| s[i][k].exp()).sum();
            let col: f64 = (0..m).map(|k| s[k][j].exp()).sum();
            out[i][j] = 0.5 * s[i][j].exp() / row + 0.5 * s[i][j].exp() / col;
        }
    }
    out
}

/// The reweighted similarity computed from explicit counts.
pub fn similarity_oracle(score: f64, same_label: bool, a_i: f64, a_j: f64, n_in: usize, n_out: usize) -> f64 {
    if n_in + n_out == 0 {
        return 0.0;
    }
    let delta = if same_label { 1.0 } else { 0.0 };
    score * (0.5 + 0.5 * delta) * f64::min(1.0, a_i / a_j) * n_in as f64 / (n_in + n_out) as f64
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn summarize(name: &str, worst: f64, tol: f64) -> Check {
    Check::new("oracle", name, worst < tol, format!("max abs diff {worst:.2e} over {INSTANCES} instances"))
}

fn bilinear(r: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (c, h, w) = (r.gen_range(1..4), r.gen_range(2..7), r.gen_range(2..7));
        let fm = random(&[c, h, w], -1.0, 1.0, r);
        let n = 8;
        let pts: Vec<f64> =
            (0..n).flat_map(|_| [r.gen_range(-1.5..w as f64 + 0.5), r.gen_range(-1.5..h as f64 + 0.5)]).collect();
        let mut tape = Tape::new();
        let fv = tape.constant(fm.clone()).unwrap();
        let cv = tape.constant(Tensor::from_f64(vec![n, 2], &pts).unwrap()).unwrap();
        let out = tape.bilinear_sample(fv, cv).unwrap();
        for q in 0..n {
            let o = bilinear_oracle(&fm, pts[2 * q], pts[2 * q + 1]);
            worst = worst.max(max_diff(tape.value(out).row(q), &o));
        }
    }
    summarize("bilinear_sample", worst, TOL)
}

fn corr(r: &mut ChaCha8Rng, kind: CorrelationKind, name: &str) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (n, d, h, w) = (r.gen_range(1..5), r.gen_range(1..9), r.gen_range(1..6), r.gen_range(1..6));
        let f = random(&[n, d], -1.0, 1.0, r);
        let o = random(&[d, h, w], -1.0, 1.0, r);
        let mut tape = Tape::new();
        let (fv, ov) = (tape.constant(f.clone()).unwrap(), tape.constant(o.clone()).unwrap());
        let c = correlation(&mut tape, fv, ov, kind).unwrap();
        let want = correlation_oracle(&f, &o, kind);
        for (q, row) in want.iter().enumerate() {
            worst = worst.max(max_diff(tape.value(c).row(q), row));
        }
    }
    summarize(name, worst, TOL)
}

fn topk(r: &mut ChaCha8Rng) -> Check {
    let mut ok = true;
    for _ in 0..INSTANCES {
        let (n, hw) = (r.gen_range(1..5), r.gen_range(1..40));
        // Coarse values force ties.
        let data: Vec<f64> = (0..n * hw).map(|_| r.gen_range(0..6) as f64 * 0.5).collect();
        let t = Tensor::from_f64(vec![n, hw], &data).unwrap();
        for k in [1, hw.min(4), hw.min(9), hw] {
            let got = select_references(&t, k).unwrap();
            for q in 0..n {
                ok &= got[q] == topk_oracle(t.row(q), k);
            }
        }
    }
    Check::new("oracle", "top_k_selection", ok, format!("{INSTANCES} instances with ties, k in {{1,4,9,all}}"))
}

fn softmax_aggregate(r: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (m, n) = (r.gen_range(1..6), r.gen_range(1..6));
        let s: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| r.gen_range(0.0..1.0)).collect()).collect();
        let got = aggregate(&s);
        let want = aggregate_oracle(&s);
        for i in 0..m {
            worst = worst.max(max_diff(&got[i], &want[i]));
        }
    }
    summarize("softmax_aggregation", worst, TOL)
}

fn instance(pixels: Vec<[f64; 2]>, visible: Vec<bool>, label: u32, area: f64) -> TrackedInstance {
    let n = pixels.len();
    TrackedInstance {
        id: 0,
        bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
        label,
        score: 1.0,
        area,
        pixel_ids: (0..n as u64).collect(),
        visible,
        streak: vec![0; n],
        pixels,
        frames_since_matched: 0,
    }
}

fn similarity_random(r: &mut ChaCha8Rng) -> Check {
    let cfg = AssocConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let b = BBox::new(r.gen_range(0.0..20.0), r.gen_range(0.0..20.0), 0.0, 0.0);
        let b = BBox::new(b.x1, b.y1, b.x1 + r.gen_range(1.0..20.0), b.y1 + r.gen_range(1.0..20.0));
        let det = Detection { bbox: b, label: r.gen_range(0..3), score: r.gen_range(0.0..1.0) };
        let n = r.gen_range(1..20);
        let pixels: Vec<[f64; 2]> = (0..n).map(|_| [r.gen_range(-5.0..45.0), r.gen_range(-5.0..45.0)]).collect();
        let visible: Vec<bool> = (0..n).map(|_| r.gen_bool(0.8)).collect();
        let (mut n_in, mut n_out) = (0, 0);
        for (p, &v) in pixels.iter().zip(&visible) {
            let inside = p[0] >= b.x1 && p[0] <= b.x2 && p[1] >= b.y1 && p[1] <= b.y2;
            if v {
                if inside {
                    n_in += 1
                } else {
                    n_out += 1
                }
            }
        }
        let label = r.gen_range(0..3);
        let a_i = r.gen_range(1.0..400.0);
        let want = similarity_oracle(det.score, label == det.label, a_i, b.area(), n_in, n_out);
        let got = similarity(&instance(pixels, visible, label, a_i), &det, &cfg);
        worst = worst.max((got - want).abs());
    }
    summarize("similarity_formula", worst, TOL)
}

fn similarity_examples() -> Check {
    let cfg = AssocConfig::default();
    let d = |score| Detection { bbox: BBox::new(0.0, 0.0, 10.0, 10.0), label: 1, score };
    let a = similarity(&instance(vec![[5.0, 5.0]; 16], vec![true; 16], 1, 100.0), &d(1.0), &cfg);
    let b = similarity(&instance(vec![[5.0, 5.0]; 16], vec![true; 16], 7, 100.0), &d(1.0), &cfg);
    let mut px = vec![[2.0, 3.0]; 12];
    px.extend([[11.0, 5.0], [5.0, -1.0], [20.0, 20.0], [-3.0, 4.0]]);
    let c = similarity(&instance(px, vec![true; 16], 1, 50.0), &d(0.8), &cfg);
    let ok = a == 1.0 && b == 0.5 && (c - 0.3).abs() < 1e-15;
    Check::new("oracle", "similarity_examples", ok, format!("{a} / {b} / {c}"))
}

pub fn suite(seed: u64) -> Vec<Check> {
    let mut r = rng(seed);
    vec![
        bilinear(&mut r),
        corr(&mut r, CorrelationKind::Dot, "correlation_dot"),
        corr(&mut r, CorrelationKind::Cosine, "correlation_cosine"),
        topk(&mut r),
        softmax_aggregate(&mut r),
        similarity_random(&mut r),
        similarity_examples(),
    ]
}
