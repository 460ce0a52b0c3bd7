use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lbmtrack::assoc::{aggregate, match_greedy, match_hungarian, AssocConfig};
use lbmtrack::model::{Model, ModelConfig, OnlineTracker};
use lbmtrack::pipeline::{associate, gen_clip, synthetic_detections};
use lbmtrack::synth::SceneSpec;
use lbmtrack::tensor::{bilinear_weights, Tape};
use lbmtrack::train::{clip_gradients, Sample};

fn spec() -> SceneSpec {
    SceneSpec { seed: 1, height: 64, width: 64, frames: 8, ..SceneSpec::default() }
}

fn model() -> Model<f32> {
    Model::new(&ModelConfig::default(), 1).unwrap()
}

fn tracker(c: &mut Criterion) {
    let m = model();
    let (clip, gt) = gen_clip(&spec(), 16).unwrap();
    let frames: Vec<_> = clip.frames.iter().map(|f| f.to_tensor()).collect();
    c.bench_function("tracker_clip_8_frames_16_queries", |b| {
        b.iter(|| {
            let mut tr = OnlineTracker::new(&m);
            tr.start(&frames[0], &gt.header.queries).unwrap();
            for f in &frames[1..] {
                black_box(tr.track(f).unwrap());
            }
        })
    });
}

fn encoder(c: &mut Criterion) {
    let m = model();
    let (clip, _) = gen_clip(&spec(), 1).unwrap();
    let img = clip.frames[0].to_tensor();
    c.bench_function("encoder_64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let pv = m.params.bind(&mut tape, false).unwrap();
            let x = tape.constant(img.clone()).unwrap();
            black_box(m.net.encoder.encode(&mut tape, &pv, x, 0).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let m = model();
    let s = Sample::synth(&spec(), 16).unwrap();
    c.bench_function("clip_gradients_8_frames", |b| b.iter(|| black_box(clip_gradients(&m, &s, 1.0).unwrap())));
}

fn bilinear(c: &mut Criterion) {
    c.bench_function("bilinear_weights_1k", |b| {
        b.iter(|| {
            for i in 0..1000 {
                black_box(bilinear_weights(i as f64 * 0.037, i as f64 * 0.021, 16, 16));
            }
        })
    });
}

fn association(c: &mut Criterion) {
    let s: Vec<Vec<f64>> = (0..20).map(|i| (0..20).map(|j| ((i * 7 + j * 13) % 17) as f64 / 17.0).collect()).collect();
    c.bench_function("aggregate_and_greedy_20x20", |b| b.iter(|| black_box(match_greedy(&aggregate(&s), 0.3))));
    c.bench_function("aggregate_and_hungarian_20x20", |b| b.iter(|| black_box(match_hungarian(&aggregate(&s), 0.3))));
    let m = model();
    let (clip, _) = gen_clip(&spec(), 4).unwrap();
    let rows = synthetic_detections(&clip);
    let cfg = AssocConfig::default();
    let mut g = c.benchmark_group("association");
    g.sample_size(10);
    g.bench_function("track_objects_8_frames", |b| {
        b.iter(|| black_box(associate(&m, &clip.frames, &rows, &cfg).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, bilinear, association, encoder, tracker, train_step);
criterion_main!(benches);
