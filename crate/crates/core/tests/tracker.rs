use lbmtrack::io::{decode_checkpoint, encode_checkpoint};
use lbmtrack::model::{init_queries, k_schedule, select_references, step, Model, ModelConfig, OnlineTracker, Probe};
use lbmtrack::synth::SceneSpec;
use lbmtrack::tensor::{Tape, Tensor};
use lbmtrack::train::Sample;
use lbmtrack::Error;

fn tiny() -> ModelConfig {
    ModelConfig { d: 16, enc_channels: 8, mem_len: 3, mlp_ratio: 1, ..ModelConfig::default() }
}

fn clip(seed: u64, frames: usize) -> Sample {
    Sample::synth(&SceneSpec { seed, height: 32, width: 48, frames, sprites: 2, ..SceneSpec::default() }, 4).unwrap()
}

#[test]
fn k_schedule_by_depth() {
    assert_eq!(k_schedule(1), vec![1]);
    assert_eq!(k_schedule(2), vec![9, 1]);
    assert_eq!(k_schedule(3), vec![9, 4, 1]);
    assert_eq!(k_schedule(5), vec![9, 4, 4, 4, 1]);
}

#[test]
fn top_k_breaks_ties_by_lowest_index() {
    let c = Tensor::new(vec![2, 6], vec![0.5f64, 0.5, 0.5, 0.5, 0.5, 0.5, 1.0, 3.0, 3.0, 2.0, 3.0, 0.0]).unwrap();
    let r = select_references(&c, 4).unwrap();
    assert_eq!(r[0], vec![0, 1, 2, 3]);
    assert_eq!(r[1], vec![1, 2, 4, 3]);
    assert!(select_references(&c, 0).is_err());
    assert!(select_references(&c, 7).is_err());
}

#[test]
fn queries_outside_the_image_are_rejected() {
    let model = Model::<f32>::new(&tiny(), 1).unwrap();
    let s = clip(1, 2);
    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape, false).unwrap();
    let img = tape.constant(s.frames[0].clone()).unwrap();
    let fm = model.net.encoder.encode(&mut tape, &pv, img, 0).unwrap();
    assert!(matches!(init_queries(&mut tape, &fm, &[[48.0, 3.0]], 3), Err(Error::Input(_))));
    assert!(matches!(init_queries(&mut tape, &fm, &[[3.0, -0.5]], 3), Err(Error::Input(_))));
    assert!(matches!(init_queries(&mut tape, &fm, &[], 3), Err(Error::Input(_))));
    assert!(init_queries(&mut tape, &fm, &[[47.0, 31.0], [0.0, 0.0]], 3).is_ok());
}

#[test]
fn memory_attention_covers_only_valid_slots() {
    let cfg = tiny();
    let model = Model::<f64>::new(&cfg, 2).unwrap();
    let s = clip(2, 6);
    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape, false).unwrap();
    let maps: Vec<_> = s
        .cast::<f64>()
        .into_iter()
        .enumerate()
        .map(|(t, f)| {
            let img = tape.constant(f).unwrap();
            model.net.encoder.encode(&mut tape, &pv, img, t).unwrap()
        })
        .collect();
    let mut state = init_queries(&mut tape, &maps[0], &s.queries, cfg.mem_len).unwrap();
    for (t, fm) in maps.iter().enumerate().skip(1) {
        let valid = state.memory.valid_mask();
        let mut probe = Probe { record_attention: true, ..Default::default() };
        let out = step(&model.net, &mut tape, &pv, &mut state, fm, &mut probe).unwrap();
        for (name, w) in probe.attention.iter().filter(|(n, _)| n.starts_with("layer0.phi")) {
            if t == 1 {
                assert_eq!(w.shape()[0], 0, "{name}: attention must be skipped with empty memory");
                continue;
            }
            for q in 0..s.queries.len() {
                let row = w.row(q);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{name} frame {t}: weights sum to {sum}");
                for (slot, &ok) in valid.iter().enumerate() {
                    if !ok {
                        assert_eq!(row[slot], 0.0);
                    }
                }
            }
        }
        assert_eq!(state.memory.len(), t.min(cfg.mem_len));
        for p in out.positions_px(&tape) {
            assert!(p[0] >= 0.0 && p[0] <= 47.0 && p[1] >= 0.0 && p[1] <= 31.0, "{p:?}");
        }
    }
}

#[test]
fn track_before_start_is_a_state_error() {
    let model = Model::<f32>::new(&tiny(), 3).unwrap();
    let mut tr = OnlineTracker::new(&model);
    assert!(matches!(tr.track(&clip(3, 2).frames[0]), Err(Error::State(_))));
}

#[test]
fn checkpoint_round_trip_tracks_identically() {
    let model = Model::<f32>::new(&tiny(), 4).unwrap();
    let bytes = encode_checkpoint(&model).unwrap();
    let loaded = decode_checkpoint(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!(encode_checkpoint(&loaded).unwrap(), bytes);
    let s = clip(4, 4);
    let run = |m: &Model<f32>| {
        let mut tr = OnlineTracker::new(m);
        tr.start(&s.frames[0], &s.queries).unwrap();
        s.frames[1..].iter().map(|f| tr.track(f).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(&model), run(&loaded));
}
