use lbmtrack::model::Model;
use lbmtrack::model::ModelConfig;
use lbmtrack::synth::SceneSpec;
use lbmtrack::tensor::Tensor;
use lbmtrack::train::{batch_gradients, clip_gradients, lr_at, make_samples, train, AdamW, Sample, TrainConfig};

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        seed: 7,
        epochs: 2,
        batch: 2,
        train_clips: 4,
        eval_clips: 1,
        queries: 4,
        clip: SceneSpec { height: 32, width: 32, frames: 4, sprites: 2, ..SceneSpec::default() },
        model: ModelConfig { d: 16, enc_channels: 8, mem_len: 3, mlp_ratio: 1, ..ModelConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_warms_up_then_decays_to_zero() {
    let (total, peak) = (200, 1e-3);
    assert_eq!(lr_at(0, total, peak, 0.05).unwrap(), 0.0);
    assert!((lr_at(5, total, peak, 0.05).unwrap() - peak / 2.0).abs() < 1e-15);
    assert!((lr_at(10, total, peak, 0.05).unwrap() - peak).abs() < 1e-15);
    assert!(lr_at(total, total, peak, 0.05).unwrap().abs() < 1e-15);
    let lrs: Vec<f64> = (10..=total).map(|s| lr_at(s, total, peak, 0.05).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(lr_at(0, 0, peak, 0.05).is_err());
}

#[test]
fn adamw_first_step_matches_hand_computation() {
    let mut p = vec![Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap()];
    let g = vec![Tensor::new(vec![2], vec![0.5f32, -4.0]).unwrap()];
    let mut opt = AdamW::new(&p, 0.1);
    opt.update(&mut p, &g, 0.01);
    // Bias-corrected first step moves by lr·sign(g) plus decoupled decay.
    let want = [1.0 - 0.01 * (1.0 + 0.1 * 1.0), -2.0 - 0.01 * (-1.0 + 0.1 * -2.0)];
    for (a, b) in p[0].data().iter().zip(want) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn batch_gradient_is_the_mean_of_clip_gradients() {
    let cfg = tiny_cfg();
    let model = Model::<f32>::new(&cfg.model, 1).unwrap();
    let data = make_samples(&cfg, 2, |i| 100 + i as u64).unwrap();
    let refs: Vec<&Sample> = data.iter().collect();
    let (g, l) = batch_gradients(&model, &refs, 1.0).unwrap();
    let (ga, la) = clip_gradients(&model, &data[0], 1.0).unwrap();
    let (gb, lb) = clip_gradients(&model, &data[1], 1.0).unwrap();
    assert!((l.total - 0.5 * (la.total + lb.total)).abs() < 1e-9);
    for ((x, a), b) in g.iter().zip(&ga).zip(&gb) {
        for ((&x, &a), &b) in x.data().iter().zip(a.data()).zip(b.data()) {
            let want = 0.5 * (a as f64 + b as f64);
            assert!((x as f64 - want).abs() <= 1e-6 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn loss_total_is_the_weighted_component_sum() {
    let cfg = tiny_cfg();
    let model = Model::<f64>::new(&cfg.model, 2).unwrap();
    let data = make_samples(&cfg, 1, |_| 5).unwrap();
    for lambda in [0.0, 1.0, 3.0] {
        let (_, l) = clip_gradients(&model, &data[0], lambda).unwrap();
        assert!((l.total - l.weighted_sum()).abs() < 1e-9, "{l:?}");
    }
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let cfg = tiny_cfg();
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    let a = train(&cfg, &mut la, &mut |_, _| Ok(())).unwrap();
    let b = train(&cfg, &mut lb, &mut |_, _| Ok(())).unwrap();
    assert_eq!(a.model.params.tensors(), b.model.params.tensors());
    assert_eq!(la, lb);
    assert_eq!(a.losses.len(), cfg.total_steps());
    assert_eq!(String::from_utf8(la).unwrap().lines().count(), cfg.total_steps() + 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = TrainConfig { batch: 0, ..tiny_cfg() };
    assert!(train(&bad, &mut Vec::new(), &mut |_, _| Ok(())).is_err());
    let bad = TrainConfig { clip: SceneSpec { height: 30, ..tiny_cfg().clip }, ..tiny_cfg() };
    assert!(train(&bad, &mut Vec::new(), &mut |_, _| Ok(())).is_err());
}
