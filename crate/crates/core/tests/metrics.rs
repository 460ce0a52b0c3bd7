use lbmtrack::supervision::{metrics, Tracks};
use proptest::prelude::*;

type Frames = (Vec<Vec<[f64; 2]>>, Vec<Vec<bool>>);

fn frames(t: usize, n: usize) -> impl Strategy<Value = Frames> {
    let pts = proptest::collection::vec(proptest::collection::vec([0.0f64..63.9, 0.0f64..31.9], n), t);
    let vis = proptest::collection::vec(proptest::collection::vec(any::<bool>(), n), t);
    (pts, vis)
}

fn pair() -> impl Strategy<Value = (Frames, Frames)> {
    (1usize..5, 1usize..6).prop_flat_map(|(t, n)| (frames(t, n), frames(t, n)))
}

proptest! {
    #[test]
    fn metrics_are_fractions_and_averages((p, g) in pair()) {
        let m = metrics(Tracks { points: &p.0, visible: &p.1 }, Tracks { points: &g.0, visible: &g.1 }, (32, 64)).unwrap();
        for v in m.delta.iter().chain(&m.jaccard).chain([&m.aj, &m.delta_avg, &m.oa]) {
            prop_assert!((0.0..=1.0).contains(v), "{m:?}");
        }
        prop_assert!((m.delta_avg - m.delta.iter().sum::<f64>() / 5.0).abs() < 1e-12);
        prop_assert!((m.aj - m.jaccard.iter().sum::<f64>() / 5.0).abs() < 1e-12);
        prop_assert!(m.delta.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn perfect_prediction_scores_one((_, g) in pair()) {
        let t = Tracks { points: &g.0, visible: &g.1 };
        let m = metrics(t, t, (32, 64)).unwrap();
        prop_assert_eq!(m.oa, 1.0);
        prop_assert_eq!(m.aj, 1.0);
    }
}
