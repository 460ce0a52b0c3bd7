use lbmtrack::synth::{generate_clip, sample_queries, Deform, Outline, Scene, SceneSpec, Shape, SpriteKind, Texture};
use proptest::prelude::*;

fn square(c: [f64; 2], half: f64, v: [f64; 2], rgb: [f64; 3]) -> Shape {
    Shape {
        outline: Outline::Polygon(vec![[-half, -half], [half, -half], [half, half], [-half, half]]),
        center: c,
        velocity: v,
        deform: Deform::NONE,
        texture: Texture::flat(rgb),
        shaded: false,
        pool: vec![[0.0, 0.0], [half * 0.5, -half * 0.5]],
    }
}

fn scene(shapes: Vec<Shape>, frames: usize) -> Scene {
    Scene { height: 32, width: 48, frames, background: Texture::flat([0.0, 0.0, 0.0]), bg_drift: [0.0, 0.0], shapes }
}

#[test]
fn static_scene_repeats_the_first_frame() {
    let spec = SceneSpec { seed: 3, max_speed: 0.0, deform_amp: 0.0, bg_drift: [0.0, 0.0], ..SceneSpec::default() };
    let clip = generate_clip(&spec).unwrap();
    assert!(clip.frames.iter().all(|f| f == &clip.frames[0]));
    for t in &clip.tracks {
        assert!(t.points.iter().all(|p| p == &t.points[0]));
        assert!(t.visible.iter().all(|v| v == &t.visible[0]));
    }
}

#[test]
fn constant_velocity_moves_two_pixels_per_frame() {
    let s = scene(vec![square([10.0, 16.0], 4.0, [2.0, 0.0], [1.0, 0.0, 0.0])], 6);
    let clip = s.render();
    for tr in &clip.tracks {
        for t in 1..6 {
            assert_eq!(tr.points[t][0] - tr.points[t - 1][0], 2.0);
            assert_eq!(tr.points[t][1], tr.points[t - 1][1]);
        }
    }
    // The sprite's centre pixel is red in every frame, the pixel it left is background.
    for t in 0..6 {
        let f = &clip.frames[t];
        assert_eq!(f.pixel(10 + 2 * t, 16), [255, 0, 0]);
        if t >= 3 {
            assert_eq!(f.pixel(4, 16), [0, 0, 0]);
        }
    }
}

#[test]
fn occluder_hides_points_exactly_while_it_covers_them() {
    // Back square fixed at x=24; front square sweeps from x=4 at 4 px per frame.
    let back = square([24.0, 16.0], 3.0, [0.0, 0.0], [0.0, 1.0, 0.0]);
    let front = Shape { pool: Vec::new(), ..square([4.0, 16.0], 5.0, [4.0, 0.0], [0.0, 0.0, 1.0]) };
    let clip = scene(vec![back, front], 11).render();
    let centre = &clip.tracks[0];
    for t in 0..11 {
        let fx = 4.0 + 4.0 * t as f64;
        let covered = (fx - 24.0).abs() <= 5.0;
        assert_eq!(centre.visible[t], !covered, "frame {t}");
        let want = if covered { [0, 0, 255] } else { [0, 255, 0] };
        assert_eq!(clip.frames[t].pixel(24, 16), want, "frame {t}");
    }
}

#[test]
fn points_leaving_the_frame_are_invisible() {
    let clip = scene(vec![square([40.0, 16.0], 3.0, [3.0, 0.0], [1.0, 1.0, 1.0])], 5).render();
    let c = &clip.tracks[0];
    for t in 0..5 {
        assert_eq!(c.visible[t], c.points[t][0] <= 47.0, "frame {t} at {:?}", c.points[t]);
    }
    assert!(!c.visible[4]);
}

#[test]
fn sample_queries_is_sorted_visible_and_deterministic() {
    let clip = generate_clip(&SceneSpec { seed: 5, ..SceneSpec::default() }).unwrap();
    let a = sample_queries(&clip, 8, 1).unwrap();
    assert_eq!(a, sample_queries(&clip, 8, 1).unwrap());
    assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
    for (&i, p) in a.indices.iter().zip(&a.points) {
        assert!(clip.tracks[i].visible[0]);
        assert_eq!(&clip.tracks[i].points[0], p);
    }
    let pool = clip.tracks.iter().filter(|t| t.visible[0]).count();
    assert!(sample_queries(&clip, pool + 1, 1).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    for spec in [
        SceneSpec { height: 40, ..SceneSpec::default() },
        SceneSpec { frames: 1, ..SceneSpec::default() },
        SceneSpec { sprites: 0, ..SceneSpec::default() },
        SceneSpec { max_speed: 0.5, deform_amp: 1.0, deform_omega: 1.0, ..SceneSpec::default() },
    ] {
        assert!(generate_clip(&spec).is_err(), "{spec:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn same_seed_same_clip(seed in any::<u64>(), blob in any::<bool>()) {
        let kind = if blob { SpriteKind::Blob } else { SpriteKind::Polygon };
        let spec = SceneSpec { seed, kind, frames: 4, ..SceneSpec::default() };
        prop_assert_eq!(generate_clip(&spec).unwrap(), generate_clip(&spec).unwrap());
    }

    #[test]
    fn per_frame_motion_is_bounded(seed in any::<u64>(), speed in 0.5f64..4.0) {
        let spec = SceneSpec { seed, max_speed: speed, deform_amp: speed / 4.0, frames: 8, ..SceneSpec::default() };
        let clip = generate_clip(&spec).unwrap();
        for tr in &clip.tracks {
            for w in tr.points.windows(2) {
                let d = (w[1][0] - w[0][0]).abs().max((w[1][1] - w[0][1]).abs());
                prop_assert!(d <= speed + 1e-9, "step {} > {}", d, speed);
            }
        }
    }
}
