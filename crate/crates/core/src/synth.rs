//! Synthetic clips with exact point tracks and visibility.
//!
//! A scene is a drifting textured background plus depth-ordered opaque
//! shapes. Each shape carries its texture in local coordinates and moves by
//! a constant velocity plus a sinusoidally varying linear deformation, so
//! any local point has a closed-form image position in every frame.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::supervision::FrameGt;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteKind {
    #[default]
    Polygon,
    Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sprites: usize,
    pub kind: SpriteKind,
    /// Bound on per-frame displacement of any tracked point along each axis.
    pub max_speed: f64,
    /// Peak deformation displacement at a shape's rim, in pixels.
    pub deform_amp: f64,
    /// Angular frequency of the deformation, radians per frame.
    pub deform_omega: f64,
    pub occluders: usize,
    pub bg_drift: [f64; 2],
    /// Surface points tracked per sprite.
    pub pool_per_sprite: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 48,
            width: 64,
            frames: 12,
            sprites: 3,
            kind: SpriteKind::Polygon,
            max_speed: 2.0,
            deform_amp: 1.5,
            deform_omega: 0.5,
            occluders: 1,
            bg_drift: [0.5, 0.25],
            pool_per_sprite: 16,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(Error::Config(format!("resolution {}x{} must be divisible by 16", self.height, self.width)));
        }
        if self.frames < 2 {
            return Err(Error::Config("a clip needs at least 2 frames".into()));
        }
        if self.sprites == 0 && self.pool_per_sprite > 0 {
            return Err(Error::Config("0 sprites cannot carry query points".into()));
        }
        if !(self.max_speed >= 0.0 && self.deform_amp >= 0.0 && self.deform_omega >= 0.0) {
            return Err(Error::Config("speeds and deformation must be nonnegative".into()));
        }
        if self.deform_amp * self.deform_omega.min(2.0) > self.max_speed {
            return Err(Error::Config("deformation alone exceeds max_speed".into()));
        }
        Ok(())
    }
}

/// Sum of sinusoids over a base colour, evaluated in some 2-D frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub base: [f64; 3],
    /// `(frequency vector, phase, per-channel amplitude)`.
    pub waves: Vec<([f64; 2], f64, [f64; 3])>,
}

impl Texture {
    pub fn flat(rgb: [f64; 3]) -> Self {
        Self { base: rgb, waves: Vec::new() }
    }

    pub fn random(r: &mut impl Rng, waves: usize, freq: (f64, f64), amp: f64) -> Self {
        let base = [r.gen_range(0.15..0.85), r.gen_range(0.15..0.85), r.gen_range(0.15..0.85)];
        let waves = (0..waves)
            .map(|_| {
                let th = r.gen_range(0.0..std::f64::consts::TAU);
                let k = r.gen_range(freq.0..freq.1);
                let a = [r.gen_range(-amp..amp), r.gen_range(-amp..amp), r.gen_range(-amp..amp)];
                ([k * th.cos(), k * th.sin()], r.gen_range(0.0..std::f64::consts::TAU), a)
            })
            .collect();
        Self { base, waves }
    }

    pub fn eval(&self, u: [f64; 2]) -> [f64; 3] {
        let mut c = self.base;
        for (k, ph, a) in &self.waves {
            let s = (k[0] * u[0] + k[1] * u[1] + ph).sin();
            for ch in 0..3 {
                c[ch] += a[ch] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outline {
    /// Star-shaped about the local origin; vertices in order.
    Polygon(Vec<[f64; 2]>),
    Ellipse {
        rx: f64,
        ry: f64,
    },
}

impl Outline {
    /// Crossing-number test in local coordinates.
    pub fn contains(&self, u: [f64; 2]) -> bool {
        match self {
            Outline::Ellipse { rx, ry } => (u[0] / rx).powi(2) + (u[1] / ry).powi(2) <= 1.0,
            Outline::Polygon(v) => {
                let mut inside = false;
                let n = v.len();
                for i in 0..n {
                    let (a, b) = (v[i], v[(i + 1) % n]);
                    if (a[1] > u[1]) != (b[1] > u[1]) {
                        let x = a[0] + (u[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                        if u[0] < x {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }

    /// Half-extent along each axis.
    pub fn radius(&self) -> f64 {
        match self {
            Outline::Ellipse { rx, ry } => rx.max(*ry),
            Outline::Polygon(v) => v.iter().map(|p| p[0].abs().max(p[1].abs())).fold(0.0, f64::max),
        }
    }
}

/// `u ↦ u + amp·sin(ω t + φ)·M u / radius`, with `‖M‖∞ ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deform {
    pub amp: f64,
    pub omega: f64,
    pub phase: f64,
    pub m: [[f64; 2]; 2],
    pub radius: f64,
}

impl Deform {
    pub const NONE: Deform = Deform { amp: 0.0, omega: 0.0, phase: 0.0, m: [[0.0; 2]; 2], radius: 1.0 };

    fn matrix(&self, t: f64) -> [[f64; 2]; 2] {
        let s = self.amp * (self.omega * t + self.phase).sin() / self.radius;
        [[1.0 + s * self.m[0][0], s * self.m[0][1]], [s * self.m[1][0], 1.0 + s * self.m[1][1]]]
    }

    pub fn apply(&self, u: [f64; 2], t: f64) -> [f64; 2] {
        let a = self.matrix(t);
        [a[0][0] * u[0] + a[0][1] * u[1], a[1][0] * u[0] + a[1][1] * u[1]]
    }

    pub fn invert(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let a = self.matrix(t);
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        [(a[1][1] * x[0] - a[0][1] * x[1]) / det, (a[0][0] * x[1] - a[1][0] * x[0]) / det]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub outline: Outline,
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    pub deform: Deform,
    pub texture: Texture,
    /// Radial shading for blobs.
    pub shaded: bool,
    /// Local coordinates of the tracked surface points.
    pub pool: Vec<[f64; 2]>,
}

impl Shape {
    pub fn to_image(&self, u: [f64; 2], t: f64) -> [f64; 2] {
        let d = self.deform.apply(u, t);
        [self.center[0] + self.velocity[0] * t + d[0], self.center[1] + self.velocity[1] * t + d[1]]
    }

    pub fn to_local(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let rel = [x[0] - self.center[0] - self.velocity[0] * t, x[1] - self.center[1] - self.velocity[1] * t];
        self.deform.invert(rel, t)
    }

    pub fn covers(&self, x: [f64; 2], t: f64) -> bool {
        self.outline.contains(self.to_local(x, t))
    }

    fn color(&self, u: [f64; 2]) -> [f64; 3] {
        let c = self.texture.eval(u);
        if !self.shaded {
            return c;
        }
        let (rx, ry) = match self.outline {
            Outline::Ellipse { rx, ry } => (rx, ry),
            Outline::Polygon(_) => (self.outline.radius(), self.outline.radius()),
        };
        let g = 0.6 + 0.4 * (-2.0 * ((u[0] / rx).powi(2) + (u[1] / ry).powi(2))).exp();
        c.map(|v| v * g)
    }
}

/// A fully specified scene; shapes are listed back to front.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: Texture,
    pub bg_drift: [f64; 2],
    pub shapes: Vec<Shape>,
}

/// An 8-bit RGB frame, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[3,H,W]` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.height * self.width;
        Tensor::from_fn(vec![3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[3 * p + c] as f32 / 255.0
        })
    }
}

/// Ground truth of one surface point over the whole clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub shape: usize,
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Vec<Image>,
    /// Every pool point of every shape, shape by shape.
    pub tracks: Vec<Track>,
}

impl Clip {
    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    /// Per-frame ground truth for a subset of tracks.
    pub fn gt(&self, indices: &[usize]) -> Vec<FrameGt> {
        (0..self.frames.len())
            .map(|t| FrameGt {
                points: indices.iter().map(|&i| self.tracks[i].points[t]).collect(),
                visible: indices.iter().map(|&i| self.tracks[i].visible[t]).collect(),
            })
            .collect()
    }
}

/// Query points sampled from a clip's tracks, all issued at frame 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Queries {
    pub indices: Vec<usize>,
    pub points: Vec<[f64; 2]>,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Scene {
    /// Draws a random scene for `spec`.
    pub fn random(spec: &SceneSpec) -> Result<Scene> {
        spec.validate()?;
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        let (w, h) = (spec.width as f64, spec.height as f64);
        let background = Texture::random(&mut r, 4, (0.15, 0.6), 0.2);
        let deform_step = spec.deform_amp * spec.deform_omega.min(2.0);
        let vmax = (spec.max_speed - deform_step).max(0.0);
        let size = (w.min(h) / 8.0).max(3.0);
        let mut shapes = Vec::new();
        for k in 0..spec.sprites + spec.occluders {
            let occluder = k >= spec.sprites;
            let outline = match spec.kind {
                SpriteKind::Polygon => {
                    let nv = r.gen_range(5..9);
                    let verts = (0..nv)
                        .map(|i| {
                            let a = std::f64::consts::TAU * (i as f64 + r.gen_range(-0.3..0.3)) / nv as f64;
                            let rad = size * r.gen_range(0.7..1.3);
                            [rad * a.cos(), rad * a.sin()]
                        })
                        .collect();
                    Outline::Polygon(verts)
                }
                SpriteKind::Blob => {
                    Outline::Ellipse { rx: size * r.gen_range(0.7..1.3), ry: size * r.gen_range(0.7..1.3) }
                }
            };
            let radius = outline.radius();
            let (a, b) = (r.gen_range(-1.0..1.0f64), r.gen_range(-1.0..1.0f64));
            let (c, e) = (r.gen_range(-1.0..1.0f64), r.gen_range(-1.0..1.0f64));
            let m = [
                [a / (a.abs() + b.abs()).max(1.0), b / (a.abs() + b.abs()).max(1.0)],
                [c / (c.abs() + e.abs()).max(1.0), e / (c.abs() + e.abs()).max(1.0)],
            ];
            let deform = Deform {
                amp: spec.deform_amp,
                omega: spec.deform_omega,
                phase: r.gen_range(0.0..std::f64::consts::TAU),
                m,
                radius,
            };
            let margin = radius.min(w / 3.0).min(h / 3.0);
            let center = [r.gen_range(margin..w - margin), r.gen_range(margin..h - margin)];
            let velocity = [r.gen_range(-vmax..=vmax), r.gen_range(-vmax..=vmax)];
            let texture = Texture::random(&mut r, 3, (0.4, 1.3), 0.3);
            let pool = if occluder { Vec::new() } else { sample_inside(&outline, spec.pool_per_sprite, &mut r) };
            shapes.push(Shape {
                outline,
                center,
                velocity,
                deform,
                texture,
                shaded: spec.kind == SpriteKind::Blob,
                pool,
            });
        }
        Ok(Scene {
            height: spec.height,
            width: spec.width,
            frames: spec.frames,
            background,
            bg_drift: spec.bg_drift,
            shapes,
        })
    }

    /// Index of the front-most shape covering `x` at time `t`.
    pub fn top_shape(&self, x: [f64; 2], t: f64) -> Option<usize> {
        (0..self.shapes.len()).rev().find(|&k| self.shapes[k].covers(x, t))
    }

    pub fn in_frame(&self, x: [f64; 2]) -> bool {
        x[0] >= 0.0 && x[0] <= (self.width - 1) as f64 && x[1] >= 0.0 && x[1] <= (self.height - 1) as f64
    }

    pub fn render_frame(&self, t: usize) -> Image {
        let tf = t as f64;
        let mut data = Vec::with_capacity(3 * self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = [x as f64, y as f64];
                let c = match self.top_shape(p, tf) {
                    Some(k) => self.shapes[k].color(self.shapes[k].to_local(p, tf)),
                    None => self.background.eval([p[0] - self.bg_drift[0] * tf, p[1] - self.bg_drift[1] * tf]),
                };
                data.extend(c.map(quantize));
            }
        }
        Image { height: self.height, width: self.width, data }
    }

    pub fn tracks(&self) -> Vec<Track> {
        let mut out = Vec::new();
        for (k, s) in self.shapes.iter().enumerate() {
            for &u in &s.pool {
                let mut tr = Track { shape: k, points: Vec::new(), visible: Vec::new() };
                for t in 0..self.frames {
                    let tf = t as f64;
                    let p = s.to_image(u, tf);
                    let hidden = self.shapes[k + 1..].iter().any(|f| f.covers(p, tf));
                    tr.points.push(p);
                    tr.visible.push(self.in_frame(p) && !hidden);
                }
                out.push(tr);
            }
        }
        out
    }

    pub fn render(&self) -> Clip {
        Clip { frames: (0..self.frames).map(|t| self.render_frame(t)).collect(), tracks: self.tracks() }
    }
}

/// Uniform rejection samples from the inside of `outline`.
fn sample_inside(outline: &Outline, n: usize, r: &mut impl Rng) -> Vec<[f64; 2]> {
    let rad = outline.radius();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = [r.gen_range(-rad..rad), r.gen_range(-rad..rad)];
        // Keep away from the rim so boundary pixels do not decide visibility.
        let shrunk = [u[0] / 0.85, u[1] / 0.85];
        if outline.contains(shrunk) {
            out.push(u);
        }
    }
    out
}

pub fn generate_clip(spec: &SceneSpec) -> Result<Clip> {
    Ok(Scene::random(spec)?.render())
}

/// `n` distinct tracks visible at frame 0, in ascending index order.
pub fn sample_queries(clip: &Clip, n: usize, seed: u64) -> Result<Queries> {
    let pool: Vec<usize> = (0..clip.tracks.len()).filter(|&i| clip.tracks[i].visible[0]).collect();
    if n > pool.len() {
        return Err(Error::Input(format!(
            "requested {n} queries but only {} points are visible at frame 0",
            pool.len()
        )));
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut pick: Vec<usize> = index::sample(&mut r, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    pick.sort_unstable();
    let points = pick.iter().map(|&i| clip.tracks[i].points[0]).collect();
    Ok(Queries { indices: pick, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polygon_contains_square() {
        let sq = Outline::Polygon(vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]);
        assert!(sq.contains([0.0, 0.0]));
        assert!(sq.contains([0.9, -0.9]));
        assert!(!sq.contains([1.1, 0.0]));
    }

    #[test]
    fn deform_round_trips() {
        let d = Deform { amp: 1.5, omega: 0.5, phase: 0.3, m: [[0.5, -0.5], [0.2, 0.7]], radius: 6.0 };
        for t in 0..10 {
            let u = [2.0, -3.5];
            let back = d.invert(d.apply(u, t as f64), t as f64);
            assert!((back[0] - u[0]).abs() < 1e-12 && (back[1] - u[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SceneSpec { height: 40, ..Default::default() }.validate().is_err());
        assert!(SceneSpec { frames: 1, ..Default::default() }.validate().is_err());
        assert!(SceneSpec { sprites: 0, ..Default::default() }.validate().is_err());
        assert!(SceneSpec { sprites: 0, pool_per_sprite: 0, ..Default::default() }.validate().is_ok());
    }
}
