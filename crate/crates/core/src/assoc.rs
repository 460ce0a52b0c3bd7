//! Object association through tracked pixels.
//!
//! Every instance carries `n_px` pixels sampled inside its box. Each frame
//! the point predictor moves them; an instance matches the detection whose
//! box holds most of its visible pixels (weighted by score, label agreement
//! and relative area). Pixels that stay outside the matched box longer than
//! the timeout are replaced by fresh samples inside it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::model::{init_queries, step, Model, Probe, QueryState};
use crate::params::ParamVars;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Axis-aligned box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Closed-box membership.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x1 && p[0] <= self.x2 && p[1] >= self.y1 && p[1] <= self.y2
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub label: u32,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(Error::Input(format!("degenerate box {:?}", self.bbox)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Input(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    #[default]
    Greedy,
    Hungarian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssocConfig {
    pub seed: u64,
    /// Pixels per instance.
    pub n_px: usize,
    pub tau_match: f64,
    /// Minimum detection score for spawning a new instance.
    pub tau_spawn: f64,
    /// Frames a pixel may stay outside its matched box before it is replaced.
    pub timeout: u32,
    /// Consecutive unmatched frames after which an instance ends.
    pub t_lost: usize,
    /// Multiply similarity by the detection score.
    pub score_weight: bool,
    /// Halve similarity across label mismatches.
    pub label_penalty: bool,
    pub matcher: Matcher,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_px: 16,
            tau_match: 0.3,
            tau_spawn: 0.5,
            timeout: 2,
            t_lost: 10,
            score_weight: true,
            label_penalty: true,
            matcher: Matcher::Greedy,
        }
    }
}

impl AssocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_px == 0 || self.t_lost == 0 {
            return Err(Error::Config("n_px and t_lost must be >= 1".into()));
        }
        if !(self.tau_match > 0.0 && self.tau_match < 1.0) {
            return Err(Error::Config("tau_match must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Handle of a pixel registered with a [`PointPredictor`].
pub type PixelId = u64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackedInstance {
    pub id: u64,
    pub bbox: BBox,
    pub label: u32,
    pub score: f64,
    pub area: f64,
    pub pixel_ids: Vec<PixelId>,
    pub pixels: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    /// Consecutive matched frames each pixel has spent outside the box.
    pub streak: Vec<u32>,
    pub frames_since_matched: usize,
}

/// `n` points uniform in the open box.
pub fn sample_in_box(b: &BBox, n: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let mut pick = |lo: f64, hi: f64| loop {
        let v = rng.gen_range(lo..hi);
        if v > lo {
            return v;
        }
    };
    (0..n).map(|_| [pick(b.x1, b.x2), pick(b.y1, b.y2)]).collect()
}

/// A fresh instance with `n_px` pixels inside the detection box. Pixel ids
/// are left empty for the caller to fill once the predictor registers them.
pub fn spawn(id: u64, det: &Detection, n_px: usize, rng: &mut impl Rng) -> Result<TrackedInstance> {
    if det.bbox.area() <= 0.0 || !det.bbox.is_valid() {
        return Err(Error::Input(format!("cannot spawn from zero-area box {:?}", det.bbox)));
    }
    let pixels = sample_in_box(&det.bbox, n_px, rng);
    Ok(TrackedInstance {
        id,
        bbox: det.bbox,
        label: det.label,
        score: det.score,
        area: det.bbox.area(),
        pixel_ids: Vec::new(),
        visible: vec![true; n_px],
        streak: vec![0; n_px],
        pixels,
        frames_since_matched: 0,
    })
}

/// Similarity of instance `inst` (with current pixel predictions) to `det`.
pub fn similarity(inst: &TrackedInstance, det: &Detection, cfg: &AssocConfig) -> f64 {
    let (mut n_in, mut n_out) = (0usize, 0usize);
    for (p, &v) in inst.pixels.iter().zip(&inst.visible) {
        if v {
            if det.bbox.contains(*p) {
                n_in += 1;
            } else {
                n_out += 1;
            }
        }
    }
    if n_in + n_out == 0 {
        return 0.0;
    }
    let score = if cfg.score_weight { det.score } else { 1.0 };
    let label = if !cfg.label_penalty || inst.label == det.label { 1.0 } else { 0.5 };
    let area = (inst.area / det.bbox.area()).min(1.0);
    score * label * area * n_in as f64 / (n_in + n_out) as f64
}

/// Mean of the row-wise and column-wise softmax of `s` (`M` rows of `N`).
pub fn aggregate(s: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = s.len();
    if m == 0 {
        return Vec::new();
    }
    let n = s[0].len();
    let mut out = vec![vec![0.0; n]; m];
    for (i, row) in s.iter().enumerate() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for j in 0..n {
            out[i][j] += 0.5 * (row[j] - mx).exp() / z;
        }
    }
    for j in 0..n {
        let mx = (0..m).map(|i| s[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..m).map(|i| (s[i][j] - mx).exp()).sum();
        for i in 0..m {
            out[i][j] += 0.5 * (s[i][j] - mx).exp() / z;
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    /// `(instance row, detection column)` in the order chosen.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

/// Repeatedly takes the largest entry above `tau` (ties: lowest row, then
/// column) and strikes its row and column.
pub fn match_greedy(s_agg: &[Vec<f64>], tau: f64) -> Assignment {
    let m = s_agg.len();
    let n = s_agg.first().map_or(0, Vec::len);
    let mut cand: Vec<(f64, usize, usize)> = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| s_agg[i][j] > tau)
        .map(|(i, j)| (s_agg[i][j], i, j))
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut row_used, mut col_used) = (vec![false; m], vec![false; n]);
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            pairs.push((i, j));
        }
    }
    finish(pairs, row_used, col_used)
}

/// Maximum-total assignment, keeping only pairs above `tau`.
pub fn match_hungarian(s_agg: &[Vec<f64>], tau: f64) -> Assignment {
    let m = s_agg.len();
    let n = s_agg.first().map_or(0, Vec::len);
    let (mut row_used, mut col_used) = (vec![false; m], vec![false; n]);
    if m == 0 || n == 0 {
        return finish(Vec::new(), row_used, col_used);
    }
    let q = |v: f64| (v * 1e9).round() as i64;
    let transpose = m > n;
    let rows: Vec<Vec<i64>> = if transpose {
        (0..n).map(|j| (0..m).map(|i| q(s_agg[i][j])).collect()).collect()
    } else {
        s_agg.iter().map(|r| r.iter().map(|&v| q(v)).collect()).collect()
    };
    let w = pathfinding::matrix::Matrix::from_rows(rows).expect("rectangular");
    let (_, cols) = pathfinding::kuhn_munkres::kuhn_munkres(&w);
    let mut pairs: Vec<(usize, usize)> = cols
        .iter()
        .enumerate()
        .map(|(r, &c)| if transpose { (c, r) } else { (r, c) })
        .filter(|&(i, j)| s_agg[i][j] > tau)
        .collect();
    pairs.sort_unstable();
    for &(i, j) in &pairs {
        row_used[i] = true;
        col_used[j] = true;
    }
    finish(pairs, row_used, col_used)
}

fn finish(pairs: Vec<(usize, usize)>, row_used: Vec<bool>, col_used: Vec<bool>) -> Assignment {
    Assignment {
        pairs,
        unmatched_rows: (0..row_used.len()).filter(|&i| !row_used[i]).collect(),
        unmatched_cols: (0..col_used.len()).filter(|&j| !col_used[j]).collect(),
    }
}

/// What a lifecycle update did to an instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LifecycleOutcome {
    /// Slots whose pixels were dropped and resampled inside the box.
    pub replaced: Vec<usize>,
    pub terminated: bool,
}

/// Applies one frame's lifecycle rules. On a match, visible pixels outside
/// the box extend their streak (inside resets it), pixels whose streak
/// exceeds the timeout are resampled inside the box, and the box, label,
/// score and area are refreshed. Without a match only the unmatched counter
/// moves; the instance ends once it reaches `t_lost`.
pub fn lifecycle_update(
    inst: &mut TrackedInstance,
    matched: Option<&Detection>,
    cfg: &AssocConfig,
    rng: &mut impl Rng,
) -> LifecycleOutcome {
    let Some(det) = matched else {
        inst.frames_since_matched += 1;
        return LifecycleOutcome { replaced: Vec::new(), terminated: inst.frames_since_matched >= cfg.t_lost };
    };
    let mut replaced = Vec::new();
    for k in 0..inst.pixels.len() {
        if !inst.visible[k] {
            continue;
        }
        if det.bbox.contains(inst.pixels[k]) {
            inst.streak[k] = 0;
        } else {
            inst.streak[k] += 1;
            if inst.streak[k] > cfg.timeout {
                replaced.push(k);
            }
        }
    }
    let fresh = sample_in_box(&det.bbox, replaced.len(), rng);
    for (&k, p) in replaced.iter().zip(fresh) {
        inst.pixels[k] = p;
        inst.visible[k] = true;
        inst.streak[k] = 0;
    }
    inst.bbox = det.bbox;
    inst.label = det.label;
    inst.score = det.score;
    inst.area = det.bbox.area();
    inst.frames_since_matched = 0;
    LifecycleOutcome { replaced, terminated: false }
}

// ------------------------------------------------------------ point predictors

/// Source of per-frame pixel positions and visibility.
pub trait PointPredictor {
    /// Moves every registered pixel onto `frame`.
    fn advance(&mut self, frame: usize, image: &Tensor<f32>) -> Result<()>;
    /// Registers pixels located on the current frame.
    fn add(&mut self, points: &[[f64; 2]]) -> Result<Vec<PixelId>>;
    fn remove(&mut self, ids: &[PixelId]);
    /// Current `(position, visible)` of a registered pixel.
    fn get(&self, id: PixelId) -> Option<([f64; 2], bool)>;
}

/// Predictor driven by a closure of `(current frame, registration frame, registered position)`.
pub struct FnPredictor<F> {
    f: F,
    frame: usize,
    next: PixelId,
    pixels: BTreeMap<PixelId, (usize, [f64; 2], [f64; 2], bool)>,
}

impl<F: Fn(usize, usize, [f64; 2]) -> ([f64; 2], bool)> FnPredictor<F> {
    pub fn new(f: F) -> Self {
        Self { f, frame: 0, next: 0, pixels: BTreeMap::new() }
    }
}

impl<F: Fn(usize, usize, [f64; 2]) -> ([f64; 2], bool)> PointPredictor for FnPredictor<F> {
    fn advance(&mut self, frame: usize, _image: &Tensor<f32>) -> Result<()> {
        self.frame = frame;
        for (from, p0, p, v) in self.pixels.values_mut() {
            (*p, *v) = (self.f)(frame, *from, *p0);
        }
        Ok(())
    }

    fn add(&mut self, points: &[[f64; 2]]) -> Result<Vec<PixelId>> {
        Ok(points
            .iter()
            .map(|&p| {
                let id = self.next;
                self.next += 1;
                self.pixels.insert(id, (self.frame, p, p, true));
                id
            })
            .collect())
    }

    fn remove(&mut self, ids: &[PixelId]) {
        for id in ids {
            self.pixels.remove(id);
        }
    }

    fn get(&self, id: PixelId) -> Option<([f64; 2], bool)> {
        self.pixels.get(&id).map(|&(_, _, p, v)| (p, v))
    }
}

struct Group {
    ids: Vec<PixelId>,
    alive: Vec<bool>,
    state: QueryState,
    positions: Vec<[f64; 2]>,
    visible: Vec<bool>,
}

/// Point tracker backed by the learned model. Pixels registered on the same
/// frame form one query group; all groups share each frame's feature map.
pub struct LbmPredictor<'m> {
    model: &'m Model<f32>,
    tape: Tape<f32>,
    current: Option<(ParamVars, FeatureMap)>,
    groups: Vec<Group>,
    index: BTreeMap<PixelId, (usize, usize)>,
    next: PixelId,
    image_size: (usize, usize),
}

impl<'m> LbmPredictor<'m> {
    pub fn new(model: &'m Model<f32>) -> Self {
        Self {
            model,
            tape: Tape::new(),
            current: None,
            groups: Vec::new(),
            index: BTreeMap::new(),
            next: 0,
            image_size: (0, 0),
        }
    }

    fn reindex(&mut self) {
        self.index.clear();
        for (g, grp) in self.groups.iter().enumerate() {
            for (k, &id) in grp.ids.iter().enumerate() {
                if grp.alive[k] {
                    self.index.insert(id, (g, k));
                }
            }
        }
    }
}

impl PointPredictor for LbmPredictor<'_> {
    fn advance(&mut self, frame: usize, image: &Tensor<f32>) -> Result<()> {
        let mut tape = Tape::new();
        let mut groups = Vec::with_capacity(self.groups.len());
        for g in self.groups.drain(..) {
            let state = g.state.detach(&self.tape, &mut tape)?;
            groups.push(Group { state, ..g });
        }
        self.tape = tape;
        let pv = self.model.params.bind(&mut self.tape, false)?;
        let img = self.tape.constant(image.clone())?;
        let fm = self.model.net.encoder.encode(&mut self.tape, &pv, img, frame)?;
        self.image_size = (image.shape()[1], image.shape()[2]);
        for g in &mut groups {
            let out = step(&self.model.net, &mut self.tape, &pv, &mut g.state, &fm, &mut Probe::default())?;
            g.positions = out.positions_px(&self.tape);
            g.visible = out.visibility(&self.tape).iter().map(|&v| v > crate::supervision::VIS_THRESHOLD).collect();
        }
        self.groups = groups;
        self.current = Some((pv, fm));
        Ok(())
    }

    fn add(&mut self, points: &[[f64; 2]]) -> Result<Vec<PixelId>> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        let (_, fm) = self.current.as_ref().ok_or_else(|| Error::State("add before the first frame".into()))?;
        let (h, w) = self.image_size;
        let clamped: Vec<[f64; 2]> =
            points.iter().map(|p| [p[0].clamp(0.0, (w - 1) as f64), p[1].clamp(0.0, (h - 1) as f64)]).collect();
        let state = init_queries(&mut self.tape, fm, &clamped, self.model.config().mem_len)?;
        let ids: Vec<PixelId> = (0..points.len() as u64).map(|k| self.next + k).collect();
        self.next += points.len() as u64;
        self.groups.push(Group {
            ids: ids.clone(),
            alive: vec![true; points.len()],
            state,
            positions: clamped,
            visible: vec![true; points.len()],
        });
        self.reindex();
        Ok(ids)
    }

    fn remove(&mut self, ids: &[PixelId]) {
        for id in ids {
            if let Some(&(g, k)) = self.index.get(id) {
                self.groups[g].alive[k] = false;
            }
        }
        self.groups.retain(|g| g.alive.iter().any(|&a| a));
        self.reindex();
    }

    fn get(&self, id: PixelId) -> Option<([f64; 2], bool)> {
        self.index.get(&id).map(|&(g, k)| (self.groups[g].positions[k], self.groups[g].visible[k]))
    }
}

// ------------------------------------------------------------ pipeline

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Spawn,
    Match,
    Prune,
    Terminate,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Spawn => "spawn",
            EventKind::Match => "match",
            EventKind::Prune => "prune",
            EventKind::Terminate => "terminate",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub frame: usize,
    pub kind: EventKind,
    pub instance: u64,
    pub payload: String,
}

/// Live instances after one frame, in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameState {
    pub frame: usize,
    pub instances: Vec<TrackedInstance>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssocRun {
    pub frames: Vec<FrameState>,
    pub events: Vec<Event>,
}

pub const EVENT_LOG_HEADER: &str = "frame\tevent\tinstance\tpayload";

impl AssocRun {
    /// Tab-separated event log with a header line.
    pub fn event_log(&self) -> String {
        let mut s = format!("{EVENT_LOG_HEADER}\n");
        for e in &self.events {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.frame, e.kind.as_str(), e.instance, e.payload);
        }
        s
    }
}

fn box_text(b: &BBox) -> String {
    format!("{:.3},{:.3},{:.3},{:.3}", b.x1, b.y1, b.x2, b.y2)
}

/// Runs association over a frame stream. `detections[t]` holds frame `t`'s detections.
pub fn track_objects(
    frames: &[Tensor<f32>],
    detections: &[Vec<Detection>],
    predictor: &mut dyn PointPredictor,
    cfg: &AssocConfig,
) -> Result<AssocRun> {
    cfg.validate()?;
    if frames.len() != detections.len() {
        return Err(Error::Input(format!("{} frames but {} detection lists", frames.len(), detections.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut live: Vec<TrackedInstance> = Vec::new();
    let mut run = AssocRun::default();
    let mut next_id = 0u64;
    for (t, (image, dets)) in frames.iter().zip(detections).enumerate() {
        for d in dets {
            d.validate()?;
        }
        predictor.advance(t, image)?;
        for inst in &mut live {
            for k in 0..inst.pixel_ids.len() {
                let (p, v) =
                    predictor.get(inst.pixel_ids[k]).ok_or_else(|| Error::State("predictor lost a pixel".into()))?;
                inst.pixels[k] = p;
                inst.visible[k] = v;
            }
        }

        let s: Vec<Vec<f64>> = live.iter().map(|i| dets.iter().map(|d| similarity(i, d, cfg)).collect()).collect();
        let assignment = if live.is_empty() || dets.is_empty() {
            Assignment {
                pairs: Vec::new(),
                unmatched_rows: (0..live.len()).collect(),
                unmatched_cols: (0..dets.len()).collect(),
            }
        } else {
            let agg = aggregate(&s);
            match cfg.matcher {
                Matcher::Greedy => match_greedy(&agg, cfg.tau_match),
                Matcher::Hungarian => match_hungarian(&agg, cfg.tau_match),
            }
        };
        let mut matched: Vec<Option<usize>> = vec![None; live.len()];
        for &(i, j) in &assignment.pairs {
            matched[i] = Some(j);
        }

        let mut ended = Vec::new();
        for (i, inst) in live.iter_mut().enumerate() {
            let det = matched[i].map(|j| &dets[j]);
            let out = lifecycle_update(inst, det, cfg, &mut rng);
            if let Some(j) = matched[i] {
                run.events.push(Event {
                    frame: t,
                    kind: EventKind::Match,
                    instance: inst.id,
                    payload: format!("det={j} sim={:.6}", s[i][j]),
                });
            }
            if !out.replaced.is_empty() {
                let old: Vec<PixelId> = out.replaced.iter().map(|&k| inst.pixel_ids[k]).collect();
                predictor.remove(&old);
                let pts: Vec<[f64; 2]> = out.replaced.iter().map(|&k| inst.pixels[k]).collect();
                let ids = predictor.add(&pts)?;
                for (&k, id) in out.replaced.iter().zip(ids) {
                    inst.pixel_ids[k] = id;
                }
                run.events.push(Event {
                    frame: t,
                    kind: EventKind::Prune,
                    instance: inst.id,
                    payload: format!("replaced={}", out.replaced.len()),
                });
            }
            if out.terminated {
                ended.push(i);
            }
        }
        for &i in ended.iter().rev() {
            let inst = live.remove(i);
            predictor.remove(&inst.pixel_ids);
            run.events.push(Event { frame: t, kind: EventKind::Terminate, instance: inst.id, payload: String::new() });
        }

        for &j in &assignment.unmatched_cols {
            let d = &dets[j];
            if d.score < cfg.tau_spawn {
                continue;
            }
            let mut inst = spawn(next_id, d, cfg.n_px, &mut rng)?;
            next_id += 1;
            inst.pixel_ids = predictor.add(&inst.pixels)?;
            run.events.push(Event {
                frame: t,
                kind: EventKind::Spawn,
                instance: inst.id,
                payload: format!("det={j} box={} label={} score={:.6}", box_text(&d.bbox), d.label, d.score),
            });
            live.push(inst);
        }
        run.frames.push(FrameState { frame: t, instances: live.clone() });
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: [f64; 4], label: u32, score: f64) -> Detection {
        Detection { bbox: BBox::new(b[0], b[1], b[2], b[3]), label, score }
    }

    fn inst_with(pixels: Vec<[f64; 2]>, label: u32, area: f64) -> TrackedInstance {
        let n = pixels.len();
        TrackedInstance {
            id: 0,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            label,
            score: 1.0,
            area,
            pixel_ids: (0..n as u64).collect(),
            visible: vec![true; n],
            streak: vec![0; n],
            pixels,
            frames_since_matched: 0,
        }
    }

    #[test]
    fn similarity_worked_examples() {
        let cfg = AssocConfig::default();
        let inside = vec![[5.0, 5.0]; 16];
        let d = det([0.0, 0.0, 10.0, 10.0], 1, 1.0);
        assert_eq!(similarity(&inst_with(inside.clone(), 1, 100.0), &d, &cfg), 1.0);
        assert_eq!(similarity(&inst_with(inside, 2, 100.0), &d, &cfg), 0.5);
        let mut px = vec![[5.0, 5.0]; 12];
        px.extend(vec![[50.0, 50.0]; 4]);
        let v = similarity(&inst_with(px, 1, 50.0), &det([0.0, 0.0, 10.0, 10.0], 1, 0.8), &cfg);
        assert!((v - 0.3).abs() < 1e-15, "{v}");
    }

    #[test]
    fn no_visible_pixels_means_zero() {
        let mut i = inst_with(vec![[5.0, 5.0]; 4], 1, 100.0);
        i.visible = vec![false; 4];
        assert_eq!(similarity(&i, &det([0.0, 0.0, 10.0, 10.0], 1, 1.0), &AssocConfig::default()), 0.0);
    }

    #[test]
    fn aggregate_small_cases() {
        assert_eq!(aggregate(&[vec![0.7]]), vec![vec![1.0]]);
        let u = aggregate(&[vec![0.2, 0.2], vec![0.2, 0.2]]);
        assert!(u.iter().flatten().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn greedy_threshold_and_identity() {
        let a = match_greedy(&[vec![0.9, 0.1], vec![0.2, 0.8]], 0.3);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        let none = match_greedy(&[vec![0.1, 0.2], vec![0.25, 0.3]], 0.3);
        assert!(none.pairs.is_empty());
        assert_eq!((none.unmatched_rows, none.unmatched_cols), (vec![0, 1], vec![0, 1]));
    }

    #[test]
    fn hungarian_beats_greedy_on_total() {
        // Greedy grabs 0.9 then is left with 0.1; the optimum pairs 0.8 + 0.8.
        let s = vec![vec![0.9, 0.8], vec![0.8, 0.1]];
        assert_eq!(match_greedy(&s, 0.05).pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(match_hungarian(&s, 0.05).pairs, vec![(0, 1), (1, 0)]);
        let tall = vec![vec![0.9], vec![0.95], vec![0.1]];
        assert_eq!(match_hungarian(&tall, 0.3).pairs, vec![(1, 0)]);
    }

    #[test]
    fn spawn_rejects_zero_area() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(spawn(0, &det([1.0, 1.0, 1.0, 4.0], 0, 1.0), 4, &mut r).is_err());
        let one = spawn(0, &det([1.0, 1.0, 3.0, 4.0], 0, 1.0), 1, &mut r).unwrap();
        assert_eq!(one.pixels.len(), 1);
    }
}
