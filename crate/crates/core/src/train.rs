//! Desk-scale training: AdamW with warm-up + cosine decay, full backprop
//! through each unrolled clip, clip-parallel gradient evaluation with an
//! ordered reduction, and held-out evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::STRIDE;
use crate::model::{init_queries, step, Model, ModelConfig, OnlineTracker, Probe};
use crate::supervision::{frame_losses, metrics, FrameGt, LossBreakdown, PointMetrics, Tracks, VIS_THRESHOLD};
use crate::synth::{generate_clip, sample_queries, SceneSpec};
use crate::tensor::{Real, Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: f64,
    /// Passes over the training clips.
    pub epochs: usize,
    /// Clips per optimizer step.
    pub batch: usize,
    /// Size of the training set (clip seeds `seed·10⁶ + i`).
    pub train_clips: usize,
    /// Held-out clips (seeds disjoint from the training range).
    pub eval_clips: usize,
    /// Query points per clip.
    pub queries: usize,
    pub lambda_cls: f64,
    pub grad_clip: f64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub clip: SceneSpec,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 5e-4,
            weight_decay: 1e-5,
            warmup: 0.05,
            epochs: 20,
            batch: 4,
            train_clips: 400,
            eval_clips: 20,
            queries: 8,
            lambda_cls: 1.0,
            grad_clip: 1.0,
            checkpoint_every: 0,
            clip: SceneSpec::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return bad("warmup must lie in [0, 1)");
        }
        if self.batch == 0 || self.train_clips == 0 || self.epochs == 0 || self.queries == 0 {
            return bad("batch, train_clips, epochs and queries must be >= 1");
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return bad("grad_clip must be positive and weight_decay nonnegative");
        }
        self.clip.validate()?;
        self.model.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_clips.div_ceil(self.batch)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn train_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_000).wrapping_add(i as u64)
    }

    /// Held-out seeds live in the upper half of the seed space.
    pub fn eval_seed(&self, i: usize) -> u64 {
        (1u64 << 63) | self.train_seed(i)
    }
}

/// Linear warm-up to `peak` over the first `warmup·total` steps, then cosine decay to 0.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("lr schedule with zero total steps".into()));
    }
    let (s, n) = (step.min(total) as f64, total as f64);
    let w = warmup * n;
    if s < w {
        return Ok(peak * s / w);
    }
    let progress = if n > w { (s - w) / (n - w) } else { 1.0 };
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(params: &[Tensor<f32>], weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<f32>> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                let upd = mh / (vh.sqrt() + self.eps) + self.weight_decay * *x as f64;
                *x -= (lr * upd) as f32;
            }
        }
    }
}

/// A training or evaluation clip: frames, frame-0 queries, per-frame ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub frames: Vec<Tensor<f32>>,
    pub queries: Vec<[f64; 2]>,
    pub gt: Vec<FrameGt>,
}

impl Sample {
    pub fn synth(spec: &SceneSpec, queries: usize) -> Result<Self> {
        let clip = generate_clip(spec)?;
        let q = sample_queries(&clip, queries, spec.seed)?;
        Ok(Self {
            frames: clip.frames.iter().map(|f| f.to_tensor()).collect(),
            gt: clip.gt(&q.indices),
            queries: q.points,
        })
    }

    pub fn cast<G: Real>(&self) -> Vec<Tensor<G>> {
        self.frames.iter().map(|f| f.cast()).collect()
    }
}

/// Generates `count` clips with seeds from `seed_of`, redrawing a seed when
/// its clip has too few visible surface points.
pub fn make_samples(cfg: &TrainConfig, count: usize, seed_of: impl Fn(usize) -> u64 + Sync) -> Result<Vec<Sample>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut seed = seed_of(i);
            for _ in 0..64 {
                let spec = SceneSpec { seed, ..cfg.clip.clone() };
                match Sample::synth(&spec, cfg.queries) {
                    Ok(s) => return Ok(s),
                    Err(Error::Input(_)) => seed = seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Input(format!("clip {i}: no seed yields {} visible queries", cfg.queries)))
        })
        .collect()
}

/// Loss of one clip (mean over tracked frames) and its parameter gradients.
pub fn clip_gradients<F: Real>(
    model: &Model<F>,
    sample: &Sample,
    lambda_cls: f64,
) -> Result<(Vec<Tensor<F>>, LossBreakdown)> {
    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape, true)?;
    let frames = sample.cast::<F>();
    let t_len = frames.len();
    if t_len < 2 || sample.gt.len() != t_len {
        return Err(Error::Input("a clip needs >= 2 frames with ground truth for each".into()));
    }
    let mut maps = Vec::with_capacity(t_len);
    for (t, f) in frames.into_iter().enumerate() {
        let img = tape.constant(f)?;
        maps.push(model.net.encoder.encode(&mut tape, &pv, img, t)?);
    }
    let grid = (maps[0].height, maps[0].width);
    let mut state = init_queries(&mut tape, &maps[0], &sample.queries, model.config().mem_len)?;
    let mut total = None;
    let mut parts = LossBreakdown { lambda_cls, ..Default::default() };
    let w = 1.0 / (t_len - 1) as f64;
    for t in 1..t_len {
        let out = step(&model.net, &mut tape, &pv, &mut state, &maps[t], &mut Probe::default())?;
        let l = frame_losses(&mut tape, &out, &sample.gt[t], grid, lambda_cls)?;
        parts = parts.axpby(1.0, &l.read(&tape, lambda_cls), w);
        total = Some(match total {
            Some(acc) => tape.add(acc, l.total)?,
            None => l.total,
        });
    }
    let total = tape.scale(total.expect("at least one tracked frame"), w)?;
    parts.total = tape.value(total).item().as_f64();
    let grads = tape.backward(total)?;
    let g = pv
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((g, parts))
}

/// Batch-mean gradients, summed in clip order regardless of thread scheduling.
pub fn batch_gradients(
    model: &Model<f32>,
    batch: &[&Sample],
    lambda_cls: f64,
) -> Result<(Vec<Tensor<f32>>, LossBreakdown)> {
    let per_clip: Vec<_> = batch.par_iter().map(|s| clip_gradients(model, s, lambda_cls)).collect::<Result<_>>()?;
    let k = per_clip.len() as f64;
    let mut sum: Vec<Tensor<f64>> = model.params.tensors().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    let mut loss = LossBreakdown { lambda_cls, ..Default::default() };
    for (g, l) in &per_clip {
        for (acc, gi) in sum.iter_mut().zip(g) {
            for (a, &x) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += x as f64;
            }
        }
        loss = loss.axpby(1.0, l, 1.0 / k);
    }
    Ok((sum.iter().map(|t| t.map(|x| x / k).cast()).collect(), loss))
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One optimizer step on `batch`; returns the batch-mean loss breakdown.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW,
    batch: &[&Sample],
    lr: f64,
    cfg: &TrainConfig,
    step_idx: usize,
) -> Result<(LossBreakdown, f64)> {
    if !model.params.is_finite() {
        return Err(Error::Diverged { step: step_idx, detail: "non-finite parameters".into() });
    }
    let (mut grads, loss) = batch_gradients(model, batch, cfg.lambda_cls).map_err(|e| match e {
        Error::Tensor(t) => Error::Diverged { step: step_idx, detail: t.to_string() },
        other => other,
    })?;
    if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { step: step_idx, detail: format!("loss {loss:?}") });
    }
    let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    opt.update(model.params.tensors_mut(), &grads, lr);
    Ok((loss, norm))
}

/// Runs online tracking over each sample (frame 0 is the query frame) and
/// averages the metrics over clips. The query frame itself is not scored.
pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<PointMetrics> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation needs at least one clip".into()));
    }
    let per: Vec<PointMetrics> = samples.par_iter().map(|s| evaluate_clip(model, s)).collect::<Result<_>>()?;
    Ok(PointMetrics::mean(&per).expect("nonempty"))
}

pub fn evaluate_clip(model: &Model<f32>, s: &Sample) -> Result<PointMetrics> {
    let mut tr = OnlineTracker::new(model);
    tr.start(&s.frames[0], &s.queries)?;
    let (mut pts, mut vis) = (Vec::new(), Vec::new());
    for f in &s.frames[1..] {
        let p = tr.track(f)?;
        pts.push(p.positions);
        vis.push(p.visibility.iter().map(|&v| v > VIS_THRESHOLD).collect::<Vec<_>>());
    }
    let gp: Vec<_> = s.gt[1..].iter().map(|g| g.points.clone()).collect();
    let gv: Vec<_> = s.gt[1..].iter().map(|g| g.visible.clone()).collect();
    let (h, w) = (s.frames[0].shape()[1], s.frames[0].shape()[2]);
    metrics(Tracks { points: &pts, visible: &vis }, Tracks { points: &gp, visible: &gv }, (h, w))
}

/// Header of the per-step metrics log.
pub const LOG_HEADER: &str = "step\tlr\ttotal\tcls\treg\tvis\tconf\tconf_ref\tgrad_norm";

pub fn log_line(step: usize, lr: f64, l: &LossBreakdown, grad_norm: f64) -> String {
    format!(
        "{step}\t{lr:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{grad_norm:.4}",
        l.total, l.cls, l.reg, l.vis, l.conf, l.conf_ref
    )
}

/// Per-step record handed to the training callback.
#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub step: usize,
    pub total_steps: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub losses: Vec<LossBreakdown>,
}

/// Full training run. `log` receives [`LOG_HEADER`] then one line per step;
/// `on_step` sees every step and may write checkpoints.
pub fn train(
    cfg: &TrainConfig,
    log: &mut dyn Write,
    on_step: &mut dyn FnMut(&StepReport, &Model<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = make_samples(cfg, cfg.train_clips, |i| cfg.train_seed(i))?;
    let mut model = Model::<f32>::new(&cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(model.params.tensors(), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5151);
    let total = cfg.total_steps();
    let log_err = |e: std::io::Error| Error::Io { path: "<metrics log>".into(), source: e };
    writeln!(log, "{LOG_HEADER}").map_err(log_err)?;
    let mut losses = Vec::with_capacity(total);
    let mut step_idx = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = lr_at(step_idx, total, cfg.lr, cfg.warmup)?;
            let (loss, norm) = train_step(&mut model, &mut opt, &batch, lr, cfg, step_idx)?;
            writeln!(log, "{}", log_line(step_idx, lr, &loss, norm)).map_err(log_err)?;
            on_step(&StepReport { step: step_idx, total_steps: total, lr, loss, grad_norm: norm }, &model)?;
            losses.push(loss);
            step_idx += 1;
        }
    }
    log.flush().map_err(log_err)?;
    Ok(TrainOutcome { model, losses })
}

/// Held-out clips for `cfg`.
pub fn eval_samples(cfg: &TrainConfig) -> Result<Vec<Sample>> {
    make_samples(cfg, cfg.eval_clips, |i| cfg.eval_seed(i))
}

/// Feature-grid size for a clip spec.
pub fn grid_of(spec: &SceneSpec) -> (usize, usize) {
    (spec.height / STRIDE, spec.width / STRIDE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 1000, 5e-4, 0.05).unwrap(), 0.0);
        assert_eq!(lr_at(50, 1000, 5e-4, 0.05).unwrap(), 5e-4);
        assert!(lr_at(1000, 1000, 5e-4, 0.05).unwrap().abs() < 1e-12);
        assert!(lr_at(0, 0, 5e-4, 0.05).is_err());
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = vec![Tensor::new(vec![3], vec![0.5f32, -1.0, 2.0]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::new(vec![3], vec![1.0f32, 1.0, -3.0]).unwrap()];
        let mut opt = AdamW::new(&p, 1e-5);
        opt.update(&mut p, &g, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_toy_converges() {
        let mut p = vec![Tensor::new(vec![1], vec![3.0f32]).unwrap()];
        let mut opt = AdamW::new(&p, 0.0);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let x = p[0].data()[0] as f64;
            let loss = (x - 1.0).powi(2);
            assert!(loss <= prev + 1e-12);
            prev = loss;
            let g = vec![Tensor::new(vec![1], vec![(2.0 * (x - 1.0)) as f32]).unwrap()];
            opt.update(&mut p, &g, 0.01);
        }
        assert!(prev < 4.0 * 0.5);
    }

    #[test]
    fn grad_clip_caps_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0f32, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].norm_sq() - 1.0).abs() < 1e-6);
    }
}
