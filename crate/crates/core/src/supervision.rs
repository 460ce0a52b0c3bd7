//! Training losses and point-tracking metrics.

use serde::{Deserialize, Serialize};

use crate::encoder::STRIDE;
use crate::model::{ReferenceSet, TrackOutput};
use crate::tensor::{Real, Tape, Var};
use crate::{Error, Result};

/// Ground truth for the `N` queries on one frame (image pixels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameGt {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

/// Distance thresholds (in the 256×256 reference frame) for δ and AJ.
pub const THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
/// Side of the square frame the metrics rescale to.
pub const METRIC_FRAME: f64 = 256.0;
/// Confidence radius in pixels at [`CONF_REFERENCE_WIDTH`].
pub const CONF_RADIUS: f64 = 8.0;
pub const CONF_REFERENCE_WIDTH: f64 = 512.0;
/// Visibility decision threshold on the sigmoid output.
pub const VIS_THRESHOLD: f64 = 0.5;

/// Confidence radius scaled to an image of width `width`.
pub fn conf_radius(width: usize) -> f64 {
    CONF_RADIUS * width as f64 / CONF_REFERENCE_WIDTH
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub vis: f64,
    pub conf: f64,
    pub conf_ref: f64,
    pub total: f64,
    pub lambda_cls: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self) -> f64 {
        self.lambda_cls * self.cls + self.reg + self.vis + self.conf + self.conf_ref
    }

    /// Component-wise `a·self + b·other`; `lambda_cls` is kept.
    pub fn axpby(&self, a: f64, other: &Self, b: f64) -> Self {
        Self {
            cls: a * self.cls + b * other.cls,
            reg: a * self.reg + b * other.reg,
            vis: a * self.vis + b * other.vis,
            conf: a * self.conf + b * other.conf,
            conf_ref: a * self.conf_ref + b * other.conf_ref,
            total: a * self.total + b * other.total,
            lambda_cls: self.lambda_cls,
        }
    }
}

/// Loss terms of one frame, still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub reg: Var,
    pub vis: Var,
    pub conf: Var,
    pub conf_ref: Var,
    pub total: Var,
}

impl LossVars {
    pub fn read<F: Real>(&self, tape: &Tape<F>, lambda_cls: f64) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossBreakdown {
            cls: v(self.cls),
            reg: v(self.reg),
            vis: v(self.vis),
            conf: v(self.conf),
            conf_ref: v(self.conf_ref),
            total: v(self.total),
            lambda_cls,
        }
    }
}

/// Flattened cell index of the stride-4 cell containing `p` (image pixels).
pub fn cell_index(p: [f64; 2], grid: (usize, usize)) -> usize {
    let s = STRIDE as f64;
    let cx = ((p[0] / s).floor() as usize).min(grid.1 - 1);
    let cy = ((p[1] / s).floor() as usize).min(grid.0 - 1);
    cy * grid.1 + cx
}

fn check_inside(gt: &FrameGt, image: (usize, usize)) -> Result<()> {
    let (h, w) = (image.0 as f64, image.1 as f64);
    for (p, &v) in gt.points.iter().zip(&gt.visible) {
        if v && !(p[0] >= 0.0 && p[0] < w && p[1] >= 0.0 && p[1] < h) {
            return Err(Error::Input(format!("visible ground-truth point {p:?} outside {w}x{h} image")));
        }
    }
    Ok(())
}

/// Cross-entropy of every layer's correlation map against the ground-truth
/// cell, averaged over visible queries and summed over layers.
pub fn cls_loss<F: Real>(tape: &mut Tape<F>, corr: &[Var], gt: &FrameGt, grid: (usize, usize)) -> Result<Var> {
    check_inside(gt, (grid.0 * STRIDE, grid.1 * STRIDE))?;
    let targets: Vec<usize> =
        gt.points.iter().zip(&gt.visible).map(|(&p, &v)| if v { cell_index(p, grid) } else { 0 }).collect();
    let mut total: Option<Var> = None;
    for &c in corr {
        let l = tape.cross_entropy(c, &targets, &gt.visible)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Input("cls_loss: no layers".into()))
}

/// L1 between the offset and `p_gt/4 − r_last`, over visible queries.
pub fn reg_loss<F: Real>(tape: &mut Tape<F>, delta: Var, r_last: &[[f64; 2]], gt: &FrameGt) -> Result<Var> {
    let s = STRIDE as f64;
    let target: Vec<f64> = gt.points.iter().zip(r_last).flat_map(|(p, r)| [p[0] / s - r[0], p[1] / s - r[1]]).collect();
    Ok(tape.l1_loss(delta, &target, &gt.visible)?)
}

/// Confidence target: within the scaled radius and visible.
pub fn conf_targets(pred_px: &[[f64; 2]], gt: &FrameGt, width: usize) -> Vec<f64> {
    let r = conf_radius(width);
    pred_px
        .iter()
        .zip(&gt.points)
        .zip(&gt.visible)
        .map(|((p, g), &v)| if v && dist(*p, *g) < r { 1.0 } else { 0.0 })
        .collect()
}

/// Reference target: the reference cell (scaled to pixels) lies within the radius.
pub fn ref_targets(refs: &ReferenceSet, gt: &FrameGt, width: usize) -> Vec<f64> {
    let r = conf_radius(width);
    let s = STRIDE as f64;
    refs.coords
        .iter()
        .enumerate()
        .map(|(i, c)| if dist([s * c[0], s * c[1]], gt.points[i / refs.k]) < r { 1.0 } else { 0.0 })
        .collect()
}

/// `(vis, conf, conf_ref)`: visibility over all queries, confidence of the
/// final estimate, and per-layer reference confidence averaged over references.
pub fn vis_conf_losses<F: Real>(
    tape: &mut Tape<F>,
    out: &TrackOutput,
    gt: &FrameGt,
    width: usize,
) -> Result<(Var, Var, Var)> {
    let n = gt.points.len();
    let all = vec![true; n];
    let vt: Vec<f64> = gt.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let vis = tape.bce_with_logits(out.vis_logit, &vt, &all)?;
    let conf = tape.bce_with_logits(out.conf_logit, &conf_targets(&out.positions_px(tape), gt, width), &all)?;
    let mut conf_ref: Option<Var> = None;
    for layer in &out.layers {
        let t = ref_targets(&layer.refs, gt, width);
        let l = tape.bce_with_logits(layer.refs.rho_r, &t, &vec![true; t.len()])?;
        conf_ref = Some(match conf_ref {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok((vis, conf, conf_ref.ok_or_else(|| Error::Input("no layers".into()))?))
}

/// All loss terms of one frame plus their weighted total.
pub fn frame_losses<F: Real>(
    tape: &mut Tape<F>,
    out: &TrackOutput,
    gt: &FrameGt,
    grid: (usize, usize),
    lambda_cls: f64,
) -> Result<LossVars> {
    if gt.points.len() != gt.visible.len() || gt.points.len() != out.r_last.len() {
        return Err(Error::Input("ground truth does not match query count".into()));
    }
    let corr: Vec<Var> = out.layers.iter().map(|l| l.corr).collect();
    let cls = cls_loss(tape, &corr, gt, grid)?;
    let reg = reg_loss(tape, out.delta, &out.r_last, gt)?;
    let (vis, conf, conf_ref) = vis_conf_losses(tape, out, gt, grid.1 * STRIDE)?;
    let wc = tape.scale(cls, lambda_cls)?;
    let mut total = tape.add(wc, reg)?;
    for t in [vis, conf, conf_ref] {
        total = tape.add(total, t)?;
    }
    Ok(LossVars { cls, reg, vis, conf, conf_ref, total })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Point-tracking scores over a set of (frame, query) pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub aj: f64,
    pub delta_avg: f64,
    pub oa: f64,
    pub delta: [f64; 5],
    pub jaccard: [f64; 5],
}

impl PointMetrics {
    /// Mean of several reports, field by field.
    pub fn mean(all: &[PointMetrics]) -> Option<PointMetrics> {
        if all.is_empty() {
            return None;
        }
        let k = all.len() as f64;
        let mut m = PointMetrics::default();
        for r in all {
            m.aj += r.aj / k;
            m.delta_avg += r.delta_avg / k;
            m.oa += r.oa / k;
            for i in 0..5 {
                m.delta[i] += r.delta[i] / k;
                m.jaccard[i] += r.jaccard[i] / k;
            }
        }
        Some(m)
    }

    /// Flat `key value` report lines in a fixed order.
    pub fn report_lines(&self) -> Vec<(String, f64)> {
        let mut v =
            vec![("aj".to_string(), self.aj), ("delta_avg".to_string(), self.delta_avg), ("oa".to_string(), self.oa)];
        for (i, t) in THRESHOLDS.iter().enumerate() {
            v.push((format!("delta_{t}"), self.delta[i]));
        }
        for (i, t) in THRESHOLDS.iter().enumerate() {
            v.push((format!("jaccard_{t}"), self.jaccard[i]));
        }
        v
    }
}

/// Per-frame tracks: `pred[t][n]` positions in image pixels, visibility flags.
#[derive(Clone, Copy, Debug)]
pub struct Tracks<'a> {
    pub points: &'a [Vec<[f64; 2]>],
    pub visible: &'a [Vec<bool>],
}

/// AJ, δ^x_avg and OA. Coordinates are rescaled from `image` (`(h, w)`) to
/// the 256×256 frame before thresholding. A ratio with an empty
/// denominator counts as 1.
pub fn metrics(pred: Tracks, gt: Tracks, image: (usize, usize)) -> Result<PointMetrics> {
    let frames = gt.points.len();
    if pred.points.len() != frames || pred.visible.len() != frames || gt.visible.len() != frames {
        return Err(Error::Input("metrics: frame count mismatch".into()));
    }
    let (sx, sy) = (METRIC_FRAME / image.1 as f64, METRIC_FRAME / image.0 as f64);
    let mut within = [0usize; 5];
    let mut tp = [0usize; 5];
    let mut fp = [0usize; 5];
    let mut fnn = [0usize; 5];
    let (mut visible, mut agree, mut total) = (0usize, 0usize, 0usize);
    for t in 0..frames {
        let n = gt.points[t].len();
        if pred.points[t].len() != n || pred.visible[t].len() != n || gt.visible[t].len() != n {
            return Err(Error::Input(format!("metrics: query count mismatch on frame {t}")));
        }
        for q in 0..n {
            let (p, g) = (pred.points[t][q], gt.points[t][q]);
            let err = (((p[0] - g[0]) * sx).powi(2) + ((p[1] - g[1]) * sy).powi(2)).sqrt();
            let (pv, gv) = (pred.visible[t][q], gt.visible[t][q]);
            total += 1;
            agree += usize::from(pv == gv);
            visible += usize::from(gv);
            for (i, &tau) in THRESHOLDS.iter().enumerate() {
                let close = err < tau;
                if gv && close {
                    within[i] += 1;
                }
                if gv && pv && close {
                    tp[i] += 1;
                }
                if pv && (!gv || !close) {
                    fp[i] += 1;
                }
                if gv && (!pv || !close) {
                    fnn[i] += 1;
                }
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    let mut m = PointMetrics { oa: ratio(agree, total), ..Default::default() };
    for i in 0..5 {
        m.delta[i] = ratio(within[i], visible);
        m.jaccard[i] = ratio(tp[i], tp[i] + fp[i] + fnn[i]);
    }
    m.delta_avg = m.delta.iter().sum::<f64>() / 5.0;
    m.aj = m.jaccard.iter().sum::<f64>() / 5.0;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conf_threshold_flips_at_radius() {
        let gt = FrameGt { points: vec![[100.0, 100.0]; 2], visible: vec![true, true] };
        let t = conf_targets(&[[107.9, 100.0], [108.1, 100.0]], &gt, 512);
        assert_eq!(t, vec![1.0, 0.0]);
        let hidden = FrameGt { points: vec![[5.0, 5.0]], visible: vec![false] };
        assert_eq!(conf_targets(&[[5.0, 5.0]], &hidden, 512), vec![0.0]);
    }

    #[test]
    fn cell_index_floors() {
        assert_eq!(cell_index([7.9, 4.0], (12, 16)), 16 + 1);
        assert_eq!(cell_index([63.0, 47.0], (12, 16)), 11 * 16 + 15);
    }

    #[test]
    fn identity_metrics_are_perfect() {
        let pts = vec![vec![[1.0, 2.0], [30.0, 40.0]], vec![[3.0, 4.0], [5.0, 6.0]]];
        let vis = vec![vec![true, false], vec![true, true]];
        let t = Tracks { points: &pts, visible: &vis };
        let m = metrics(t, t, (48, 64)).unwrap();
        assert_eq!((m.aj, m.delta_avg, m.oa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_hidden_prediction_scores_zero() {
        let pts = vec![vec![[1.0, 2.0]]; 3];
        let gv = vec![vec![true]; 3];
        let pv = vec![vec![false]; 3];
        let m =
            metrics(Tracks { points: &pts, visible: &pv }, Tracks { points: &pts, visible: &gv }, (256, 256)).unwrap();
        assert_eq!((m.oa, m.aj), (0.0, 0.0));
    }

    #[test]
    fn length_mismatch_errors() {
        let a = vec![vec![[0.0, 0.0]]; 2];
        let b = vec![vec![[0.0, 0.0]]; 3];
        let va = vec![vec![true]; 2];
        let vb = vec![vec![true]; 3];
        assert!(metrics(Tracks { points: &a, visible: &va }, Tracks { points: &b, visible: &vb }, (16, 16)).is_err());
    }
}
