//! End-to-end jobs shared by the command-line tool and the tests: clip
//! generation, online point tracking to a track file, track evaluation and
//! object association over a detection stream.

use crate::assoc::{track_objects, AssocConfig, AssocRun, BBox, Detection, LbmPredictor};
use crate::io::{ClipHeader, DetectionRow, GtFile, TrackFile, TrackRecord, RECORD_VERSION};
use crate::model::{Model, OnlineTracker};
use crate::supervision::{metrics, PointMetrics, Tracks, VIS_THRESHOLD};
use crate::synth::{generate_clip, sample_queries, Clip, Image, SceneSpec};
use crate::{Error, Result};

/// Minimum visible surface points of a sprite for it to get a detection.
pub const MIN_DETECTION_POINTS: usize = 3;
/// Score assigned to synthetic detections.
pub const DETECTION_SCORE: f64 = 0.9;

/// A rendered clip with `queries` ground-truth tracks starting at frame 0.
pub fn gen_clip(spec: &SceneSpec, queries: usize) -> Result<(Clip, GtFile)> {
    let clip = generate_clip(spec)?;
    let q = sample_queries(&clip, queries, spec.seed)?;
    let header = ClipHeader {
        version: RECORD_VERSION,
        height: clip.height(),
        width: clip.width(),
        frames: clip.frames.len(),
        query_frame: 0,
        queries: q.points.clone(),
    };
    let gt = GtFile { header, frames: clip.gt(&q.indices) };
    Ok((clip, gt))
}

/// One detection per sprite and frame: the padded bounding box of its
/// visible surface points, labelled with the sprite index.
pub fn synthetic_detections(clip: &Clip) -> Vec<DetectionRow> {
    let shapes = clip.tracks.iter().map(|t| t.shape + 1).max().unwrap_or(0);
    let (w, h) = ((clip.width() - 1) as f64, (clip.height() - 1) as f64);
    let mut rows = Vec::new();
    for t in 0..clip.frames.len() {
        for s in 0..shapes {
            let pts: Vec<[f64; 2]> =
                clip.tracks.iter().filter(|k| k.shape == s && k.visible[t]).map(|k| k.points[t]).collect();
            if pts.len() < MIN_DETECTION_POINTS {
                continue;
            }
            let lo = |i: usize| pts.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min);
            let hi = |i: usize| pts.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
            let (x1, y1) = ((lo(0) - 1.0).max(0.0), (lo(1) - 1.0).max(0.0));
            let (x2, y2) = ((hi(0) + 1.0).min(w), (hi(1) + 1.0).min(h));
            if x2 > x1 && y2 > y1 {
                rows.push(DetectionRow { frame: t, x1, y1, x2, y2, label: s as u32, score: DETECTION_SCORE });
            }
        }
    }
    rows
}

/// Tracks the header's queries from its query frame to the end of `frames`.
/// The query frame's record holds the queries themselves.
pub fn track_points(model: &Model<f32>, frames: &[Image], header: &ClipHeader) -> Result<TrackFile> {
    let q = header.query_frame;
    if q >= frames.len() {
        return Err(Error::Input(format!("query frame {q} beyond the {} frames", frames.len())));
    }
    if frames.iter().any(|f| (f.height, f.width) != (header.height, header.width)) {
        return Err(Error::Input(format!("frames do not match the header size {}x{}", header.width, header.height)));
    }
    let mut tr = OnlineTracker::new(model);
    let mut records = Vec::with_capacity(frames.len() - q);
    for (t, img) in frames.iter().enumerate().skip(q) {
        let x = img.to_tensor();
        let p = if t == q { tr.start(&x, &header.queries)? } else { tr.track(&x)? };
        let points = (0..p.positions.len())
            .map(|i| [p.positions[i][0], p.positions[i][1], p.visibility[i], p.confidence[i]])
            .collect();
        records.push(TrackRecord { frame: t, points });
    }
    Ok(TrackFile { header: ClipHeader { frames: frames.len(), ..header.clone() }, records })
}

/// Scores a track file against ground truth on every tracked frame after
/// the query frame.
pub fn eval_points(track: &TrackFile, gt: &GtFile) -> Result<PointMetrics> {
    let (th, gh) = (&track.header, &gt.header);
    if (th.height, th.width, th.query_frame) != (gh.height, gh.width, gh.query_frame)
        || th.queries.len() != gh.queries.len()
    {
        return Err(Error::Input("track file and ground truth describe different clips".into()));
    }
    let (mut pp, mut pv, mut gp, mut gv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in track.records.iter().filter(|r| r.frame != gh.query_frame) {
        let g = gt.frames.get(r.frame).ok_or_else(|| Error::Input(format!("no ground truth for frame {}", r.frame)))?;
        pp.push(r.points.iter().map(|p| [p[0], p[1]]).collect::<Vec<_>>());
        pv.push(r.points.iter().map(|p| p[2] > VIS_THRESHOLD).collect::<Vec<_>>());
        gp.push(g.points.clone());
        gv.push(g.visible.clone());
    }
    if pp.is_empty() {
        return Err(Error::Input("track file has no frames after the query frame".into()));
    }
    metrics(Tracks { points: &pp, visible: &pv }, Tracks { points: &gp, visible: &gv }, (gh.height, gh.width))
}

/// Ground truth as a track file: visibility 0 or 1, confidence 1.
pub fn gt_as_tracks(gt: &GtFile) -> TrackFile {
    let records = gt
        .frames
        .iter()
        .enumerate()
        .map(|(t, f)| TrackRecord {
            frame: t,
            points: f.points.iter().zip(&f.visible).map(|(p, &v)| [p[0], p[1], f64::from(u8::from(v)), 1.0]).collect(),
        })
        .collect();
    TrackFile { header: gt.header.clone(), records }
}

/// Groups detection rows by frame, validating each box and score.
pub fn detections_by_frame(rows: &[DetectionRow], frames: usize) -> Result<Vec<Vec<Detection>>> {
    let mut out = vec![Vec::new(); frames];
    for r in rows {
        let d = Detection { bbox: BBox::new(r.x1, r.y1, r.x2, r.y2), label: r.label, score: r.score };
        d.validate()?;
        out.get_mut(r.frame)
            .ok_or_else(|| Error::Input(format!("detection on frame {} of a {frames}-frame clip", r.frame)))?
            .push(d);
    }
    Ok(out)
}

/// Associates detections over `frames` with the point tracker as predictor.
pub fn associate(model: &Model<f32>, frames: &[Image], rows: &[DetectionRow], cfg: &AssocConfig) -> Result<AssocRun> {
    let dets = detections_by_frame(rows, frames.len())?;
    let tensors: Vec<_> = frames.iter().map(Image::to_tensor).collect();
    let mut pred = LbmPredictor::new(model);
    track_objects(&tensors, &dets, &mut pred, cfg)
}
