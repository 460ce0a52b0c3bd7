use super::attention::DeformOut;
use super::state::{MemSlot, Memory, QueryState};
use super::{CorrelationKind, LayerNet, LbmNet, Model, PredictBlock, COSINE_TEMPERATURE};
use crate::encoder::{FeatureMap, STRIDE};
use crate::params::ParamVars;
use crate::tensor::{sigmoid, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Top-`K` reference points of one layer.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    pub k: usize,
    /// Flattened (row-major) cell indices per query, best first.
    pub indices: Vec<Vec<usize>>,
    /// `(x, y)` cell coordinates, `N·K` entries in query-major order.
    pub coords: Vec<[f64; 2]>,
    /// `[N,K]` reference-confidence logits.
    pub rho_r: Var,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// `[N, H·W]` correlation map the references were selected from.
    pub corr: Var,
    pub refs: ReferenceSet,
    pub update: DeformOut,
}

/// Everything one tracking step produces for the `N` queries.
#[derive(Clone, Debug)]
pub struct TrackOutput {
    /// `[N,2]` final positions in feature-grid units, clamped to the grid.
    pub p: Var,
    /// `[N,2]` predicted offset from `r_last`.
    pub delta: Var,
    pub r_last: Vec<[f64; 2]>,
    /// `[N]` visibility logits.
    pub vis_logit: Var,
    /// `[N]` confidence logits.
    pub conf_logit: Var,
    pub layers: Vec<LayerTrace>,
    pub frame: usize,
}

impl TrackOutput {
    /// Positions in image pixels.
    pub fn positions_px<F: Real>(&self, tape: &Tape<F>) -> Vec<[f64; 2]> {
        let s = STRIDE as f64;
        tape.value(self.p).data().chunks(2).map(|c| [s * c[0].as_f64(), s * c[1].as_f64()]).collect()
    }

    pub fn visibility<F: Real>(&self, tape: &Tape<F>) -> Vec<f64> {
        tape.value(self.vis_logit).data().iter().map(|&z| sigmoid(z).as_f64()).collect()
    }

    pub fn confidence<F: Real>(&self, tape: &Tape<F>) -> Vec<f64> {
        tape.value(self.conf_logit).data().iter().map(|&z| sigmoid(z).as_f64()).collect()
    }
}

/// Instrumentation for a single [`step`].
#[derive(Clone, Debug, Default)]
pub struct Probe {
    /// When set, per layer and per query, used instead of top-k selection.
    pub forced_refs: Option<Vec<Vec<Vec<usize>>>>,
    /// Collect attention weight vectors into `attention`.
    pub record_attention: bool,
    pub layer_k: Vec<usize>,
    pub collision_points: Vec<usize>,
    /// `(layer, query var)` for every memory-conditioned prediction.
    pub predict_queries: Vec<(usize, Var)>,
    /// `(module name, [N, support] weights)`; memory weights are laid out
    /// over all `N_s` physical slots with zeros on invalid ones.
    pub attention: Vec<(String, Tensor<f64>)>,
}

impl Probe {
    fn record<F: Real>(&mut self, name: impl Into<String>, tape: &Tape<F>, w: Var) {
        if self.record_attention {
            self.attention.push((name.into(), tape.value(w).cast()));
        }
    }
}

fn const_tensor<F: Real>(tape: &mut Tape<F>, shape: &[usize], v: impl IntoIterator<Item = f64>) -> Result<Var> {
    let data: Vec<F> = v.into_iter().map(F::of).collect();
    Ok(tape.constant(Tensor::new(shape.to_vec(), data)?)?)
}

/// Samples the frame features at the query points (`q` in image pixels).
pub fn init_queries<F: Real>(
    tape: &mut Tape<F>,
    fm: &FeatureMap,
    q: &[[f64; 2]],
    mem_len: usize,
) -> Result<QueryState> {
    if q.is_empty() {
        return Err(Error::Input("init_queries: no query points".into()));
    }
    let (h, w) = (fm.height * STRIDE, fm.width * STRIDE);
    if let Some(bad) =
        q.iter().find(|p| !(p[0] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] >= 0.0 && p[1] <= (h - 1) as f64))
    {
        return Err(Error::Input(format!("query {bad:?} outside the {w}x{h} image")));
    }
    let s = STRIDE as f64;
    let (gx, gy) = ((fm.width - 1) as f64, (fm.height - 1) as f64);
    let coords: Vec<f64> = q.iter().flat_map(|p| [(p[0] / s).min(gx), (p[1] / s).min(gy)]).collect();
    let p = const_tensor(tape, &[q.len(), 2], coords)?;
    let f_init = tape.bilinear_sample(fm.o, p)?;
    Ok(QueryState { n: q.len(), f_init, f: f_init, p, memory: Memory::new(mem_len), t: 0, grid: (fm.height, fm.width) })
}

/// `[N, 2P]` base locations repeating each row of `points` `reps` times.
fn repeat_points<F: Real>(tape: &mut Tape<F>, points: &[[f64; 2]], reps: usize, per_query: usize) -> Result<Var> {
    let n = points.len() / per_query;
    let data = points.iter().flat_map(|p| std::iter::repeat_n(*p, reps)).flatten();
    const_tensor(tape, &[n, 2 * per_query * reps], data)
}

/// Collision operator: deformable attention around positions `p` (`[N,2]`).
pub fn collision<F: Real>(
    net: &LbmNet,
    tape: &mut Tape<F>,
    pv: &ParamVars,
    f: Var,
    fm: &FeatureMap,
    p: Var,
    probe: &mut Probe,
) -> Result<DeformOut> {
    let pts = net.collision.points;
    let reps = vec![p; pts];
    let base = tape.concat(&reps, 1)?;
    let out = net.collision.forward(tape, pv, f, fm.o, base, None)?;
    probe.collision_points.push(pts);
    probe.record("collision", tape, out.weights);
    Ok(out)
}

/// Memory-conditioned prediction of a layer. With `PredictBlock::Refine`
/// the memory is ignored and the running distribution is refined instead.
pub fn predict<F: Real>(
    layer: &LayerNet,
    layer_idx: usize,
    tape: &mut Tape<F>,
    pv: &ParamVars,
    query: Var,
    memory: &Memory,
    probe: &mut Probe,
) -> Result<Var> {
    match &layer.predict {
        PredictBlock::Refine(mlp) => {
            let m = mlp.forward(tape, pv, query)?;
            Ok(tape.add(query, m)?)
        }
        PredictBlock::Memory { streaming, collision } => {
            probe.predict_queries.push((layer_idx, query));
            let entries = memory.entries();
            let fs: Vec<Var> = entries.iter().map(|s| s.streaming).collect();
            let fc: Vec<Var> = entries.iter().map(|s| s.collision).collect();
            let (h, ws) = streaming.forward(tape, pv, query, &fs)?;
            let (f, wc) = collision.forward(tape, pv, h, &fc)?;
            if probe.record_attention {
                for (name, w) in [("phi_s", ws), ("phi_c", wc)] {
                    let full = spread_memory_weights(tape, w, memory);
                    probe.attention.push((format!("layer{layer_idx}.{name}"), full));
                }
            }
            Ok(f)
        }
    }
}

fn spread_memory_weights<F: Real>(tape: &Tape<F>, w: Option<Var>, memory: &Memory) -> Tensor<f64> {
    let cap = memory.capacity();
    let order = memory.chronological();
    let Some(w) = w else { return Tensor::zeros(vec![0, cap]) };
    let wv = tape.value(w);
    let n = wv.shape()[0];
    let mut out = Tensor::zeros(vec![n, cap]);
    for q in 0..n {
        for (j, &slot) in order.iter().enumerate() {
            out.data_mut()[q * cap + slot] = wv.row(q)[j].as_f64();
        }
    }
    out
}

/// `[N, H·W]` correlation of each distribution with every feature cell.
pub fn correlation<F: Real>(tape: &mut Tape<F>, f: Var, o: Var, kind: CorrelationKind) -> Result<Var> {
    let so = tape.shape(o).to_vec();
    let (d, hw) = (so[0], so[1] * so[2]);
    let flat = tape.reshape(o, &[d, hw])?;
    Ok(match kind {
        CorrelationKind::Dot => {
            let c = tape.matmul(f, flat)?;
            tape.scale(c, 1.0 / (d as f64).sqrt())?
        }
        CorrelationKind::Cosine => {
            let fnorm = tape.l2_normalize(f)?;
            let cells = tape.transpose(flat)?;
            let cells = tape.l2_normalize(cells)?;
            let cells = tape.transpose(cells)?;
            let c = tape.matmul(fnorm, cells)?;
            tape.scale(c, COSINE_TEMPERATURE)?
        }
    })
}

/// Indices of the `k` largest entries of each row of `c` (`[N, H·W]`),
/// best first; ties go to the lower flattened index.
pub fn select_references<F: Real>(c: &Tensor<F>, k: usize) -> Result<Vec<Vec<usize>>> {
    let (n, hw) = (c.shape()[0], c.shape()[1]);
    if k == 0 || k > hw {
        return Err(Error::Input(format!("top-k with k={k} over {hw} cells")));
    }
    Ok((0..n)
        .map(|q| {
            let row = c.row(q);
            let mut idx: Vec<usize> = (0..hw).collect();
            let cmp = |a: &usize, b: &usize| {
                row[*b].partial_cmp(&row[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b))
            };
            if k < hw {
                idx.select_nth_unstable_by(k - 1, cmp);
                idx.truncate(k);
            }
            idx.sort_by(cmp);
            idx
        })
        .collect())
}

fn reference_set<F: Real>(
    layer: &LayerNet,
    tape: &mut Tape<F>,
    pv: &ParamVars,
    f: Var,
    fm: &FeatureMap,
    indices: Vec<Vec<usize>>,
) -> Result<ReferenceSet> {
    let n = indices.len();
    let k = layer.k;
    let coords: Vec<[f64; 2]> =
        indices.iter().flatten().map(|&i| [(i % fm.width) as f64, (i / fm.width) as f64]).collect();
    let at = const_tensor(tape, &[n * k, 2], coords.iter().flatten().copied())?;
    let sampled = tape.bilinear_sample(fm.o, at)?;
    let rows: Vec<usize> = (0..n).flat_map(|q| std::iter::repeat_n(q, k)).collect();
    let frep = tape.gather_rows(f, &rows)?;
    let x = tape.concat(&[frep, sampled], 1)?;
    let logit = layer.ref_head.forward(tape, pv, x)?;
    let rho_r = tape.reshape(logit, &[n, k])?;
    Ok(ReferenceSet { k, indices, coords, rho_r })
}

/// Update step: deformable attention with `update_offsets` samples around
/// each reference, reference confidences as weight priors, then residual +
/// norm and a residual MLP.
pub fn update<F: Real>(
    layer: &LayerNet,
    tape: &mut Tape<F>,
    pv: &ParamVars,
    f: Var,
    fm: &FeatureMap,
    refs: &ReferenceSet,
) -> Result<(Var, DeformOut)> {
    let n = tape.shape(f)[0];
    let s = layer.update.points / refs.k;
    let base = repeat_points(tape, &refs.coords, s, refs.k)?;
    let prior_rows: Vec<usize> = (0..n * refs.k).flat_map(|r| std::iter::repeat_n(r, s)).collect();
    let rho = tape.reshape(refs.rho_r, &[n * refs.k, 1])?;
    let prior = tape.gather_rows(rho, &prior_rows)?;
    let prior = tape.reshape(prior, &[n, refs.k * s])?;
    let att = layer.update.forward(tape, pv, f, fm.o, base, Some(prior))?;
    let r = tape.add(f, att.out)?;
    let h = layer.update_norm.forward(tape, pv, r)?;
    let m = layer.update_mlp.forward(tape, pv, h)?;
    Ok((tape.add(h, m)?, att))
}

/// Runs one frame through all predict-update layers and both heads, then
/// pushes the frame's distribution and collision term into memory.
pub fn step<F: Real>(
    net: &LbmNet,
    tape: &mut Tape<F>,
    pv: &ParamVars,
    state: &mut QueryState,
    fm: &FeatureMap,
    probe: &mut Probe,
) -> Result<TrackOutput> {
    if state.grid != (fm.height, fm.width) {
        return Err(Error::State(format!("state grid {:?} vs frame grid {:?}", state.grid, (fm.height, fm.width))));
    }
    let n = state.n;
    let mut f = state.f_init;
    let mut traces = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let query = if l == 0 { state.f_init } else { f };
        f = predict(layer, l, tape, pv, query, &state.memory, probe)?;
        let corr = correlation(tape, f, fm.o, net.cfg.correlation)?;
        let indices = match probe.forced_refs.as_ref().and_then(|r| r.get(l)) {
            Some(forced) => forced.clone(),
            None => select_references(tape.value(corr), layer.k)?,
        };
        if indices.len() != n || indices.iter().any(|r| r.len() != layer.k) {
            return Err(Error::State(format!("layer {l}: reference set does not match N={n}, K={}", layer.k)));
        }
        probe.layer_k.push(layer.k);
        let refs = reference_set(layer, tape, pv, f, fm, indices)?;
        let (fu, att) = update(layer, tape, pv, f, fm, &refs)?;
        probe.record(format!("layer{l}.psi"), tape, att.weights);
        f = fu;
        traces.push(LayerTrace { corr, refs, update: att });
    }

    let r_last: Vec<[f64; 2]> = traces.last().expect("at least one layer").refs.coords.clone();
    let hp = net.track_head.attn.points;
    let base = repeat_points(tape, &r_last, hp, 1)?;
    let ta = net.track_head.attn.forward(tape, pv, f, fm.o, base, None)?;
    probe.record("track_head", tape, ta.weights);
    let x = tape.add(f, ta.out)?;
    let delta = net.track_head.mlp.forward(tape, pv, x)?;

    let hp = net.vis_head.attn.points;
    let base = repeat_points(tape, &r_last, hp, 1)?;
    let va = net.vis_head.attn.forward(tape, pv, f, fm.o, base, None)?;
    probe.record("vis_head", tape, va.weights);
    let x = tape.add(f, va.out)?;
    let logits = net.vis_head.mlp.forward(tape, pv, x)?;
    let conf = tape.slice_last(logits, 0, 1)?;
    let conf_logit = tape.reshape(conf, &[n])?;
    let vis = tape.slice_last(logits, 1, 1)?;
    let vis_logit = tape.reshape(vis, &[n])?;

    let rl = const_tensor(tape, &[n, 2], r_last.iter().flatten().copied())?;
    let raw = tape.add(rl, delta)?;
    let hi = [(fm.width - 1) as f64, (fm.height - 1) as f64];
    let p = tape.clamp_last(raw, &[0.0, 0.0], &hi)?;

    let col = collision(net, tape, pv, f, fm, p, probe)?;
    state.memory.push(MemSlot { streaming: f, collision: col.out, frame: fm.frame });
    state.f = f;
    state.p = p;
    state.t += 1;
    Ok(TrackOutput { p, delta, r_last, vis_logit, conf_logit, layers: traces, frame: fm.frame })
}

/// Per-frame point estimates in image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub positions: Vec<[f64; 2]>,
    pub visibility: Vec<f64>,
    pub confidence: Vec<f64>,
}

/// Frame-by-frame inference driver that keeps only the memory window alive.
pub struct OnlineTracker<'m> {
    model: &'m Model<f32>,
    live: Option<(Tape<f32>, QueryState)>,
    frame: usize,
}

impl<'m> OnlineTracker<'m> {
    pub fn new(model: &'m Model<f32>) -> Self {
        Self { model, live: None, frame: 0 }
    }

    fn encode(&self, tape: &mut Tape<f32>, image: &Tensor<f32>) -> Result<(ParamVars, FeatureMap)> {
        let pv = self.model.params.bind(tape, false)?;
        let img = tape.constant(image.clone())?;
        let fm = self.model.net.encoder.encode(tape, &pv, img, self.frame)?;
        Ok((pv, fm))
    }

    /// Initializes queries (image pixels) on the first frame; the first
    /// frame's estimate is the queries themselves.
    pub fn start(&mut self, image: &Tensor<f32>, queries: &[[f64; 2]]) -> Result<FramePrediction> {
        self.frame = 0;
        let mut tape = Tape::new();
        let (_, fm) = self.encode(&mut tape, image)?;
        let state = init_queries(&mut tape, &fm, queries, self.model.net.cfg.mem_len)?;
        self.live = Some((tape, state));
        self.frame = 1;
        Ok(FramePrediction {
            positions: queries.to_vec(),
            visibility: vec![1.0; queries.len()],
            confidence: vec![1.0; queries.len()],
        })
    }

    pub fn track(&mut self, image: &Tensor<f32>) -> Result<FramePrediction> {
        let (old_tape, old_state) = self.live.take().ok_or_else(|| Error::State("track called before start".into()))?;
        let mut tape = Tape::new();
        let mut state = old_state.detach(&old_tape, &mut tape)?;
        drop(old_tape);
        let (pv, fm) = self.encode(&mut tape, image)?;
        let out = step(&self.model.net, &mut tape, &pv, &mut state, &fm, &mut Probe::default())?;
        let pred = FramePrediction {
            positions: out.positions_px(&tape),
            visibility: out.visibility(&tape),
            confidence: out.confidence(&tape),
        };
        self.live = Some((tape, state));
        self.frame += 1;
        Ok(pred)
    }

    pub fn state(&self) -> Option<&QueryState> {
        self.live.as_ref().map(|(_, s)| s)
    }
}
