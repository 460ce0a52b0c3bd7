//! Deformable point attention and memory cross-attention.

use crate::nn::{Builder, Linear, Mlp, Norm};
use crate::params::ParamVars;
use crate::tensor::{Real, Result, Tape, Var};

/// Deformable attention over `points` bilinear samples per query.
///
/// Sample locations are `base + offsets(q)`; the offset predictor starts at
/// zero so every sample initially sits on its base location.
#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub query: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub out: Linear,
    pub points: usize,
}

/// Intermediate values of one deformable-attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DeformOut {
    /// `[N, d]` after the output projection.
    pub out: Var,
    /// `[N, P]` softmax weights.
    pub weights: Var,
    /// `[N, P, d]` projected samples.
    pub values: Var,
    /// `[N, d]` weighted sum of `values` before the output projection.
    pub aggregate: Var,
    /// `[N·P, 2]` sample locations in grid units.
    pub locations: Var,
}

impl DeformAttn {
    pub fn new<F: Real>(bld: &mut Builder<F>, name: &str, d: usize, points: usize) -> Self {
        Self {
            query: Linear::new(bld, &format!("{name}.query"), d, d),
            offsets: Linear::zeros(bld, &format!("{name}.offsets"), d, points * 2),
            weights: Linear::new(bld, &format!("{name}.weights"), d, points),
            value: Linear::new(bld, &format!("{name}.value"), d, d),
            out: Linear::new(bld, &format!("{name}.out"), d, d),
            points,
        }
    }

    /// `f` is `[N,d]`, `o` is `[d,H,W]`, `base` is `[N, 2P]` (`(x, y)` pairs
    /// per point) and `bias`, when given, is added to the `[N,P]` weight logits.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        pv: &ParamVars,
        f: Var,
        o: Var,
        base: Var,
        bias: Option<Var>,
    ) -> Result<DeformOut> {
        let n = tape.shape(f)[0];
        let d = tape.shape(o)[0];
        let p = self.points;
        let q = self.query.forward(tape, pv, f)?;
        let off = self.offsets.forward(tape, pv, q)?;
        let loc = tape.add(base, off)?;
        let locations = tape.reshape(loc, &[n * p, 2])?;
        let samples = tape.bilinear_sample(o, locations)?;
        let values = self.value.forward(tape, pv, samples)?;
        let values = tape.reshape(values, &[n, p, d])?;
        let mut logits = self.weights.forward(tape, pv, q)?;
        if let Some(b) = bias {
            logits = tape.add(logits, b)?;
        }
        let weights = tape.softmax(logits, 1)?;
        let w3 = tape.reshape(weights, &[n, 1, p])?;
        let agg = tape.bmm(w3, values)?;
        let aggregate = tape.reshape(agg, &[n, d])?;
        let out = self.out.forward(tape, pv, aggregate)?;
        Ok(DeformOut { out, weights, values, aggregate, locations })
    }
}

/// Single-head cross-attention of each query over its own memory slots,
/// followed by residual + layer norm and a residual MLP.
#[derive(Clone, Debug)]
pub struct CrossAttn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm: Norm,
    pub mlp: Mlp,
}

impl CrossAttn {
    pub fn new<F: Real>(bld: &mut Builder<F>, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            q: Linear::new(bld, &format!("{name}.q"), d, d),
            k: Linear::new(bld, &format!("{name}.k"), d, d),
            v: Linear::new(bld, &format!("{name}.v"), d, d),
            out: Linear::new(bld, &format!("{name}.out"), d, d),
            norm: Norm::new(bld, &format!("{name}.norm"), d),
            mlp: Mlp::residual(bld, &format!("{name}.mlp"), d, hidden),
        }
    }

    /// `query` is `[N,d]`; each entry of `memory` is an `[N,d]` slot. With no
    /// slots the attention block is skipped and only the MLP residual runs.
    /// Returns the output and, when memory is present, the `[N,S]` weights.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        pv: &ParamVars,
        query: Var,
        memory: &[Var],
    ) -> Result<(Var, Option<Var>)> {
        let (n, d) = (tape.shape(query)[0], tape.shape(query)[1]);
        let (h, weights) = if memory.is_empty() {
            (query, None)
        } else {
            let s = memory.len();
            let slots = memory.iter().map(|&m| tape.reshape(m, &[n, 1, d])).collect::<Result<Vec<_>>>()?;
            let mem = if s == 1 { slots[0] } else { tape.concat(&slots, 1)? };
            let q = self.q.forward(tape, pv, query)?;
            let q = tape.reshape(q, &[n, 1, d])?;
            let k = self.k.forward(tape, pv, mem)?;
            let kt = tape.transpose(k)?;
            let scores = tape.bmm(q, kt)?;
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
            let w = tape.softmax(scores, 2)?;
            let v = self.v.forward(tape, pv, mem)?;
            let a = tape.bmm(w, v)?;
            let a = tape.reshape(a, &[n, d])?;
            let a = self.out.forward(tape, pv, a)?;
            let r = tape.add(query, a)?;
            let w2 = tape.reshape(w, &[n, s])?;
            (self.norm.forward(tape, pv, r)?, Some(w2))
        };
        let m = self.mlp.forward(tape, pv, h)?;
        Ok((tape.add(h, m)?, weights))
    }
}
