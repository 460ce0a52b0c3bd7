use super::kernels::{self, ConvGeom};
use super::{gelu_grad_f64, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<F> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: F },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Relu { a: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    LayerNorm { a: Var, dim: usize, eps: f64 },
    L2Normalize { a: Var, dim: usize, eps: f64 },
    Concat { inputs: Vec<Var>, outer: usize, sizes: Vec<usize>, inner: usize },
    Reshape { a: Var },
    Transpose { a: Var, batch: usize, rows: usize, cols: usize },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    Bilinear { fm: Var, coords: Var, c: usize, h: usize, w: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, out_ch: usize },
    GatherRows { a: Var, idx: Vec<usize>, row: usize },
    SliceLast { a: Var, start: usize, len: usize, full: usize },
    ClampLast { a: Var, lo: Vec<F>, hi: Vec<F> },
    Sum { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, classes: usize, count: usize },
    Bce { logits: Var, targets: Vec<F>, mask: Vec<bool>, count: usize },
    L1 { pred: Var, target: Vec<F>, mask: Vec<bool>, cols: usize, count: usize },
}

#[derive(Clone, Debug)]
pub(crate) struct Node<F> {
    pub value: Tensor<F>,
    pub op: Op<F>,
    pub requires_grad: bool,
}

/// Append-only record of a computation; backward replays it in reverse.
///
/// Nodes are stored in creation order, which is a valid topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape<F> {
    pub(crate) nodes: Vec<Node<F>>,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// require grad or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push_unchecked(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push_unchecked(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, rg))
    }

    /// Allows [`Tape::backward`] to run again (gradients are recomputed from scratch).
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                backprop_node(&self.nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor { shape: n.value.shape().to_vec(), data: g }))
            .collect();
        Ok(Gradients { grads })
    }
}

fn slot<'a, F: Real>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> Option<&'a mut [F]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]).as_mut_slice())
}

/// Adds `g` (shape of the output) into `dst`, reducing over leading
/// broadcast dimensions when `dst` is shorter.
fn acc_broadcast<F: Real>(dst: &mut [F], g: &[F], scale: impl Fn(usize) -> F) {
    let m = dst.len();
    for (i, &gv) in g.iter().enumerate() {
        let j = i % m;
        dst[j] = dst[j] + gv * scale(i);
    }
}

fn backprop_node<F: Real>(nodes: &[Node<F>], i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let out = &nodes[i].value;
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if let Some(d) = slot(grads, nodes, *a) {
                acc_broadcast(d, g, |_| F::one());
            }
            if let Some(d) = slot(grads, nodes, *b) {
                acc_broadcast(d, g, |_| F::one());
            }
        }
        Op::Sub { a, b } => {
            if let Some(d) = slot(grads, nodes, *a) {
                acc_broadcast(d, g, |_| F::one());
            }
            if let Some(d) = slot(grads, nodes, *b) {
                acc_broadcast(d, g, |_| -F::one());
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (na, nb) = (av.len(), bv.len());
            if let Some(d) = slot(grads, nodes, *a) {
                acc_broadcast(d, g, |k| bv[k % nb]);
            }
            if let Some(d) = slot(grads, nodes, *b) {
                acc_broadcast(d, g, |k| av[k % na]);
            }
        }
        Op::Scale { a, s } => {
            if let Some(d) = slot(grads, nodes, *a) {
                acc_broadcast(d, g, |_| *s);
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(grads, nodes, *a) {
                kernels::matmul_a_bt_acc(g, bv, d, *m, *k, *n);
            }
            if let Some(d) = slot(grads, nodes, *b) {
                kernels::matmul_at_b_acc(av, g, d, *m, *k, *n);
            }
        }
        Op::Bmm { a, b, batch, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            let (sa, sb, sg) = (m * k, k * n, m * n);
            if let Some(d) = slot(grads, nodes, *a) {
                for t in 0..*batch {
                    let (gs, bs) = (&g[t * sg..(t + 1) * sg], &bv[t * sb..(t + 1) * sb]);
                    kernels::matmul_a_bt_acc(gs, bs, &mut d[t * sa..(t + 1) * sa], *m, *k, *n);
                }
            }
            if let Some(d) = slot(grads, nodes, *b) {
                for t in 0..*batch {
                    let (asl, gs) = (&av[t * sa..(t + 1) * sa], &g[t * sg..(t + 1) * sg]);
                    kernels::matmul_at_b_acc(asl, gs, &mut d[t * sb..(t + 1) * sb], *m, *k, *n);
                }
            }
        }
        Op::Relu { a } => {
            let av = val(*a);
            if let Some(d) = slot(grads, nodes, *a) {
                for ((dv, &gv), &x) in d.iter_mut().zip(g).zip(av) {
                    if x > F::zero() {
                        *dv = *dv + gv;
                    }
                }
            }
        }
        Op::Gelu { a } => {
            let av = val(*a);
            if let Some(d) = slot(grads, nodes, *a) {
                for ((dv, &gv), &x) in d.iter_mut().zip(g).zip(av) {
                    *dv = *dv + gv * F::of(gelu_grad_f64(x.as_f64()));
                }
            }
        }
        Op::Sigmoid { a } => {
            let y = out.data();
            if let Some(d) = slot(grads, nodes, *a) {
                for ((dv, &gv), &s) in d.iter_mut().zip(g).zip(y) {
                    *dv = *dv + gv * s * (F::one() - s);
                }
            }
        }
        Op::LayerNorm { a, dim, eps } => {
            let av = val(*a);
            if let Some(d) = slot(grads, nodes, *a) {
                let nf = F::of(*dim as f64);
                for r in 0..av.len() / dim {
                    let x = &av[r * dim..(r + 1) * dim];
                    let gy = &g[r * dim..(r + 1) * dim];
                    let y = &out.data()[r * dim..(r + 1) * dim];
                    let mean = x.iter().copied().sum::<F>() / nf;
                    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
                    let rstd = F::one() / (var + F::of(*eps)).sqrt();
                    let gsum = gy.iter().copied().sum::<F>();
                    let gysum = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<F>();
                    for j in 0..*dim {
                        let dx = rstd * (gy[j] - gsum / nf - y[j] * gysum / nf);
                        d[r * dim + j] = d[r * dim + j] + dx;
                    }
                }
            }
        }
        Op::L2Normalize { a, dim, eps } => {
            let av = val(*a);
            if let Some(d) = slot(grads, nodes, *a) {
                for r in 0..av.len() / dim {
                    let x = &av[r * dim..(r + 1) * dim];
                    let gy = &g[r * dim..(r + 1) * dim];
                    let y = &out.data()[r * dim..(r + 1) * dim];
                    let norm = (x.iter().map(|&v| v * v).sum::<F>() + F::of(*eps)).sqrt();
                    let gy_y = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<F>();
                    for j in 0..*dim {
                        d[r * dim + j] = d[r * dim + j] + (gy[j] - y[j] * gy_y) / norm;
                    }
                }
            }
        }
        Op::Concat { inputs, outer, sizes, inner } => {
            let total: usize = sizes.iter().sum();
            let mut off = 0;
            for (v, &sz) in inputs.iter().zip(sizes) {
                if let Some(d) = slot(grads, nodes, *v) {
                    for o in 0..*outer {
                        let src = &g[(o * total + off) * inner..(o * total + off + sz) * inner];
                        let dst = &mut d[o * sz * inner..(o + 1) * sz * inner];
                        for (dv, &gv) in dst.iter_mut().zip(src) {
                            *dv = *dv + gv;
                        }
                    }
                }
                off += sz;
            }
        }
        Op::Reshape { a } => {
            if let Some(d) = slot(grads, nodes, *a) {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv = *dv + gv;
                }
            }
        }
        Op::Transpose { a, batch, rows, cols } => {
            if let Some(d) = slot(grads, nodes, *a) {
                let s = rows * cols;
                for t in 0..*batch {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            let di = t * s + r * cols + c;
                            d[di] = d[di] + g[t * s + c * rows + r];
                        }
                    }
                }
            }
        }
        Op::Softmax { a, outer, len, inner } => {
            let y = out.data();
            if let Some(d) = slot(grads, nodes, *a) {
                for o in 0..*outer {
                    for j in 0..*inner {
                        let idx = |k: usize| (o * len + k) * inner + j;
                        let dot = (0..*len).map(|k| g[idx(k)] * y[idx(k)]).sum::<F>();
                        for k in 0..*len {
                            d[idx(k)] = d[idx(k)] + y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::Bilinear { fm, coords, c, h, w } => {
            let (fv, cv) = (val(*fm), val(*coords));
            let rg_f = nodes[fm.0].requires_grad;
            let rg_c = nodes[coords.0].requires_grad;
            // Both slots may be needed at once; fm and coords are distinct nodes.
            let mut gf = if rg_f { grads[fm.0].take().or_else(|| Some(vec![F::zero(); fv.len()])) } else { None };
            let mut gc = if rg_c && coords != fm {
                grads[coords.0].take().or_else(|| Some(vec![F::zero(); cv.len()]))
            } else {
                None
            };
            kernels::bilinear_backward(fv, *c, *h, *w, cv, g, gf.as_deref_mut(), gc.as_deref_mut());
            if let Some(gf) = gf {
                grads[fm.0] = Some(gf);
            }
            if let Some(gc) = gc {
                grads[coords.0] = Some(gc);
            }
        }
        Op::Conv2d { x, w, b, geom, out_ch } => {
            let npix = geom.ho * geom.wo;
            let rows = geom.c * geom.k * geom.k;
            if let Some(d) = slot(grads, nodes, *b) {
                for o in 0..*out_ch {
                    d[o] = d[o] + g[o * npix..(o + 1) * npix].iter().copied().sum::<F>();
                }
            }
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            if need_w {
                let cols = kernels::im2col(val(*x), geom);
                let d = slot(grads, nodes, *w).expect("requires grad");
                kernels::matmul_a_bt_acc(g, &cols, d, *out_ch, rows, npix);
            }
            if need_x {
                let mut gcols = vec![F::zero(); rows * npix];
                kernels::matmul_at_b_acc(val(*w), g, &mut gcols, *out_ch, rows, npix);
                let d = slot(grads, nodes, *x).expect("requires grad");
                kernels::col2im_acc(&gcols, geom, d);
            }
        }
        Op::GatherRows { a, idx, row } => {
            if let Some(d) = slot(grads, nodes, *a) {
                for (o, &src) in idx.iter().enumerate() {
                    for j in 0..*row {
                        d[src * row + j] = d[src * row + j] + g[o * row + j];
                    }
                }
            }
        }
        Op::SliceLast { a, start, len, full } => {
            if let Some(d) = slot(grads, nodes, *a) {
                let rows = g.len() / len;
                for r in 0..rows {
                    for j in 0..*len {
                        d[r * full + start + j] = d[r * full + start + j] + g[r * len + j];
                    }
                }
            }
        }
        Op::ClampLast { a, lo, hi } => {
            let av = val(*a);
            if let Some(d) = slot(grads, nodes, *a) {
                let m = lo.len();
                for (k, (&x, &gv)) in av.iter().zip(g).enumerate() {
                    if x >= lo[k % m] && x <= hi[k % m] {
                        d[k] = d[k] + gv;
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(d) = slot(grads, nodes, *a) {
                let gv = g[0];
                d.iter_mut().for_each(|v| *v = *v + gv);
            }
        }
        Op::CrossEntropy { logits, targets, mask, classes, count } => {
            if *count == 0 {
                return;
            }
            let lv = val(*logits);
            if let Some(d) = slot(grads, nodes, *logits) {
                let scale = g[0] / F::of(*count as f64);
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let row = &lv[r * classes..(r + 1) * classes];
                    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let z = row.iter().map(|&v| (v - mx).exp()).sum::<F>();
                    for (c, &v) in row.iter().enumerate() {
                        let p = (v - mx).exp() / z;
                        let y = if c == t { F::one() } else { F::zero() };
                        d[r * classes + c] = d[r * classes + c] + scale * (p - y);
                    }
                }
            }
        }
        Op::Bce { logits, targets, mask, count } => {
            if *count == 0 {
                return;
            }
            let lv = val(*logits);
            if let Some(d) = slot(grads, nodes, *logits) {
                let scale = g[0] / F::of(*count as f64);
                for (k, ((&z, &t), &m)) in lv.iter().zip(targets).zip(mask).enumerate() {
                    if m {
                        d[k] = d[k] + scale * (super::sigmoid(z) - t);
                    }
                }
            }
        }
        Op::L1 { pred, target, mask, cols, count } => {
            if *count == 0 {
                return;
            }
            let pv = val(*pred);
            if let Some(d) = slot(grads, nodes, *pred) {
                let scale = g[0] / F::of(*count as f64);
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..*cols {
                        let k = r * cols + j;
                        let diff = pv[k] - target[k];
                        let s = if diff > F::zero() {
                            F::one()
                        } else if diff < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        d[k] = d[k] + scale * s;
                    }
                }
            }
        }
    }
}
