//! Forward definitions of every differentiable op.

use super::kernels::{self, ConvGeom};
use super::tape::{Op, Tape, Var};
use super::{gelu_f64, shape_err, sigmoid, Real, Result, Tensor, TensorError};

/// Per-row selection mask for the loss kernels.
pub type LossMask<'a> = &'a [bool];

const LN_EPS: f64 = 1e-5;

impl<F: Real> Tape<F> {
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (sb.len() < sa.len() && sa.ends_with(sb)) {
            Ok(())
        } else {
            shape_err(op, format!("{sa:?} vs {sb:?} (only leading-dimension broadcast of the right operand)"))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.broadcast_check(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.len();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bv.data()[i % nb])).collect();
        let out = Tensor { shape: av.shape().to_vec(), data };
        self.push(name, out, op, &[a, b])
    }

    /// Elementwise `a + b`; `b` may match a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = F::of(s);
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale { a, s }, &[a])
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// Batched `[B,m,k] · [B,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("bmm", format!("{sa:?} · {sb:?}"));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for t in 0..batch {
            kernels::matmul(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push("bmm", Tensor { shape: vec![batch, m, n], data: out }, Op::Bmm { a, b, batch, m, k, n }, &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(F::zero()));
        self.push("relu", out, Op::Relu { a }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| F::of(gelu_f64(x.as_f64())));
        self.push("gelu", out, Op::Gelu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid { a }, &[a])
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let dim =
            *av.shape().last().ok_or_else(|| TensorError::Invalid { op: "layer_norm", detail: "rank 0".into() })?;
        let nf = F::of(dim as f64);
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(dim) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rstd = F::one() / (var + F::of(LN_EPS)).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        }
        self.push("layer_norm", out, Op::LayerNorm { a, dim, eps: LN_EPS }, &[a])
    }

    /// Scales each last-axis row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let dim =
            *av.shape().last().ok_or_else(|| TensorError::Invalid { op: "l2_normalize", detail: "rank 0".into() })?;
        let eps = 1e-12;
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(dim) {
            let norm = (row.iter().map(|&v| v * v).sum::<F>() + F::of(eps)).sqrt();
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        self.push("l2_normalize", out, Op::L2Normalize { a, dim, eps }, &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(TensorError::Invalid { op: "concat", detail: "no inputs".into() });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for rank {}", base.len()));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return shape_err("concat", format!("{base:?} vs {s:?} along axis {axis}"));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&sizes) {
                data.extend_from_slice(&self.value(v).data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", Tensor { shape, data }, Op::Concat { inputs: inputs.to_vec(), outer, sizes, inner }, inputs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape { a }, &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return shape_err("transpose", format!("rank {} < 2", s.len()));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product();
        let av = self.value(a).data();
        let mut data = vec![F::zero(); av.len()];
        let sz = rows * cols;
        for t in 0..batch {
            for r in 0..rows {
                for c in 0..cols {
                    data[t * sz + c * rows + r] = av[t * sz + r * cols + c];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        self.push("transpose", Tensor { shape, data }, Op::Transpose { a, batch, rows, cols }, &[a])
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return shape_err("softmax", format!("axis {axis} for rank {}", s.len()));
        }
        let len = s[axis];
        if len == 0 {
            return Err(TensorError::Invalid { op: "softmax", detail: "empty axis".into() });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = self.value(a).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + j;
                let mx = (0..len).map(|k| d[idx(k)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for k in 0..len {
                    let e = (d[idx(k)] - mx).exp();
                    d[idx(k)] = e;
                    z = z + e;
                }
                for k in 0..len {
                    d[idx(k)] = d[idx(k)] / z;
                }
            }
        }
        self.push("softmax", out, Op::Softmax { a, outer, len, inner }, &[a])
    }

    /// Bilinear lookup of `fm[C,H,W]` at `coords[N,2]` given as `(x, y)` in
    /// grid units, clamped to the border. Returns `[N,C]`.
    pub fn bilinear_sample(&mut self, fm: Var, coords: Var) -> Result<Var> {
        let (sf, sc) = (self.shape(fm).to_vec(), self.shape(coords).to_vec());
        if sf.len() != 3 || sf.contains(&0) {
            return Err(TensorError::Invalid { op: "bilinear_sample", detail: format!("feature map shape {sf:?}") });
        }
        if sc.len() != 2 || sc[1] != 2 {
            return shape_err("bilinear_sample", format!("coords {sc:?}, want [N,2]"));
        }
        let (c, h, w, n) = (sf[0], sf[1], sf[2], sc[0]);
        let mut out = vec![F::zero(); n * c];
        kernels::bilinear_forward(self.value(fm).data(), c, h, w, self.value(coords).data(), &mut out);
        self.push(
            "bilinear_sample",
            Tensor { shape: vec![n, c], data: out },
            Op::Bilinear { fm, coords, c, h, w },
            &[fm, coords],
        )
    }

    /// Single-image convolution: `x[C,H,W]`, `w[O,C,k,k]`, `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sb != [sw[0]] {
            return shape_err("conv2d", format!("x {sx:?}, w {sw:?}, b {sb:?}"));
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sw[2], stride, pad)
            .ok_or_else(|| TensorError::Invalid { op: "conv2d", detail: "kernel larger than padded input".into() })?;
        let out_ch = sw[0];
        let npix = geom.ho * geom.wo;
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![F::zero(); out_ch * npix];
        kernels::matmul(self.value(w).data(), &cols, &mut out, out_ch, geom.c * geom.k * geom.k, npix);
        let bv = self.value(b).data();
        for (o, plane) in out.chunks_mut(npix).enumerate() {
            plane.iter_mut().for_each(|v| *v = *v + bv[o]);
        }
        let shape = vec![out_ch, geom.ho, geom.wo];
        self.push("conv2d", Tensor { shape, data: out }, Op::Conv2d { x, w, b, geom, out_ch }, &[x, w, b])
    }

    /// Selects rows (first axis) by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return shape_err("gather_rows", "rank 0");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::Invalid { op: "gather_rows", detail: format!("index {bad} >= {}", s[0]) });
        }
        let row: usize = s[1..].iter().product();
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&av[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        self.push("gather_rows", Tensor { shape, data }, Op::GatherRows { a, idx: idx.to_vec(), row }, &[a])
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let full = *s.last().unwrap_or(&0);
        if start + len > full || len == 0 {
            return shape_err("slice_last", format!("{start}..{} of {full}", start + len));
        }
        let av = self.value(a).data();
        let data = av.chunks(full).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        self.push("slice_last", Tensor { shape, data }, Op::SliceLast { a, start, len, full }, &[a])
    }

    /// Clamps each last-axis column `j` to `[lo[j], hi[j]]`.
    pub fn clamp_last(&mut self, a: Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
        let s = self.shape(a);
        if s.last() != Some(&lo.len()) || lo.len() != hi.len() {
            return shape_err("clamp_last", format!("{s:?} with {} bounds", lo.len()));
        }
        let lo: Vec<F> = lo.iter().map(|&v| F::of(v)).collect();
        let hi: Vec<F> = hi.iter().map(|&v| F::of(v)).collect();
        let m = lo.len();
        let mut out = self.value(a).clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = v.max(lo[k % m]).min(hi[k % m]);
        }
        self.push("clamp_last", out, Op::ClampLast { a, lo, hi }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<F>();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean softmax cross-entropy of `logits[R,C]` against class indices,
    /// over rows with `mask[r]`. Zero (with zero gradient) when no row is selected.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: LossMask) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return shape_err("cross_entropy", format!("logits {s:?}, {} targets, {} mask", targets.len(), mask.len()));
        }
        let classes = s[1];
        if let Some(&t) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= classes).map(|(t, _)| t) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                detail: format!("target {t} outside {classes} classes"),
            });
        }
        let lv = self.value(logits).data();
        let mut total = F::zero();
        let mut count = 0;
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            let row = &lv[r * classes..(r + 1) * classes];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln();
            total = total + lse - row[t];
            count += 1;
        }
        let loss = if count == 0 { F::zero() } else { total / F::of(count as f64) };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), classes, count };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets` in
    /// `[0,1]`, over masked elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], mask: LossMask) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n || mask.len() != n {
            return shape_err("bce", format!("{n} logits, {} targets, {} mask", targets.len(), mask.len()));
        }
        let lv = self.value(logits).data();
        let mut total = F::zero();
        let mut count = 0;
        for ((&z, &t), &m) in lv.iter().zip(targets).zip(mask) {
            if m {
                let t = F::of(t);
                total = total + z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln();
                count += 1;
            }
        }
        let loss = if count == 0 { F::zero() } else { total / F::of(count as f64) };
        let targets = targets.iter().map(|&t| F::of(t)).collect();
        self.push("bce", Tensor::scalar(loss), Op::Bce { logits, targets, mask: mask.to_vec(), count }, &[logits])
    }

    /// Mean over masked rows of `Σ_j |pred[r,j] − target[r,j]|`.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64], mask: LossMask) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        let n = self.value(pred).len();
        if s.is_empty() || target.len() != n || mask.len() != s[0] {
            return shape_err("l1", format!("pred {s:?}, {} targets, {} mask", target.len(), mask.len()));
        }
        let cols = n / s[0].max(1);
        let pv = self.value(pred).data();
        let target: Vec<F> = target.iter().map(|&t| F::of(t)).collect();
        let mut total = F::zero();
        let mut count = 0;
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for j in 0..cols {
                    total = total + (pv[r * cols + j] - target[r * cols + j]).abs();
                }
                count += 1;
            }
        }
        let loss = if count == 0 { F::zero() } else { total / F::of(count as f64) };
        self.push("l1", Tensor::scalar(loss), Op::L1 { pred, target, mask: mask.to_vec(), cols, count }, &[pred])
    }

    /// `x[..., in] · w[in, out] + b[out]` for inputs of any rank ≥ 1.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let Some(&inn) = sx.last() else { return shape_err("linear", "rank 0 input") };
        let rows = self.value(x).len() / inn.max(1);
        let x2 = if sx.len() == 2 { x } else { self.reshape(x, &[rows, inn])? };
        let y = self.matmul(x2, w)?;
        let y = self.add(y, b)?;
        let outd = self.shape(w)[1];
        if sx.len() == 2 {
            Ok(y)
        } else {
            let mut shape = sx;
            *shape.last_mut().unwrap() = outd;
            self.reshape(y, &shape)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tp = Tape::<f64>::new();
        let a_vals = [1.0, -2.0, 3.5, 0.25, 5.0, -6.0, 7.0, 8.0, 9.5];
        let eye = tp.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.])).unwrap();
        let a = tp.constant(t(&[3, 3], &a_vals)).unwrap();
        let y = tp.matmul(eye, a).unwrap();
        assert_eq!(tp.value(y).data(), &a_vals);
    }

    #[test]
    fn broadcast_only_leading() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tp.constant(Tensor::zeros(vec![3])).unwrap();
        let c = tp.constant(Tensor::zeros(vec![2])).unwrap();
        assert!(tp.add(a, b).is_ok());
        assert!(matches!(tp.add(a, c), Err(TensorError::Shape { .. })));
        assert!(tp.add(b, a).is_err());
    }

    #[test]
    fn softmax_basic_and_stable() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let s = tp.softmax(a, 0).unwrap();
        for &v in tp.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = tp.constant(t(&[2], &[1000.0, 0.0])).unwrap();
        let s = tp.softmax(b, 0).unwrap();
        let d = tp.value(s).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::zeros(vec![2, 0])).unwrap();
        assert!(tp.softmax(a, 1).is_err());
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut tp = Tape::<f64>::new();
        assert!(tp.leaf(t(&[1], &[f64::NAN]), true).is_err());
        let a = tp.constant(t(&[1], &[1e300])).unwrap();
        assert!(matches!(tp.mul(a, a), Err(TensorError::NonFinite { op: "mul" })));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(t(&[4], &[1.0, -2.0, 0.5, 3.0]), true).unwrap();
        let s = tp.sum(x).unwrap();
        let g = tp.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(t(&[4], &[1.0, -2.0, 0.5, 3.0]), true).unwrap();
        let sq = tp.mul(x, x).unwrap();
        let s = tp.sum(sq).unwrap();
        let g = tp.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_twice_and_non_scalar() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(tp.backward(x), Err(TensorError::NonScalarLoss(_))));
        let s = tp.sum(x).unwrap();
        tp.backward(s).unwrap();
        assert_eq!(tp.backward(s).unwrap_err(), TensorError::BackwardTwice);
        tp.reset_backward();
        assert!(tp.backward(s).is_ok());
    }

    #[test]
    fn empty_mask_losses_are_exact_zero() {
        let mut tp = Tape::<f64>::new();
        let z = tp.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true).unwrap();
        let ce = tp.cross_entropy(z, &[0, 1], &[false, false]).unwrap();
        assert_eq!(tp.value(ce).item(), 0.0);
        let g = tp.backward(ce).unwrap();
        assert!(g.get(z).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn ce_target_out_of_range() {
        let mut tp = Tape::<f64>::new();
        let z = tp.constant(Tensor::zeros(vec![1, 3])).unwrap();
        assert!(tp.cross_entropy(z, &[3], &[true]).is_err());
    }

    #[test]
    fn l1_identity_is_zero() {
        let mut tp = Tape::<f64>::new();
        let vals = [0.3, -1.0, 2.0, 4.0];
        let x = tp.constant(t(&[2, 2], &vals)).unwrap();
        let l = tp.l1_loss(x, &vals, &[true, true]).unwrap();
        assert_eq!(tp.value(l).item(), 0.0);
    }

    #[test]
    fn bce_decreases_with_correct_sign() {
        let mut tp = Tape::<f64>::new();
        let mut last = f64::INFINITY;
        for z in [-2.0, 0.0, 2.0] {
            let x = tp.constant(t(&[1], &[z])).unwrap();
            let l = tp.bce_with_logits(x, &[1.0], &[true]).unwrap();
            let v = tp.value(l).item();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn bilinear_grid_point_and_midpoint() {
        let mut tp = Tape::<f64>::new();
        let fm_vals: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect();
        let fm = tp.constant(t(&[1, 3, 4], &fm_vals)).unwrap();
        let c = tp.constant(t(&[2, 2], &[2.0, 1.0, 0.5, 0.5])).unwrap();
        let s = tp.bilinear_sample(fm, c).unwrap();
        let d = tp.value(s).data();
        assert_eq!(d[0], fm_vals[4 + 2]);
        assert!((d[1] - (fm_vals[0] + fm_vals[1] + fm_vals[4] + fm_vals[5]) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn concat_then_slice_round_trip() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(t(&[2, 1], &[1.0, 2.0])).unwrap();
        let b = tp.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = tp.concat(&[a, b], 1).unwrap();
        assert_eq!(tp.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tp.slice_last(c, 1, 2).unwrap();
        assert_eq!(tp.value(s).data(), tp.value(b).data());
    }
}
