//! Raw slice kernels shared by forward and backward passes.

use super::Real;

/// `c[m,n] = a[m,k] · b[k,n]`, overwriting `c`.
pub(crate) fn matmul<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    c.iter_mut().for_each(|v| *v = F::zero());
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`.
pub(crate) fn matmul_at_b_acc<F: Real>(a: &[F], g: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (ov, &gv) in orow.iter_mut().zip(grow) {
                *ov = *ov + av * gv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`.
pub(crate) fn matmul_a_bt_acc<F: Real>(g: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s = s + gv * bv;
            }
            out[i * k + p] = out[i * k + p] + s;
        }
    }
}

/// Interpolation stencil for one continuous coordinate pair on an `h×w` grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bilinear {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub wx: f64,
    pub wy: f64,
    /// False when the coordinate was clamped, which zeroes its gradient.
    pub x_free: bool,
    pub y_free: bool,
}

/// Clamp-to-border bilinear stencil for `(x, y)` on an `h×w` grid.
pub fn bilinear_weights(x: f64, y: f64, h: usize, w: usize) -> Bilinear {
    let (x0, x1, wx, x_free) = axis_stencil(x, w);
    let (y0, y1, wy, y_free) = axis_stencil(y, h);
    Bilinear { x0, x1, y0, y1, wx, wy, x_free, y_free }
}

fn axis_stencil(v: f64, n: usize) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    let free = v >= 0.0 && v <= hi;
    let vc = v.clamp(0.0, hi);
    let i0 = (vc.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, vc - i0 as f64, free)
}

/// Samples `fm[C,h,w]` at each `(x, y)` in `coords[N,2]`, writing `out[N,C]`.
pub(crate) fn bilinear_forward<F: Real>(fm: &[F], c: usize, h: usize, w: usize, coords: &[F], out: &mut [F]) {
    let n = coords.len() / 2;
    let plane = h * w;
    for i in 0..n {
        let s = bilinear_weights(coords[2 * i].as_f64(), coords[2 * i + 1].as_f64(), h, w);
        let (wx, wy) = (F::of(s.wx), F::of(s.wy));
        let (ax, ay) = (F::one() - wx, F::one() - wy);
        let (i00, i01) = (s.y0 * w + s.x0, s.y0 * w + s.x1);
        let (i10, i11) = (s.y1 * w + s.x0, s.y1 * w + s.x1);
        let orow = &mut out[i * c..(i + 1) * c];
        for (ch, o) in orow.iter_mut().enumerate() {
            let base = ch * plane;
            let top = ax * fm[base + i00] + wx * fm[base + i01];
            let bot = ax * fm[base + i10] + wx * fm[base + i11];
            *o = ay * top + wy * bot;
        }
    }
}

/// Accumulates gradients of [`bilinear_forward`] into `gfm` and/or `gcoords`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bilinear_backward<F: Real>(
    fm: &[F],
    c: usize,
    h: usize,
    w: usize,
    coords: &[F],
    g: &[F],
    mut gfm: Option<&mut [F]>,
    mut gcoords: Option<&mut [F]>,
) {
    let n = coords.len() / 2;
    let plane = h * w;
    for i in 0..n {
        let s = bilinear_weights(coords[2 * i].as_f64(), coords[2 * i + 1].as_f64(), h, w);
        let (wx, wy) = (F::of(s.wx), F::of(s.wy));
        let (ax, ay) = (F::one() - wx, F::one() - wy);
        let (i00, i01) = (s.y0 * w + s.x0, s.y0 * w + s.x1);
        let (i10, i11) = (s.y1 * w + s.x0, s.y1 * w + s.x1);
        let grow = &g[i * c..(i + 1) * c];
        if let Some(gfm) = gfm.as_deref_mut() {
            for (ch, &gv) in grow.iter().enumerate() {
                let base = ch * plane;
                gfm[base + i00] = gfm[base + i00] + gv * ay * ax;
                gfm[base + i01] = gfm[base + i01] + gv * ay * wx;
                gfm[base + i10] = gfm[base + i10] + gv * wy * ax;
                gfm[base + i11] = gfm[base + i11] + gv * wy * wx;
            }
        }
        if let Some(gc) = gcoords.as_deref_mut() {
            let (mut dx, mut dy) = (F::zero(), F::zero());
            for (ch, &gv) in grow.iter().enumerate() {
                let base = ch * plane;
                let (v00, v01, v10, v11) = (fm[base + i00], fm[base + i01], fm[base + i10], fm[base + i11]);
                dx = dx + gv * (ay * (v01 - v00) + wy * (v11 - v10));
                dy = dy + gv * (ax * (v10 - v00) + wx * (v11 - v01));
            }
            if s.x_free && s.x1 != s.x0 {
                gc[2 * i] = gc[2 * i] + dx;
            }
            if s.y_free && s.y1 != s.y0 {
                gc[2 * i + 1] = gc[2 * i + 1] + dy;
            }
        }
    }
}

/// Geometry of a single-image 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self { c, h, w, k, stride, pad, ho, wo })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Unfolds `x[C,H,W]` into `cols[C·k·k, Ho·Wo]`.
pub(crate) fn im2col<F: Real>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let npix = g.ho * g.wo;
    let mut cols = vec![F::zero(); g.rows() * npix];
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[ch * g.h * g.w + iy as usize * g.w..];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds `cols` gradients back onto `gx[C,H,W]` (adjoint of [`im2col`]).
pub(crate) fn col2im_acc<F: Real>(cols: &[F], g: &ConvGeom, gx: &mut [F]) {
    let npix = g.ho * g.wo;
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = ch * g.h * g.w + iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            gx[base + ix as usize] = gx[base + ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_clamps_and_flags() {
        let s = bilinear_weights(-1.0, 2.5, 4, 5);
        assert_eq!((s.x0, s.x1, s.wx, s.x_free), (0, 1, 0.0, false));
        assert_eq!((s.y0, s.y1), (2, 3));
        assert!((s.wy - 0.5).abs() < 1e-12 && s.y_free);
        let s = bilinear_weights(9.0, 3.0, 4, 5);
        assert_eq!((s.x0, s.x1, s.y0, s.y1), (4, 4, 3, 3));
    }

    #[test]
    fn im2col_identity_kernel() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let g = ConvGeom::new(1, 3, 4, 1, 1, 0).unwrap();
        assert_eq!(im2col(&x, &g), x);
    }
}
