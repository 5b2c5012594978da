//! Slice-level forward/backward kernels shared by [`Tape`](super::Tape) ops.
//!
//! Reductions accumulate in f64 in a fixed sequential order.

use super::Float;

/// `c[m,n] = a[m,k] · b[k,n]` (row-major, contiguous), overwriting `c`.
pub fn matmul<F: Float>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    F::gemm(
        m, k, n, F::one(), a, k as isize, 1, b, n as isize, 1, F::zero(), c, n as isize, 1,
    );
}

/// `c[m,n] += a[m,k] · b[n,k]^T`.
pub fn matmul_nt_acc<F: Float>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    F::gemm(
        m, k, n, F::one(), a, k as isize, 1, b, 1, k as isize, F::one(), c, n as isize, 1,
    );
}

/// `c[m,n] += a[k,m]^T · b[k,n]`.
pub fn matmul_tn_acc<F: Float>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    F::gemm(
        m, k, n, F::one(), a, 1, m as isize, b, n as isize, 1, F::one(), c, n as isize, 1,
    );
}

pub fn transpose<F: Float>(x: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Geometry of a 3×3, padding-1 convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    pub fn k(&self) -> usize {
        self.cin * 9
    }

    pub fn p(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds `x[cin,h,w]` into `cols[cin*9, oh*ow]`.
pub fn im2col<F: Float>(x: &[F], g: ConvGeom) -> Vec<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut cols = vec![F::zero(); g.k() * p];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters `dcols` back into `dx[cin,h,w]`.
pub fn col2im_acc<F: Float>(dcols: &[F], dx: &mut [F], g: ConvGeom) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] =
                                plane[iy as usize * g.w + ix as usize] + dcols[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Softmax along one axis of a tensor viewed as `[outer, n, inner]`.
pub fn softmax<F: Float>(x: &[F], outer: usize, n: usize, inner: usize) -> Vec<F> {
    let mut y = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut mx = F::neg_infinity();
            for j in 0..n {
                mx = mx.max(x[idx(j)]);
            }
            let mut total = 0.0f64;
            for j in 0..n {
                let e = (x[idx(j)] - mx).exp();
                y[idx(j)] = e;
                total += e.f64();
            }
            let inv = F::of(1.0 / total);
            for j in 0..n {
                y[idx(j)] = y[idx(j)] * inv;
            }
        }
    }
    y
}

/// `dx = y ⊙ (g − Σ_axis g·y)` for the same `[outer, n, inner]` view.
pub fn softmax_backward<F: Float>(y: &[F], g: &[F], outer: usize, n: usize, inner: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut dot = 0.0f64;
            for j in 0..n {
                dot += (g[idx(j)] * y[idx(j)]).f64();
            }
            let dot = F::of(dot);
            for j in 0..n {
                dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
            }
        }
    }
    dx
}

/// Row softmax of `x[m,n]` where columns with `keep[j] == false` get zero
/// probability (equivalent to a −∞ logit).
pub fn masked_softmax_rows<F: Float>(x: &[F], m: usize, n: usize, keep: &[bool]) -> Vec<F> {
    let mut y = vec![F::zero(); m * n];
    for r in 0..m {
        let row = &x[r * n..(r + 1) * n];
        let out = &mut y[r * n..(r + 1) * n];
        let mut mx = F::neg_infinity();
        for j in 0..n {
            if keep[j] {
                mx = mx.max(row[j]);
            }
        }
        let mut total = 0.0f64;
        for j in 0..n {
            if keep[j] {
                let e = (row[j] - mx).exp();
                out[j] = e;
                total += e.f64();
            }
        }
        let inv = F::of(1.0 / total);
        for o in out.iter_mut() {
            *o = *o * inv;
        }
    }
    y
}

/// Per-group statistics saved by the group-norm forward pass.
pub struct GroupNormOut<F> {
    pub y: Vec<F>,
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization of `x[c, hw]` with per-channel affine parameters.
pub fn group_norm<F: Float>(
    x: &[F],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[F],
    beta: &[F],
) -> GroupNormOut<F> {
    let cpg = c / groups;
    let n = (cpg * hw) as f64;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); groups];
    for g in 0..groups {
        let span = g * cpg * hw..(g + 1) * cpg * hw;
        let xs = &x[span.clone()];
        let mean = xs.iter().fold(0.0f64, |a, v| a + v.f64()) / n;
        let var = xs.iter().fold(0.0f64, |a, v| {
            let d = v.f64() - mean;
            a + d * d
        }) / n;
        let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        rstd[g] = F::of(r);
        let (mean, r) = (F::of(mean), F::of(r));
        for (i, idx) in span.enumerate() {
            let ch = g * cpg + i / hw;
            let xh = (x[idx] - mean) * r;
            xhat[idx] = xh;
            y[idx] = xh * gamma[ch] + beta[ch];
        }
    }
    GroupNormOut { y, xhat, rstd }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<F: Float>(
    g_out: &[F],
    xhat: &[F],
    rstd: &[F],
    gamma: &[F],
    c: usize,
    hw: usize,
    groups: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let cpg = c / groups;
    let n = (cpg * hw) as f64;
    let mut dx = vec![F::zero(); g_out.len()];
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for ch in 0..c {
        let mut dg = 0.0f64;
        let mut db = 0.0f64;
        for i in ch * hw..(ch + 1) * hw {
            dg += (g_out[i] * xhat[i]).f64();
            db += g_out[i].f64();
        }
        dgamma[ch] = F::of(dg);
        dbeta[ch] = F::of(db);
    }
    for g in 0..groups {
        let span = g * cpg * hw..(g + 1) * cpg * hw;
        let mut sum_d = 0.0f64;
        let mut sum_dx = 0.0f64;
        for idx in span.clone() {
            let ch = idx / hw;
            let d = (g_out[idx] * gamma[ch]).f64();
            sum_d += d;
            sum_dx += d * xhat[idx].f64();
        }
        let r = rstd[g].f64();
        for idx in span {
            let ch = idx / hw;
            let d = (g_out[idx] * gamma[ch]).f64();
            dx[idx] = F::of(r / n * (n * d - sum_d - xhat[idx].f64() * sum_dx));
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
pub fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Interpolation taps for half-pixel-centre bilinear resampling of one axis.
#[derive(Debug, Clone, Copy)]
pub struct Tap<F> {
    pub i0: usize,
    pub i1: usize,
    pub w0: F,
    pub w1: F,
}

/// Source taps for each output coordinate: `src = (o + 0.5)·in/out − 0.5`,
/// clamped to the valid range.
pub fn bilinear_taps<F: Float>(input: usize, output: usize) -> Vec<Tap<F>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: F::of(1.0 - frac),
                w1: F::of(frac),
            }
        })
        .collect()
}

pub fn resize_bilinear<F: Float>(
    x: &[F],
    c: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<F> {
    let ty = bilinear_taps::<F>(h, oh);
    let tx = bilinear_taps::<F>(w, ow);
    let mut out = vec![F::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = a.w0 * (b.w0 * plane[a.i0 * w + b.i0] + b.w1 * plane[a.i0 * w + b.i1])
                    + a.w1 * (b.w0 * plane[a.i1 * w + b.i0] + b.w1 * plane[a.i1 * w + b.i1]);
                out[ch * oh * ow + oy * ow + ox] = v;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<F: Float>(
    g: &[F],
    c: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<F> {
    let ty = bilinear_taps::<F>(h, oh);
    let tx = bilinear_taps::<F>(w, ow);
    let mut dx = vec![F::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let go = g[ch * oh * ow + oy * ow + ox];
                plane[a.i0 * w + b.i0] = plane[a.i0 * w + b.i0] + go * a.w0 * b.w0;
                plane[a.i0 * w + b.i1] = plane[a.i0 * w + b.i1] + go * a.w0 * b.w1;
                plane[a.i1 * w + b.i0] = plane[a.i1 * w + b.i0] + go * a.w1 * b.w0;
                plane[a.i1 * w + b.i1] = plane[a.i1 * w + b.i1] + go * a.w1 * b.w1;
            }
        }
    }
    dx
}
