//! Slice-level kernels shared by the forward and backward passes.

use super::Real;

/// Strided 2-D view description: element `(i, j)` lives at `i*rs + j*cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Row-major `[rows, cols]` storage read as-is.
    pub fn plain(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Row-major `[rows, cols]` storage read transposed.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c ← alpha·a·b + beta·c` with `a: [m,k]`, `b: [k,n]`, `c: [m,n]` views.
/// When `beta` is zero `c` is overwritten without being read.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<E: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    va: View,
    b: &[E],
    vb: View,
    beta: E,
    c: &mut [E],
    vc: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(va.span(m, k) <= a.len(), "gemm: lhs view out of bounds");
    assert!(vb.span(k, n) <= b.len(), "gemm: rhs view out of bounds");
    assert!(vc.span(m, n) <= c.len(), "gemm: output view out of bounds");
    // SAFETY: spans checked above; the three slices cannot alias because `c`
    // is borrowed mutably.
    unsafe {
        E::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr(),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr(),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1×1, stride 1, no padding: the input already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[c_in, h, w]` image into `[c_in·kh·kw, h_out·w_out]` columns.
pub(crate) fn im2col<E: Real>(g: &ConvGeometry, image: &[E], cols: &mut [E]) {
    let hw_out = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            E::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_add<E: Real>(g: &ConvGeometry, cols: &[E], image: &mut [E]) {
    let hw_out = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = kernels · im2col(input[n])` for every image in the batch.
pub(crate) fn conv2d_forward<E: Real>(
    g: &ConvGeometry,
    batch: usize,
    c_out: usize,
    input: &[E],
    kernels: &[E],
    out: &mut [E],
) {
    let k = g.patch_len();
    let p = g.out_pixels();
    let in_stride = g.c_in * g.h * g.w;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); k * p]
    };
    for n in 0..batch {
        let image = &input[n * in_stride..(n + 1) * in_stride];
        let cols_ref: &[E] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        gemm(
            c_out,
            k,
            p,
            E::one(),
            kernels,
            View::plain(k),
            cols_ref,
            View::plain(p),
            E::zero(),
            &mut out[n * c_out * p..(n + 1) * c_out * p],
            View::plain(p),
        );
    }
}

/// Accumulates input and kernel gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<E: Real>(
    g: &ConvGeometry,
    batch: usize,
    c_out: usize,
    input: &[E],
    kernels: &[E],
    grad_out: &[E],
    grad_input: Option<&mut [E]>,
    grad_kernels: Option<&mut [E]>,
) {
    let k = g.patch_len();
    let p = g.out_pixels();
    let in_stride = g.c_in * g.h * g.w;
    let mut cols = vec![E::zero(); if g.is_pointwise() { 0 } else { k * p }];
    let mut dcols = vec![E::zero(); k * p];

    if let Some(dk) = grad_kernels {
        for n in 0..batch {
            let image = &input[n * in_stride..(n + 1) * in_stride];
            let cols_ref: &[E] = if g.is_pointwise() {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            let go = &grad_out[n * c_out * p..(n + 1) * c_out * p];
            gemm(
                c_out,
                p,
                k,
                E::one(),
                go,
                View::plain(p),
                cols_ref,
                View::transposed(p),
                E::one(),
                dk,
                View::plain(k),
            );
        }
    }

    if let Some(di) = grad_input {
        for n in 0..batch {
            let go = &grad_out[n * c_out * p..(n + 1) * c_out * p];
            let dst = &mut di[n * in_stride..(n + 1) * in_stride];
            if g.is_pointwise() {
                gemm(
                    k,
                    c_out,
                    p,
                    E::one(),
                    kernels,
                    View::transposed(k),
                    go,
                    View::plain(p),
                    E::one(),
                    dst,
                    View::plain(p),
                );
            } else {
                gemm(
                    k,
                    c_out,
                    p,
                    E::one(),
                    kernels,
                    View::transposed(k),
                    go,
                    View::plain(p),
                    E::zero(),
                    &mut dcols,
                    View::plain(p),
                );
                col2im_add(g, &dcols, dst);
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<E: Real>(shape: &[usize], axis: usize, x: &[E], y: &mut [E]) {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x[base + a * inner].as_f64());
            }
            let mut total = 0.0;
            for (a, slot) in buf.iter_mut().enumerate() {
                *slot = (x[base + a * inner].as_f64() - max).exp();
                total += *slot;
            }
            for (a, slot) in buf.iter().enumerate() {
                y[base + a * inner] = E::of(slot / total);
            }
        }
    }
}

pub(crate) fn softmax_backward<E: Real>(
    shape: &[usize],
    axis: usize,
    y: &[E],
    dy: &[E],
    dx: &mut [E],
) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len)
                .map(|a| y[base + a * inner].as_f64() * dy[base + a * inner].as_f64())
                .sum();
            for a in 0..len {
                let idx = base + a * inner;
                dx[idx] += E::of(y[idx].as_f64() * (dy[idx].as_f64() - dot));
            }
        }
    }
}

/// Per-(sample, group) statistics of group normalization.
#[derive(Clone, Debug)]
pub(crate) struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// `x: [n, c, spatial]` flattened; returns normalized, scaled and shifted output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward<E: Real>(
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
    x: &[E],
    gamma: &[E],
    beta: &[E],
    y: &mut [E],
) -> GroupStats {
    let per_group = c / groups;
    let count = (per_group * spatial) as f64;
    let mut stats = GroupStats {
        mean: Vec::with_capacity(n * groups),
        rstd: Vec::with_capacity(n * groups),
    };
    for s in 0..n {
        for gi in 0..groups {
            let start = (s * c + gi * per_group) * spatial;
            let chunk = &x[start..start + per_group * spatial];
            let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / count;
            let var = chunk
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / count;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            for cl in 0..per_group {
                let ch = gi * per_group + cl;
                let (gm, bt) = (gamma[ch].as_f64(), beta[ch].as_f64());
                let off = cl * spatial;
                for p in 0..spatial {
                    let xh = (chunk[off + p].as_f64() - mean) * rstd;
                    y[start + off + p] = E::of(xh * gm + bt);
                }
            }
        }
    }
    stats
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<E: Real>(
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    stats: &GroupStats,
    x: &[E],
    gamma: &[E],
    dy: &[E],
    dx: Option<&mut [E]>,
    dgamma: Option<&mut [E]>,
    dbeta: Option<&mut [E]>,
) {
    let per_group = c / groups;
    let count = (per_group * spatial) as f64;
    let mut dgamma_acc = vec![0.0f64; c];
    let mut dbeta_acc = vec![0.0f64; c];
    let mut dx = dx;
    for s in 0..n {
        for gi in 0..groups {
            let idx = s * groups + gi;
            let (mean, rstd) = (stats.mean[idx], stats.rstd[idx]);
            let start = (s * c + gi * per_group) * spatial;
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for cl in 0..per_group {
                let ch = gi * per_group + cl;
                let gm = gamma[ch].as_f64();
                for p in 0..spatial {
                    let i = start + cl * spatial + p;
                    let xh = (x[i].as_f64() - mean) * rstd;
                    let g = dy[i].as_f64();
                    dgamma_acc[ch] += g * xh;
                    dbeta_acc[ch] += g;
                    let dxh = g * gm;
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let mean_dxh = sum_dxh / count;
                let mean_dxh_xh = sum_dxh_xh / count;
                for cl in 0..per_group {
                    let gm = gamma[gi * per_group + cl].as_f64();
                    for p in 0..spatial {
                        let i = start + cl * spatial + p;
                        let xh = (x[i].as_f64() - mean) * rstd;
                        let dxh = dy[i].as_f64() * gm;
                        dx[i] += E::of(rstd * (dxh - mean_dxh - xh * mean_dxh_xh));
                    }
                }
            }
        }
    }
    if let Some(dg) = dgamma {
        for (d, a) in dg.iter_mut().zip(&dgamma_acc) {
            *d += E::of(*a);
        }
    }
    if let Some(db) = dbeta {
        for (d, a) in db.iter_mut().zip(&dbeta_acc) {
            *d += E::of(*a);
        }
    }
}
