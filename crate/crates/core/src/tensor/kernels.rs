//! Raw convolution and matrix kernels over row-major slices.
//!
//! All three convolution kernels share one geometry: a "small" grid indexed by
//! `o` and a "big" grid indexed by `o * stride + k - pad`. Cross-correlation
//! gathers big into small, scatter pushes small into big (the transposed
//! convolution), and `filter_grad` correlates the two.

use crate::par;

/// Extents of a `channels x height x width` block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Dims { c, h, w }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Window geometry shared by the convolution kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Range of small-grid indices `o` whose big-grid index `o*stride + k - pad`
/// falls inside `[0, big)`.
#[inline]
fn valid_range(small: usize, big: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let (s, k, p, big) = (stride as isize, k as isize, pad as isize, big as isize);
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    let hi_excl = if big + p - k <= 0 { 0 } else { (big + p - k + s - 1) / s };
    let lo = lo.max(0) as usize;
    let hi = (hi_excl.max(0) as usize).min(small);
    (lo, hi.max(lo))
}

/// `dst[a, oy, ox] += sum_b sum_k filt[a, b, ky, kx] * src[b, oy*s+ky-p, ox*s+kx-p]`.
///
/// `filt` has layout `[dst.c, src.c, kh, kw]`.
pub fn correlate(src: &[f64], sd: Dims, filt: &[f64], win: Window, dst: &mut [f64], dd: Dims) {
    debug_assert_eq!(src.len(), sd.len());
    debug_assert_eq!(dst.len(), dd.len());
    debug_assert_eq!(filt.len(), dd.c * sd.c * win.kh * win.kw);
    let ksz = win.kh * win.kw;
    par::for_each_chunk(dst, dd.plane(), |a, out| {
        for b in 0..sd.c {
            let plane = &src[b * sd.plane()..(b + 1) * sd.plane()];
            let fbase = (a * sd.c + b) * ksz;
            for ky in 0..win.kh {
                let (y0, y1) = valid_range(dd.h, sd.h, ky, win.stride, win.pad);
                for kx in 0..win.kw {
                    let wv = filt[fbase + ky * win.kw + kx];
                    let (x0, x1) = valid_range(dd.w, sd.w, kx, win.stride, win.pad);
                    for oy in y0..y1 {
                        let iy = oy * win.stride + ky - win.pad;
                        let row = &plane[iy * sd.w..(iy + 1) * sd.w];
                        let orow = &mut out[oy * dd.w..(oy + 1) * dd.w];
                        for ox in x0..x1 {
                            orow[ox] += wv * row[ox * win.stride + kx - win.pad];
                        }
                    }
                }
            }
        }
    });
}

/// `dst[b, oy*s+ky-p, ox*s+kx-p] += sum_a filt[a, b, ky, kx] * src[a, oy, ox]`.
///
/// `filt` has layout `[src.c, dst.c, kh, kw]`. Out-of-range targets are dropped.
pub fn scatter(src: &[f64], sd: Dims, filt: &[f64], win: Window, dst: &mut [f64], dd: Dims) {
    debug_assert_eq!(src.len(), sd.len());
    debug_assert_eq!(dst.len(), dd.len());
    debug_assert_eq!(filt.len(), sd.c * dd.c * win.kh * win.kw);
    let ksz = win.kh * win.kw;
    par::for_each_chunk(dst, dd.plane(), |b, out| {
        for a in 0..sd.c {
            let plane = &src[a * sd.plane()..(a + 1) * sd.plane()];
            let fbase = (a * dd.c + b) * ksz;
            for ky in 0..win.kh {
                let (y0, y1) = valid_range(sd.h, dd.h, ky, win.stride, win.pad);
                for kx in 0..win.kw {
                    let wv = filt[fbase + ky * win.kw + kx];
                    let (x0, x1) = valid_range(sd.w, dd.w, kx, win.stride, win.pad);
                    for oy in y0..y1 {
                        let ty = oy * win.stride + ky - win.pad;
                        let row = &plane[oy * sd.w..(oy + 1) * sd.w];
                        let orow = &mut out[ty * dd.w..(ty + 1) * dd.w];
                        for ox in x0..x1 {
                            orow[ox * win.stride + kx - win.pad] += wv * row[ox];
                        }
                    }
                }
            }
        }
    });
}

/// `grad[a, b, ky, kx] += sum_o small[a, oy, ox] * big[b, oy*s+ky-p, ox*s+kx-p]`.
pub fn filter_grad(small: &[f64], sm: Dims, big: &[f64], bg: Dims, win: Window, grad: &mut [f64]) {
    debug_assert_eq!(grad.len(), sm.c * bg.c * win.kh * win.kw);
    let ksz = win.kh * win.kw;
    par::for_each_chunk(grad, bg.c * ksz, |a, g| {
        let splane = &small[a * sm.plane()..(a + 1) * sm.plane()];
        for b in 0..bg.c {
            let bplane = &big[b * bg.plane()..(b + 1) * bg.plane()];
            for ky in 0..win.kh {
                let (y0, y1) = valid_range(sm.h, bg.h, ky, win.stride, win.pad);
                for kx in 0..win.kw {
                    let (x0, x1) = valid_range(sm.w, bg.w, kx, win.stride, win.pad);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let by = oy * win.stride + ky - win.pad;
                        let srow = &splane[oy * sm.w..(oy + 1) * sm.w];
                        let brow = &bplane[by * bg.w..(by + 1) * bg.w];
                        for ox in x0..x1 {
                            acc += srow[ox] * brow[ox * win.stride + kx - win.pad];
                        }
                    }
                    g[(b * win.kh + ky) * win.kw + kx] += acc;
                }
            }
        }
    });
}

/// `c[m x n] = a[m x k] * b[k x n]`, accumulated into `c`.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}
