//! im2col / col2im kernels backing the convolution op.

use crate::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && k >= 1);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { c, h, w, k, stride, pad, ho, wo }
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, unpadded: the input image already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` for kernel offset `kx` whose source column is in range.
    #[inline]
    fn valid_range(&self, kofs: usize, size_in: usize, size_out: usize) -> (usize, usize) {
        // source = o*stride + kofs - pad must lie in [0, size_in)
        let lo = if kofs >= self.pad { 0 } else { (self.pad - kofs).div_ceil(self.stride) };
        let hi_num = size_in + self.pad;
        let hi = if hi_num > kofs { ((hi_num - kofs - 1) / self.stride + 1).min(size_out) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Unfold one `[c, h, w]` image into `[c*k*k, ho*wo]`.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (hw_out, k) = (g.col_cols(), g.k);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    out_row[..ox_lo].fill(T::zero());
                    out_row[ox_hi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        out_row[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            out_row[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `[c*k*k, ho*wo]` back into `[c, h, w]`.
pub(crate) fn col2im<T: Float>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (hw_out, k) = (g.col_cols(), g.k);
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        for (d, v) in dst[ix0..ix0 + (ox_hi - ox_lo)].iter_mut().zip(&s[ox_lo..ox_hi]) {
                            *d += *v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox * g.stride + kx - g.pad] += s[ox];
                        }
                    }
                }
            }
        }
    }
}
