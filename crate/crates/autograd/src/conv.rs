//! Convolution kernels on raw slices.
//!
//! Both the direct and the transposed convolution are built from the same
//! `im2col` / `col2im` pair: a transposed convolution is the adjoint of a
//! direct convolution running from its output space back to its input space.

/// Spatial geometry of a 2-D convolution window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent of a direct convolution, or `None` if the kernel does not fit.
    pub fn out_dim(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < k || self.stride == 0 {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }

    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.out_dim(h, self.kh)?, self.out_dim(w, self.kw)?))
    }

    /// Output extent of a transposed convolution.
    pub fn transpose_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ho = ((h - 1) * self.stride + self.kh).checked_sub(2 * self.pad)?;
        let wo = ((w - 1) * self.stride + self.kw).checked_sub(2 * self.pad)?;
        if ho == 0 || wo == 0 {
            return None;
        }
        Some((ho, wo))
    }
}

/// Range of output columns `ox` whose input column `ox * stride + k - pad`
/// falls inside `[0, w)`.
#[inline]
fn valid_range(w: usize, wo: usize, k: usize, g: ConvGeom) -> (usize, usize) {
    let s = g.stride;
    let lo = if g.pad > k { (g.pad - k).div_ceil(s) } else { 0 };
    let hi = if w + g.pad > k { (w + g.pad - k).div_ceil(s).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one image `[c, h, w]` into `[c*kh*kw, ho*wo]`.
pub fn im2col(src: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, col: &mut [f64]) {
    let plane = ho * wo;
    debug_assert_eq!(col.len(), c * g.kh * g.kw * plane);
    let s = g.stride;
    for ch in 0..c {
        let img = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(h, ho, ki, g);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(w, wo, kj, g);
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if oy < ylo || oy >= yhi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let iy = oy * s + ki - g.pad;
                    let src_row = &img[iy * w..(iy + 1) * w];
                    out_row[..xlo].fill(0.0);
                    out_row[xhi..].fill(0.0);
                    let ix0 = xlo * s + kj - g.pad;
                    if s == 1 {
                        out_row[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for (j, v) in out_row[xlo..xhi].iter_mut().enumerate() {
                            *v = src_row[ix0 + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[c*kh*kw, ho*wo]` back into `[c, h, w]`, accumulating.
pub fn col2im(col: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, dst: &mut [f64]) {
    let plane = ho * wo;
    let s = g.stride;
    for ch in 0..c {
        let img = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(h, ho, ki, g);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(w, wo, kj, g);
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in ylo..yhi {
                    let iy = oy * s + ki - g.pad;
                    let img_row = &mut img[iy * w..(iy + 1) * w];
                    let src_row = &src[oy * wo + xlo..oy * wo + xhi];
                    let ix0 = xlo * s + kj - g.pad;
                    if s == 1 {
                        for (d, &v) in img_row[ix0..ix0 + src_row.len()].iter_mut().zip(src_row) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in src_row.iter().enumerate() {
                            img_row[ix0 + j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators keep the summation order fixed while letting the
    // compiler vectorize
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// `out[m, n] += a[m, k] * b[k, n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], out_row);
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[n, k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m, n] += a[k, m]^T * b[k, n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av != 0.0 {
                axpy(av, b_row, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}
