//! Low-level compute kernels: matrix products, im2col/col2im, resampling.
//!
//! All loops accumulate in a fixed row-major order so results are
//! bit-reproducible for a given build on a given machine. The matrix kernels
//! dispatch once to an AVX2+FMA path when the CPU supports it; the fallback
//! uses plain mul+add. Both paths keep the same summation order.

use crate::tensor::Real;
use std::sync::OnceLock;

/// Whether to use the fused-multiply-add kernels. Resolved once per process.
fn use_fma() -> bool {
    static FMA: OnceLock<bool> = OnceLock::new();
    *FMA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            false
        }
    })
}

const COL_TILE: usize = 256;

// ---------------------------------------------------------------------------
// C += A (m×k) · B (k×n), all row-major.
// ---------------------------------------------------------------------------

#[inline(always)]
fn matmul_body<T: Real, const FMA: bool>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_TILE).min(n);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let c_row = &mut c[i * n + j0..i * n + j1];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_row = &b[kk * n + j0..kk * n + j1];
                if FMA {
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv = aik.mul_add(bv, *cv);
                    }
                } else {
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += aik * bv;
                    }
                }
            }
        }
        j0 = j1;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_fma<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    matmul_body::<T, true>(a, b, c, m, k, n);
}

pub fn matmul<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if use_fma() {
        // Safety: feature presence checked by use_fma().
        unsafe { matmul_fma(a, b, c, m, k, n) };
        return;
    }
    matmul_body::<T, false>(a, b, c, m, k, n);
}

// ---------------------------------------------------------------------------
// C += A (m×k) · Bᵀ where B is (n×k) row-major: C[i,j] = dot(A[i,:], B[j,:]).
// ---------------------------------------------------------------------------

#[inline(always)]
fn matmul_nt_body<T: Real, const FMA: bool>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            // Four independent accumulators so the reduction pipelines.
            let mut acc = [T::ZERO; 4];
            let chunks = k / 4;
            if FMA {
                for t in 0..chunks {
                    let p = t * 4;
                    acc[0] = a_row[p].mul_add(b_row[p], acc[0]);
                    acc[1] = a_row[p + 1].mul_add(b_row[p + 1], acc[1]);
                    acc[2] = a_row[p + 2].mul_add(b_row[p + 2], acc[2]);
                    acc[3] = a_row[p + 3].mul_add(b_row[p + 3], acc[3]);
                }
                for p in chunks * 4..k {
                    acc[0] = a_row[p].mul_add(b_row[p], acc[0]);
                }
            } else {
                for t in 0..chunks {
                    let p = t * 4;
                    acc[0] += a_row[p] * b_row[p];
                    acc[1] += a_row[p + 1] * b_row[p + 1];
                    acc[2] += a_row[p + 2] * b_row[p + 2];
                    acc[3] += a_row[p + 3] * b_row[p + 3];
                }
                for p in chunks * 4..k {
                    acc[0] += a_row[p] * b_row[p];
                }
            }
            c[i * n + j] += ((acc[0] + acc[1]) + (acc[2] + acc[3]));
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_nt_fma<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    matmul_nt_body::<T, true>(a, b, c, m, k, n);
}

pub fn matmul_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if use_fma() {
        unsafe { matmul_nt_fma(a, b, c, m, k, n) };
        return;
    }
    matmul_nt_body::<T, false>(a, b, c, m, k, n);
}

// ---------------------------------------------------------------------------
// C += Aᵀ · B where A is (k×m) row-major: C[i,j] = Σ_kk A[kk,i]·B[kk,j].
// ---------------------------------------------------------------------------

#[inline(always)]
fn matmul_tn_body<T: Real, const FMA: bool>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            if FMA {
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = aki.mul_add(bv, *cv);
                }
            } else {
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += aki * bv;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_tn_fma<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    matmul_tn_body::<T, true>(a, b, c, m, k, n);
}

pub fn matmul_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if use_fma() {
        unsafe { matmul_tn_fma(a, b, c, m, k, n) };
        return;
    }
    matmul_tn_body::<T, false>(a, b, c, m, k, n);
}

// ---------------------------------------------------------------------------
// im2col / col2im for one sample, zero padding.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
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

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
        }
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfold one C×H×W sample into a (C·kh·kw)×(H'·W') patch matrix.
/// `out` must be zeroed by the caller (padding positions stay zero).
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, out: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c_in {
        let x_ch = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out_row = &mut out[row * cols..(row + 1) * cols];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let x_row = &x_ch[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let dst = &mut out_row[oh * g.w_out..(oh + 1) * g.w_out];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            *d = x_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Like [`im2col`] but produces the transposed (H'·W')×(C·kh·kw) matrix,
/// which turns the weight-gradient product into a plain row-major matmul.
pub fn im2col_t<T: Real>(x: &[T], g: &ConvGeom, out: &mut [T]) {
    let rows = g.rows();
    for c in 0..g.c_in {
        let x_ch = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let col = (c * g.kh + ki) * g.kw + kj;
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let x_row = &x_ch[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            out[(oh * g.w_out + ow) * rows + col] = x_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the C×H×W input gradient
/// (scatter-add, fixed iteration order).
pub fn col2im<T: Real>(cols_grad: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c_in {
        let dx_ch = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols_grad[row * cols..(row + 1) * cols];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dx_row = &mut dx_ch[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let src = &src_row[oh * g.w_out..(oh + 1) * g.w_out];
                    for (ow, &s) in src.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dx_row[iw as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Bilinear resampling (pixel-center convention, clamped edges).
// ---------------------------------------------------------------------------

pub fn bilinear_resize<T: Real>(src: &[T], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<T> {
    assert_eq!(src.len(), sh * sw);
    let mut dst = vec![T::ZERO; dh * dw];
    let sy = sh as f64 / dh as f64;
    let sx = sw as f64 / dw as f64;
    for dy in 0..dh {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = T::from_f64(fy - y0 as f64);
        for dx in 0..dw {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = T::from_f64(fx - x0 as f64);
            let one = T::ONE;
            let v00 = src[y0 * sw + x0];
            let v01 = src[y0 * sw + x1];
            let v10 = src[y1 * sw + x0];
            let v11 = src[y1 * sw + x1];
            let top = v00 * (one - wx) + v01 * wx;
            let bot = v10 * (one - wx) + v11 * wx;
            dst[dy * dw + dx] = top * (one - wy) + bot * wy;
        }
    }
    dst
}
