//! Direct 3D convolution kernels.
//!
//! One geometry description serves both directions: `gather` is the plain
//! strided correlation (conv forward / deconv input-gradient), `scatter` is
//! its exact adjoint (deconv forward / conv input-gradient), and
//! `kernel_grad` accumulates the weight gradient shared by both. All three
//! lower onto an im2col buffer and the row-major matmul kernels, so the hot
//! loops run over long contiguous spans regardless of kernel size or stride.

use crate::scalar::Scalar;

/// Geometry of a gather/scatter pair.
///
/// `a` is the scattered side (conv input), `b` the gathered side (conv
/// output): `b_dims[i] == (a_dims[i] + 2*pad - k) / stride + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub a_channels: usize,
    pub b_channels: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub a_dims: [usize; 3],
    pub b_dims: [usize; 3],
}

impl ConvGeom {
    pub fn a_len(&self) -> usize {
        self.a_channels * self.a_dims.iter().product::<usize>()
    }

    pub fn b_len(&self) -> usize {
        self.b_channels * self.b_dims.iter().product::<usize>()
    }

    pub fn kernel_len(&self) -> usize {
        self.b_channels * self.a_channels * self.k * self.k * self.k
    }

    fn col_rows(&self) -> usize {
        self.a_channels * self.k * self.k * self.k
    }

    fn b_spatial(&self) -> usize {
        self.b_dims.iter().product()
    }
}

/// Output extent of a strided correlation: floor((d + 2p - k)/s) + 1.
/// `None` when the kernel does not fit even once.
pub fn conv_out_extent(d: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = d + 2 * pad;
    if span < k {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Output extent of the transposed direction: (d - 1)*s - 2p + k.
pub fn deconv_out_extent(d: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (d - 1) * stride + k;
    if grown <= 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}

/// Valid `ob` range so that `ob*stride - pad + ko` lands inside `[0, a_dim)`.
#[inline]
fn out_range(a_dim: usize, b_dim: usize, ko: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > ko { (pad - ko).div_ceil(stride) } else { 0 };
    let top = a_dim as isize - 1 + pad as isize - ko as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(b_dim);
    (lo.min(hi), hi)
}

/// Unfolds x into col[(a, kk), o] = x[a, o*s - p + kk], zero where the
/// window hangs over the border.
fn im2col<T: Scalar>(x: &[T], col: &mut [T], g: &ConvGeom) {
    let [ad, ah, aw] = g.a_dims;
    let [bd, bh, bw] = g.b_dims;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let b_spatial = g.b_spatial();
    col.iter_mut().for_each(|v| *v = T::zero());
    let mut row = 0usize;
    for a in 0..g.a_channels {
        let xbase = a * ad * ah * aw;
        for kd in 0..k {
            let (od_lo, od_hi) = out_range(ad, bd, kd, s, p);
            for kh in 0..k {
                let (oh_lo, oh_hi) = out_range(ah, bh, kh, s, p);
                for kw in 0..k {
                    let (ow_lo, ow_hi) = out_range(aw, bw, kw, s, p);
                    let crow = &mut col[row * b_spatial..(row + 1) * b_spatial];
                    row += 1;
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let n = ow_hi - ow_lo;
                    for od in od_lo..od_hi {
                        let id = od * s + kd - p;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - p;
                            let coff = (od * bh + oh) * bw + ow_lo;
                            let xoff = xbase + (id * ah + ih) * aw + ow_lo * s + kw - p;
                            if s == 1 {
                                crow[coff..coff + n].copy_from_slice(&x[xoff..xoff + n]);
                            } else {
                                for i in 0..n {
                                    crow[coff + i] = x[xoff + i * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: x[a, o*s - p + kk] += col[(a, kk), o].
fn col2im_add<T: Scalar>(col: &[T], x: &mut [T], g: &ConvGeom) {
    let [ad, ah, aw] = g.a_dims;
    let [bd, bh, bw] = g.b_dims;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let b_spatial = g.b_spatial();
    let mut row = 0usize;
    for a in 0..g.a_channels {
        let xbase = a * ad * ah * aw;
        for kd in 0..k {
            let (od_lo, od_hi) = out_range(ad, bd, kd, s, p);
            for kh in 0..k {
                let (oh_lo, oh_hi) = out_range(ah, bh, kh, s, p);
                for kw in 0..k {
                    let (ow_lo, ow_hi) = out_range(aw, bw, kw, s, p);
                    let crow = &col[row * b_spatial..(row + 1) * b_spatial];
                    row += 1;
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let n = ow_hi - ow_lo;
                    for od in od_lo..od_hi {
                        let id = od * s + kd - p;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - p;
                            let coff = (od * bh + oh) * bw + ow_lo;
                            let xoff = xbase + (id * ah + ih) * aw + ow_lo * s + kw - p;
                            if s == 1 {
                                let xs = &mut x[xoff..xoff + n];
                                let cs = &crow[coff..coff + n];
                                for i in 0..n {
                                    xs[i] += cs[i];
                                }
                            } else {
                                for i in 0..n {
                                    x[xoff + i * s] += crow[coff + i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// y[b, ob] += sum_a sum_kk K[b, a, kk] * x[a, ob*s - p + kk]
pub fn gather<T: Scalar>(x: &[T], kernel: &[T], y: &mut [T], g: &ConvGeom) {
    debug_assert_eq!(x.len(), g.a_len());
    debug_assert_eq!(y.len(), g.b_len());
    debug_assert_eq!(kernel.len(), g.kernel_len());
    let mut col = vec![T::zero(); g.col_rows() * g.b_spatial()];
    im2col(x, &mut col, g);
    // y[B, N] += K[B, A*k^3] · col[A*k^3, N]
    mm_nn(kernel, &col, y, g.b_channels, g.col_rows(), g.b_spatial());
}

/// x[a, ob*s - p + kk] += sum_b sum_kk K[b, a, kk] * y[b, ob] — adjoint of `gather`.
pub fn scatter<T: Scalar>(y: &[T], kernel: &[T], x: &mut [T], g: &ConvGeom) {
    debug_assert_eq!(x.len(), g.a_len());
    debug_assert_eq!(y.len(), g.b_len());
    debug_assert_eq!(kernel.len(), g.kernel_len());
    // col_grad[A*k^3, N] = Kᵀ · y, then fold back into x.
    let mut col = vec![T::zero(); g.col_rows() * g.b_spatial()];
    mm_tn(kernel, y, &mut col, g.col_rows(), g.b_channels, g.b_spatial());
    col2im_add(&col, x, g);
}

/// dK[b, a, kk] += sum_ob y[b, ob] * x[a, ob*s - p + kk]
pub fn kernel_grad<T: Scalar>(x: &[T], y: &[T], dk: &mut [T], g: &ConvGeom) {
    debug_assert_eq!(x.len(), g.a_len());
    debug_assert_eq!(y.len(), g.b_len());
    debug_assert_eq!(dk.len(), g.kernel_len());
    let mut col = vec![T::zero(); g.col_rows() * g.b_spatial()];
    im2col(x, &mut col, g);
    // dK[B, A*k^3] += y[B, N] · colᵀ
    mm_nt(y, &col, dk, g.b_channels, g.b_spatial(), g.col_rows());
}

/// out[m, n] += A[m, k] · B[k, n]
pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m, k2] += A[m, n2] · Bᵀ where B is [k2, n2].
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n2: usize, k2: usize) {
    for i in 0..m {
        let arow = &a[i * n2..(i + 1) * n2];
        for j in 0..k2 {
            let brow = &b[j * n2..(j + 1) * n2];
            // Four partial sums break the FP addition latency chain.
            let mut acc = [T::zero(); 4];
            let mut l = 0;
            while l + 4 <= n2 {
                acc[0] += arow[l] * brow[l];
                acc[1] += arow[l + 1] * brow[l + 1];
                acc[2] += arow[l + 2] * brow[l + 2];
                acc[3] += arow[l + 3] * brow[l + 3];
                l += 4;
            }
            while l < n2 {
                acc[0] += arow[l] * brow[l];
                l += 1;
            }
            out[i * k2 + j] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
        }
    }
}

/// out[k2, n2] += Aᵀ · B where A is [m2, k2], B is [m2, n2].
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k2: usize, m2: usize, n2: usize) {
    for l in 0..m2 {
        let arow = &a[l * k2..(l + 1) * k2];
        let brow = &b[l * n2..(l + 1) * n2];
        for i in 0..k2 {
            let av = arow[i];
            let orow = &mut out[i * n2..(i + 1) * n2];
            for j in 0..n2 {
                orow[j] += av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_matches_formula() {
        assert_eq!(conv_out_extent(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_extent(4, 3, 1, 1), Some(4));
        assert_eq!(conv_out_extent(2, 3, 1, 0), None);
        assert_eq!(deconv_out_extent(5, 4, 2, 1), Some(10));
        assert_eq!(deconv_out_extent(5, 1, 1, 0), Some(5));
    }

    #[test]
    fn out_range_respects_bounds() {
        // Every (lo, hi) pair must map strictly inside the input.
        for a_dim in 1..8 {
            for k in 1..5 {
                for s in 1..3 {
                    for p in 0..3 {
                        let Some(b_dim) = conv_out_extent(a_dim, k, s, p) else {
                            continue;
                        };
                        for ko in 0..k {
                            let (lo, hi) = out_range(a_dim, b_dim, ko, s, p);
                            for ob in lo..hi {
                                let i = ob as isize * s as isize - p as isize + ko as isize;
                                assert!(i >= 0 && (i as usize) < a_dim);
                            }
                            // Everything outside [lo, hi) must be out of bounds.
                            for ob in 0..b_dim {
                                if ob < lo || ob >= hi {
                                    let i =
                                        ob as isize * s as isize - p as isize + ko as isize;
                                    assert!(i < 0 || i as usize >= a_dim);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> over random data and geometries.
        let mut state = 0x243F6A8885A308D3u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for (k, s, p) in [(3usize, 1usize, 1usize), (4, 2, 1), (2, 2, 0), (1, 1, 0)] {
            let g = ConvGeom {
                a_channels: 2,
                b_channels: 3,
                k,
                stride: s,
                pad: p,
                a_dims: [6, 4, 8],
                b_dims: [
                    conv_out_extent(6, k, s, p).unwrap(),
                    conv_out_extent(4, k, s, p).unwrap(),
                    conv_out_extent(8, k, s, p).unwrap(),
                ],
            };
            let x: Vec<f64> = (0..g.a_len()).map(|_| next()).collect();
            let c: Vec<f64> = (0..g.col_rows() * g.b_spatial()).map(|_| next()).collect();
            let mut cx = vec![0.0; c.len()];
            im2col(&x, &mut cx, &g);
            let lhs: f64 = cx.iter().zip(&c).map(|(a, b)| a * b).sum();
            let mut xc = vec![0.0; x.len()];
            col2im_add(&c, &mut xc, &g);
            let rhs: f64 = xc.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "k={k} s={s} p={p}: {lhs} vs {rhs}");
        }
    }
}
