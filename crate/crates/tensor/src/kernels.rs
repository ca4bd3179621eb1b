//! Raw buffer kernels behind the differentiable ops. All loops run in a
//! fixed order so results are bit-reproducible.

use crate::scalar::Scalar;

/// `c = a·b + beta·c` for row-major buffers. `a` is `m×k` (or `k×m` when
/// `a_t`), `b` is `k×n` (or `n×k` when `b_t`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted buffer lengths cover every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided, zero-padded sliding window over an NCHW image.
/// `oh`/`ow` is the window grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    #[cfg(test)]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Window positions `o` whose tap `k` lands inside `[0, limit)`, as a
    /// half-open range over `0..outs`.
    #[inline]
    fn valid(&self, k: usize, limit: usize, outs: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        let hi = if limit + self.pad > k {
            (limit + self.pad - k).div_ceil(s)
        } else {
            0
        };
        (lo.min(outs), hi.min(outs).max(lo.min(outs)))
    }
}

/// Unfolds `x` into a `[c·kh·kw, n·oh·ow]` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Window) -> Vec<T> {
    let cols_n = g.col_cols();
    let plane = g.oh * g.ow;
    let mut cols = vec![T::ZERO; g.col_rows() * cols_n];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            let (oy0, oy1) = g.valid(ki, g.h, g.oh);
            for kj in 0..g.kw {
                let (ox0, ox1) = g.valid(kj, g.w, g.ow);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let base = row * cols_n;
                for b in 0..g.n {
                    let img = (b * g.c + ci) * g.h * g.w;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad;
                        let dst = &mut cols[base + b * plane + oy * g.ow..][..g.ow];
                        let src = &x[img + iy * g.w..][..g.w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kj - g.pad;
                            dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] = src[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds a column matrix back, summing overlaps.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Window) -> Vec<T> {
    let cols_n = g.col_cols();
    let plane = g.oh * g.ow;
    let mut x = vec![T::ZERO; g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            let (oy0, oy1) = g.valid(ki, g.h, g.oh);
            for kj in 0..g.kw {
                let (ox0, ox1) = g.valid(kj, g.w, g.ow);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let base = row * cols_n;
                for b in 0..g.n {
                    let img = (b * g.c + ci) * g.h * g.w;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad;
                        let src = &cols[base + b * plane + oy * g.ow..][..g.ow];
                        let dst = &mut x[img + iy * g.w..][..g.w];
                        for ox in ox0..ox1 {
                            dst[ox * g.stride + kj - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[a, b, r]` → `[b, a, r]`.
pub(crate) fn swap_leading<T: Scalar>(src: &[T], a: usize, b: usize, r: usize) -> Vec<T> {
    let mut dst = vec![T::ZERO; src.len()];
    for i in 0..a {
        for j in 0..b {
            let s = (i * b + j) * r;
            let d = (j * a + i) * r;
            dst[d..d + r].copy_from_slice(&src[s..s + r]);
        }
    }
    dst
}

/// Adds `bias[c]` to every element of channel `c` in an `[n, c, r]` buffer.
pub(crate) fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, r: usize) {
    let c = bias.len();
    for b in 0..n {
        for (ci, &bv) in bias.iter().enumerate() {
            let s = (b * c + ci) * r;
            out[s..s + r].iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Per-channel sums of an `[n, c, r]` buffer.
pub(crate) fn channel_sums<T: Scalar>(g: &[T], n: usize, c: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; c];
    for b in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            let s = (b * c + ci) * r;
            *o += g[s..s + r].iter().copied().sum::<T>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_ranges_match_per_position_checks() {
        for stride in 1..4 {
            for pad in 0..3 {
                for k in 0..5 {
                    for limit in 1..9 {
                        let g = Window {
                            n: 1,
                            c: 1,
                            h: limit,
                            w: limit,
                            kh: 5,
                            kw: 5,
                            stride,
                            pad,
                            oh: 0,
                            ow: 0,
                        };
                        let outs = 10;
                        let (lo, hi) = g.valid(k, limit, outs);
                        let expect: Vec<usize> = (0..outs).filter(|&o| g.source(o, k, limit).is_some()).collect();
                        assert_eq!(
                            (lo..hi).collect::<Vec<_>>(),
                            expect,
                            "stride {stride} pad {pad} k {k} limit {limit}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Window {
            n: 2,
            c: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
            oh: 3,
            ow: 3,
        };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
