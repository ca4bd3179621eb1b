#![allow(dead_code)]

use avic_tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Direct nested-loop cross-correlation, NCHW.
pub fn conv2d_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xv = |bi: usize, ci: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.data()[((bi * c + ci) * h + y as usize) * w + xx as usize]
        }
    };
    let mut out = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.map_or(0.0, |b| b.data()[oi]);
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                s += xv(bi, ci, iy, ix) * k.data()[((oi * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution, kernel `[Cin, Cout, kh, kw]`.
pub fn conv_transpose2d_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for ci in 0..cin {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.data()[((bi * cin + ci) * h + y) * w + xx];
                    for co in 0..cout {
                        for i in 0..kh {
                            for j in 0..kw {
                                let oy = (y * stride + i) as isize - pad as isize;
                                let ox = (xx * stride + j) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((bi * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                    v * k.data()[((ci * cout + co) * kh + i) * kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![n, cout, oh, ow], out)
}

/// Naive triple-loop `x·w + b`.
pub fn dense_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, d, k) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            let mut s = b.data()[j];
            for p in 0..d {
                s += x.data()[i * d + p] * w.data()[p * k + j];
            }
            out[i * k + j] = s;
        }
    }
    out
}
