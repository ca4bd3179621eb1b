//! Differentiable operations. Every op validates shapes, computes its
//! forward value eagerly and records itself on the tape of its inputs.

use crate::error::{Result, TensorError};
use crate::kernels::{self, Window};
use crate::scalar::Scalar;
use crate::tape::{Op, Var};
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    a.tape.check_owner(b)?;
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{sa:?} vs {sb:?}"),
        });
    }
    Ok(())
}

fn rank_is<T: Scalar>(op: &'static str, v: &Var<'_, T>, rank: usize) -> Result<Vec<usize>> {
    let s = v.shape();
    if s.len() != rank {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected rank {rank}, got {s:?}"),
        });
    }
    Ok(s)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(&self, op: &'static str, other: &Var<'t, T>, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var<'t, T>> {
        same_shape(op, self, other)?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.push(op, Tensor::from_parts(a.shape().to_vec(), data), node)
    }

    fn unary(&self, op: &'static str, f: impl Fn(T) -> T, node: Op<T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        self.tape.push(op, Tensor::from_parts(a.shape().to_vec(), data), node)
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary("add", other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary("sub", other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary("mul", other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn neg(&self) -> Result<Var<'t, T>> {
        self.unary("neg", |a| -a, Op::Neg(self.id))
    }

    pub fn scale(&self, s: T) -> Result<Var<'t, T>> {
        self.unary("scale", |a| a * s, Op::Scale(self.id, s))
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary("relu", |a| if a > T::ZERO { a } else { T::ZERO }, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary(
            "sigmoid",
            |a| {
                if a >= T::ZERO {
                    T::ONE / (T::ONE + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (T::ONE + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn tanh(&self) -> Result<Var<'t, T>> {
        self.unary("tanh", |a| a.tanh(), Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t, T>> {
        self.unary("exp", |a| a.exp(), Op::Exp(self.id))
    }

    /// Elementwise clamp into `[lo, hi]`. The gradient passes wherever the
    /// input lies inside the closed interval and is zero where it was cut.
    pub fn clamp(&self, lo: T, hi: T) -> Result<Var<'t, T>> {
        if lo > hi {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                detail: format!("lo {lo} > hi {hi}"),
            });
        }
        self.unary("clamp", |a| a.max(lo).min(hi), Op::Clamp { input: self.id, lo, hi })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape.to_vec())?;
        self.tape.push("reshape", v, Op::Reshape(self.id))
    }

    /// `[N, ...]` → `[N, prod(...)]`.
    pub fn flatten(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "flatten",
                detail: "rank-0 input".into(),
            });
        }
        let rest: usize = s[1..].iter().product();
        self.reshape(&[s[0], rest])
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let s = self.value().sum();
        self.tape
            .push("sum", Tensor::from_parts(vec![], vec![s]), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let v = self.value();
        let s = v.sum() / T::from_f64(v.numel() as f64);
        self.tape
            .push("mean", Tensor::from_parts(vec![], vec![s]), Op::Mean(self.id))
    }
}

/// `input · weight + bias` for `input: [N, D]`, `weight: [D, K]`, `bias: [K]`.
pub fn dense<'t, T: Scalar>(input: &Var<'t, T>, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
    let tape = input.tape;
    tape.check_owner(weight)?;
    let xs = rank_is("dense", input, 2)?;
    let ws = rank_is("dense", weight, 2)?;
    if xs[1] != ws[0] {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            detail: format!("input {xs:?} vs weight {ws:?}"),
        });
    }
    let (n, d, k) = (xs[0], xs[1], ws[1]);
    let mut out = vec![T::ZERO; n * k];
    if let Some(b) = bias {
        tape.check_owner(b)?;
        if b.shape() != [k] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                detail: format!("bias {:?} vs {k} outputs", b.shape()),
            });
        }
        let bv = b.value();
        for row in out.chunks_mut(k) {
            row.copy_from_slice(bv.data());
        }
    }
    let beta = if bias.is_some() { T::ONE } else { T::ZERO };
    kernels::matmul(
        n,
        d,
        k,
        input.value().data(),
        false,
        weight.value().data(),
        false,
        beta,
        &mut out,
    );
    tape.push(
        "dense",
        Tensor::from_parts(vec![n, k], out),
        Op::Dense {
            input: input.id,
            weight: weight.id,
            bias: bias.map(|b| b.id),
        },
    )
}

fn window_len(op: &'static str, size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            detail: "stride must be positive".into(),
        });
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(TensorError::InvalidArgument {
            op,
            detail: format!("kernel {kernel} larger than padded input {padded}"),
        });
    }
    if (padded - kernel) % stride != 0 {
        return Err(TensorError::NonIntegralOutput {
            op,
            size,
            kernel,
            padding,
            stride,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Var<'_, T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("bias {:?} vs {channels} channels", b.shape()),
            });
        }
    }
    Ok(())
}

/// Cross-correlation of `input: [N, C, H, W]` with `kernel: [O, C, kh, kw]`.
/// The output size must be integral: `(H + 2·padding − kh)` divisible by `stride`.
pub fn conv2d<'t, T: Scalar>(
    input: &Var<'t, T>,
    kernel: &Var<'t, T>,
    bias: Option<&Var<'t, T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let tape = input.tape;
    tape.check_owner(kernel)?;
    if let Some(b) = bias {
        tape.check_owner(b)?;
    }
    let xs = rank_is("conv2d", input, 4)?;
    let ks = rank_is("conv2d", kernel, 4)?;
    if xs[1] != ks[1] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input channels {} vs kernel channels {}", xs[1], ks[1]),
        });
    }
    check_bias("conv2d", bias, ks[0])?;
    let oh = window_len("conv2d", xs[2], ks[2], stride, padding)?;
    let ow = window_len("conv2d", xs[3], ks[3], stride, padding)?;
    let window = Window {
        n: xs[0],
        c: xs[1],
        h: xs[2],
        w: xs[3],
        kh: ks[2],
        kw: ks[3],
        stride,
        pad: padding,
        oh,
        ow,
    };
    let o = ks[0];
    let cols = kernels::im2col(input.value().data(), &window);
    let mut tmp = vec![T::ZERO; o * window.col_cols()];
    kernels::matmul(
        o,
        window.col_rows(),
        window.col_cols(),
        kernel.value().data(),
        false,
        &cols,
        false,
        T::ZERO,
        &mut tmp,
    );
    let mut out = kernels::swap_leading(&tmp, o, window.n, oh * ow);
    if let Some(b) = bias {
        kernels::add_channel_bias(&mut out, b.value().data(), window.n, oh * ow);
    }
    tape.push(
        "conv2d",
        Tensor::from_parts(vec![window.n, o, oh, ow], out),
        Op::Conv2d {
            input: input.id,
            kernel: kernel.id,
            bias: bias.map(|b| b.id),
            window,
            cols,
        },
    )
}

/// Transposed convolution (the adjoint of [`conv2d`] in its input) of
/// `input: [N, Cin, H, W]` with `kernel: [Cin, Cout, kh, kw]`. Output spatial
/// size is `(H − 1)·stride − 2·padding + kh`.
pub fn conv_transpose2d<'t, T: Scalar>(
    input: &Var<'t, T>,
    kernel: &Var<'t, T>,
    bias: Option<&Var<'t, T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let tape = input.tape;
    tape.check_owner(kernel)?;
    if let Some(b) = bias {
        tape.check_owner(b)?;
    }
    let xs = rank_is("conv_transpose2d", input, 4)?;
    let ks = rank_is("conv_transpose2d", kernel, 4)?;
    if xs[1] != ks[0] {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("input channels {} vs kernel inputs {}", xs[1], ks[0]),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv_transpose2d",
            detail: "stride must be positive".into(),
        });
    }
    let cout = ks[1];
    check_bias("conv_transpose2d", bias, cout)?;
    let out_len = |size: usize, k: usize| -> Result<usize> {
        let full = (size - 1) * stride + k;
        if full <= 2 * padding {
            return Err(TensorError::InvalidArgument {
                op: "conv_transpose2d",
                detail: format!("padding {padding} leaves no output"),
            });
        }
        Ok(full - 2 * padding)
    };
    let oh = out_len(xs[2], ks[2])?;
    let ow = out_len(xs[3], ks[3])?;
    let (n, cin) = (xs[0], xs[1]);
    let window = Window {
        n,
        c: cout,
        h: oh,
        w: ow,
        kh: ks[2],
        kw: ks[3],
        stride,
        pad: padding,
        oh: xs[2],
        ow: xs[3],
    };
    let input_t = kernels::swap_leading(input.value().data(), n, cin, xs[2] * xs[3]);
    let mut cols = vec![T::ZERO; window.col_rows() * window.col_cols()];
    kernels::matmul(
        window.col_rows(),
        cin,
        window.col_cols(),
        kernel.value().data(),
        true,
        &input_t,
        false,
        T::ZERO,
        &mut cols,
    );
    let mut out = kernels::col2im(&cols, &window);
    if let Some(b) = bias {
        kernels::add_channel_bias(&mut out, b.value().data(), n, oh * ow);
    }
    tape.push(
        "conv_transpose2d",
        Tensor::from_parts(vec![n, cout, oh, ow], out),
        Op::ConvTranspose2d {
            input: input.id,
            kernel: kernel.id,
            bias: bias.map(|b| b.id),
            window,
            cin,
            input_t,
        },
    )
}

/// Non-overlapping `size×size` max pooling; trailing rows/columns that do
/// not fill a window are dropped. Ties resolve to the first index.
pub fn max_pool2d<'t, T: Scalar>(input: &Var<'t, T>, size: usize) -> Result<Var<'t, T>> {
    let s = rank_is("max_pool2d", input, 4)?;
    if size == 0 || s[2] < size || s[3] < size {
        return Err(TensorError::InvalidArgument {
            op: "max_pool2d",
            detail: format!("window {size} for input {s:?}"),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / size, w / size);
    let x = input.value();
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    input.tape.push(
        "max_pool2d",
        Tensor::from_parts(vec![n, c, oh, ow], out),
        Op::MaxPool2d {
            input: input.id,
            argmax,
        },
    )
}

/// Mean over the spatial axes: `[N, C, H, W]` → `[N, C]`.
pub fn global_avg_pool<'t, T: Scalar>(input: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = rank_is("global_avg_pool", input, 4)?;
    let plane = s[2] * s[3];
    let inv = T::ONE / T::from_f64(plane as f64);
    let x = input.value();
    let out = x
        .data()
        .chunks(plane)
        .map(|c| c.iter().copied().sum::<T>() * inv)
        .collect();
    input.tape.push(
        "global_avg_pool",
        Tensor::from_parts(vec![s[0], s[1]], out),
        Op::GlobalAvgPool(input.id),
    )
}

/// Batch mean of `−log softmax(logits)[label]`, stabilized by subtracting
/// the row maximum.
pub fn softmax_cross_entropy<'t, T: Scalar>(logits: &Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let s = rank_is("softmax_cross_entropy", logits, 2)?;
    let (n, k) = (s[0], s[1]);
    if labels.is_empty() {
        return Err(TensorError::EmptyBatch {
            op: "softmax_cross_entropy",
        });
    }
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            detail: format!("{} labels for {n} rows", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::LabelOutOfRange { label: bad, classes: k });
    }
    let x = logits.value();
    let mut probs = Vec::with_capacity(n * k);
    let mut total = T::ZERO;
    for (row, &label) in x.data().chunks(k).zip(labels) {
        let m = row.iter().copied().fold(row[0], T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        total += z.ln() - (row[label] - m);
        probs.extend(exps.iter().map(|&e| e / z));
    }
    let loss = total / T::from_f64(n as f64);
    logits.tape.push(
        "softmax_cross_entropy",
        Tensor::from_parts(vec![], vec![loss]),
        Op::SoftmaxCrossEntropy {
            logits: logits.id,
            labels: labels.to_vec(),
            probs,
        },
    )
}

/// Batch mean of `½·Σ(x − y)²` over all non-batch elements.
pub fn half_sse<'t, T: Scalar>(x: &Var<'t, T>, y: &Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("half_sse", x, y)?;
    let s = x.shape();
    if s.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "half_sse",
            detail: "inputs need a batch axis".into(),
        });
    }
    let (a, b) = (x.value(), y.value());
    let sse: T = a.data().iter().zip(b.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
    let loss = T::from_f64(0.5) * sse / T::from_f64(s[0] as f64);
    x.tape.push(
        "half_sse",
        Tensor::from_parts(vec![], vec![loss]),
        Op::HalfSse(x.id, y.id),
    )
}

/// KL divergence of `N(mu, exp(logvar))` from the standard normal, summed
/// over latent dimensions and averaged over the batch.
pub fn kl_diag_gaussian<'t, T: Scalar>(mu: &Var<'t, T>, logvar: &Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("kl_diag_gaussian", mu, logvar)?;
    let s = mu.shape();
    if s.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "kl_diag_gaussian",
            detail: "inputs need a batch axis".into(),
        });
    }
    let (m, lv) = (mu.value(), logvar.value());
    let sum: T = m
        .data()
        .iter()
        .zip(lv.data())
        .map(|(&u, &l)| u * u + l.exp() - l - T::ONE)
        .sum();
    let loss = T::from_f64(0.5) * sum / T::from_f64(s[0] as f64);
    mu.tape.push(
        "kl_diag_gaussian",
        Tensor::from_parts(vec![], vec![loss]),
        Op::KlDiagGaussian {
            mu: mu.id,
            logvar: logvar.id,
        },
    )
}
