use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Samples per work unit in the batched convolution passes. Fixed so that
/// reductions over the batch happen in the same order on any thread count.
const CONV_CHUNK: usize = 8;

/// Output extent of a convolution along one axis, or `None` if the kernel
/// does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn resolve<T: Scalar>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        input.expect_rank(4, "conv2d input")?;
        kernel.expect_rank(4, "conv2d kernel")?;
        let [_, channels, height, width] = input.shape()[..] else { unreachable!() };
        let [filters, kc, kh, kw] = kernel.shape()[..] else { unreachable!() };
        if kc != channels {
            return Err(Error::shape(format!(
                "conv2d: input has {channels} channels, kernel expects {kc}"
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!("conv2d: non-square kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be >= 1"));
        }
        let out_h = conv_output_size(height, kh, stride, padding);
        let out_w = conv_output_size(width, kw, stride, padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh} does not fit {height}x{width} with padding {padding}"
            )));
        };
        Ok(Self {
            channels,
            height,
            width,
            filters,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn sample_in(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn sample_out(&self) -> usize {
        self.filters * self.positions()
    }

    /// Input row for output row `oy` and kernel row `ki`, if inside the image.
    #[inline]
    fn source_row(&self, oy: usize, ki: usize) -> Option<usize> {
        (oy * self.stride + ki)
            .checked_sub(self.padding)
            .filter(|&y| y < self.height)
    }

    /// Output columns `lo..hi` whose tap `kj` lands inside the image; the
    /// source column of `ox` is `ox * stride + kj - padding`.
    #[inline]
    fn valid_columns(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.padding.saturating_sub(kj).div_ceil(s).min(self.out_w);
        let limit = self.width + self.padding;
        let hi = if limit > kj { (limit - kj).div_ceil(s).min(self.out_w) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Unfold one sample into a `patch_len x positions` matrix.
    fn im2col<T: Scalar>(&self, sample: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let p = self.positions();
        for c in 0..self.channels {
            let plane = &sample[c * self.height * self.width..][..self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * p..][..p];
                    let (lo, hi) = self.valid_columns(kj);
                    for (oy, out) in row.chunks_mut(self.out_w).enumerate() {
                        let Some(y) = self.source_row(oy, ki) else {
                            out.fill(T::zero());
                            continue;
                        };
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        let src = &plane[y * self.width..][..self.width];
                        for (ox, v) in out[lo..hi].iter_mut().enumerate() {
                            *v = src[(ox + lo) * self.stride + kj - self.padding];
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a `patch_len x positions` matrix back onto one sample.
    fn col2im<T: Scalar>(&self, cols: &[T], sample: &mut [T]) {
        let k = self.kernel;
        let p = self.positions();
        for c in 0..self.channels {
            let plane = &mut sample[c * self.height * self.width..][..self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * p..][..p];
                    let (lo, hi) = self.valid_columns(kj);
                    for (oy, src) in row.chunks(self.out_w).enumerate() {
                        let Some(y) = self.source_row(oy, ki) else { continue };
                        let dst = &mut plane[y * self.width..][..self.width];
                        for (ox, &v) in src[lo..hi].iter().enumerate() {
                            let x = (ox + lo) * self.stride + kj - self.padding;
                            dst[x] = dst[x] + v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `input [N,C,H,W]` with `kernel [F,C,k,k]` plus a
/// per-filter bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::resolve(input, kernel, stride, padding)?;
    if bias.shape() != [g.filters] {
        return Err(Error::shape(format!(
            "conv2d: bias shape {:?}, expected [{}]",
            bias.shape(),
            g.filters
        )));
    }
    let n = input.shape()[0];
    let mut out = vec![T::zero(); n * g.sample_out()];
    let (r, p) = (g.patch_len(), g.positions());

    out.par_chunks_mut(g.sample_out())
        .zip(input.data().par_chunks(g.sample_in()))
        .for_each_init(
            || vec![T::zero(); r * p],
            |cols, (dst, src)| {
                g.im2col(src, cols);
                for (f, row) in dst.chunks_mut(p).enumerate() {
                    row.fill(bias[f]);
                }
                T::gemm(
                    g.filters,
                    r,
                    p,
                    T::one(),
                    kernel.data(),
                    (r as isize, 1),
                    cols,
                    (p as isize, 1),
                    T::one(),
                    dst,
                    (p as isize, 1),
                );
            },
        );
    Tensor::new(vec![n, g.filters, g.out_h, g.out_w], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Exact gradients of [`conv2d_forward`] with respect to its input, kernel and
/// bias, given the upstream gradient and the forward input.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let (input_grad, kernel, bias) = conv_backward(grad_out, input, kernel, stride, padding, true)?;
    Ok(ConvGrads {
        input: input_grad.expect("requested"),
        kernel,
        bias,
    })
}

/// Kernel and bias gradients only, for a layer whose input needs none.
pub fn conv2d_backward_params<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, kernel, bias) = conv_backward(grad_out, input, kernel, stride, padding, false)?;
    Ok((kernel, bias))
}

#[allow(clippy::type_complexity)]
fn conv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::resolve(input, kernel, stride, padding)?;
    let n = input.shape()[0];
    let expected = [n, g.filters, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv2d backward: grad_out shape {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let (r, p, f) = (g.patch_len(), g.positions(), g.filters);
    let mut grad_input = vec![T::zero(); if want_input { input.numel() } else { 0 }];
    let chunks = input.shape()[0].div_ceil(CONV_CHUNK);
    let targets: Vec<Option<&mut [T]>> = if want_input {
        grad_input.chunks_mut(CONV_CHUNK * g.sample_in()).map(Some).collect()
    } else {
        (0..chunks).map(|_| None).collect()
    };
    let partials: Vec<(Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(CONV_CHUNK * g.sample_in())
        .zip(grad_out.data().par_chunks(CONV_CHUNK * g.sample_out()))
        .zip(targets)
        .map(|((xin, gout), mut gin)| {
            let mut cols = vec![T::zero(); r * p];
            let mut gk = vec![T::zero(); f * r];
            let mut gb = vec![T::zero(); f];
            for (s, (x, go)) in xin
                .chunks(g.sample_in())
                .zip(gout.chunks(g.sample_out()))
                .enumerate()
            {
                for (b, row) in gb.iter_mut().zip(go.chunks(p)) {
                    *b = row.iter().fold(*b, |acc, &v| acc + v);
                }
                g.im2col(x, &mut cols);
                // dK += G . cols^T
                T::gemm(
                    f,
                    p,
                    r,
                    T::one(),
                    go,
                    (p as isize, 1),
                    &cols,
                    (1, p as isize),
                    T::one(),
                    &mut gk,
                    (r as isize, 1),
                );
                let Some(gin) = gin.as_deref_mut() else { continue };
                // dcols = K^T . G
                T::gemm(
                    r,
                    f,
                    p,
                    T::one(),
                    kernel.data(),
                    (1, r as isize),
                    go,
                    (p as isize, 1),
                    T::zero(),
                    &mut cols,
                    (p as isize, 1),
                );
                g.col2im(&cols, &mut gin[s * g.sample_in()..][..g.sample_in()]);
            }
            (gk, gb)
        })
        .collect();

    let mut grad_kernel = vec![T::zero(); f * r];
    let mut grad_bias = vec![T::zero(); f];
    for (gk, gb) in &partials {
        for (acc, &v) in grad_kernel.iter_mut().zip(gk) {
            *acc = *acc + v;
        }
        for (acc, &v) in grad_bias.iter_mut().zip(gb) {
            *acc = *acc + v;
        }
    }

    let grad_input = if want_input {
        Some(Tensor::new(input.shape().to_vec(), grad_input)?)
    } else {
        None
    };
    Ok((
        grad_input,
        Tensor::new(kernel.shape().to_vec(), grad_kernel)?,
        Tensor::new(vec![f], grad_bias)?,
    ))
}

/// Elementwise `x` for positive inputs and `slope * x` otherwise.
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { slope * v })
}

/// Backward of [`leaky_relu`]; the subgradient at zero is `slope`.
pub fn leaky_relu_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    slope: T,
) -> Result<Tensor<T>> {
    if grad_out.shape() != x.shape() {
        return Err(Error::shape(format!(
            "leaky_relu backward: grad {:?} vs input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let mut grad = grad_out.clone();
    leaky_relu_backward_in_place(&mut grad, x, slope)?;
    Ok(grad)
}

/// [`leaky_relu_backward`] overwriting the upstream gradient.
pub fn leaky_relu_backward_in_place<T: Scalar>(grad: &mut Tensor<T>, x: &Tensor<T>, slope: T) -> Result<()> {
    if grad.shape() != x.shape() {
        return Err(Error::shape(format!(
            "leaky_relu backward: grad {:?} vs input {:?}",
            grad.shape(),
            x.shape()
        )));
    }
    for (g, &v) in grad.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = slope * *g;
        }
    }
    Ok(())
}

fn linear_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    input.expect_rank(2, "linear input")?;
    weight.expect_rank(2, "linear weight")?;
    let (n, d_in) = (input.shape()[0], input.shape()[1]);
    let (d_out, w_in) = (weight.shape()[0], weight.shape()[1]);
    if d_in != w_in {
        return Err(Error::shape(format!(
            "linear: input width {d_in} does not match weight width {w_in}"
        )));
    }
    Ok((n, d_in, d_out))
}

/// `input [N,D_in] . weight[D_out,D_in]^T + bias`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d_in, d_out) = linear_dims(input, weight)?;
    if bias.shape() != [d_out] {
        return Err(Error::shape(format!(
            "linear: bias shape {:?}, expected [{d_out}]",
            bias.shape()
        )));
    }
    let mut out: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    T::gemm(
        n,
        d_in,
        d_out,
        T::one(),
        input.data(),
        (d_in as isize, 1),
        weight.data(),
        (1, d_in as isize),
        T::one(),
        &mut out,
        (d_out as isize, 1),
    );
    Tensor::new(vec![n, d_out], out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, d_in, d_out) = linear_dims(input, weight)?;
    if grad_out.shape() != [n, d_out] {
        return Err(Error::shape(format!(
            "linear backward: grad shape {:?}, expected [{n}, {d_out}]",
            grad_out.shape()
        )));
    }
    let mut gi = vec![T::zero(); n * d_in];
    T::gemm(
        n,
        d_out,
        d_in,
        T::one(),
        grad_out.data(),
        (d_out as isize, 1),
        weight.data(),
        (d_in as isize, 1),
        T::zero(),
        &mut gi,
        (d_in as isize, 1),
    );
    let mut gw = vec![T::zero(); d_out * d_in];
    T::gemm(
        d_out,
        n,
        d_in,
        T::one(),
        grad_out.data(),
        (1, d_out as isize),
        input.data(),
        (d_in as isize, 1),
        T::zero(),
        &mut gw,
        (d_in as isize, 1),
    );
    let mut gb = vec![T::zero(); d_out];
    for row in grad_out.data().chunks(d_out) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(vec![n, d_in], gi)?,
        weight: Tensor::new(vec![d_out, d_in], gw)?,
        bias: Tensor::new(vec![d_out], gb)?,
    })
}

fn same_matrix_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    a.expect_rank(2, "pairwise distance")?;
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "pairwise distance: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// `y[i][j] = |a_i - b_j|^2` for row vectors of two equally shaped matrices.
pub fn pairwise_sq_dist<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = same_matrix_shape(a, b)?;
    let mut y = Vec::with_capacity(n * n);
    for ai in a.data().chunks(d) {
        for bj in b.data().chunks(d) {
            y.push(ai.iter().zip(bj).fold(T::zero(), |acc, (&u, &v)| {
                let diff = u - v;
                acc + diff * diff
            }));
        }
    }
    Tensor::new(vec![n, n], y)
}

/// Gradients of `sum(grad_out * pairwise_sq_dist(a, b))` with respect to `a`
/// and `b`.
pub fn pairwise_sq_dist_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, d) = same_matrix_shape(a, b)?;
    if grad_out.shape() != [n, n] {
        return Err(Error::shape(format!(
            "pairwise distance backward: grad shape {:?}, expected [{n}, {n}]",
            grad_out.shape()
        )));
    }
    let two = T::one() + T::one();
    let mut ga = vec![T::zero(); n * d];
    let mut gb = vec![T::zero(); n * d];
    for i in 0..n {
        for j in 0..n {
            let w = grad_out.data()[i * n + j];
            if w == T::zero() {
                continue;
            }
            for m in 0..d {
                let diff = two * w * (a.data()[i * d + m] - b.data()[j * d + m]);
                ga[i * d + m] = ga[i * d + m] + diff;
                gb[j * d + m] = gb[j * d + m] - diff;
            }
        }
    }
    Ok((
        Tensor::new(vec![n, d], ga)?,
        Tensor::new(vec![n, d], gb)?,
    ))
}
