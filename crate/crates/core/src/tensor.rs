//! Dense row-major `f32` tensors and the forward/backward kernels the rest of
//! the crate is assembled from.
//!
//! Every kernel is a pure function. Backward passes are explicit functions
//! taking whatever the forward pass needs (input, saved indices, output) plus
//! the upstream gradient; the caller fixes the composition order.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Input(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Input(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on a zero-sized or empty shape; use [`Tensor::new`] for
    /// untrusted shapes.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "invalid tensor shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        assert!(n > 0, "empty vector tensor");
        Tensor {
            shape: vec![n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Input(format!(
                "expected a C x H x W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn fill(&mut self, value: f32) {
        self.data.fill(value);
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }
}

/// Row-major GEMM: `c = a * b + beta * c` with `a` m x k, `b` k x n given by
/// arbitrary strides and `c` a contiguous m x n buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!((m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    assert!((k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            out_channels,
            in_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0
            || self.in_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
        {
            return Err(Error::Config(format!(
                "conv spec fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::dim(
                "conv2d output size",
                &[h, w],
                &[self.kernel_h, self.kernel_w],
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

fn check_conv(input: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<(usize, usize, usize)> {
    spec.validate()?;
    let (c, h, w) = input.dims3()?;
    if kernel.shape() != spec.kernel_shape() {
        return Err(Error::dim("conv2d kernel", kernel.shape(), &spec.kernel_shape()));
    }
    if c != spec.in_channels {
        return Err(Error::dim("conv2d input", input.shape(), &spec.kernel_shape()));
    }
    Ok((c, h, w))
}

fn im2col(input: &[f32], (c, h, w): (usize, usize, usize), spec: &ConvSpec, (ho, wo): (usize, usize)) -> Vec<f32> {
    let p = ho * wo;
    let mut cols = vec![0.0f32; c * spec.kernel_h * spec.kernel_w * p];
    let pad = spec.padding as isize;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let row = ((ci * spec.kernel_h + ki) * spec.kernel_w + kj) * p;
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], (c, h, w): (usize, usize, usize), spec: &ConvSpec, (ho, wo): (usize, usize)) -> Vec<f32> {
    let p = ho * wo;
    let mut out = vec![0.0f32; c * h * w];
    let pad = spec.padding as isize;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let row = ((ci * spec.kernel_h + ki) * spec.kernel_w + kj) * p;
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Zero-padded cross-correlation of a `[C_in, H, W]` input with a
/// `[C_out, C_in, kH, kW]` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let dims = check_conv(input, kernel, spec)?;
    if bias.shape() != [spec.out_channels] {
        return Err(Error::dim("conv2d bias", bias.shape(), &[spec.out_channels]));
    }
    let (ho, wo) = spec.output_size(dims.1, dims.2)?;
    let p = ho * wo;
    let ck = dims.0 * spec.kernel_h * spec.kernel_w;
    let cols = im2col(input.data(), dims, spec, (ho, wo));
    let mut out = vec![0.0f32; spec.out_channels * p];
    for (co, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias.data()[co]);
    }
    gemm(spec.out_channels, ck, p, kernel.data(), (ck, 1), &cols, (p, 1), &mut out, 1.0);
    Tensor::new(vec![spec.out_channels, ho, wo], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Gradients of a conv2d output w.r.t. kernel, bias and (optionally) input.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    let mut gk = kernel.zeros_like();
    let mut gb = Tensor::zeros(&[spec.out_channels]);
    let gi = conv2d_backward_acc(
        input,
        kernel,
        spec,
        grad_out,
        Some((gk.data_mut(), gb.data_mut())),
        want_input,
    )?;
    Ok(ConvGrads {
        input: gi,
        kernel: gk,
        bias: gb,
    })
}

/// Accumulating form of [`conv2d_backward`]: parameter gradients are added
/// into the given buffers, which may be skipped entirely.
pub(crate) fn conv2d_backward_acc(
    input: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    param_grads: Option<(&mut [f32], &mut [f32])>,
    want_input: bool,
) -> Result<Option<Tensor>> {
    let dims = check_conv(input, kernel, spec)?;
    let (ho, wo) = spec.output_size(dims.1, dims.2)?;
    let expected = [spec.out_channels, ho, wo];
    if grad_out.shape() != expected {
        return Err(Error::dim("conv2d backward", grad_out.shape(), &expected));
    }
    let p = ho * wo;
    let ck = dims.0 * spec.kernel_h * spec.kernel_w;
    let dy = grad_out.data();

    if let Some((gk, gb)) = param_grads {
        let cols = im2col(input.data(), dims, spec, (ho, wo));
        // gK[co, ck] += dY[co, p] * cols[ck, p]^T
        gemm(spec.out_channels, p, ck, dy, (p, 1), &cols, (1, p), gk, 1.0);
        for (co, g) in gb.iter_mut().enumerate() {
            *g += dy[co * p..(co + 1) * p].iter().sum::<f32>();
        }
    }

    if !want_input {
        return Ok(None);
    }
    // dcols[ck, p] = K[co, ck]^T * dY[co, p]
    let mut dcols = vec![0.0f32; ck * p];
    gemm(ck, spec.out_channels, p, kernel.data(), (1, ck), dy, (p, 1), &mut dcols, 0.0);
    let gi = col2im(&dcols, dims, spec, (ho, wo));
    Ok(Some(Tensor::new(input.shape().to_vec(), gi)?))
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let n = (h * w) as f32;
    let out = input
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().sum::<f32>() / n)
        .collect::<Vec<_>>();
    debug_assert_eq!(out.len(), c);
    Tensor::new(vec![c], out)
}

/// Spreads a `[C]` gradient uniformly over each `H x W` plane.
pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = input_shape else {
        return Err(Error::dim("global_avg_pool backward", input_shape, grad_out.shape()));
    };
    if grad_out.shape() != [c] {
        return Err(Error::dim("global_avg_pool backward", input_shape, grad_out.shape()));
    }
    let n = (h * w) as f32;
    let mut out = Vec::with_capacity(c * h * w);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g / n, h * w));
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Per-channel maximum plus the flat index (within each plane) of the first
/// maximal element in row-major order.
pub fn global_max_pool(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    let mut vals = Vec::with_capacity(c);
    let mut idx = Vec::with_capacity(c);
    for plane in input.data().chunks(h * w) {
        let (i, v) = first_max(plane);
        vals.push(v);
        idx.push(i);
    }
    Ok((Tensor::new(vec![c], vals)?, idx))
}

fn first_max(values: &[f32]) -> (usize, f32) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct MaxPoolOutput {
    pub output: Tensor,
    /// Flat input index (`c * H * W + y * W + x`) selected for each output.
    pub argmax: Vec<usize>,
}

pub fn max_pool(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    Ok(max_pool_with_indices(input, window, stride)?.output)
}

pub fn max_pool_with_indices(input: &Tensor, window: usize, stride: usize) -> Result<MaxPoolOutput> {
    let (c, h, w) = input.dims3()?;
    if window == 0 || stride == 0 {
        return Err(Error::Config("max_pool window and stride must be positive".into()));
    }
    if h < window || w < window {
        return Err(Error::dim("max_pool", input.shape(), &[window, window]));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let data = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = base + oy * stride * w + ox * stride;
                let mut best = data[best_i];
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for (dx, &v) in data[row..row + window].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_i = row + dx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::new(vec![c, ho, wo], out)?,
        argmax,
    })
}

pub fn max_pool_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::dim("max_pool backward", &[argmax.len()], grad_out.shape()));
    }
    let mut gi = Tensor::zeros(input_shape);
    let gd = gi.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gd[i] += g;
    }
    Ok(gi)
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// `W x + b` for `W: [M, N]`.
pub fn dense(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = check_dense(x, weight, bias)?;
    let mut out = bias.data().to_vec();
    gemm(m, n, 1, weight.data(), (n, 1), x.data(), (1, 1), &mut out, 1.0);
    Tensor::new(vec![m], out)
}

fn check_dense(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let &[m, n] = weight.shape() else {
        return Err(Error::dim("dense weight", weight.shape(), x.shape()));
    };
    if x.shape() != [n] {
        return Err(Error::dim("dense input", x.shape(), weight.shape()));
    }
    if bias.shape() != [m] {
        return Err(Error::dim("dense bias", bias.shape(), weight.shape()));
    }
    Ok((m, n))
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let mut gw = weight.zeros_like();
    let mut gb = Tensor::zeros(&[weight.shape()[0]]);
    let gi = dense_backward_acc(x, weight, grad_out, gw.data_mut(), gb.data_mut())?;
    Ok(DenseGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

pub(crate) fn dense_backward_acc(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    gw: &mut [f32],
    gb: &mut [f32],
) -> Result<Tensor> {
    let &[m, n] = weight.shape() else {
        return Err(Error::dim("dense backward", weight.shape(), x.shape()));
    };
    if x.shape() != [n] || grad_out.shape() != [m] {
        return Err(Error::dim("dense backward", x.shape(), grad_out.shape()));
    }
    let dy = grad_out.data();
    for (i, row) in gw.chunks_mut(n).enumerate() {
        let g = dy[i];
        gb[i] += g;
        if g != 0.0 {
            for (w, &xv) in row.iter_mut().zip(x.data()) {
                *w += g * xv;
            }
        }
    }
    let mut gi = vec![0.0f32; n];
    gemm(n, m, 1, weight.data(), (1, n), dy, (1, 1), &mut gi, 0.0);
    Tensor::new(vec![n], gi)
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Mul,
    Add,
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
        }
    }
}

pub fn unary(x: &Tensor, f: Unary) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f.apply(v)).collect(),
    }
}

pub fn unary_backward(x: &Tensor, grad_out: &Tensor, f: Unary) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::dim("unary backward", x.shape(), grad_out.shape()));
    }
    let data = x
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&v, &g)| g * f.derivative(v, f.apply(v)))
        .collect();
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// How the right operand of a binary op lines up with a `[C, H, W]` left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[C]` repeated over each plane.
    Channel { plane: usize },
    /// `[H, W]` repeated over channels.
    Spatial { plane: usize },
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    match (a, b) {
        ([c, h, w], [bc]) if c == bc => Ok(Broadcast::Channel { plane: h * w }),
        ([_, h, w], [bh, bw]) if h == bh && w == bw => Ok(Broadcast::Spatial { plane: h * w }),
        _ => Err(Error::dim("broadcast", a, b)),
    }
}

/// Elementwise `a (op) b` where `b` equals `a` in shape, or is a `[C]`
/// vector or `[H, W]` map broadcast over a `[C, H, W]` tensor.
pub fn binary(a: &Tensor, b: &Tensor, op: Binary) -> Result<Tensor> {
    let kind = broadcast_kind(a.shape(), b.shape())?;
    let f = |x: f32, y: f32| match op {
        Binary::Mul => x * y,
        Binary::Add => x + y,
    };
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = match kind {
                Broadcast::Same => bd[i],
                Broadcast::Channel { plane } => bd[i / plane],
                Broadcast::Spatial { plane } => bd[i % plane],
            };
            f(x, y)
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Gradients w.r.t. both operands of [`binary`]; the right-hand gradient is
/// reduced back to the right operand's shape.
pub fn binary_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor, op: Binary) -> Result<(Tensor, Tensor)> {
    let kind = broadcast_kind(a.shape(), b.shape())?;
    if grad_out.shape() != a.shape() {
        return Err(Error::dim("binary backward", a.shape(), grad_out.shape()));
    }
    let bd = b.data();
    let mut ga = a.zeros_like();
    let mut gb = b.zeros_like();
    for (i, (&x, &g)) in a.data().iter().zip(grad_out.data()).enumerate() {
        let j = match kind {
            Broadcast::Same => i,
            Broadcast::Channel { plane } => i / plane,
            Broadcast::Spatial { plane } => i % plane,
        };
        match op {
            Binary::Mul => {
                ga.data[i] = g * bd[j];
                gb.data[j] += g * x;
            }
            Binary::Add => {
                ga.data[i] = g;
                gb.data[j] += g;
            }
        }
    }
    Ok((ga, gb))
}
