//! Squeeze-and-excitation and CBAM gating units.
//!
//! Both units rescale a `[C, H, W]` feature map by sigmoid gates, so every
//! output element is the input element times a factor in `(0, 1)`. SE gates
//! channels from globally pooled statistics; CBAM gates channels (from average
//! and max pooled descriptors through a shared MLP) and then spatial positions
//! (from a convolution over the channel-mean and channel-max maps).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    self, global_avg_pool, global_max_pool, sigmoid, Tensor,
};

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    None,
    Se,
    Cbam,
}

/// Reduction ratio actually used for `channels`: `r` falls back to `C` when
/// `C < r`, and must divide `C`.
pub fn effective_reduction(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 {
        return Err(Error::Config("reduction ratio must be positive".into()));
    }
    let r = if channels < reduction { channels } else { reduction };
    if channels % r != 0 {
        return Err(Error::Config(format!(
            "reduction ratio {r} does not divide channel count {channels}"
        )));
    }
    Ok(r)
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
    t
}

// ---------------------------------------------------------------------------
// Shared bottleneck MLP: C -> C/r -> C with relu in between.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GateMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GateMlp {
    fn zeros(channels: usize, hidden: usize) -> Self {
        GateMlp {
            w1: Tensor::zeros(&[hidden, channels]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[channels, hidden]),
            b2: Tensor::zeros(&[channels]),
        }
    }

    /// He-initialized first layer, zero second layer: logits start at 0.
    fn init(channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut mlp = Self::zeros(channels, hidden);
        mlp.w1 = he_normal(rng, &[hidden, channels], channels);
        mlp
    }

    pub fn channels(&self) -> usize {
        self.w2.shape()[0]
    }

    fn forward(&self, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let pre = tensor::dense(v, &self.w1, &self.b1)?;
        let hidden = tensor::unary(&pre, tensor::Unary::Relu);
        let out = tensor::dense(&hidden, &self.w2, &self.b2)?;
        Ok((pre, out))
    }

    fn backward(&self, v: &Tensor, pre: &Tensor, grad_out: &Tensor, grads: &mut GateMlp) -> Result<Tensor> {
        let hidden = tensor::unary(pre, tensor::Unary::Relu);
        let dh = tensor::dense_backward_acc(
            &hidden,
            &self.w2,
            grad_out,
            grads.w2.data_mut(),
            grads.b2.data_mut(),
        )?;
        let dpre = tensor::unary_backward(pre, &dh, tensor::Unary::Relu)?;
        tensor::dense_backward_acc(v, &self.w1, &dpre, grads.w1.data_mut(), grads.b1.data_mut())
    }

    fn params(&self) -> [(&'static str, &Tensor); 4] {
        [("W1", &self.w1), ("b1", &self.b1), ("W2", &self.w2), ("b2", &self.b2)]
    }

    fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("W1", &mut self.w1),
            ("b1", &mut self.b1),
            ("W2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

fn check_channels(x: &Tensor, channels: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.dims3()?;
    if c != channels {
        return Err(Error::dim(op, x.shape(), &[channels]));
    }
    Ok((c, h, w))
}

/// Scales channel `c` of `x` by `gates[c]`.
fn scale_channels(x: &Tensor, gates: &[f32]) -> Tensor {
    let mut out = x.clone();
    let plane = x.len() / gates.len();
    for (chunk, &g) in out.data_mut().chunks_mut(plane).zip(gates) {
        for v in chunk {
            *v *= g;
        }
    }
    out
}

/// `Σ_{h,w} a[c,h,w] * b[c,h,w]` for each channel.
fn channel_dot(a: &Tensor, b: &Tensor, channels: usize) -> Vec<f32> {
    let plane = a.len() / channels;
    a.data()
        .chunks(plane)
        .zip(b.data().chunks(plane))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
        .collect()
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SeParams {
    pub reduction: usize,
    pub mlp: GateMlp,
}

impl SeParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let r = effective_reduction(channels, reduction)?;
        Ok(SeParams {
            reduction: r,
            mlp: GateMlp::zeros(channels, channels / r),
        })
    }

    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let r = effective_reduction(channels, reduction)?;
        Ok(SeParams {
            reduction: r,
            mlp: GateMlp::init(channels, channels / r, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.mlp.channels()
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        self.mlp.params().to_vec()
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        self.mlp.params_mut().into_iter().collect()
    }
}

#[derive(Clone, Debug)]
pub struct SeCache {
    pooled: Tensor,
    hidden_pre: Tensor,
    gates: Tensor,
}

impl SeCache {
    pub fn gates(&self) -> &Tensor {
        &self.gates
    }
}

pub fn se_forward(x: &Tensor, p: &SeParams) -> Result<Tensor> {
    Ok(se_forward_cached(x, p)?.0)
}

pub fn se_forward_cached(x: &Tensor, p: &SeParams) -> Result<(Tensor, SeCache)> {
    check_channels(x, p.channels(), "se_forward")?;
    let pooled = global_avg_pool(x)?;
    let (hidden_pre, logits) = p.mlp.forward(&pooled)?;
    let gates = tensor::unary(&logits, tensor::Unary::Sigmoid);
    let out = scale_channels(x, gates.data());
    Ok((
        out,
        SeCache {
            pooled,
            hidden_pre,
            gates,
        },
    ))
}

/// Returns the input gradient; parameter gradients are added to `grads`.
pub fn se_backward(
    x: &Tensor,
    p: &SeParams,
    cache: &SeCache,
    grad_out: &Tensor,
    grads: &mut SeParams,
) -> Result<Tensor> {
    let (c, h, w) = check_channels(x, p.channels(), "se_backward")?;
    if grad_out.shape() != x.shape() {
        return Err(Error::dim("se_backward", x.shape(), grad_out.shape()));
    }
    let gates = cache.gates.data();
    let dgate = channel_dot(grad_out, x, c);
    let dlogit: Vec<f32> = dgate
        .iter()
        .zip(gates)
        .map(|(&d, &g)| d * g * (1.0 - g))
        .collect();
    let dpooled = p.mlp.backward(
        &cache.pooled,
        &cache.hidden_pre,
        &Tensor::from_vec(dlogit),
        &mut grads.mlp,
    )?;
    let mut dx = scale_channels(grad_out, gates);
    let n = (h * w) as f32;
    for (chunk, &d) in dx.data_mut().chunks_mut(h * w).zip(dpooled.data()) {
        let add = d / n;
        for v in chunk {
            *v += add;
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// CBAM
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct CbamParams {
    pub reduction: usize,
    pub mlp: GateMlp,
    /// `[1, 2, k, k]`, odd `k`; input planes are (channel mean, channel max).
    pub spatial_kernel: Tensor,
    /// Single-element tensor.
    pub spatial_bias: Tensor,
}

impl CbamParams {
    pub fn zeros(channels: usize, reduction: usize, kernel: usize) -> Result<Self> {
        let r = effective_reduction(channels, reduction)?;
        if kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "CBAM spatial kernel must have an odd side, got {kernel}"
            )));
        }
        Ok(CbamParams {
            reduction: r,
            mlp: GateMlp::zeros(channels, channels / r),
            spatial_kernel: Tensor::zeros(&[1, 2, kernel, kernel]),
            spatial_bias: Tensor::zeros(&[1]),
        })
    }

    pub fn init(channels: usize, reduction: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(channels, reduction, kernel)?;
        p.mlp = GateMlp::init(channels, channels / p.reduction, rng);
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.mlp.channels()
    }

    pub fn kernel_size(&self) -> usize {
        self.spatial_kernel.shape()[2]
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = self.mlp.params().to_vec();
        v.push(("spatial_kernel", &self.spatial_kernel));
        v.push(("spatial_bias", &self.spatial_bias));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v: Vec<_> = self.mlp.params_mut().into_iter().collect();
        v.push(("spatial_kernel", &mut self.spatial_kernel));
        v.push(("spatial_bias", &mut self.spatial_bias));
        v
    }
}

#[derive(Clone, Debug)]
struct ChannelGateCache {
    avg: Tensor,
    max: Tensor,
    max_idx: Vec<usize>,
    avg_pre: Tensor,
    max_pre: Tensor,
    gates: Tensor,
}

#[derive(Clone, Debug)]
struct SpatialGateCache {
    maps: Tensor,
    /// Channel holding the (first) maximum at each position.
    max_channel: Vec<usize>,
    gates: Tensor,
}

#[derive(Clone, Debug)]
pub struct CbamCache {
    channel: ChannelGateCache,
    channel_gated: Tensor,
    spatial: SpatialGateCache,
}

impl CbamCache {
    pub fn channel_gates(&self) -> &Tensor {
        &self.channel.gates
    }

    pub fn spatial_gates(&self) -> &Tensor {
        &self.spatial.gates
    }
}

fn channel_gate_cached(x: &Tensor, p: &CbamParams) -> Result<ChannelGateCache> {
    check_channels(x, p.channels(), "cbam_channel_gate")?;
    let avg = global_avg_pool(x)?;
    let (max, max_idx) = global_max_pool(x)?;
    let (avg_pre, avg_out) = p.mlp.forward(&avg)?;
    let (max_pre, max_out) = p.mlp.forward(&max)?;
    let gates = avg_out
        .data()
        .iter()
        .zip(max_out.data())
        .map(|(a, b)| sigmoid(a + b))
        .collect();
    Ok(ChannelGateCache {
        avg,
        max,
        max_idx,
        avg_pre,
        max_pre,
        gates: Tensor::from_vec(gates),
    })
}

fn spatial_gate_cached(x: &Tensor, p: &CbamParams) -> Result<SpatialGateCache> {
    let (c, h, w) = check_channels(x, p.channels(), "cbam_spatial_gate")?;
    let plane = h * w;
    let data = x.data();
    let mut maps = vec![0.0f32; 2 * plane];
    let mut max_channel = vec![0usize; plane];
    let (sum, best) = maps.split_at_mut(plane);
    best.copy_from_slice(&data[..plane]);
    for (ci, chunk) in data.chunks_exact(plane).enumerate() {
        for i in 0..plane {
            let v = chunk[i];
            sum[i] += v;
            if v > best[i] {
                best[i] = v;
                max_channel[i] = ci;
            }
        }
    }
    for v in sum.iter_mut() {
        *v /= c as f32;
    }
    let maps = Tensor::new(vec![2, h, w], maps)?;
    let logits = spatial_conv(&maps, &p.spatial_kernel, p.spatial_bias.data()[0], h, w)?;
    let gates = tensor::unary(&logits, tensor::Unary::Sigmoid).reshape(&[h, w])?;
    Ok(SpatialGateCache {
        maps,
        max_channel,
        gates,
    })
}

/// Row offsets `(oy range, ox range, dy, dx)` for kernel tap `(ki, kj)` of a
/// same-padded `k x k` correlation over an `h x w` map.
fn tap(ki: usize, kj: usize, k: usize, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, isize, isize) {
    let pad = (k / 2) as isize;
    let (dy, dx) = (ki as isize - pad, kj as isize - pad);
    let rows = (-dy).max(0) as usize..(h as isize - dy).clamp(0, h as isize) as usize;
    let cols = (-dx).max(0) as usize..(w as isize - dx).clamp(0, w as isize) as usize;
    (rows, cols, dy, dx)
}

/// Same-padded correlation of the two `[H, W]` pooled maps with a
/// `[1, 2, k, k]` kernel, giving `[1, H, W]` logits.
fn spatial_conv(maps: &Tensor, kernel: &Tensor, bias: f32, h: usize, w: usize) -> Result<Tensor> {
    let k = kernel.shape()[2];
    let (m, kd) = (maps.data(), kernel.data());
    let mut out = vec![bias; h * w];
    for ci in 0..2 {
        let plane = &m[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let wt = kd[(ci * k + ki) * k + kj];
                let (rows, cols, dy, dx) = tap(ki, kj, k, h, w);
                for oy in rows {
                    let iy = (oy as isize + dy) as usize;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let dst = &mut out[oy * w..(oy + 1) * w];
                    for ox in cols.clone() {
                        dst[ox] += wt * src[(ox as isize + dx) as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// Accumulates kernel and bias gradients of [`spatial_conv`] and returns the
/// gradient w.r.t. the pooled maps.
fn spatial_conv_backward(
    maps: &Tensor,
    kernel: &Tensor,
    dlogit: &Tensor,
    dkernel: &mut [f32],
    dbias: &mut f32,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let k = kernel.shape()[2];
    let (m, kd, g) = (maps.data(), kernel.data(), dlogit.data());
    *dbias += g.iter().sum::<f32>();
    let mut dmaps = vec![0.0f32; 2 * h * w];
    for ci in 0..2 {
        let plane = &m[ci * h * w..(ci + 1) * h * w];
        let dplane = &mut dmaps[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let idx = (ci * k + ki) * k + kj;
                let wt = kd[idx];
                let (rows, cols, dy, dx) = tap(ki, kj, k, h, w);
                let mut acc = 0.0f32;
                for oy in rows {
                    let iy = (oy as isize + dy) as usize;
                    let grow = &g[oy * w..(oy + 1) * w];
                    for ox in cols.clone() {
                        let ix = iy * w + (ox as isize + dx) as usize;
                        acc += grow[ox] * plane[ix];
                        dplane[ix] += wt * grow[ox];
                    }
                }
                dkernel[idx] += acc;
            }
        }
    }
    Tensor::new(vec![2, h, w], dmaps)
}

/// Channel gate `M_c = sigmoid(MLP(avg(x)) + MLP(max(x)))`.
pub fn cbam_channel_gate(x: &Tensor, p: &CbamParams) -> Result<Tensor> {
    Ok(channel_gate_cached(x, p)?.gates)
}

/// Spatial gate `M_s = sigmoid(conv([mean_c x; max_c x]))` as an `[H, W]` map.
pub fn cbam_spatial_gate(x: &Tensor, p: &CbamParams) -> Result<Tensor> {
    Ok(spatial_gate_cached(x, p)?.gates)
}

pub fn cbam_forward(x: &Tensor, p: &CbamParams) -> Result<Tensor> {
    Ok(cbam_forward_cached(x, p)?.0)
}

pub fn cbam_forward_cached(x: &Tensor, p: &CbamParams) -> Result<(Tensor, CbamCache)> {
    let channel = channel_gate_cached(x, p)?;
    let channel_gated = scale_channels(x, channel.gates.data());
    let spatial = spatial_gate_cached(&channel_gated, p)?;
    let out = tensor::binary(&channel_gated, &spatial.gates, tensor::Binary::Mul)?;
    Ok((
        out,
        CbamCache {
            channel,
            channel_gated,
            spatial,
        },
    ))
}

pub fn cbam_backward(
    x: &Tensor,
    p: &CbamParams,
    cache: &CbamCache,
    grad_out: &Tensor,
    grads: &mut CbamParams,
) -> Result<Tensor> {
    let (c, h, w) = check_channels(x, p.channels(), "cbam_backward")?;
    if grad_out.shape() != x.shape() {
        return Err(Error::dim("cbam_backward", x.shape(), grad_out.shape()));
    }
    let plane = h * w;
    let x1 = &cache.channel_gated;
    let sp = &cache.spatial;

    // Spatial stage: out = x1 * M_s(x1).
    let (mut dx1, dms) = tensor::binary_backward(x1, &sp.gates, grad_out, tensor::Binary::Mul)?;
    let dlogit: Vec<f32> = dms
        .data()
        .iter()
        .zip(sp.gates.data())
        .map(|(&d, &g)| d * g * (1.0 - g))
        .collect();
    let dlogit = Tensor::new(vec![1, h, w], dlogit)?;
    let dmaps = spatial_conv_backward(
        &sp.maps,
        &p.spatial_kernel,
        &dlogit,
        grads.spatial_kernel.data_mut(),
        &mut grads.spatial_bias.data_mut()[0],
        h,
        w,
    )?;
    {
        let dm = dmaps.data();
        let d1 = dx1.data_mut();
        let mean_g: Vec<f32> = dm[..plane].iter().map(|&g| g / c as f32).collect();
        for chunk in d1.chunks_exact_mut(plane) {
            for (v, &g) in chunk.iter_mut().zip(&mean_g) {
                *v += g;
            }
        }
        for i in 0..plane {
            d1[sp.max_channel[i] * plane + i] += dm[plane + i];
        }
    }

    // Channel stage: x1 = x * M_c(x).
    let ch = &cache.channel;
    let gates = ch.gates.data();
    let dgate = channel_dot(&dx1, x, c);
    let dlogit = Tensor::from_vec(
        dgate
            .iter()
            .zip(gates)
            .map(|(&d, &g)| d * g * (1.0 - g))
            .collect(),
    );
    let davg = p.mlp.backward(&ch.avg, &ch.avg_pre, &dlogit, &mut grads.mlp)?;
    let dmax = p.mlp.backward(&ch.max, &ch.max_pre, &dlogit, &mut grads.mlp)?;
    let mut dx = scale_channels(&dx1, gates);
    let d = dx.data_mut();
    for ci in 0..c {
        let add = davg.data()[ci] / plane as f32;
        for v in &mut d[ci * plane..(ci + 1) * plane] {
            *v += add;
        }
        d[ci * plane + ch.max_idx[ci]] += dmax.data()[ci];
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Unified unit
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum Attention {
    None,
    Se(SeParams),
    Cbam(CbamParams),
}

#[derive(Clone, Debug)]
pub enum AttentionCache {
    None,
    Se(SeCache),
    Cbam(CbamCache),
}

impl Attention {
    pub fn kind(&self) -> AttentionKind {
        match self {
            Attention::None => AttentionKind::None,
            Attention::Se(_) => AttentionKind::Se,
            Attention::Cbam(_) => AttentionKind::Cbam,
        }
    }

    /// Parameter-path segment used in weight files (`se`, `cbam`).
    pub fn tag(&self) -> Option<&'static str> {
        match self {
            Attention::None => None,
            Attention::Se(_) => Some("se"),
            Attention::Cbam(_) => Some("cbam"),
        }
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, AttentionCache)> {
        match self {
            Attention::None => Ok((x.clone(), AttentionCache::None)),
            Attention::Se(p) => se_forward_cached(x, p).map(|(o, c)| (o, AttentionCache::Se(c))),
            Attention::Cbam(p) => cbam_forward_cached(x, p).map(|(o, c)| (o, AttentionCache::Cbam(c))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Attention::None => Ok(x.clone()),
            Attention::Se(p) => se_forward(x, p),
            Attention::Cbam(p) => cbam_forward(x, p),
        }
    }

    /// `grads` must be the same variant as `self`.
    pub fn backward(
        &self,
        x: &Tensor,
        cache: &AttentionCache,
        grad_out: &Tensor,
        grads: &mut Attention,
    ) -> Result<Tensor> {
        match (self, cache, grads) {
            (Attention::None, AttentionCache::None, Attention::None) => Ok(grad_out.clone()),
            (Attention::Se(p), AttentionCache::Se(c), Attention::Se(g)) => se_backward(x, p, c, grad_out, g),
            (Attention::Cbam(p), AttentionCache::Cbam(c), Attention::Cbam(g)) => {
                cbam_backward(x, p, c, grad_out, g)
            }
            _ => Err(Error::Config("attention cache/gradient variant mismatch".into())),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Attention::None => Vec::new(),
            Attention::Se(p) => p.params(),
            Attention::Cbam(p) => p.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Attention::None => Vec::new(),
            Attention::Se(p) => p.params_mut(),
            Attention::Cbam(p) => p.params_mut(),
        }
    }

    /// Pushes every gate logit toward `+bias` so all gates read 1.0 in f32.
    pub fn saturate_open(&mut self, bias: f32) {
        match self {
            Attention::None => {}
            Attention::Se(p) => {
                p.mlp.w2.fill(0.0);
                p.mlp.b2.fill(bias);
            }
            Attention::Cbam(p) => {
                p.mlp.w2.fill(0.0);
                p.mlp.b2.fill(bias);
                p.spatial_kernel.fill(0.0);
                p.spatial_bias.fill(bias);
            }
        }
    }
}
