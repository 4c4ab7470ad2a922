//! Attention-augmented multi-scale convolutional feature extractor.
//!
//! The image is resized to each configured scale, pushed through the stage
//! stack (`conv -> relu -> [max_pool] -> [attention]`), and the final stage is
//! globally average-pooled. Per-scale vectors are concatenated in scale order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    effective_reduction, Attention, AttentionCache, AttentionKind, CbamParams, SeParams, DEFAULT_REDUCTION,
    DEFAULT_SPATIAL_KERNEL,
};
use crate::error::{Error, Result};
use crate::image::resize_bilinear;
use crate::tensor::{self, ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: Option<PoolSpec>,
    pub attention: AttentionKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub stages: Vec<StageSpec>,
    /// Side lengths the input is resized to, strictly decreasing.
    pub scales: Vec<usize>,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
}

pub const DESK_CHANNELS: [usize; 5] = [32, 48, 64, 96, 128];
pub const DESK_KERNELS: [usize; 5] = [5, 3, 3, 3, 3];
/// One-based stage indices followed by a 2x2/2 max pool.
pub const DESK_POOL_AFTER: [usize; 3] = [1, 2, 5];
pub const DESK_SCALES: [usize; 3] = [256, 128, 64];

impl BackboneSpec {
    /// Five-stage desk-scale network with the same attention kind after
    /// every stage.
    pub fn desk_scale(attention: AttentionKind) -> Self {
        Self::from_layout(
            &DESK_CHANNELS,
            &DESK_KERNELS,
            &DESK_POOL_AFTER,
            2,
            attention,
            &DESK_SCALES,
        )
    }

    pub fn from_layout(
        channels: &[usize],
        kernels: &[usize],
        pool_after: &[usize],
        pool_window: usize,
        attention: AttentionKind,
        scales: &[usize],
    ) -> Self {
        let stages = channels
            .iter()
            .zip(kernels)
            .enumerate()
            .map(|(i, (&out_channels, &kernel))| StageSpec {
                out_channels,
                kernel,
                stride: 1,
                padding: kernel / 2,
                pool: pool_after.contains(&(i + 1)).then_some(PoolSpec {
                    window: pool_window,
                    stride: pool_window,
                }),
                attention,
            })
            .collect();
        BackboneSpec {
            stages,
            scales: scales.to_vec(),
            reduction_ratio: DEFAULT_REDUCTION,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
        }
    }

    pub fn with_scales(mut self, scales: &[usize]) -> Self {
        self.scales = scales.to_vec();
        self
    }

    pub fn top_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    pub fn feature_dim(&self) -> usize {
        self.scales.len() * self.top_channels()
    }

    pub fn conv_spec(&self, stage: usize) -> ConvSpec {
        let s = &self.stages[stage];
        let in_channels = if stage == 0 { 3 } else { self.stages[stage - 1].out_channels };
        ConvSpec {
            out_channels: s.out_channels,
            in_channels,
            kernel_h: s.kernel,
            kernel_w: s.kernel,
            stride: s.stride,
            padding: s.padding,
        }
    }

    pub fn stage_names(&self) -> Vec<String> {
        (1..=self.stages.len()).map(|i| format!("stage{i}")).collect()
    }

    /// Zero-based index for a stage name such as `stage3`.
    pub fn stage_index(&self, name: &str) -> Result<usize> {
        name.strip_prefix("stage")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1 && n <= self.stages.len())
            .map(|n| n - 1)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown stage {name:?}; valid stages: {}",
                    self.stage_names().join(", ")
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("backbone needs at least one scale".into()));
        }
        if self.scales.windows(2).any(|w| w[0] <= w[1]) || self.scales.contains(&0) {
            return Err(Error::Config(format!(
                "scales must be positive and strictly decreasing, got {:?}",
                self.scales
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            self.conv_spec(i).validate()?;
            if let Some(p) = s.pool {
                if p.window == 0 || p.stride == 0 {
                    return Err(Error::Config(format!("stage{}: pool window/stride must be positive", i + 1)));
                }
            }
            match s.attention {
                AttentionKind::None => {}
                AttentionKind::Se => {
                    effective_reduction(s.out_channels, self.reduction_ratio)
                        .map_err(|e| Error::Config(format!("stage{}: {e}", i + 1)))?;
                }
                AttentionKind::Cbam => {
                    effective_reduction(s.out_channels, self.reduction_ratio)
                        .map_err(|e| Error::Config(format!("stage{}: {e}", i + 1)))?;
                    if self.spatial_kernel % 2 == 0 {
                        return Err(Error::Config(format!(
                            "CBAM spatial kernel must be odd, got {}",
                            self.spatial_kernel
                        )));
                    }
                }
            }
        }
        // Every scale must survive the stage stack.
        for &s in &self.scales {
            let (mut h, mut w) = (s, s);
            for (i, st) in self.stages.iter().enumerate() {
                (h, w) = self.conv_spec(i).output_size(h, w).map_err(|_| {
                    Error::Config(format!("scale {s} collapses before stage{} conv", i + 1))
                })?;
                if let Some(p) = st.pool {
                    if h < p.window || w < p.window {
                        return Err(Error::Config(format!(
                            "scale {s} too small for stage{} pooling",
                            i + 1
                        )));
                    }
                    h = (h - p.window) / p.stride + 1;
                    w = (w - p.window) / p.stride + 1;
                }
            }
        }
        Ok(())
    }
}

/// Concatenated per-scale pooled descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Tensor);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Self {
        FeatureVector(Tensor::from_vec(values))
    }

    pub fn values(&self) -> &[f32] {
        self.0.data()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub attention: Attention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    stages: Vec<Stage>,
}

#[derive(Clone, Debug)]
struct StageCache {
    input: Tensor,
    pre_relu: Tensor,
    pool: Option<(Vec<usize>, Vec<usize>)>,
    attn_input: Tensor,
    attn: AttentionCache,
}

/// Forward activations of one scale, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ScaleTrace {
    stages: Vec<StageCache>,
    outputs: Vec<Tensor>,
}

impl ScaleTrace {
    /// Output of stage `index` (after its attention unit).
    pub fn stage_output(&self, index: usize) -> &Tensor {
        &self.outputs[index]
    }
}

#[derive(Clone, Debug)]
pub struct FeatureTrace {
    pub scales: Vec<ScaleTrace>,
}

impl Backbone {
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(spec.stages.len());
        for (i, st) in spec.stages.iter().enumerate() {
            let cs = spec.conv_spec(i);
            let fan_in = cs.in_channels * cs.kernel_h * cs.kernel_w;
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
            let mut kernel = Tensor::zeros(&cs.kernel_shape());
            for v in kernel.data_mut() {
                *v = normal.sample(&mut rng);
            }
            let attention = match st.attention {
                AttentionKind::None => Attention::None,
                AttentionKind::Se => Attention::Se(SeParams::init(st.out_channels, spec.reduction_ratio, &mut rng)?),
                AttentionKind::Cbam => Attention::Cbam(CbamParams::init(
                    st.out_channels,
                    spec.reduction_ratio,
                    spec.spatial_kernel,
                    &mut rng,
                )?),
            };
            stages.push(Stage {
                kernel,
                bias: Tensor::zeros(&[cs.out_channels]),
                attention,
            });
        }
        Ok(Backbone { spec, stages })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Stage] {
        &mut self.stages
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    /// Same structure with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.params_mut() {
            t.fill(0.0);
        }
        out
    }

    pub fn saturate_attention(&mut self, bias: f32) {
        for s in &mut self.stages {
            s.attention.saturate_open(bias);
        }
    }

    /// `(canonical name, tensor)` for every parameter, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{}.conv.kernel", i + 1), &s.kernel));
            out.push((format!("stage{}.conv.bias", i + 1), &s.bias));
            if let Some(tag) = s.attention.tag() {
                for (name, t) in s.attention.params() {
                    out.push((format!("stage{}.{tag}.{name}", i + 1), t));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("stage{}.conv.kernel", i + 1), &mut s.kernel));
            out.push((format!("stage{}.conv.bias", i + 1), &mut s.bias));
            if let Some(tag) = s.attention.tag() {
                for (name, t) in s.attention.params_mut() {
                    out.push((format!("stage{}.{tag}.{name}", i + 1), t));
                }
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.dims3()?;
        let largest = self.spec.scales[0];
        if c != 3 {
            return Err(Error::Input(format!("expected a 3-channel image, got {c} channels")));
        }
        if h < largest || w < largest {
            return Err(Error::Input(format!(
                "image {h}x{w} is smaller than the largest scale {largest}"
            )));
        }
        Ok(())
    }

    pub fn extract_features(&self, image: &Tensor) -> Result<FeatureVector> {
        self.check_image(image)?;
        let mut values = Vec::with_capacity(self.feature_dim());
        for &s in &self.spec.scales {
            let mut x = resize_bilinear(image, s, s)?;
            for (i, st) in self.stages.iter().enumerate() {
                let y = tensor::conv2d(&x, &st.kernel, &st.bias, &self.spec.conv_spec(i))?;
                let mut y = tensor::unary(&y, tensor::Unary::Relu);
                if let Some(p) = self.spec.stages[i].pool {
                    y = tensor::max_pool(&y, p.window, p.stride)?;
                }
                x = st.attention.forward(&y)?;
            }
            values.extend_from_slice(tensor::global_avg_pool(&x)?.data());
        }
        Ok(FeatureVector::new(values))
    }

    /// Like [`Backbone::extract_features`] but keeps every activation needed by
    /// [`Backbone::backward`].
    pub fn extract_features_traced(&self, image: &Tensor) -> Result<(FeatureVector, FeatureTrace)> {
        self.check_image(image)?;
        let mut values = Vec::with_capacity(self.feature_dim());
        let mut scales = Vec::with_capacity(self.spec.scales.len());
        for &s in &self.spec.scales {
            let mut x = resize_bilinear(image, s, s)?;
            let mut caches = Vec::with_capacity(self.stages.len());
            let mut outputs = Vec::with_capacity(self.stages.len());
            for (i, st) in self.stages.iter().enumerate() {
                let pre_relu = tensor::conv2d(&x, &st.kernel, &st.bias, &self.spec.conv_spec(i))?;
                let mut y = tensor::unary(&pre_relu, tensor::Unary::Relu);
                let mut pool = None;
                if let Some(p) = self.spec.stages[i].pool {
                    let pooled = tensor::max_pool_with_indices(&y, p.window, p.stride)?;
                    pool = Some((pooled.argmax, y.shape().to_vec()));
                    y = pooled.output;
                }
                let (out, attn) = st.attention.forward_cached(&y)?;
                caches.push(StageCache {
                    input: x,
                    pre_relu,
                    pool,
                    attn_input: y,
                    attn,
                });
                outputs.push(out.clone());
                x = out;
            }
            values.extend_from_slice(tensor::global_avg_pool(&x)?.data());
            scales.push(ScaleTrace {
                stages: caches,
                outputs,
            });
        }
        Ok((FeatureVector::new(values), FeatureTrace { scales }))
    }

    /// Backpropagates `grad_features` (d loss / d feature vector) and adds
    /// parameter gradients into `grads`. Conv gradients are skipped when
    /// `conv_grads` is false; attention gradients are always accumulated.
    pub fn backward(
        &self,
        trace: &FeatureTrace,
        grad_features: &[f32],
        grads: &mut Backbone,
        conv_grads: bool,
    ) -> Result<()> {
        let top = self.spec.top_channels();
        if grad_features.len() != self.feature_dim() || trace.scales.len() != self.spec.scales.len() {
            return Err(Error::dim("backbone backward", &[grad_features.len()], &[self.feature_dim()]));
        }
        for (si, st) in trace.scales.iter().enumerate() {
            let slice = &grad_features[si * top..(si + 1) * top];
            self.backward_scale(st, slice, grads, conv_grads, None)?;
        }
        Ok(())
    }

    /// Gradient of a scalar w.r.t. the output of stage `stage` at scale
    /// `scale_index`, given that scalar's gradient w.r.t. the feature vector.
    pub fn stage_output_gradient(
        &self,
        trace: &FeatureTrace,
        grad_features: &[f32],
        scale_index: usize,
        stage: usize,
    ) -> Result<Tensor> {
        let top = self.spec.top_channels();
        let slice = &grad_features[scale_index * top..(scale_index + 1) * top];
        let mut scratch = self.zeros_like();
        self.backward_scale(&trace.scales[scale_index], slice, &mut scratch, false, Some(stage))
            .map(|g| g.expect("stop stage requested"))
    }

    fn backward_scale(
        &self,
        st: &ScaleTrace,
        grad_pooled: &[f32],
        grads: &mut Backbone,
        conv_grads: bool,
        stop_at: Option<usize>,
    ) -> Result<Option<Tensor>> {
        let last = st.outputs.last().expect("non-empty stage stack");
        let mut d = tensor::global_avg_pool_backward(last.shape(), &Tensor::from_vec(grad_pooled.to_vec()))?;
        for i in (0..self.stages.len()).rev() {
            if stop_at == Some(i) {
                return Ok(Some(d));
            }
            let stage = &self.stages[i];
            let cache = &st.stages[i];
            d = stage
                .attention
                .backward(&cache.attn_input, &cache.attn, &d, &mut grads.stages[i].attention)?;
            if let Some((argmax, shape)) = &cache.pool {
                d = tensor::max_pool_backward(shape, argmax, &d)?;
            }
            d = tensor::unary_backward(&cache.pre_relu, &d, tensor::Unary::Relu)?;
            let g = &mut grads.stages[i];
            let param_grads = conv_grads.then(|| (g.kernel.data_mut(), g.bias.data_mut()));
            let want_input = i > 0 && stop_at.is_none_or(|s| s < i);
            match tensor::conv2d_backward_acc(
                &cache.input,
                &stage.kernel,
                &self.spec.conv_spec(i),
                &d,
                param_grads,
                want_input,
            )? {
                Some(gi) => d = gi,
                None => break,
            }
        }
        Ok(None)
    }
}
