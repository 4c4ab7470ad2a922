//! Maximum-likelihood training and transform-averaged scoring.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureTrace, FeatureVector};
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::image::{rotate, scale_brightness};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Augmented copies of every training image per epoch.
    pub n_train_transforms: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 24,
            batch_size: 16,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            n_train_transforms: 4,
            seed: 0,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_train_transforms", self.n_train_transforms),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub n_eval_transforms: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { n_eval_transforms: 8 }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_eval_transforms == 0 {
            return Err(Error::Config("n_eval_transforms must be at least 1".into()));
        }
        Ok(())
    }

    /// Identity followed by rotations evenly spaced over the full circle.
    pub fn rotations(&self) -> Vec<f64> {
        let n = self.n_eval_transforms;
        (0..n).map(|i| 360.0 * i as f64 / n as f64).collect()
    }
}

/// Rotation by `degrees` then brightness scaling; zero degrees and unit
/// brightness return the input unchanged.
pub fn augment_with(image: &Tensor, degrees: f64, brightness: f32) -> Result<Tensor> {
    let rotated = rotate(image, degrees)?;
    Ok(scale_brightness(&rotated, brightness))
}

/// Random rotation in `[0, 360)` degrees and brightness factor in `[0.9, 1.1)`.
pub fn augment(image: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let degrees = rng.gen_range(0.0..360.0);
    let brightness = rng.gen_range(0.9f32..1.1);
    augment_with(image, degrees, brightness)
}

/// Adam with bias correction, constant step size, no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = (1.0 - (self.beta1 as f64).powi(self.t)) as f32;
        let c2 = (1.0 - (self.beta2 as f64).powi(self.t)) as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

fn is_conv_param(name: &str) -> bool {
    name.contains(".conv.")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// Zero-based.
    pub epoch: usize,
    pub mean_nll: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Epoch mean nll above this multiple of the first epoch's magnitude (at
/// least 1) aborts training.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Fits `backbone` and `flow` to `images` by minimizing the mean nll of
/// augmented training features. Every random draw comes from `cfg.seed`;
/// per-sample passes run in parallel but gradients are summed in sample
/// order, so results do not depend on the thread count.
pub fn train(
    backbone: &mut Backbone,
    flow: &mut Flow,
    images: &[Tensor],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if images.len() < cfg.batch_size {
        return Err(Error::Input(format!(
            "training set has {} images, fewer than batch_size {}",
            images.len(),
            cfg.batch_size
        )));
    }
    if backbone.feature_dim() != flow.dim() {
        return Err(Error::dim("train", &[backbone.feature_dim()], &[flow.dim()]));
    }
    let dim = flow.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..images.len())
        .flat_map(|i| std::iter::repeat_n(i, cfg.n_train_transforms))
        .collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0f64;
        for (batch_index, idx) in order.chunks(cfg.batch_size).enumerate() {
            let inputs = idx
                .iter()
                .map(|&i| augment(&images[i], &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let b = inputs.len();
            let bb: &Backbone = backbone;
            let traced: Vec<(FeatureVector, FeatureTrace)> = inputs
                .par_iter()
                .map(|x| bb.extract_features_traced(x))
                .collect::<Result<_>>()?;
            let mut feats = Vec::with_capacity(b * dim);
            for (f, _) in &traced {
                feats.extend_from_slice(f.values());
            }
            let (out, ftrace) = flow.forward_batch_traced(&feats, b).map_err(|e| {
                Error::Numeric(format!("epoch {epoch} batch {batch_index}: {e}"))
            })?;
            let batch_sum: f64 = (0..b).map(|r| out.nll(r)).sum();
            if !batch_sum.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {batch_index}"
                )));
            }
            epoch_sum += batch_sum;

            let scale = 1.0 / b as f32;
            let grad_z: Vec<f32> = out.z.iter().map(|&z| z * scale).collect();
            let mut flow_grads = flow.zeros_like();
            let df = flow.backward_batch(&ftrace, &grad_z, &vec![-scale; b], &mut flow_grads)?;
            let conv_grads = !cfg.freeze_backbone;
            let per_sample: Vec<Backbone> = traced
                .par_iter()
                .zip(df.par_chunks(dim))
                .map(|((_, trace), d)| {
                    let mut g = bb.zeros_like();
                    bb.backward(trace, d, &mut g, conv_grads)?;
                    Ok(g)
                })
                .collect::<Result<_>>()?;
            let mut per_sample = per_sample.into_iter();
            let mut bb_grads = per_sample.next().expect("non-empty batch");
            for g in per_sample {
                for ((_, acc), (_, x)) in bb_grads.params_mut().into_iter().zip(g.params()) {
                    for (a, v) in acc.data_mut().iter_mut().zip(x.data()) {
                        *a += v;
                    }
                }
            }

            let mut params: Vec<&mut Tensor> = Vec::new();
            let mut grads: Vec<&Tensor> = Vec::new();
            for ((name, p), (_, g)) in backbone.params_mut().into_iter().zip(bb_grads.params()) {
                if !(cfg.freeze_backbone && is_conv_param(&name)) {
                    params.push(p);
                    grads.push(g);
                }
            }
            for ((_, p), (_, g)) in flow.params_mut().into_iter().zip(flow_grads.params()) {
                params.push(p);
                grads.push(g);
            }
            adam.step(&mut params, &grads);
        }
        let mean_nll = epoch_sum / order.len() as f64;
        report.epoch_losses.push(mean_nll);
        on_epoch(&EpochStats { epoch, mean_nll });
        let limit = DIVERGENCE_FACTOR * report.epoch_losses[0].abs().max(1.0);
        if mean_nll > limit {
            return Err(Error::Numeric(format!(
                "training diverged at epoch {epoch}: mean nll {mean_nll} exceeds {limit}"
            )));
        }
    }
    Ok(report)
}

/// nll of every evaluation transform of `image`, in transform order.
pub fn transform_nlls(backbone: &Backbone, flow: &Flow, image: &Tensor, cfg: &ScoringConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    cfg.rotations()
        .into_iter()
        .map(|deg| {
            let x = rotate(image, deg)?;
            let f = backbone.extract_features(&x)?;
            Ok(flow.forward(f.values())?.nll())
        })
        .collect()
}

/// Mean nll over the evaluation transforms; higher is more anomalous.
pub fn anomaly_score(backbone: &Backbone, flow: &Flow, image: &Tensor, cfg: &ScoringConfig) -> Result<f64> {
    let nlls = transform_nlls(backbone, flow, image, cfg)?;
    Ok(nlls.iter().sum::<f64>() / nlls.len() as f64)
}

/// [`anomaly_score`] for many images in parallel, results in input order.
pub fn score_images(backbone: &Backbone, flow: &Flow, images: &[Tensor], cfg: &ScoringConfig) -> Result<Vec<f64>> {
    images
        .par_iter()
        .map(|img| anomaly_score(backbone, flow, img, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::backbone::BackboneSpec;
    use crate::flow::FlowConfig;

    fn tiny(kind: AttentionKind) -> (Backbone, Flow) {
        let spec = BackboneSpec::from_layout(&[4, 6], &[3, 3], &[1], 2, kind, &[8, 4]);
        let bb = Backbone::new(spec, 1).unwrap();
        let flow = Flow::new(FlowConfig::new(bb.feature_dim(), 2)).unwrap();
        (bb, flow)
    }

    fn images(n: usize) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|_| Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.gen::<f32>()).collect()).unwrap())
            .collect()
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            n_train_transforms: 2,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn augment_identity() {
        let img = images(1).remove(0);
        let out = augment_with(&img, 0.0, 1.0).unwrap();
        assert!(out.max_abs_diff(&img) <= 1e-6);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut bb, mut flow) = tiny(AttentionKind::Se);
        let (bb0, flow0) = (bb.clone(), flow.clone());
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(3)
        };
        train(&mut bb, &mut flow, &images(8), &cfg, |_| {}).unwrap();
        assert_eq!(bb, bb0);
        assert_eq!(flow, flow0);
    }

    #[test]
    fn same_seed_same_losses() {
        let run = || {
            let (mut bb, mut flow) = tiny(AttentionKind::Cbam);
            train(&mut bb, &mut flow, &images(8), &quick(5), |_| {}).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_backbone_keeps_convs() {
        let (mut bb, mut flow) = tiny(AttentionKind::Se);
        let bb0 = bb.clone();
        let flow0 = flow.clone();
        let cfg = TrainConfig {
            freeze_backbone: true,
            learning_rate: 1e-3,
            ..quick(4)
        };
        train(&mut bb, &mut flow, &images(8), &cfg, |_| {}).unwrap();
        for ((name, a), (_, b)) in bb.params().into_iter().zip(bb0.params()) {
            if is_conv_param(&name) {
                assert_eq!(a, b, "{name}");
            }
        }
        let attn_changed = bb
            .params()
            .into_iter()
            .zip(bb0.params())
            .any(|((n, a), (_, b))| !is_conv_param(&n) && a != b);
        assert!(attn_changed);
        assert_ne!(flow, flow0);
    }

    #[test]
    fn empty_and_small_sets_rejected() {
        let (mut bb, mut flow) = tiny(AttentionKind::None);
        assert!(matches!(train(&mut bb, &mut flow, &[], &quick(1), |_| {}), Err(Error::Input(_))));
        assert!(train(&mut bb, &mut flow, &images(2), &quick(1), |_| {}).is_err());
    }

    #[test]
    fn single_identity_transform_is_plain_nll() {
        let (bb, flow) = tiny(AttentionKind::Se);
        let img = images(1).remove(0);
        let cfg = ScoringConfig { n_eval_transforms: 1 };
        let s = anomaly_score(&bb, &flow, &img, &cfg).unwrap();
        let f = bb.extract_features(&img).unwrap();
        assert_eq!(s, flow.forward(f.values()).unwrap().nll());
    }

    #[test]
    fn rotations_are_evenly_spaced() {
        let cfg = ScoringConfig { n_eval_transforms: 4 };
        assert_eq!(cfg.rotations(), vec![0.0, 90.0, 180.0, 270.0]);
    }
}
