//! Grad-CAM heatmaps of the anomaly score.

use std::path::Path;

use crate::backbone::Backbone;
use crate::datapipe::pnm;
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::fsutil;
use crate::image::{resize_bilinear, rotate};
use crate::tensor::Tensor;
use crate::trainer::ScoringConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[H, W]` in `[0, 1]`.
    pub values: Tensor,
    pub source_layer: String,
    pub input_id: String,
}

impl Heatmap {
    pub fn file_name(&self) -> String {
        format!("{}.{}.ppm", self.input_id.replace(['/', '\\'], "_"), self.source_layer)
    }
}

/// Activation of `stage` at the largest scale and the gradient of the
/// anomaly score with respect to it, one pair per evaluation transform.
/// Each gradient already carries the `1 / n` factor of the transform mean.
pub fn stage_gradients(
    backbone: &Backbone,
    flow: &Flow,
    image: &Tensor,
    stage: usize,
    scoring: &ScoringConfig,
) -> Result<Vec<(Tensor, Tensor)>> {
    scoring.validate()?;
    let rotations = scoring.rotations();
    let inv_n = 1.0 / rotations.len() as f32;
    rotations
        .into_iter()
        .map(|deg| {
            let x = rotate(image, deg)?;
            let (f, trace) = backbone.extract_features_traced(&x)?;
            let (_, mut df) = flow.nll_gradient(f.values())?;
            df.data_mut().iter_mut().for_each(|v| *v *= inv_n);
            let grad = backbone.stage_output_gradient(&trace, df.data(), 0, stage)?;
            Ok((trace.scales[0].stage_output(stage).clone(), grad))
        })
        .collect()
}

pub fn grad_cam(
    backbone: &Backbone,
    flow: &Flow,
    image: &Tensor,
    target_stage: &str,
    scoring: &ScoringConfig,
) -> Result<Heatmap> {
    grad_cam_with_hook(backbone, flow, image, target_stage, scoring, &mut |_| {})
}

/// [`grad_cam`] with `hook` applied to every per-transform activation
/// gradient before channel weights are pooled from it.
pub fn grad_cam_with_hook(
    backbone: &Backbone,
    flow: &Flow,
    image: &Tensor,
    target_stage: &str,
    scoring: &ScoringConfig,
    hook: &mut dyn FnMut(&mut Tensor),
) -> Result<Heatmap> {
    let stage = backbone.spec().stage_index(target_stage)?;
    let (_, h, w) = image.dims3()?;
    let pairs = stage_gradients(backbone, flow, image, stage, scoring)?;
    let (c, ah, aw) = pairs[0].0.dims3()?;
    let plane = ah * aw;
    // Channel weights: spatial mean of d(score)/dA, summed over transforms.
    let mut weights = vec![0.0f64; c];
    for (_, mut g) in pairs.iter().map(|(a, g)| (a, g.clone())) {
        hook(&mut g);
        for (wc, gc) in weights.iter_mut().zip(g.data().chunks(plane)) {
            *wc += gc.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        }
    }
    // Identity transform activations.
    let act = &pairs[0].0;
    let mut cam = vec![0.0f64; plane];
    for (wc, ac) in weights.iter().zip(act.data().chunks(plane)) {
        for (m, &a) in cam.iter_mut().zip(ac) {
            *m += wc * a as f64;
        }
    }
    let cam: Vec<f32> = cam.into_iter().map(|v| v.max(0.0) as f32).collect();
    let up = resize_bilinear(&Tensor::new(vec![1, ah, aw], cam)?, h, w)?;
    let values = normalize(up.into_data());
    Ok(Heatmap {
        values: Tensor::new(vec![h, w], values)?,
        source_layer: target_stage.to_string(),
        input_id: String::new(),
    })
}

/// Min-max normalization; all-zero stays zero and a constant positive map
/// becomes all ones.
fn normalize(mut v: Vec<f32>) -> Vec<f32> {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let min = v.iter().copied().fold(f32::INFINITY, f32::min);
    if !(max > 0.0) {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else if max > min {
        let span = max - min;
        v.iter_mut().for_each(|x| *x = (*x - min) / span);
    } else {
        v.iter_mut().for_each(|x| *x = 1.0);
    }
    v
}

/// Colormap from blue at 0 to red at 1, as RGB in `[0, 255]`.
pub fn colormap(h: f32) -> [f32; 3] {
    let h = h.clamp(0.0, 1.0);
    [255.0 * h, 0.0, 255.0 * (1.0 - h)]
}

/// P6 bytes of the grayscale image blended 50/50 with the heatmap colors.
pub fn overlay_ppm(image: &Tensor, heatmap: &Heatmap) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if heatmap.values.shape() != [h, w] {
        return Err(Error::dim("overlay", heatmap.values.shape(), &[h, w]));
    }
    let plane = h * w;
    let d = image.data();
    let mut rgb = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        let gray = (0..c).map(|ch| d[ch * plane + p]).sum::<f32>() / c as f32;
        let gray = 255.0 * gray.clamp(0.0, 1.0);
        for col in colormap(heatmap.values.data()[p]) {
            rgb.push((0.5 * gray + 0.5 * col).round() as u8);
        }
    }
    Ok(pnm::encode_rgb_bytes(w, h, &rgb))
}

pub fn write_heatmap_overlay(image: &Tensor, heatmap: &Heatmap, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &overlay_ppm(image, heatmap)?)
}
