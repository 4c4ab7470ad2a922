//! Shared fixtures for the criterion benches.

use adf_core::backbone::BackboneSpec;
use adf_core::{AttentionKind, Backbone, Flow, FlowConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("shape matches")
}

/// Desk-scale model at the scales used for 64x64 inputs.
pub fn desk_model(kind: AttentionKind) -> (Backbone, Flow) {
    let spec = BackboneSpec::desk_scale(kind).with_scales(&[64, 32, 16]);
    let bb = Backbone::new(spec, 1).expect("valid desk spec");
    let flow = Flow::new(FlowConfig::new(bb.feature_dim(), 1)).expect("valid flow");
    (bb, flow)
}
