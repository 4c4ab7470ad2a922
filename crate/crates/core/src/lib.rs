//! Unsupervised image anomaly detection: a small attention-gated CNN feature
//! extractor feeding a normalizing flow, scored by negative log-likelihood.

pub mod attention;
pub mod attribution;
pub mod backbone;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod evalkit;
pub mod flow;
pub mod fsutil;
pub mod image;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use attention::AttentionKind;
pub use attribution::{grad_cam, write_heatmap_overlay, Heatmap};
pub use backbone::{Backbone, BackboneSpec, FeatureVector};
pub use config::{Checkpoint, RunConfig, Variant};
pub use datapipe::{decode_image, load_dataset, read_tensor, synth_dataset, write_tensor, DatasetLayout, Sample};
pub use error::{Error, Result};
pub use evalkit::{auroc, render_report, select_threshold, EvalReport, Label, ReportFormat, ScoredSet};
pub use flow::{Flow, FlowConfig, FlowOutput};
pub use tensor::Tensor;
pub use trainer::{anomaly_score, augment, train, ScoringConfig, TrainConfig};
pub use weights::{export_weights, import_weights};
