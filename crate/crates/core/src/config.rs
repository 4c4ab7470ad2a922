//! Flat JSON run configuration and on-disk checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::attention::{AttentionKind, DEFAULT_REDUCTION, DEFAULT_SPATIAL_KERNEL};
use crate::backbone::{Backbone, BackboneSpec, DESK_CHANNELS, DESK_KERNELS, DESK_POOL_AFTER, DESK_SCALES};
use crate::error::{Error, Result};
use crate::flow::{Flow, FlowConfig, DEFAULT_BLOCKS, DEFAULT_CLAMP};
use crate::fsutil;
use crate::trainer::{ScoringConfig, TrainConfig};
use crate::weights;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Differnet,
    AttentSe,
    AttentCbam,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Differnet, Variant::AttentSe, Variant::AttentCbam];

    pub fn attention(self) -> AttentionKind {
        match self {
            Variant::Differnet => AttentionKind::None,
            Variant::AttentSe => AttentionKind::Se,
            Variant::AttentCbam => AttentionKind::Cbam,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Differnet => "differnet",
            Variant::AttentSe => "attent_se",
            Variant::AttentCbam => "attent_cbam",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::Config(format!("variant: unknown value {s:?}")))
    }
}

/// Every tunable of a run in one flat JSON object. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub scales: Vec<usize>,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    /// One-based stage indices followed by a max pool.
    pub pool_after: Vec<usize>,
    pub pool_window: usize,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
    pub n_blocks: usize,
    /// `None` means `min(2 * dim, 512)`.
    pub subnet_hidden: Option<usize>,
    pub clamp: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub n_train_transforms: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub n_eval_transforms: usize,
    pub dataset_root: Option<PathBuf>,
    pub category: Option<String>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            variant: Variant::default(),
            scales: DESK_SCALES.to_vec(),
            channels: DESK_CHANNELS.to_vec(),
            kernels: DESK_KERNELS.to_vec(),
            pool_after: DESK_POOL_AFTER.to_vec(),
            pool_window: 2,
            reduction_ratio: DEFAULT_REDUCTION,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
            n_blocks: DEFAULT_BLOCKS,
            subnet_hidden: None,
            clamp: DEFAULT_CLAMP,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            n_train_transforms: train.n_train_transforms,
            seed: train.seed,
            freeze_backbone: train.freeze_backbone,
            n_eval_transforms: ScoringConfig::default().n_eval_transforms,
            dataset_root: None,
            category: None,
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// Parses and validates. Errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let cfg: RunConfig = match serde_json::from_value(Value::Object(map.clone())) {
            Ok(c) => c,
            Err(e) => {
                // Retry key by key so the message can name the culprit.
                for (k, v) in &map {
                    let single = Map::from_iter([(k.clone(), v.clone())]);
                    if let Err(ke) = serde_json::from_value::<RunConfig>(Value::Object(single)) {
                        return Err(Error::Config(format!("key {k:?}: {ke}")));
                    }
                }
                return Err(Error::Config(e.to_string()));
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        let mut spec = BackboneSpec::from_layout(
            &self.channels,
            &self.kernels,
            &self.pool_after,
            self.pool_window,
            self.variant.attention(),
            &self.scales,
        );
        spec.reduction_ratio = self.reduction_ratio;
        spec.spatial_kernel = self.spatial_kernel;
        spec
    }

    pub fn flow_config(&self, dim: usize) -> FlowConfig {
        let mut cfg = FlowConfig::new(dim, self.seed);
        cfg.n_blocks = self.n_blocks;
        cfg.clamp = self.clamp;
        if let Some(h) = self.subnet_hidden {
            cfg.subnet_hidden = h;
        }
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            n_train_transforms: self.n_train_transforms,
            seed: self.seed,
            freeze_backbone: self.freeze_backbone,
        }
    }

    pub fn scoring_config(&self) -> ScoringConfig {
        ScoringConfig {
            n_eval_transforms: self.n_eval_transforms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.kernels.len() {
            return Err(Error::Config(format!(
                "channels has {} entries but kernels has {}",
                self.channels.len(),
                self.kernels.len()
            )));
        }
        if let Some(&p) = self.pool_after.iter().find(|&&p| p == 0 || p > self.channels.len()) {
            return Err(Error::Config(format!("pool_after: stage {p} does not exist")));
        }
        self.backbone_spec().validate()?;
        self.train_config().validate()?;
        self.scoring_config().validate()?;
        self.flow_config(self.backbone_spec().feature_dim()).validate()?;
        Ok(())
    }

    /// Fresh model initialized from `seed`.
    pub fn build(&self) -> Result<(Backbone, Flow)> {
        let backbone = Backbone::new(self.backbone_spec(), self.seed)?;
        let flow = Flow::new(self.flow_config(backbone.feature_dim()))?;
        Ok((backbone, flow))
    }
}

pub const WEIGHTS_FILE: &str = "model.adwt";
pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_FILE: &str = "loss.csv";

/// A trained model plus the configuration that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub backbone: Backbone,
    pub flow: Flow,
    pub epoch_losses: Vec<f64>,
}

pub fn render_losses(losses: &[f64]) -> String {
    let mut s = String::from("epoch,mean_nll\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

impl Checkpoint {
    /// Writes weights, config echo and loss curve into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fsutil::create_dir_all(dir)?;
        weights::export_weights(&dir.join(WEIGHTS_FILE), &self.backbone, Some(&self.flow))?;
        fsutil::write_atomic(&dir.join(CONFIG_FILE), self.config.to_json().as_bytes())?;
        fsutil::write_atomic(&dir.join(LOSS_FILE), render_losses(&self.epoch_losses).as_bytes())
    }

    /// Rebuilds the model from `config.json` and loads `model.adwt`.
    pub fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let (mut backbone, mut flow) = config.build()?;
        weights::import_weights(&dir.join(WEIGHTS_FILE), &mut backbone, Some(&mut flow))?;
        Ok(Checkpoint {
            config,
            backbone,
            flow,
            epoch_losses: Vec::new(),
        })
    }
}
