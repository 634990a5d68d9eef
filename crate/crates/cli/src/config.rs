//! Flat experiment configuration read from a JSON file.

use std::path::Path;

use depthar::encoders::{BackboneConfig, SsmConfig};
use depthar::fusion::FuseSpace;
use depthar::model::{Ablation, ModelConfig};
use depthar::synthvid::{DepthMode, DepthNorm, GenConfig};
use depthar::training::{Schedule, TrainConfig};
use depthar::{Error, Result};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Every knob of an experiment in one flat object. Keys match the field
/// names exactly; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub height: usize,
    pub width: usize,
    pub total_frames: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
    pub depth_norm: DepthNorm,
    /// Frames kept per clip by stride sampling.
    pub frames: usize,
    pub stride: usize,
    pub n_per_class: usize,
    pub split_ratio: f64,
    #[serde(serialize_with = "as_string", deserialize_with = "from_string")]
    pub depth_mode: DepthMode,

    pub patch: usize,
    pub backbone_dim: usize,
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    pub side_dim: usize,
    pub ssm_state: usize,
    pub ssm_expand: usize,
    pub ssm_blocks: usize,
    pub ssm_conv: usize,
    pub ssm_dt_rank: usize,
    pub ssm_scan_block: Option<usize>,
    pub fusion_layers: usize,
    pub ablation: Ablation,

    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub fuse_space: FuseSpace,
    pub aux_loss_weight: f64,
    pub schedule: Schedule,
    pub record_seconds: bool,

    /// Output directory; `--out` overrides it.
    pub out: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let (b, s) = (model.backbone, model.ssm);
        Self {
            height: gen.height,
            width: gen.width,
            total_frames: gen.total_frames,
            num_classes: gen.num_classes,
            noise_sigma: gen.noise_sigma,
            depth_norm: gen.depth_norm,
            frames: b.frames,
            stride: 4,
            n_per_class: 100,
            split_ratio: 0.8,
            depth_mode: DepthMode::GroundTruth,
            patch: b.patch,
            backbone_dim: b.dim,
            backbone_layers: b.layers,
            backbone_heads: b.heads,
            side_dim: model.side_dim,
            ssm_state: s.state,
            ssm_expand: s.expand,
            ssm_blocks: s.blocks,
            ssm_conv: s.conv,
            ssm_dt_rank: s.dt_rank,
            ssm_scan_block: s.scan_block,
            fusion_layers: model.fusion_layers,
            ablation: model.ablation,
            lr: train.lr,
            weight_decay: train.weight_decay,
            beta1: train.betas.0,
            beta2: train.betas.1,
            eps: train.eps,
            epochs: train.epochs,
            batch_size: train.batch_size,
            eval_batch_size: train.eval_batch_size,
            seed: train.seed,
            fuse_space: train.fuse_space,
            aux_loss_weight: train.aux_loss_weight,
            schedule: train.schedule,
            record_seconds: train.record_seconds,
            out: None,
        }
    }
}

fn as_string<S: Serializer>(mode: &DepthMode, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(mode)
}

fn from_string<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DepthMode, D::Error> {
    let text = String::deserialize(d)?;
    text.parse().map_err(serde::de::Error::custom)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config {
            field: unknown_field(&e.to_string()).unwrap_or_else(|| "config".into()),
            reason: e.to_string(),
        })?;
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

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            height: self.height,
            width: self.width,
            total_frames: self.total_frames,
            num_classes: self.num_classes,
            noise_sigma: self.noise_sigma,
            depth_norm: self.depth_norm,
            ..GenConfig::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                height: self.height,
                width: self.width,
                frames: self.frames,
                patch: self.patch,
                dim: self.backbone_dim,
                layers: self.backbone_layers,
                heads: self.backbone_heads,
            },
            side_dim: self.side_dim,
            ssm: SsmConfig {
                state: self.ssm_state,
                expand: self.ssm_expand,
                blocks: self.ssm_blocks,
                conv: self.ssm_conv,
                dt_rank: self.ssm_dt_rank,
                scan_block: self.ssm_scan_block,
            },
            fusion_layers: self.fusion_layers,
            num_classes: self.num_classes,
            ablation: self.ablation,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            betas: (self.beta1, self.beta2),
            eps: self.eps,
            epochs: self.epochs,
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            seed: self.seed,
            fuse_space: self.fuse_space,
            aux_loss_weight: self.aux_loss_weight,
            schedule: self.schedule,
            record_seconds: self.record_seconds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.depth_mode.validate()?;
        if self.frames == 0 || self.stride == 0 {
            return Err(Error::config(
                "stride",
                "frames and stride must be positive",
            ));
        }
        if (self.frames - 1) * self.stride >= self.total_frames {
            return Err(Error::config(
                "stride",
                format!(
                    "{} frames at stride {} need more than {} rendered frames",
                    self.frames, self.stride, self.total_frames
                ),
            ));
        }
        if self.n_per_class < 2 {
            return Err(Error::config(
                "n_per_class",
                "need at least 2 clips per class",
            ));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config(
                "split_ratio",
                "must lie strictly between 0 and 1",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        Ok(())
    }
}

/// Pulls `name` out of serde's "unknown field `name`" message.
fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    rest.split('`').next().map(str::to_owned)
}
