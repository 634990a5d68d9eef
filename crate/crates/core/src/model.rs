//! The full two-stream classifier and its ablations.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    depth_tensor, frozen_forward, mamba_encode, patch_embed, rgb_tensor, side_forward,
    BackboneConfig, BackboneParams, EncodedFeatures, SideNetParams, SsmConfig, SsmParams,
};
use crate::error::{Error, Result};
use crate::fusion::{
    bidirectional_fuse, mean_fuse_var, stream_logits, FuseSpace, FusionPair, StreamHead, GCA_HEADS,
};
use crate::nn::{Forward, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::synthvid::VideoClip;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    RgbOnly,
    RgbDepth,
    #[default]
    RgbDepthMamba,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [
        Ablation::RgbOnly,
        Ablation::RgbDepth,
        Ablation::RgbDepthMamba,
    ];

    pub fn uses_depth(self) -> bool {
        self != Ablation::RgbOnly
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::RgbOnly => "rgb_only",
            Ablation::RgbDepth => "rgb_depth",
            Ablation::RgbDepthMamba => "rgb_depth_mamba",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::config("ablation", format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub side_dim: usize,
    pub ssm: SsmConfig,
    pub fusion_layers: usize,
    pub num_classes: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            backbone,
            side_dim: backbone.dim / 4,
            ssm: SsmConfig::default(),
            fusion_layers: 1,
            num_classes: 6,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.ssm.validate()?;
        if self.side_dim == 0 || !self.side_dim.is_multiple_of(GCA_HEADS) {
            return Err(Error::config(
                "side_dim",
                format!(
                    "{} is not a positive multiple of {GCA_HEADS}",
                    self.side_dim
                ),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        Ok(())
    }
}

/// Frozen backbone activations of one clip. They never change during
/// training, so they are computed once per clip and reused every epoch.
#[derive(Clone, Debug)]
pub struct ClipFeatures<F> {
    pub rgb: Vec<Tensor<F>>,
    /// Present unless the model is RGB-only.
    pub depth: Option<Vec<Tensor<F>>>,
    pub patches: usize,
}

/// Scores of one forward pass, each `batch × C`.
#[derive(Clone, Copy, Debug)]
pub struct StreamScores {
    pub logits_a: Var,
    pub logits_b: Option<Var>,
    /// Mean of the stream logits (or the single stream's logits).
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub backbone: BackboneParams,
    pub rgb_side: SideNetParams,
    pub depth_side: Option<SideNetParams>,
    pub ssm: Option<SsmParams>,
    pub fusion_a: Option<FusionPair>,
    pub fusion_b: Option<FusionPair>,
    pub head_a: StreamHead,
    pub head_b: Option<StreamHead>,
}

impl<F: Scalar> Model<F> {
    /// Builds every branch the ablation needs; parameters are drawn from a
    /// generator seeded with `seed` in a fixed registration order.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let b = &cfg.backbone;
        let d = cfg.side_dim;
        let backbone = BackboneParams::init(&mut store, &mut rng, "backbone", *b)?;
        let rgb_side = SideNetParams::init(&mut store, &mut rng, "rgb_side", b.layers, b.dim, d)?;
        let classes = cfg.num_classes;
        let (mut depth_side, mut fusion_a, mut ssm, mut fusion_b, mut head_b) =
            (None, None, None, None, None);
        let head_a = if cfg.ablation.uses_depth() {
            depth_side = Some(SideNetParams::init(
                &mut store,
                &mut rng,
                "depth_side",
                b.layers,
                b.dim,
                d,
            )?);
            fusion_a = Some(FusionPair::init(
                &mut store,
                &mut rng,
                "fusion_a",
                d,
                cfg.fusion_layers,
                GCA_HEADS,
            )?);
            StreamHead::init(&mut store, &mut rng, "head_a", 2 * d, classes)
        } else {
            StreamHead::init(&mut store, &mut rng, "head_a", d, classes)
        };
        if cfg.ablation == Ablation::RgbDepthMamba {
            ssm = Some(SsmParams::init(
                &mut store, &mut rng, "ssm", cfg.ssm, b.dim, d,
            )?);
            fusion_b = Some(FusionPair::init(
                &mut store,
                &mut rng,
                "fusion_b",
                d,
                cfg.fusion_layers,
                GCA_HEADS,
            )?);
            head_b = Some(StreamHead::init(
                &mut store,
                &mut rng,
                "head_b",
                2 * d,
                classes,
            ));
        }
        Ok(Self {
            cfg,
            store,
            backbone,
            rgb_side,
            depth_side,
            ssm,
            fusion_a,
            fusion_b,
            head_a,
            head_b,
        })
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.backbone.ids()
    }

    /// SHA-256 of every frozen backbone tensor.
    pub fn backbone_hash(&self) -> [u8; 32] {
        self.store.hash(self.backbone_ids().into_iter())
    }

    pub fn backbone_param_count(&self) -> usize {
        self.store.count(self.backbone_ids().into_iter())
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.count(self.store.trainable())
    }

    /// Every GCA gate of both streams.
    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.fusion_a
            .iter()
            .chain(&self.fusion_b)
            .flat_map(|p| p.gates())
            .collect()
    }

    /// Runs the frozen backbone on the clip's RGB frames and (unless
    /// RGB-only) on its depth maps replicated to three channels.
    pub fn frozen_features(&self, clip: &VideoClip) -> Result<ClipFeatures<F>> {
        let (t, h, w) = (clip.num_frames, clip.height, clip.width);
        let rgb = rgb_tensor(&clip.frames, t, h, w)?;
        let rgb_seq = patch_embed(&rgb, &self.backbone, &self.store)?;
        let rgb_acts = frozen_forward(&rgb_seq, &self.backbone, &self.store)?;
        let depth = if self.cfg.ablation.uses_depth() {
            let dt = depth_tensor(&clip.depth, t, h, w)?;
            let seq = patch_embed(&dt, &self.backbone, &self.store)?;
            Some(frozen_forward(&seq, &self.backbone, &self.store)?)
        } else {
            None
        };
        Ok(ClipFeatures {
            rgb: rgb_acts,
            depth,
            patches: rgb_seq.patches,
        })
    }

    /// Per-sample encoder outputs: RGB side, depth side and Mamba features.
    pub fn encode(
        &self,
        cx: &mut Forward<'_, F>,
        feats: &ClipFeatures<F>,
    ) -> Result<(
        EncodedFeatures,
        Option<EncodedFeatures>,
        Option<EncodedFeatures>,
    )> {
        let rgb_acts: Vec<Var> = feats.rgb.iter().map(|t| cx.g.constant(t.clone())).collect();
        let rgb = side_forward(cx, &rgb_acts, feats.patches, &self.rgb_side)?;
        let Some(depth_side) = &self.depth_side else {
            return Ok((rgb, None, None));
        };
        let depth_feats = feats
            .depth
            .as_ref()
            .ok_or_else(|| Error::contract("model uses depth but features have none"))?;
        let depth_acts: Vec<Var> = depth_feats
            .iter()
            .map(|t| cx.g.constant(t.clone()))
            .collect();
        let depth = side_forward(cx, &depth_acts, feats.patches, depth_side)?;
        let mamba = match &self.ssm {
            Some(ssm) => {
                // patch tokens of the depth embedding, class token dropped
                let rows = depth_feats[0].rows();
                let tokens = cx.g.slice_rows(depth_acts[0], 1, rows - 1)?;
                Some(mamba_encode(cx, tokens, feats.patches, ssm)?)
            }
            None => None,
        };
        Ok((rgb, Some(depth), mamba))
    }

    /// Logits for a batch of clips. With `fuse = false` the GCA layers are
    /// skipped and each head sees the unfused concatenated features.
    pub fn forward_batch(
        &self,
        cx: &mut Forward<'_, F>,
        batch: &[&ClipFeatures<F>],
        fuse: bool,
    ) -> Result<StreamScores> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut rows_a = Vec::with_capacity(batch.len());
        let mut rows_b = Vec::with_capacity(batch.len());
        for feats in batch {
            let (rgb, depth, mamba) = self.encode(cx, feats)?;
            let Some(depth) = depth else {
                rows_a.push(stream_logits(cx, &[rgb.frame_tokens], &self.head_a)?);
                continue;
            };
            let (r, d) = match (&self.fusion_a, fuse) {
                (Some(pair), true) => {
                    bidirectional_fuse(cx, rgb.frame_tokens, depth.frame_tokens, pair)?
                }
                _ => (rgb.frame_tokens, depth.frame_tokens),
            };
            rows_a.push(stream_logits(cx, &[r, d], &self.head_a)?);
            if let (Some(m), Some(head_b)) = (mamba, &self.head_b) {
                let (r, m) = match (&self.fusion_b, fuse) {
                    (Some(pair), true) => {
                        bidirectional_fuse(cx, rgb.frame_tokens, m.frame_tokens, pair)?
                    }
                    _ => (rgb.frame_tokens, m.frame_tokens),
                };
                rows_b.push(stream_logits(cx, &[r, m], head_b)?);
            }
        }
        let logits_a = stack(cx, &rows_a)?;
        let logits_b = if rows_b.is_empty() {
            None
        } else {
            Some(stack(cx, &rows_b)?)
        };
        let fused = match logits_b {
            Some(b) => mean_fuse_var(cx, logits_a, b)?,
            None => logits_a,
        };
        Ok(StreamScores {
            logits_a,
            logits_b,
            fused,
        })
    }

    /// Class probabilities of the fused prediction (`batch × C`).
    pub fn fused_probs(
        &self,
        cx: &mut Forward<'_, F>,
        scores: &StreamScores,
        space: FuseSpace,
    ) -> Result<Var> {
        match (space, scores.logits_b) {
            (FuseSpace::Prob, Some(b)) => {
                let pa = cx.g.softmax(scores.logits_a)?;
                let pb = cx.g.softmax(b)?;
                mean_fuse_var(cx, pa, pb)
            }
            _ => cx.g.softmax(scores.fused),
        }
    }
}

fn stack<F: Scalar>(cx: &mut Forward<'_, F>, rows: &[Var]) -> Result<Var> {
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        cx.g.concat_rows(rows)
    }
}
