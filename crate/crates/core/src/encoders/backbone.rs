//! Frozen patch-transformer backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Forward, Init, Linear, Norm, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    /// Number of temporal position embeddings (maximum clip length).
    pub frames: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 8,
            patch: 8,
            dim: 64,
            layers: 4,
            heads: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(Error::config(field, reason));
        if self.patch == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return bad(
                "patch",
                format!(
                    "{}x{} frames are not divisible into {} pixel patches",
                    self.height, self.width, self.patch
                ),
            );
        }
        if self.frames == 0 {
            return bad("frames", "must be positive".into());
        }
        if self.layers == 0 {
            return bad("layers", "must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(
                "heads",
                format!("dim {} not divisible by {} heads", self.dim, self.heads),
            );
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }
}

#[derive(Clone, Debug)]
pub struct BackboneLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub cfg: BackboneConfig,
    pub patch: Linear,
    pub spatial_pos: ParamId,
    pub temporal_pos: ParamId,
    pub cls: ParamId,
    pub layers: Vec<BackboneLayer>,
}

/// Position embeddings are frozen, so they must be comparable in scale to
/// the patch projections for frame order to survive into the features.
const POS_STD: f64 = 0.5;

impl BackboneParams {
    /// Registers frozen random weights under `prefix`.
    pub fn init<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        cfg: BackboneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init {
            store,
            rng,
            trainable: false,
        };
        let d = cfg.dim;
        let patch = init.linear(&format!("{prefix}.patch"), cfg.patch_len(), d);
        let spatial_pos = init.randn(
            format!("{prefix}.spatial_pos"),
            &[cfg.patches_per_frame(), d],
            POS_STD,
        );
        let temporal_pos = init.randn(format!("{prefix}.temporal_pos"), &[cfg.frames, d], POS_STD);
        let cls = init.randn(format!("{prefix}.cls"), &[1, d], 0.02);
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = format!("{prefix}.layer{l}");
                BackboneLayer {
                    norm1: init.norm(&format!("{name}.norm1"), d),
                    attn: Attention::init(&mut init, &format!("{name}.attn"), d, cfg.heads),
                    norm2: init.norm(&format!("{name}.norm2"), d),
                    fc1: init.linear(&format!("{name}.fc1"), d, 4 * d),
                    fc2: init.linear(&format!("{name}.fc2"), 4 * d, d),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            patch,
            spatial_pos,
            temporal_pos,
            cls,
            layers,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch.w];
        ids.extend(self.patch.b);
        ids.extend([self.spatial_pos, self.temporal_pos, self.cls]);
        for l in &self.layers {
            ids.extend([l.norm1.gain, l.norm1.bias, l.attn.wq, l.attn.wk, l.attn.wv]);
            ids.extend([l.attn.wo, l.norm2.gain, l.norm2.bias, l.fc1.w, l.fc2.w]);
            ids.extend(l.fc1.b.into_iter().chain(l.fc2.b));
        }
        ids
    }
}

/// Backbone tokens: row 0 is the class token, then `frames · patches`
/// patch tokens in frame-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<F> {
    pub tokens: Tensor<F>,
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
}

impl<F: Scalar> TokenSequence<F> {
    pub fn len(&self) -> usize {
        self.frames * self.patches + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Builds a `T×H×W×3` tensor from interleaved RGB frames.
pub fn rgb_tensor<F: Scalar>(frames: &[f32], t: usize, h: usize, w: usize) -> Result<Tensor<F>> {
    let data = frames.iter().map(|&v| F::lit(f64::from(v))).collect();
    Tensor::from_vec(&[t, h, w, CHANNELS], data)
}

/// Replicates a single-channel depth video into three channels.
pub fn depth_tensor<F: Scalar>(depth: &[f32], t: usize, h: usize, w: usize) -> Result<Tensor<F>> {
    let data = depth
        .iter()
        .flat_map(|&v| [F::lit(f64::from(v)); CHANNELS])
        .collect();
    Tensor::from_vec(&[t, h, w, CHANNELS], data)
}

/// Cuts `T×H×W×C` frames into non-overlapping `p×p` patches, one row per
/// patch (frame-major, then row-major over the patch grid), each row laid
/// out as `(dy, dx, c)`.
pub fn extract_patches<F: Scalar>(frames: &Tensor<F>, patch: usize) -> Result<Tensor<F>> {
    let &[t, h, w, c] = frames.shape() else {
        return Err(Error::shape(
            "extract_patches",
            frames.shape(),
            &[0, 0, 0, 0],
        ));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "extract_patches",
            frames.shape(),
            &[patch, patch],
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = patch * patch * c;
    let src = frames.data();
    let mut out = Vec::with_capacity(t * gh * gw * row_len);
    for f in 0..t {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = ((f * h + y) * w + px * patch) * c;
                    out.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    Tensor::from_vec(&[t * gh * gw, row_len], out)
}

/// Patch projection plus spatial and temporal position embeddings, with
/// the class token prepended.
pub fn patch_embed<F: Scalar>(
    frames: &Tensor<F>,
    params: &BackboneParams,
    store: &ParamStore<F>,
) -> Result<TokenSequence<F>> {
    let cfg = &params.cfg;
    let shape = frames.shape();
    if shape.len() != 4 || shape[1] != cfg.height || shape[2] != cfg.width || shape[3] != CHANNELS {
        return Err(Error::shape(
            "patch_embed",
            shape,
            &[cfg.frames, cfg.height, cfg.width, CHANNELS],
        ));
    }
    let t = shape[0];
    if t == 0 || t > cfg.frames {
        return Err(Error::contract(format!(
            "clip has {t} frames, backbone supports 1..={}",
            cfg.frames
        )));
    }
    let patches = extract_patches(frames, cfg.patch)?;
    let p = cfg.patches_per_frame();
    let mut cx = Forward::new(store);
    let x = cx.g.constant(patches);
    let x = params.patch.forward(&mut cx, x)?;
    let spatial = cx.p(params.spatial_pos);
    let spatial = cx.g.tile_rows(spatial, t)?;
    let temporal = cx.p(params.temporal_pos);
    let temporal = cx.g.slice_rows(temporal, 0, t)?;
    let temporal = cx.g.repeat_rows(temporal, p)?;
    let x = cx.g.add(x, spatial)?;
    let x = cx.g.add(x, temporal)?;
    let cls = cx.p(params.cls);
    let tokens = cx.g.concat_rows(&[cls, x])?;
    Ok(TokenSequence {
        tokens: cx.g.value(tokens).clone().with_grad(false),
        frames: t,
        patches: p,
        dim: cfg.dim,
    })
}

/// One pre-norm transformer layer inside `cx`.
pub fn layer_forward<F: Scalar>(
    cx: &mut Forward<'_, F>,
    layer: &BackboneLayer,
    x: Var,
) -> Result<Var> {
    let h = layer.norm1.forward(cx, x)?;
    let h = layer.attn.forward(cx, h, h)?;
    let x = cx.g.add(x, h)?;
    let h = layer.norm2.forward(cx, x)?;
    let h = layer.fc1.forward(cx, h)?;
    let h = cx.g.gelu(h);
    let h = layer.fc2.forward(cx, h)?;
    cx.g.add(x, h)
}

/// Runs the frozen layers and returns `L + 1` activations: the embedded
/// tokens followed by each layer's output. Nothing here is differentiated.
pub fn frozen_forward<F: Scalar>(
    tokens: &TokenSequence<F>,
    params: &BackboneParams,
    store: &ParamStore<F>,
) -> Result<Vec<Tensor<F>>> {
    if tokens.tokens.cols() != params.cfg.dim {
        return Err(Error::shape(
            "frozen_forward",
            tokens.tokens.shape(),
            &[tokens.len(), params.cfg.dim],
        ));
    }
    let mut acts = Vec::with_capacity(params.layers.len() + 1);
    acts.push(tokens.tokens.clone());
    let mut cur = tokens.tokens.clone();
    for layer in &params.layers {
        // A fresh graph per layer keeps only one layer's intermediates alive.
        let mut cx = Forward::new(store);
        let x = cx.g.constant(cur);
        let y = layer_forward(&mut cx, layer, x)?;
        cur = cx.g.value(y).clone().with_grad(false);
        acts.push(cur.clone());
    }
    Ok(acts)
}
