//! Trainable side network running in parallel with the frozen backbone.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Attention, Forward, Init, Linear, Norm, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Var;

pub const SIDE_HEADS: usize = 2;
pub const FUSION_INIT: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct SideBlock {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SideBlock {
    pub fn forward<F: Scalar>(&self, cx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(cx, x)?;
        let h = self.attn.forward(cx, h, h)?;
        let x = cx.g.add(x, h)?;
        let h = self.norm2.forward(cx, x)?;
        let h = self.fc1.forward(cx, h)?;
        let h = cx.g.gelu(h);
        let h = self.fc2.forward(cx, h)?;
        cx.g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct SideNetParams {
    /// `L + 1` projections from backbone dim `D` to side dim `d`.
    pub downs: Vec<Linear>,
    pub blocks: Vec<SideBlock>,
    /// One `[1]` scalar per layer tap.
    pub fusion: Vec<ParamId>,
    pub norm: Norm,
    pub dim: usize,
}

impl SideNetParams {
    pub fn init<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        layers: usize,
        backbone_dim: usize,
        dim: usize,
    ) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(SIDE_HEADS) {
            return Err(Error::config(
                "side_dim",
                format!("{dim} is not a positive multiple of {SIDE_HEADS}"),
            ));
        }
        let mut init = Init {
            store,
            rng,
            trainable: true,
        };
        let downs = (0..=layers)
            .map(|l| init.linear(&format!("{prefix}.down{l}"), backbone_dim, dim))
            .collect();
        let blocks = (0..layers)
            .map(|l| {
                let name = format!("{prefix}.block{l}");
                SideBlock {
                    norm1: init.norm(&format!("{name}.norm1"), dim),
                    attn: Attention::init(&mut init, &format!("{name}.attn"), dim, SIDE_HEADS),
                    norm2: init.norm(&format!("{name}.norm2"), dim),
                    fc1: init.linear(&format!("{name}.fc1"), dim, 2 * dim),
                    fc2: init.linear(&format!("{name}.fc2"), 2 * dim, dim),
                }
            })
            .collect();
        let fusion = (0..layers)
            .map(|l| init.full(format!("{prefix}.fusion{l}"), &[1], FUSION_INIT))
            .collect();
        let norm = init.norm(&format!("{prefix}.norm"), dim);
        Ok(Self {
            downs,
            blocks,
            fusion,
            norm,
            dim,
        })
    }
}

/// Side-network output: one pooled token per frame plus their mean.
#[derive(Clone, Copy, Debug)]
pub struct EncodedFeatures {
    pub frame_tokens: Var,
    pub pooled: Var,
}

/// `s₀ = down₀(a₀)`, `sₗ = blockₗ(sₗ₋₁) + fusionₗ · downₗ(aₗ)`, final norm,
/// then per-frame mean pooling over patch tokens (the class token row is
/// dropped). `acts` are backbone activations already placed in the graph
/// as constants; `patches` is the number of patch tokens per frame.
pub fn side_forward<F: Scalar>(
    cx: &mut Forward<'_, F>,
    acts: &[Var],
    patches: usize,
    side: &SideNetParams,
) -> Result<EncodedFeatures> {
    if acts.len() != side.downs.len() {
        return Err(Error::contract(format!(
            "side network taps {} layers but received {} activations",
            side.downs.len(),
            acts.len()
        )));
    }
    let mut s = side.downs[0].forward(cx, acts[0])?;
    for (l, block) in side.blocks.iter().enumerate() {
        let tap = side.downs[l + 1].forward(cx, acts[l + 1])?;
        let gate = cx.p(side.fusion[l]);
        let tap = cx.g.scale_by(tap, gate)?;
        let s_next = block.forward(cx, s)?;
        s = cx.g.add(s_next, tap)?;
    }
    let s = side.norm.forward(cx, s)?;
    let rows = cx.g.shape(s)[0];
    let body = cx.g.slice_rows(s, 1, rows - 1)?;
    pool_frames(cx, body, patches)
}

/// Averages each frame's patch tokens (`frames·patches × d → frames × d`)
/// and the resulting frame tokens.
pub fn pool_frames<F: Scalar>(
    cx: &mut Forward<'_, F>,
    tokens: Var,
    patches: usize,
) -> Result<EncodedFeatures> {
    let frame_tokens = cx.g.mean_groups(tokens, patches)?;
    let pooled = cx.g.mean_rows(frame_tokens)?;
    Ok(EncodedFeatures {
        frame_tokens,
        pooled,
    })
}
