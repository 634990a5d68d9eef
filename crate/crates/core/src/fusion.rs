//! Gated cross-attention between modalities, per-stream heads and score
//! fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Forward, Init, Linear, Norm, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Var;

pub const GCA_HEADS: usize = 2;

/// Space in which the two stream scores are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseSpace {
    #[default]
    Logit,
    Prob,
}

impl std::fmt::Display for FuseSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FuseSpace::Logit => "logit",
            FuseSpace::Prob => "prob",
        })
    }
}

impl std::str::FromStr for FuseSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(FuseSpace::Logit),
            "prob" => Ok(FuseSpace::Prob),
            other => Err(Error::config(
                "fuse_space",
                format!("unknown value `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GcaParams {
    pub norm_q: Norm,
    pub norm_kv: Norm,
    pub attn: Attention,
    /// Per-channel gate `α`, initialized to zero.
    pub gate: ParamId,
}

impl GcaParams {
    pub fn init<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(
                "side_dim",
                format!("{dim} not divisible by {heads} fusion heads"),
            ));
        }
        let mut init = Init {
            store,
            rng,
            trainable: true,
        };
        Ok(Self {
            norm_q: init.norm(&format!("{prefix}.norm_q"), dim),
            norm_kv: init.norm(&format!("{prefix}.norm_kv"), dim),
            attn: Attention::init(&mut init, &format!("{prefix}.attn"), dim, heads),
            gate: init.full(format!("{prefix}.gate"), &[dim], 0.0),
        })
    }
}

/// `query + tanh(α) ⊙ MHA(norm(query), norm(context))`.
pub fn gated_cross_attention<F: Scalar>(
    cx: &mut Forward<'_, F>,
    query: Var,
    context: Var,
    params: &GcaParams,
) -> Result<Var> {
    if cx.g.shape(query).last() != cx.g.shape(context).last() {
        return Err(Error::Shape {
            op: "gated_cross_attention",
            lhs: cx.g.shape(query).to_vec(),
            rhs: cx.g.shape(context).to_vec(),
        });
    }
    let q = params.norm_q.forward(cx, query)?;
    let kv = params.norm_kv.forward(cx, context)?;
    let h = params.attn.forward(cx, q, kv)?;
    let alpha = cx.p(params.gate);
    let gate = cx.g.tanh(alpha);
    let h = cx.g.mul_row(h, gate)?;
    cx.g.add(query, h)
}

/// Stacked GCA layers for both directions of one stream.
#[derive(Clone, Debug)]
pub struct FusionPair {
    /// RGB queries attending to depth.
    pub rgb: Vec<GcaParams>,
    /// Depth queries attending to RGB.
    pub depth: Vec<GcaParams>,
}

impl FusionPair {
    pub fn init<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        layers: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut rgb = Vec::with_capacity(layers);
        let mut depth = Vec::with_capacity(layers);
        for l in 0..layers {
            rgb.push(GcaParams::init(
                store,
                rng,
                &format!("{prefix}.rgb{l}"),
                dim,
                heads,
            )?);
            depth.push(GcaParams::init(
                store,
                rng,
                &format!("{prefix}.depth{l}"),
                dim,
                heads,
            )?);
        }
        Ok(Self { rgb, depth })
    }

    pub fn gates(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.rgb.iter().chain(&self.depth).map(|p| p.gate)
    }
}

/// Each layer contextualizes RGB on depth and depth on RGB, both reading
/// the previous layer's (unmodified) pair.
pub fn bidirectional_fuse<F: Scalar>(
    cx: &mut Forward<'_, F>,
    rgb: Var,
    depth: Var,
    pair: &FusionPair,
) -> Result<(Var, Var)> {
    let (mut r, mut d) = (rgb, depth);
    for (pr, pd) in pair.rgb.iter().zip(&pair.depth) {
        let r_next = gated_cross_attention(cx, r, d, pr)?;
        let d_next = gated_cross_attention(cx, d, r, pd)?;
        (r, d) = (r_next, d_next);
    }
    Ok((r, d))
}

#[derive(Clone, Copy, Debug)]
pub struct StreamHead {
    pub linear: Linear,
}

impl StreamHead {
    pub fn init<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        in_dim: usize,
        classes: usize,
    ) -> Self {
        let mut init = Init {
            store,
            rng,
            trainable: true,
        };
        Self {
            linear: init.linear(prefix, in_dim, classes),
        }
    }
}

/// Mean-pools every token set, concatenates them and applies the head.
pub fn stream_logits<F: Scalar>(
    cx: &mut Forward<'_, F>,
    token_sets: &[Var],
    head: &StreamHead,
) -> Result<Var> {
    let pooled = token_sets
        .iter()
        .map(|&t| cx.g.mean_rows(t))
        .collect::<Result<Vec<_>>>()?;
    let x = if pooled.len() == 1 {
        pooled[0]
    } else {
        cx.g.concat_cols(&pooled)?
    };
    head.linear.forward(cx, x)
}

/// Elementwise `(a + b) / 2` inside the graph.
pub fn mean_fuse_var<F: Scalar>(cx: &mut Forward<'_, F>, a: Var, b: Var) -> Result<Var> {
    let s = cx.g.add(a, b)?;
    Ok(cx.g.scale(s, F::lit(0.5)))
}

/// Elementwise `(a + b) / 2`.
pub fn mean_fuse<F: Scalar>(a: &[F], b: &[F]) -> Result<Vec<F>> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "mean_fuse",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let half = F::lit(0.5);
    Ok(a.iter().zip(b).map(|(&x, &y)| (x + y) * half).collect())
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax<F: Scalar>(scores: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}
