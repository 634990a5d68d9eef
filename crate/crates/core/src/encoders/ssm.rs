//! Mamba-style bidirectional selective state-space encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Forward, Init, Linear, Norm, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

use super::side::{pool_frames, EncodedFeatures};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsmConfig {
    pub state: usize,
    pub expand: usize,
    pub blocks: usize,
    pub conv: usize,
    pub dt_rank: usize,
    /// Block length for the two-level scan; `None` runs the sequential one.
    pub scan_block: Option<usize>,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            state: 8,
            expand: 2,
            blocks: 2,
            conv: 4,
            dt_rank: 8,
            scan_block: None,
        }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("ssm_state", self.state),
            ("ssm_expand", self.expand),
            ("ssm_blocks", self.blocks),
            ("ssm_conv", self.conv),
            ("ssm_dt_rank", self.dt_rank),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.scan_block == Some(0) {
            return Err(Error::config("ssm_scan_block", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub norm: Norm,
    /// `D → 2·E·D`, split into the scan input and the gate.
    pub w_in: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub w_dt_down: Linear,
    /// Carries the `Δ` bias.
    pub w_dt_up: Linear,
    pub w_b: Linear,
    pub w_c: Linear,
    /// `log(−A)`, shape `E·D × N`.
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub w_out: Linear,
}

#[derive(Clone, Debug)]
pub struct SsmParams {
    pub cfg: SsmConfig,
    pub blocks: Vec<MambaBlock>,
    pub norm: Norm,
    pub proj: Linear,
    pub dim: usize,
    pub inner: usize,
}

impl SsmParams {
    pub fn init<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        cfg: SsmConfig,
        dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let inner = cfg.expand * dim;
        let n = cfg.state;
        let mut init = Init {
            store,
            rng,
            trainable: true,
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for m in 0..cfg.blocks {
            let name = format!("{prefix}.block{m}");
            let norm = init.norm(&format!("{name}.norm"), dim);
            let w_in = init.linear(&format!("{name}.in"), dim, 2 * inner);
            let conv_w = init.randn(
                format!("{name}.conv_w"),
                &[cfg.conv, inner],
                1.0 / (cfg.conv as f64).sqrt(),
            );
            let conv_b = init.full(format!("{name}.conv_b"), &[inner], 0.0);
            let w_dt_down = init.linear_no_bias(&format!("{name}.dt_down"), inner, cfg.dt_rank);
            let dt_w = init.weight(format!("{name}.dt_up.w"), cfg.dt_rank, inner);
            let bias = dt_bias(inner, init.rng);
            let w_dt_up = Linear {
                w: dt_w,
                b: Some(init.tensor(format!("{name}.dt_up.b"), bias)),
            };
            let w_b = init.linear_no_bias(&format!("{name}.b_proj"), inner, n);
            let w_c = init.linear_no_bias(&format!("{name}.c_proj"), inner, n);
            // S4D-real initialization: A[:, k] = −(k + 1)
            let a = (0..inner)
                .flat_map(|_| (1..=n).map(|k| F::from_usize_lossy(k).ln()))
                .collect();
            let a_log = init.tensor(format!("{name}.a_log"), Tensor::from_vec(&[inner, n], a)?);
            let d_skip = init.full(format!("{name}.d_skip"), &[inner], 1.0);
            let w_out = init.linear(&format!("{name}.out"), inner, dim);
            blocks.push(MambaBlock {
                norm,
                w_in,
                conv_w,
                conv_b,
                w_dt_down,
                w_dt_up,
                w_b,
                w_c,
                a_log,
                d_skip,
                w_out,
            });
        }
        let norm = init.norm(&format!("{prefix}.norm"), dim);
        let proj = init.linear(&format!("{prefix}.proj"), dim, out_dim);
        Ok(Self {
            cfg,
            blocks,
            norm,
            proj,
            dim,
            inner,
        })
    }
}

/// Inverse-softplus bias so that initial step sizes are log-uniform in
/// `[1e-3, 1e-1]`.
fn dt_bias<F: Scalar, R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Tensor<F> {
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    let data = (0..channels)
        .map(|_| {
            let dt = (lo + rng.random::<f64>() * (hi - lo)).exp();
            F::lit(dt + (-(-dt).exp_m1()).ln())
        })
        .collect();
    Tensor::from_vec(&[channels], data).expect("length matches")
}

/// Per-token scan inputs of one block, in the forward token order.
#[derive(Clone, Copy, Debug)]
pub struct ScanTerms {
    pub x: Var,
    pub delta: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub d: Var,
}

/// One selective scan over the rows of `terms`; `reverse` runs it from the
/// last token to the first and returns rows in the original order.
pub fn directional_scan<F: Scalar>(
    cx: &mut Forward<'_, F>,
    terms: &ScanTerms,
    reverse: bool,
    block: Option<usize>,
) -> Result<Var> {
    let g = &mut cx.g;
    if !reverse {
        return g.selective_scan(
            terms.x,
            terms.delta,
            terms.a,
            terms.b,
            terms.c,
            terms.d,
            block,
        );
    }
    let x = g.reverse_rows(terms.x);
    let delta = g.reverse_rows(terms.delta);
    let b = g.reverse_rows(terms.b);
    let c = g.reverse_rows(terms.c);
    let y = g.selective_scan(x, delta, terms.a, b, c, terms.d, block)?;
    Ok(g.reverse_rows(y))
}

impl MambaBlock {
    /// Computes the selective parameters for the scan from block input
    /// `u` and returns them with the gate branch.
    pub fn scan_terms<F: Scalar>(
        &self,
        cx: &mut Forward<'_, F>,
        u: Var,
        inner: usize,
    ) -> Result<(ScanTerms, Var)> {
        let h = self.norm.forward(cx, u)?;
        let h = self.w_in.forward(cx, h)?;
        let x = cx.g.slice_cols(h, 0, inner)?;
        let gate = cx.g.slice_cols(h, inner, inner)?;
        let (cw, cb) = (cx.p(self.conv_w), cx.p(self.conv_b));
        let x = cx.g.depthwise_conv(x, cw, cb)?;
        let x = cx.g.silu(x);
        let dt = self.w_dt_down.forward(cx, x)?;
        let dt = self.w_dt_up.forward(cx, dt)?;
        let delta = cx.g.softplus(dt);
        let b = self.w_b.forward(cx, x)?;
        let c = self.w_c.forward(cx, x)?;
        let a_log = cx.p(self.a_log);
        let a = cx.g.exp(a_log);
        let a = cx.g.neg(a);
        let d = cx.p(self.d_skip);
        Ok((
            ScanTerms {
                x,
                delta,
                a,
                b,
                c,
                d,
            },
            gate,
        ))
    }

    /// `u + W_out((scan_fwd + scan_bwd)/2 ⊙ SiLU(gate))`.
    pub fn forward<F: Scalar>(
        &self,
        cx: &mut Forward<'_, F>,
        u: Var,
        inner: usize,
        block: Option<usize>,
    ) -> Result<Var> {
        let (terms, gate) = self.scan_terms(cx, u, inner)?;
        let fwd = directional_scan(cx, &terms, false, block)?;
        let bwd = directional_scan(cx, &terms, true, block)?;
        let y = cx.g.add(fwd, bwd)?;
        let y = cx.g.scale(y, F::lit(0.5));
        let gate = cx.g.silu(gate);
        let y = cx.g.mul(y, gate)?;
        let y = self.w_out.forward(cx, y)?;
        cx.g.add(u, y)
    }
}

/// Encodes frame-major patch tokens (`frames·patches × D`, no class token)
/// into per-frame features of the side dimension.
pub fn mamba_encode<F: Scalar>(
    cx: &mut Forward<'_, F>,
    tokens: Var,
    patches: usize,
    ssm: &SsmParams,
) -> Result<EncodedFeatures> {
    if cx.g.shape(tokens).last() != Some(&ssm.dim) {
        return Err(Error::shape(
            "mamba_encode",
            cx.g.shape(tokens),
            &[0, ssm.dim],
        ));
    }
    let mut u = tokens;
    for block in &ssm.blocks {
        u = block.forward(cx, u, ssm.inner, ssm.cfg.scan_block)?;
    }
    let u = ssm.norm.forward(cx, u)?;
    let pooled = pool_frames(cx, u, patches)?;
    let frame_tokens = ssm.proj.forward(cx, pooled.frame_tokens)?;
    let pooled = cx.g.mean_rows(frame_tokens)?;
    Ok(EncodedFeatures {
        frame_tokens,
        pooled,
    })
}
