#![allow(dead_code)]

use depthar::nn::{Forward, ParamId, ParamStore};
use depthar::tensor::{Tensor, Var};
use depthar::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ x ⊙ R` for a fixed random `R`, a generic scalar readout.
pub fn random_readout(cx: &mut Forward<'_, f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = cx.g.shape(x).to_vec();
    let r = cx.g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let p = cx.g.mul(x, r)?;
    Ok(cx.g.sum(p))
}

/// Fourth-order central-difference check of parameter gradients. Probes up to `per_tensor`
/// evenly spaced entries of each tensor in `ids` and returns the largest
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn param_grad_error(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    per_tensor: usize,
    loss: &dyn Fn(&mut Forward<'_, f64>) -> Result<Var>,
) -> f64 {
    // A fourth-order stencil lets the step stay large enough that roundoff
    // does not swamp the small step-size and decay gradients of the scan.
    let (h, floor) = (1e-4, 1e-6);
    let analytic = {
        let mut cx = Forward::new(store);
        let l = loss(&mut cx).unwrap();
        cx.g.backward(l).unwrap();
        cx.param_grads()
    };
    let eval = |store: &ParamStore<f64>| {
        let mut cx = Forward::new(store);
        let l = loss(&mut cx).unwrap();
        cx.g.data(l)[0]
    };
    let mut worst = 0.0f64;
    for &id in ids {
        let n = store.get(id).numel();
        let step = (n / per_tensor.max(1)).max(1);
        for i in (0..n).step_by(step).take(per_tensor) {
            let orig = store.get(id).data()[i];
            let mut at = |dx: f64| {
                store.get_mut(id).data_mut()[i] = orig + dx;
                eval(store)
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            store.get_mut(id).data_mut()[i] = orig;
            let num = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let an = analytic[id.index()].as_ref().map_or(0.0, |g| g[i]);
            let err = (an - num).abs() / an.abs().max(num.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

/// Micro configuration: 16×16 frames, two sampled frames, width 8.
pub fn micro_config(classes: usize) -> depthar::model::ModelConfig {
    use depthar::encoders::{BackboneConfig, SsmConfig};
    depthar::model::ModelConfig {
        backbone: BackboneConfig {
            height: 16,
            width: 16,
            frames: 2,
            patch: 8,
            dim: 8,
            layers: 1,
            heads: 2,
        },
        side_dim: 4,
        ssm: SsmConfig {
            state: 2,
            blocks: 1,
            dt_rank: 2,
            ..SsmConfig::default()
        },
        num_classes: classes,
        ..Default::default()
    }
}

/// Frozen features of `n` clips cycling through the classes, rendered at
/// the model's frame size.
pub fn features(
    model: &depthar::model::Model<f64>,
    n: usize,
    seed: u64,
) -> depthar::training::FeatureSet<f64> {
    use depthar::synthvid::{generate_clip, sample_frames, GenConfig};
    let b = model.cfg.backbone;
    let stride = 4;
    let gen = GenConfig {
        height: b.height,
        width: b.width,
        total_frames: (b.frames - 1) * stride + 1,
        num_classes: model.cfg.num_classes,
        ..GenConfig::default()
    };
    let mut set = depthar::training::FeatureSet::default();
    for k in 0..n {
        let class = k % model.cfg.num_classes;
        let clip = generate_clip(class, seed + k as u64, &gen).unwrap();
        let clip = sample_frames(&clip, b.frames, stride).unwrap();
        set.push(model.frozen_features(&clip).unwrap(), class);
    }
    set
}
