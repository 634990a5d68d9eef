//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default; numeric arguments select a subset,
//! e.g. `cargo test --test acceptance -- 3 5`.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use depthar::encoders::{BackboneConfig, SsmConfig};
use depthar::fusion::FuseSpace;
use depthar::model::{Ablation, Model, ModelConfig};
use depthar::nn::{Forward, ParamId, ParamStore};
use depthar::synthvid::stats::{
    depth_rule_approach, depth_rule_behind, rgb_rule_approach, rgb_rule_behind,
};
use depthar::synthvid::{generate_clip, sample_frames, GenConfig, VideoClip};
use depthar::tensor::scan::{scan_blocked, scan_sequential, ScanInputs};
use depthar::tensor::{check_gradient, Graph, Tensor, Var};
use depthar::training::{one_hot, Checkpoint, FeatureSet, Schedule, TrainConfig, Trainer};
use depthar::Result;
use depthar_cli::{cmd_ablate, cmd_generate, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `Ok` carries the measured values for a PASS line, `Err` the reason for a FAIL.
type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fail_on<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| format!("error: {e}"))
}

fn repo_path(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

/// 2 classes, two 16×16 frames, backbone width 8.
fn micro_model() -> ModelConfig {
    ModelConfig {
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
        num_classes: 2,
        ablation: Ablation::RgbDepthMamba,
        ..ModelConfig::default()
    }
}

fn micro_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs,
        batch_size: 4,
        seed: 5,
        schedule: Schedule::Cosine,
        ..TrainConfig::default()
    }
}

/// Frozen features of `n` clips cycling through the classes.
fn features(model: &Model<f64>, n: usize, seed: u64) -> FeatureSet<f64> {
    let b = model.cfg.backbone;
    let stride = 4;
    let gen = GenConfig {
        height: b.height,
        width: b.width,
        total_frames: (b.frames - 1) * stride + 1,
        num_classes: model.cfg.num_classes,
        ..GenConfig::default()
    };
    let mut set = FeatureSet::default();
    for k in 0..n {
        let class = k % model.cfg.num_classes;
        let clip = generate_clip(class, seed + k as u64, &gen).unwrap();
        let clip = sample_frames(&clip, b.frames, stride).unwrap();
        set.push(model.frozen_features(&clip).unwrap(), class);
    }
    set
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(Tensor::randn(g.shape(y), 1.0, &mut rng(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Worst central-difference error over every operand of every graph op.
fn per_op_error() -> Result<(f64, &'static str)> {
    type Op = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;
    let positive = |t: Tensor<f64>, lo: f64, sign: f64| {
        let data = t
            .data()
            .iter()
            .map(|v| sign * (lo + 0.3 * v.abs()))
            .collect();
        Tensor::from_vec(t.shape(), data).unwrap()
    };
    let r = |shape: &[usize], seed: u64| Tensor::randn(shape, 1.0, &mut rng(seed));
    let (len, ch, ns) = (5, 3, 2);
    let scan_inputs = vec![
        r(&[len, ch], 1),
        positive(r(&[len, ch], 2), 0.1, 1.0),
        positive(r(&[ch, ns], 3), 0.5, -1.0),
        r(&[len, ns], 4),
        r(&[len, ns], 5),
        r(&[ch], 6),
    ];
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Op)> = vec![
        ("matmul", vec![r(&[3, 4], 10), r(&[4, 2], 11)], |g, v| {
            g.matmul(v[0], v[1])
        }),
        ("add_row", vec![r(&[4, 3], 12), r(&[3], 13)], |g, v| {
            g.add_row(v[0], v[1])
        }),
        ("mul_row", vec![r(&[4, 3], 12), r(&[3], 13)], |g, v| {
            g.mul_row(v[0], v[1])
        }),
        ("mul", vec![r(&[2, 3], 14), r(&[2, 3], 15)], |g, v| {
            g.mul(v[0], v[1])
        }),
        ("scale_by", vec![r(&[2, 3], 14), r(&[1], 15)], |g, v| {
            g.scale_by(v[0], v[1])
        }),
        (
            "concat_cols",
            vec![r(&[3, 2], 16), r(&[3, 1], 17)],
            |g, v| g.concat_cols(v),
        ),
        ("softmax", vec![r(&[3, 4], 18)], |g, v| g.softmax(v[0])),
        ("gelu", vec![r(&[3, 4], 19)], |g, v| Ok(g.gelu(v[0]))),
        ("silu", vec![r(&[3, 4], 19)], |g, v| Ok(g.silu(v[0]))),
        (
            "softplus",
            vec![r(&[3, 4], 19)],
            |g, v| Ok(g.softplus(v[0])),
        ),
        ("sigmoid", vec![r(&[3, 4], 19)], |g, v| Ok(g.sigmoid(v[0]))),
        ("tanh", vec![r(&[3, 4], 19)], |g, v| Ok(g.tanh(v[0]))),
        ("exp", vec![r(&[3, 4], 19)], |g, v| Ok(g.exp(v[0]))),
        ("transpose", vec![r(&[3, 4], 19)], |g, v| g.transpose(v[0])),
        ("mean_rows", vec![r(&[3, 4], 19)], |g, v| g.mean_rows(v[0])),
        ("reverse_rows", vec![r(&[3, 4], 19)], |g, v| {
            Ok(g.reverse_rows(v[0]))
        }),
        (
            "layer_norm",
            vec![r(&[3, 5], 20), r(&[5], 21), r(&[5], 22)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        (
            "depthwise_conv",
            vec![r(&[6, 3], 23), r(&[4, 3], 24), r(&[3], 25)],
            |g, v| g.depthwise_conv(v[0], v[1], v[2]),
        ),
        ("selective_scan", scan_inputs.clone(), |g, v| {
            g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], None)
        }),
        ("selective_scan_blocked", scan_inputs, |g, v| {
            g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], Some(2))
        }),
        ("cross_entropy", vec![r(&[4, 3], 26)], |g, v| {
            let p = g.softmax(v[0])?;
            g.cross_entropy(p, &one_hot(&[0, 2, 1, 1], 3)?)
        }),
    ];
    let mut worst = (0.0, "");
    for (name, inputs, op) in &cases {
        for which in 0..inputs.len() {
            let err = check_gradient(
                |g, x| {
                    let mut vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                    vars[which] = x;
                    let y = op(g, &vars)?;
                    if g.value(y).numel() == 1 {
                        Ok(y)
                    } else {
                        weighted_sum(g, y, 99)
                    }
                },
                &inputs[which],
                1e-6,
            )?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    Ok(worst)
}

/// Fourth-order central differences on every entry of `ids` against the
/// reverse-mode gradient of `loss`; returns the worst relative error and
/// the number of entries probed.
fn param_grad_error(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    loss: &dyn Fn(&mut Forward<'_, f64>) -> Result<Var>,
) -> Result<(f64, usize)> {
    let (h, floor) = (1e-4, 1e-8);
    let analytic = {
        let mut cx = Forward::new(store);
        let l = loss(&mut cx)?;
        cx.g.backward(l)?;
        cx.param_grads()
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut cx = Forward::new(store);
        let l = loss(&mut cx)?;
        Ok(cx.g.data(l)[0])
    };
    let (mut worst, mut probed) = (0.0f64, 0);
    for &id in ids {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            let mut at = |dx: f64| {
                store.get_mut(id).data_mut()[i] = orig + dx;
                eval(store)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            store.get_mut(id).data_mut()[i] = orig;
            let num = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let an = analytic[id.index()].as_ref().map_or(0.0, |g| g[i]);
            worst = worst.max((an - num).abs() / an.abs().max(num.abs()).max(floor));
            probed += 1;
        }
    }
    Ok((worst, probed))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (op_err, op_name) = fail_on(per_op_error())?;
    let mut model = fail_on(Model::<f64>::new(micro_model(), 3))?;
    // open the gates so every fusion parameter is on the gradient path
    for id in model.gate_ids() {
        model.store.get_mut(id).data_mut().fill(0.7);
    }
    let data = features(&model, 2, 40);
    let targets = fail_on(one_hot::<f64>(&data.labels, 2))?;
    let ids: Vec<ParamId> = model.store.trainable().collect();
    let mut store = model.store.clone();
    let loss = |cx: &mut Forward<'_, f64>| {
        let batch: Vec<_> = data.features.iter().collect();
        let scores = model.forward_batch(cx, &batch, true)?;
        let probs = model.fused_probs(cx, &scores, FuseSpace::Logit)?;
        cx.g.cross_entropy(probs, &targets)
    };
    let (e2e, probed) = fail_on(param_grad_error(&mut store, &ids, &loss))?;
    let secs = start.elapsed().as_secs_f64();
    let msg = format!(
        "end-to-end {e2e:.2e} over {probed} entries, per-op {op_err:.2e} ({op_name}), {secs:.1} s"
    );
    if e2e < 1e-3 && op_err < 1e-5 && secs < 30.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn freeze_contract() -> Outcome {
    let mut trainer = fail_on(Trainer::<f64>::new(micro_model(), micro_train(1)))?;
    let data = features(&trainer.model, 8, 0);
    let store = &trainer.model.store;
    let frozen: Vec<ParamId> = store.frozen().collect();
    let trainable: Vec<ParamId> = store.trainable().collect();
    let before = store.hash(frozen.iter().copied());
    let trained_before = store.hash(trainable.iter().copied());
    let labels = &data.labels;
    for step in 0..100 {
        let idx = [(2 * step) % 8, (2 * step + 1) % 8];
        let batch: Vec<_> = idx.iter().map(|&i| &data.features[i]).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        fail_on(trainer.step(&batch, &y, 3e-3))?;
    }
    let after = trainer.model.store.hash(frozen.iter().copied());
    let trainable_moved = trainer.model.store.hash(trainable.iter().copied()) != trained_before;
    let msg = format!("{} frozen tensors, 100 steps", frozen.len());
    if before == after && trainable_moved && trainer.check_frozen().is_ok() {
        Ok(msg)
    } else {
        Err(format!("{msg}: hash changed"))
    }
}

fn scan_oracle() -> Outcome {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = r.random_range(1..=64);
        let (ch, ns) = (r.random_range(1..=6), r.random_range(1..=5));
        let block = r.random_range(1..=16);
        let mut v = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..n).map(|_| lo + (hi - lo) * r.random::<f64>()).collect()
        };
        let (x, delta) = (v(len * ch, -2.0, 2.0), v(len * ch, 0.001, 1.0));
        let a = v(ch * ns, -3.0, -0.05);
        let (b, c, d) = (
            v(len * ns, -1.0, 1.0),
            v(len * ns, -1.0, 1.0),
            v(ch, -1.0, 1.0),
        );
        let inp = ScanInputs {
            x: &x,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d: &d,
            len,
            channels: ch,
            state: ns,
        };
        let (seq, blk) = (scan_sequential(&inp), scan_blocked(&inp, block));
        for (p, q) in seq.y.iter().zip(&blk.y) {
            worst = worst.max((p - q).abs());
        }
    }
    let msg = format!("max |blocked − sequential| {worst:.2e} over 100 cases");
    if worst <= 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gate_closed_identity() -> Outcome {
    let mut trainer = fail_on(Trainer::<f64>::new(micro_model(), micro_train(1)))?;
    let data = features(&trainer.model, 8, 0);
    fail_on(trainer.train_epoch(&data))?;
    for id in trainer.model.gate_ids() {
        trainer.model.store.get_mut(id).data_mut().fill(0.0);
    }
    let model = &trainer.model;
    let batch: Vec<_> = data.features.iter().collect();
    let run = |fuse: bool| -> Result<Vec<Tensor<f64>>> {
        let mut cx = Forward::new(&model.store);
        let s = model.forward_batch(&mut cx, &batch, fuse)?;
        let mut out = vec![cx.g.value(s.logits_a).clone(), cx.g.value(s.fused).clone()];
        out.extend(s.logits_b.map(|b| cx.g.value(b).clone()));
        Ok(out)
    };
    let (fused, plain) = (fail_on(run(true))?, fail_on(run(false))?);
    let same = fused.len() == 3 && fused.iter().zip(&plain).all(|(a, b)| a.bitwise_eq(b));
    let msg = format!("{} gates zeroed after one epoch", model.gate_ids().len());
    if same {
        Ok(format!("{msg}, logits bit-identical"))
    } else {
        Err(format!("{msg}, logits differ"))
    }
}

fn loss_closed_form() -> Outcome {
    let mut r = rng(21);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (batch, classes) = (r.random_range(1..=8), r.random_range(2..=10));
        let logits = Tensor::randn(&[batch, classes], 3.0, &mut r);
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
        let y = fail_on(one_hot::<f64>(&labels, classes))?;
        let mut g = Graph::new();
        let z = g.leaf(logits.clone().with_grad(true));
        let p = fail_on(g.softmax(z))?;
        let l = fail_on(g.cross_entropy(p, &y))?;
        fail_on(g.backward(l))?;
        let grad = g.grad(z).ok_or("no logit gradient")?;
        for (i, row) in logits.data().chunks(classes).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (c, v) in row.iter().enumerate() {
                let yhat = (v - m).exp() / z;
                let want = (yhat - y.data()[i * classes + c]) / batch as f64;
                worst = worst.max((grad[i * classes + c] - want).abs());
            }
        }
    }
    let msg = format!("max |∂L/∂z − (ŷ−y)/B| {worst:.2e} over 100 batches");
    if worst <= 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Accuracy of a binary rule over `seeds` clips of each class of a pair.
fn pair_accuracy(
    pair: (usize, usize),
    seeds: u64,
    rule: impl Fn(&VideoClip) -> bool,
) -> Result<f64> {
    let cfg = GenConfig::default();
    let mut correct = 0;
    for seed in 0..seeds {
        for (class, want) in [(pair.0, true), (pair.1, false)] {
            let clip = generate_clip(class, 20_000 + seed, &cfg)?;
            correct += usize::from(rule(&clip) == want);
        }
    }
    Ok(correct as f64 / (2 * seeds) as f64)
}

fn dataset_separability() -> Outcome {
    let seeds = 250;
    let rgb = fail_on(pair_accuracy((0, 1), seeds, rgb_rule_approach))?;
    let depth = fail_on(pair_accuracy((0, 1), seeds, |c| {
        depth_rule_approach(c, &c.depth)
    }))?;
    let rgb45 = fail_on(pair_accuracy((4, 5), seeds, rgb_rule_behind))?;
    let depth45 = fail_on(pair_accuracy((4, 5), seeds, |c| {
        depth_rule_behind(c, &c.depth)
    }))?;
    let msg = format!(
        "{} clips: classes 0/1 rgb {rgb:.3} depth {depth:.3}; classes 4/5 rgb {rgb45:.3} depth {depth45:.3}",
        2 * seeds
    );
    if rgb <= 0.55 && depth >= 0.95 && rgb45 <= 0.55 && depth45 >= 0.95 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

const DEPTH_ONLY: [usize; 4] = [0, 1, 4, 5];

fn scaled_ablation() -> Outcome {
    let start = Instant::now();
    let cfg = fail_on(ExperimentConfig::load(&repo_path("configs/ablate.json")))?;
    if cfg.num_classes != 6 || cfg.n_per_class * cfg.num_classes != 600 || cfg.epochs > 30 {
        return Err(format!(
            "config is not the default dataset budget: {} classes, {} clips, {} epochs",
            cfg.num_classes,
            cfg.n_per_class * cfg.num_classes,
            cfg.epochs
        ));
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    fail_on(cmd_generate(&cfg, dir.path(), false))?;
    let report = fail_on(cmd_ablate(&cfg, dir.path(), None))?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let rgb = report.top1(Ablation::RgbOnly);
    let depth = report.top1(Ablation::RgbDepth);
    let full = report.top1(Ablation::RgbDepthMamba);
    let mean_delta = |depth_only: bool| {
        let ds: Vec<f64> = report
            .deltas
            .iter()
            .filter(|d| DEPTH_ONLY.contains(&d.class) == depth_only)
            .map(|d| d.delta)
            .collect();
        ds.iter().sum::<f64>() / ds.len() as f64
    };
    let (paired, other) = (mean_delta(true), mean_delta(false));
    let top = report.deltas.first().map_or(usize::MAX, |d| d.class);
    let msg = format!(
        "rgb_only {rgb:.3}, rgb_depth {depth:.3}, full {full:.3}, gap {:.3}; \
         mean delta depth-only {paired:+.3} vs others {other:+.3}, top class {top}; {minutes:.1} min",
        full - rgb
    );
    let ok = full >= depth
        && depth >= rgb
        && full - rgb >= 0.25
        && DEPTH_ONLY.contains(&top)
        && paired > other
        && minutes < 30.0;
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ablation_determinism() -> Outcome {
    let cfg = fail_on(ExperimentConfig::load(&repo_path("configs/micro.json")))?;
    let dirs: Vec<tempfile::TempDir> = (0..2)
        .map(|_| tempfile::tempdir())
        .collect::<std::io::Result<_>>()
        .map_err(|e| e.to_string())?;
    for dir in &dirs {
        fail_on(cmd_generate(&cfg, dir.path(), false))?;
        fail_on(cmd_ablate(&cfg, dir.path(), None))?;
    }
    let mut files: Vec<String> = std::fs::read_dir(dirs[0].path())
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|name| name.ends_with(".csv"))
        .collect();
    files.sort();
    for name in &files {
        let read =
            |d: &tempfile::TempDir| std::fs::read(d.path().join(name)).map_err(|e| e.to_string());
        if read(&dirs[0])? != read(&dirs[1])? {
            return Err(format!("{name} differs"));
        }
    }
    Ok(format!("{} CSV files byte-identical", files.len()))
}

fn checkpoint_resume() -> Outcome {
    let cfg = micro_train(4);
    let mut whole = fail_on(Trainer::<f64>::new(micro_model(), cfg))?;
    let train = features(&whole.model, 10, 0);
    let val = features(&whole.model, 4, 50);
    fail_on(whole.fit(&train, &val, |_| {}))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("half.ckpt");
    let mut first = fail_on(Trainer::<f64>::new(micro_model(), cfg))?;
    fail_on(first.fit_until(2, &train, &val, |_| {}))?;
    fail_on(first.to_checkpoint().save(&path))?;
    drop(first);
    let ck = fail_on(Checkpoint::load(&path))?;
    let mut resumed = fail_on(Trainer::<f64>::from_checkpoint(&ck, Some(&micro_model())))?;
    fail_on(resumed.fit(&train, &val, |_| {}))?;

    let params_equal = whole.model.store.ids().all(|id| {
        whole
            .model
            .store
            .get(id)
            .bitwise_eq(resumed.model.store.get(id))
    });
    let bytes_equal = whole.to_checkpoint().to_bytes() == resumed.to_checkpoint().to_bytes();
    let msg = "2 + 2 epochs via a checkpoint file vs 4 epochs";
    if params_equal && bytes_equal && whole.history == resumed.history {
        Ok(format!("{msg}: bitwise equal"))
    } else {
        Err(format!(
            "{msg}: params {params_equal}, checkpoint bytes {bytes_equal}"
        ))
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_correctness),
        ("freeze contract", freeze_contract),
        ("scan oracle", scan_oracle),
        ("gate-closed identity", gate_closed_identity),
        ("loss closed form", loss_closed_form),
        ("dataset separability", dataset_separability),
        ("scaled ablation", scaled_ablation),
        ("ablation determinism", ablation_determinism),
        ("checkpoint resume", checkpoint_resume),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        match run() {
            Ok(msg) => println!("PASS {n} {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {n} {name}: {msg}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
