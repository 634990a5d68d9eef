//! The four experiment verbs. Each writes its outputs plus a copy of the
//! resolved config into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use depthar::model::{Ablation, Model};
use depthar::synthvid::{
    build_dataset, estimate_depth, generate_clip, sample_frames, write_clip, DepthMode, Manifest,
    Record, Split,
};
use depthar::training::{
    evaluate, per_class_delta, Checkpoint, ClassDelta, Evaluation, FeatureSet, MetricsRecord,
    Trainer,
};
use depthar::{Error, Result};

use crate::config::ExperimentConfig;
use crate::csvio::{self, AblationRow, ClassRow, DeltaRow, EvalRow, MetricsRow, PerClassRow};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_json()).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.tsv`, a per-class `summary.csv` and, with `cache`,
/// every clip under `clips/`.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path, cache: bool) -> Result<Manifest> {
    cfg.validate()?;
    create_dir(out)?;
    let gen = cfg.gen_config();
    let manifest = build_dataset(&gen, cfg.n_per_class, cfg.split_ratio, cfg.seed)?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    let train = manifest.class_counts(cfg.num_classes, Split::Train);
    let val = manifest.class_counts(cfg.num_classes, Split::Val);
    let rows: Vec<ClassRow> = (0..cfg.num_classes)
        .map(|class| ClassRow {
            class,
            train: train[class],
            val: val[class],
        })
        .collect();
    csvio::write_rows(&out.join("summary.csv"), &rows)?;
    if cache {
        let dir = out.join("clips");
        create_dir(&dir)?;
        for r in &manifest.records {
            let clip = generate_clip(r.class, r.seed, &gen)?;
            let path = dir.join(format!("{}_{}.bin", r.class, r.seed));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_clip(&clip, std::io::BufWriter::new(file)).map_err(|e| Error::io(&path, e))?;
        }
    }
    write_config(cfg, out)?;
    Ok(manifest)
}

/// Manifest at `path`, or `out/manifest.tsv` when none is given.
pub fn load_manifest(path: Option<&Path>, out: &Path) -> Result<Manifest> {
    let path = path.map_or_else(|| out.join(MANIFEST_FILE), Path::to_path_buf);
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        ));
    }
    Manifest::load(&path)
}

/// Regenerates, samples and depth-proxies each clip, then runs the frozen
/// backbone on it.
pub fn load_features(
    model: &Model<f64>,
    cfg: &ExperimentConfig,
    records: &[Record],
    depth_mode: &DepthMode,
) -> Result<FeatureSet<f64>> {
    let gen = cfg.gen_config();
    let mut set = FeatureSet::default();
    for r in records {
        if r.class >= cfg.num_classes {
            return Err(Error::Format(format!(
                "manifest class {} out of range for {} classes",
                r.class, cfg.num_classes
            )));
        }
        let clip = generate_clip(r.class, r.seed, &gen)?;
        let mut clip = sample_frames(&clip, cfg.frames, cfg.stride)?;
        if *depth_mode != DepthMode::GroundTruth {
            clip.depth = estimate_depth(&clip, depth_mode)?;
        }
        set.push(model.frozen_features(&clip)?, r.class);
    }
    Ok(set)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<MetricsRecord>,
    pub train: Evaluation,
    pub val: Evaluation,
}

fn train_mode(
    cfg: &ExperimentConfig,
    ablation: Ablation,
    train: &FeatureSet<f64>,
    val: &FeatureSet<f64>,
) -> Result<(Trainer<f64>, TrainOutcome)> {
    let mut model_cfg = cfg.model_config();
    model_cfg.ablation = ablation;
    let mut trainer = Trainer::<f64>::new(model_cfg, cfg.train_config())?;
    trainer.fit(train, val, |m| {
        eprintln!(
            "[{ablation}] epoch {:>3}  loss {:.4}  val top-1 {:.3}",
            m.epoch, m.train_loss, m.val_top1
        );
    })?;
    let outcome = TrainOutcome {
        history: trainer.history.clone(),
        train: evaluate(&trainer.model, train, &trainer.cfg)?,
        val: evaluate(&trainer.model, val, &trainer.cfg)?,
    };
    Ok((trainer, outcome))
}

fn metrics_rows(history: &[MetricsRecord]) -> (Vec<MetricsRow>, Vec<PerClassRow>) {
    let metrics = history
        .iter()
        .map(|m| MetricsRow {
            epoch: m.epoch,
            train_loss: m.train_loss,
            val_top1: m.val_top1,
            seconds: m.seconds,
        })
        .collect();
    let per_class = history
        .iter()
        .flat_map(|m| {
            m.per_class
                .iter()
                .enumerate()
                .map(|(class, &accuracy)| PerClassRow {
                    epoch: m.epoch,
                    class,
                    accuracy,
                })
        })
        .collect();
    (metrics, per_class)
}

/// Trains `cfg.ablation` and writes `metrics.csv`, `per_class.csv`,
/// `final.csv` (train and val top-1 of the final model) and the checkpoint.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    manifest: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(manifest, out)?;
    create_dir(out)?;
    let probe = Model::<f64>::new(cfg.model_config(), cfg.seed)?;
    let train = load_features(&probe, cfg, &manifest.split(Split::Train), &cfg.depth_mode)?;
    let val = load_features(&probe, cfg, &manifest.split(Split::Val), &cfg.depth_mode)?;
    drop(probe);
    let (trainer, outcome) = train_mode(cfg, cfg.ablation, &train, &val)?;
    let (metrics, per_class) = metrics_rows(&outcome.history);
    csvio::write_rows(&out.join("metrics.csv"), &metrics)?;
    csvio::write_rows(&out.join("per_class.csv"), &per_class)?;
    let finals = [("train", &outcome.train), ("val", &outcome.val)].map(|(split, e)| EvalRow {
        split: split.into(),
        depth_mode: cfg.depth_mode.to_string(),
        top1: e.top1,
    });
    csvio::write_rows(&out.join("final.csv"), &finals)?;
    trainer.to_checkpoint().save(&out.join(CHECKPOINT_FILE))?;
    write_config(cfg, out)?;
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub manifest: Option<PathBuf>,
    pub split: Split,
    pub depth_mode: Option<DepthMode>,
}

/// Evaluates a checkpoint on one split and writes `eval.csv` and
/// `eval_per_class.csv`. The experiment config must describe the same
/// model as the checkpoint.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path, req: &EvalRequest) -> Result<Evaluation> {
    cfg.validate()?;
    if !req.checkpoint.exists() {
        return Err(Error::io(
            &req.checkpoint,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    let ck = Checkpoint::load(&req.checkpoint)?;
    let trainer = Trainer::<f64>::from_checkpoint(&ck, Some(&cfg.model_config()))?;
    let manifest = load_manifest(req.manifest.as_deref(), out)?;
    create_dir(out)?;
    let mode = req.depth_mode.unwrap_or(cfg.depth_mode);
    let set = load_features(&trainer.model, cfg, &manifest.split(req.split), &mode)?;
    let eval = evaluate(&trainer.model, &set, &trainer.cfg)?;
    let row = EvalRow {
        split: req.split.to_string(),
        depth_mode: mode.to_string(),
        top1: eval.top1,
    };
    csvio::write_rows(&out.join("eval.csv"), &[row])?;
    let per_class: Vec<PerClassRow> = eval
        .per_class
        .iter()
        .enumerate()
        .map(|(class, &accuracy)| PerClassRow {
            epoch: trainer.epoch,
            class,
            accuracy,
        })
        .collect();
    csvio::write_rows(&out.join("eval_per_class.csv"), &per_class)?;
    let mut resolved = cfg.clone();
    resolved.depth_mode = mode;
    write_config(&resolved, out)?;
    Ok(eval)
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    /// `(mode, final val top-1, per-class val accuracy)` in `Ablation::ALL` order.
    pub rows: Vec<(Ablation, f64, Vec<f64>)>,
    /// Full model minus RGB-only, largest gain first.
    pub deltas: Vec<ClassDelta>,
}

impl AblationReport {
    pub fn top1(&self, mode: Ablation) -> f64 {
        self.rows
            .iter()
            .find(|r| r.0 == mode)
            .map_or(f64::NAN, |r| r.1)
    }
}

/// Trains all three modes on the same data with the same seed and writes
/// `ablation.csv`, `ablation_per_class.csv`, `per_class_delta.csv` and
/// per-mode `metrics_<mode>.csv`.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    out: &Path,
    manifest: Option<&Path>,
) -> Result<AblationReport> {
    cfg.validate()?;
    let manifest = load_manifest(manifest, out)?;
    create_dir(out)?;
    // Every mode registers the backbone first from the same seed, so one
    // set of frozen features (with depth) serves all three.
    let mut full_cfg = cfg.model_config();
    full_cfg.ablation = Ablation::RgbDepthMamba;
    let probe = Model::<f64>::new(full_cfg, cfg.seed)?;
    let train = load_features(&probe, cfg, &manifest.split(Split::Train), &cfg.depth_mode)?;
    let val = load_features(&probe, cfg, &manifest.split(Split::Val), &cfg.depth_mode)?;
    let hash = probe.backbone_hash();
    drop(probe);

    let mut rows = Vec::new();
    let mut per_class_rows = Vec::new();
    for mode in Ablation::ALL {
        let (trainer, outcome) = train_mode(cfg, mode, &train, &val)?;
        if trainer.model.backbone_hash() != hash {
            return Err(Error::Contract(format!(
                "{mode} backbone differs from the shared one"
            )));
        }
        let (metrics, _) = metrics_rows(&outcome.history);
        csvio::write_rows(&out.join(format!("metrics_{mode}.csv")), &metrics)?;
        for (class, &acc) in outcome.val.per_class.iter().enumerate() {
            per_class_rows.push(csvio::ModeClassRow {
                mode: mode.to_string(),
                class,
                accuracy: acc,
            });
        }
        rows.push((mode, outcome.val.top1, outcome.val.per_class));
    }
    let per_class = |m: Ablation| &rows.iter().find(|r| r.0 == m).expect("trained").2;
    let deltas = per_class_delta(
        per_class(Ablation::RgbDepthMamba),
        per_class(Ablation::RgbOnly),
    )?;

    let table: Vec<AblationRow> = rows
        .iter()
        .map(|(mode, top1, _)| AblationRow {
            mode: mode.to_string(),
            val_top1: *top1,
        })
        .collect();
    csvio::write_rows(&out.join("ablation.csv"), &table)?;
    csvio::write_rows(&out.join("ablation_per_class.csv"), &per_class_rows)?;
    let delta_rows: Vec<DeltaRow> = deltas
        .iter()
        .map(|d| DeltaRow {
            class: d.class,
            rgb_only: d.rgb,
            full: d.fused,
            delta: d.delta,
        })
        .collect();
    csvio::write_rows(&out.join("per_class_delta.csv"), &delta_rows)?;
    write_config(cfg, out)?;
    Ok(AblationReport { rows, deltas })
}
