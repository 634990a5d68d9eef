//! Loss, optimizer, train/eval loops, metrics and checkpoints.

pub mod checkpoint;
pub mod optim;
mod trainer;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{argmax, FuseSpace};
use crate::model::{ClipFeatures, Model};
use crate::nn::Forward;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use optim::{AdamW, AdamWConfig};
pub use trainer::Trainer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Per-epoch cosine decay from `lr` towards zero.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub fuse_space: FuseSpace,
    pub aux_loss_weight: f64,
    pub schedule: Schedule,
    /// Wall-clock seconds in metrics; off keeps outputs byte-reproducible.
    pub record_seconds: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 30,
            batch_size: 16,
            eval_batch_size: 26,
            seed: 0,
            fuse_space: FuseSpace::Logit,
            aux_loss_weight: 0.0,
            schedule: Schedule::Constant,
            record_seconds: false,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adamw().validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size", "must be positive"));
        }
        if self.aux_loss_weight.is_nan() || self.aux_loss_weight < 0.0 {
            return Err(Error::config("aux_loss_weight", "must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let progress = epoch as f64 / self.epochs.max(1) as f64;
                self.lr * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub per_class: Vec<f64>,
    pub seconds: f64,
}

/// Frozen features with their labels.
#[derive(Clone, Debug, Default)]
pub struct FeatureSet<F> {
    pub features: Vec<ClipFeatures<F>>,
    pub labels: Vec<usize>,
}

impl<F> FeatureSet<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, features: ClipFeatures<F>, label: usize) {
        self.features.push(features);
        self.labels.push(label);
    }
}

/// `B × C` one-hot rows.
pub fn one_hot<F: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<F>> {
    let mut data = vec![F::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::contract(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l] = F::one();
    }
    Tensor::from_vec(&[labels.len(), classes], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// Top-1 and per-class accuracy of `predictions`; classes without samples
/// report 0.
pub fn accuracy(predictions: &[usize], labels: &[usize], classes: usize) -> Evaluation {
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let per_class = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    Evaluation {
        top1: if labels.is_empty() {
            0.0
        } else {
            correct as f64 / labels.len() as f64
        },
        per_class,
        predictions: predictions.to_vec(),
    }
}

/// Predicted class per sample, in `eval_batch`-sized chunks.
pub fn predict<F: Scalar>(
    model: &Model<F>,
    set: &FeatureSet<F>,
    eval_batch: usize,
    space: FuseSpace,
) -> Result<Vec<usize>> {
    let classes = model.cfg.num_classes;
    let mut preds = Vec::with_capacity(set.len());
    for chunk in set.features.chunks(eval_batch.max(1)) {
        let batch: Vec<&ClipFeatures<F>> = chunk.iter().collect();
        let mut cx = Forward::new(&model.store);
        let scores = model.forward_batch(&mut cx, &batch, true)?;
        let probs = model.fused_probs(&mut cx, &scores, space)?;
        preds.extend(cx.g.data(probs).chunks(classes).map(argmax));
    }
    Ok(preds)
}

pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    set: &FeatureSet<F>,
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    let preds = predict(model, set, cfg.eval_batch_size, cfg.fuse_space)?;
    Ok(accuracy(&preds, &set.labels, model.cfg.num_classes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDelta {
    pub class: usize,
    pub fused: f64,
    pub rgb: f64,
    pub delta: f64,
}

/// `fused[c] − rgb[c]` per class, largest gain first (ties by class id).
pub fn per_class_delta(fused: &[f64], rgb_only: &[f64]) -> Result<Vec<ClassDelta>> {
    if fused.len() != rgb_only.len() {
        return Err(Error::contract(format!(
            "class counts differ: {} vs {}",
            fused.len(),
            rgb_only.len()
        )));
    }
    let mut rows: Vec<ClassDelta> = fused
        .iter()
        .zip(rgb_only)
        .enumerate()
        .map(|(class, (&f, &r))| ClassDelta {
            class,
            fused: f,
            rgb: r,
            delta: f - r,
        })
        .collect();
    rows.sort_by(|a, b| b.delta.total_cmp(&a.delta).then(a.class.cmp(&b.class)));
    Ok(rows)
}

/// Signed three-decimal rendering used in delta tables, e.g. `+0.112`.
pub fn format_delta(delta: f64) -> String {
    format!("{delta:+.3}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let oracle = accuracy(&labels, &labels, 6);
        assert_eq!(oracle.top1, 1.0);
        assert!(oracle.per_class.iter().all(|&a| a == 1.0));
        let constant = accuracy(&vec![2; 60], &labels, 6);
        assert!((constant.top1 - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(constant.per_class[2], 1.0);
        assert_eq!(constant.per_class[0], 0.0);
    }

    #[test]
    fn accuracy_ignores_order() {
        let labels = [0, 1, 1, 2, 0, 2];
        let preds = [0, 1, 0, 2, 2, 2];
        let a = accuracy(&preds, &labels, 3);
        let perm = [5, 3, 0, 1, 4, 2];
        let b = accuracy(&perm.map(|i| preds[i]), &perm.map(|i| labels[i]), 3);
        assert_eq!(a.top1, b.top1);
        assert_eq!(a.per_class, b.per_class);
    }

    #[test]
    fn delta_examples() {
        let d = per_class_delta(&[0.729], &[0.617]).unwrap();
        assert_eq!(format_delta(d[0].delta), "+0.112");
        let same = per_class_delta(&[0.5, 0.7], &[0.5, 0.7]).unwrap();
        assert!(same.iter().all(|r| r.delta == 0.0));
        let sorted = per_class_delta(&[0.9, 0.5, 1.0], &[0.5, 0.6, 0.5]).unwrap();
        assert_eq!(
            sorted.iter().map(|r| r.class).collect::<Vec<_>>(),
            vec![2, 0, 1]
        );
        assert_eq!(format_delta(sorted[2].delta), "-0.100");
        assert!(matches!(
            per_class_delta(&[1.0], &[1.0, 0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn one_hot_rows() {
        let t = one_hot::<f64>(&[1, 0], 3).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(one_hot::<f64>(&[3], 3).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            schedule: Schedule::Cosine,
            epochs: 4,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), cfg.lr);
        assert!((cfg.lr_at(2) - cfg.lr / 2.0).abs() < 1e-18);
        assert_eq!(TrainConfig::default().lr_at(7), 3e-4);
    }
}
