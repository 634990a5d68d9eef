use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{first_difference, Checkpoint};
use super::optim::AdamW;
use super::{evaluate, one_hot, FeatureSet, MetricsRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::FuseSpace;
use crate::model::{ClipFeatures, Model, ModelConfig};
use crate::nn::Forward;
use crate::scalar::Scalar;

/// Offset separating the shuffling stream from the parameter-init stream.
const SHUFFLE_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Single-writer training state: model, optimizer moments, shuffling RNG
/// and metrics history. Everything here round-trips through a checkpoint.
#[derive(Clone, Debug)]
pub struct Trainer<F> {
    pub model: Model<F>,
    pub cfg: TrainConfig,
    pub opt: AdamW<F>,
    rng: ChaCha8Rng,
    pub epoch: usize,
    pub history: Vec<MetricsRecord>,
    backbone_hash: [u8; 32],
}

impl<F: Scalar> Trainer<F> {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, cfg.seed)?;
        Self::with_model(model, cfg)
    }

    pub fn with_model(model: Model<F>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.adamw(), &model.store)?;
        let backbone_hash = model.backbone_hash();
        Ok(Self {
            model,
            cfg,
            opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SEED_OFFSET),
            epoch: 0,
            history: Vec::new(),
            backbone_hash,
        })
    }

    /// One optimizer step on a batch. The loss is the batch mean of the
    /// per-sample cross-entropy of the fused prediction (plus the optional
    /// auxiliary per-stream terms). Samples are differentiated one at a
    /// time and their gradients summed, which keeps only one sample's graph
    /// in memory. Returns the batch loss.
    pub fn step(&mut self, batch: &[&ClipFeatures<F>], labels: &[usize], lr: f64) -> Result<F> {
        if batch.is_empty() || batch.len() != labels.len() {
            return Err(Error::contract(format!(
                "batch of {} samples with {} labels",
                batch.len(),
                labels.len()
            )));
        }
        let classes = self.model.cfg.num_classes;
        let inv_batch = F::one() / F::from_usize_lossy(batch.len());
        let mut total = F::zero();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.model.store.len()];
        for (feats, &label) in batch.iter().zip(labels) {
            let targets = one_hot::<F>(&[label], classes)?;
            let mut cx = Forward::new(&self.model.store);
            let scores = self.model.forward_batch(&mut cx, &[feats], true)?;
            let probs = self
                .model
                .fused_probs(&mut cx, &scores, self.cfg.fuse_space)?;
            let mut loss = cx.g.cross_entropy(probs, &targets)?;
            if self.cfg.aux_loss_weight > 0.0 {
                if let Some(b) = scores.logits_b {
                    let pa = cx.g.softmax(scores.logits_a)?;
                    let pb = cx.g.softmax(b)?;
                    let la = cx.g.cross_entropy(pa, &targets)?;
                    let lb = cx.g.cross_entropy(pb, &targets)?;
                    let aux = cx.g.add(la, lb)?;
                    let aux = cx.g.scale(aux, F::lit(0.5 * self.cfg.aux_loss_weight));
                    loss = cx.g.add(loss, aux)?;
                }
            }
            let loss = cx.g.scale(loss, inv_batch);
            let value = cx.g.data(loss)[0];
            if !value.is_finite() {
                return Err(Error::numeric(format!("non-finite training loss {value}")));
            }
            total = total + value;
            cx.g.backward(loss)?;
            for (acc, g) in grads.iter_mut().zip(cx.param_grads()) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(a, g)| *a = *a + g),
                    (None, Some(g)) => *acc = Some(g),
                    (_, None) => {}
                }
            }
        }
        self.opt.step(&mut self.model.store, &grads, lr)?;
        Ok(total)
    }

    /// One pass over `data` in a freshly shuffled order; returns the
    /// sample-weighted mean loss.
    pub fn train_epoch(&mut self, data: &FeatureSet<F>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        let lr = self.cfg.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for idx in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&ClipFeatures<F>> = idx.iter().map(|&i| &data.features[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let loss = self.step(&batch, &labels, lr)?;
            total += loss.to_f64_lossy() * idx.len() as f64;
        }
        self.epoch += 1;
        self.check_frozen()?;
        Ok(total / data.len() as f64)
    }

    /// Trains until `cfg.epochs` epochs are done, evaluating on `val` after
    /// each one. `on_epoch` sees every new record as it is produced.
    pub fn fit(
        &mut self,
        train: &FeatureSet<F>,
        val: &FeatureSet<F>,
        on_epoch: impl FnMut(&MetricsRecord),
    ) -> Result<&[MetricsRecord]> {
        self.fit_until(self.cfg.epochs, train, val, on_epoch)
    }

    /// Like [`Trainer::fit`] but stops once `until` epochs are done. The
    /// schedule still spans `cfg.epochs`, so a run stopped here and resumed
    /// from a checkpoint matches an uninterrupted one.
    pub fn fit_until(
        &mut self,
        until: usize,
        train: &FeatureSet<F>,
        val: &FeatureSet<F>,
        mut on_epoch: impl FnMut(&MetricsRecord),
    ) -> Result<&[MetricsRecord]> {
        if train.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        while self.epoch < until.min(self.cfg.epochs) {
            let start = Instant::now();
            let train_loss = self.train_epoch(train)?;
            let eval = evaluate(&self.model, val, &self.cfg)?;
            let record = MetricsRecord {
                epoch: self.epoch,
                train_loss,
                val_top1: eval.top1,
                per_class: eval.per_class,
                seconds: if self.cfg.record_seconds {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            };
            on_epoch(&record);
            self.history.push(record);
        }
        Ok(&self.history)
    }

    /// Errors if any frozen backbone tensor differs from initialization.
    pub fn check_frozen(&self) -> Result<()> {
        if self.model.backbone_hash() != self.backbone_hash {
            return Err(Error::contract("frozen backbone weights changed"));
        }
        Ok(())
    }

    pub fn fuse_space(&self) -> FuseSpace {
        self.cfg.fuse_space
    }

    /// Parameters, optimizer moments, RNG position, epoch, history and
    /// both configs.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let model_json = serde_json::to_vec(&self.model.cfg).expect("config serializes");
        let train_json = serde_json::to_vec(&self.cfg).expect("config serializes");
        ck.push_bytes("config/model", &model_json);
        ck.push_bytes("config/train", &train_json);
        let store = &self.model.store;
        for id in store.ids() {
            let t = store.get(id);
            ck.push_floats(format!("param/{}", store.name(id)), t.shape(), t.data());
        }
        for (k, &id) in self.opt.ids.iter().enumerate() {
            let shape = store.get(id).shape();
            ck.push_floats(format!("adamw.m/{}", store.name(id)), shape, &self.opt.m[k]);
            ck.push_floats(format!("adamw.v/{}", store.name(id)), shape, &self.opt.v[k]);
        }
        ck.push_u64s("adamw.step", &[self.opt.step]);
        let seed = self.rng.get_seed();
        ck.push_bytes("rng/seed", &seed);
        ck.push_u64s("rng/stream", &[self.rng.get_stream()]);
        let pos = self.rng.get_word_pos();
        ck.push_u64s("rng/word_pos", &[pos as u64, (pos >> 64) as u64]);
        ck.push_u64s("train.epoch", &[self.epoch as u64]);
        let history = serde_json::to_vec(&self.history).expect("history serializes");
        ck.push_bytes("train.history", &history);
        ck
    }

    /// Restores a trainer. When `expected` is given, the stored model
    /// config must match it; the first differing field is named.
    pub fn from_checkpoint(ck: &Checkpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        let model_cfg: ModelConfig = parse_json(ck.bytes("config/model")?, "config/model")?;
        let cfg: TrainConfig = parse_json(ck.bytes("config/train")?, "config/train")?;
        if let Some(want) = expected {
            let a = serde_json::to_value(want).expect("config serializes");
            let b = serde_json::to_value(model_cfg).expect("config serializes");
            if let Some(field) = first_difference(&a, &b) {
                return Err(Error::Format(format!(
                    "checkpoint model config differs in field `{field}`"
                )));
            }
        }
        let mut model = Model::<F>::new(model_cfg, cfg.seed)?;
        let names: Vec<String> = ck
            .records
            .iter()
            .filter_map(|r| r.name.strip_prefix("param/").map(str::to_owned))
            .collect();
        if names.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {}",
                names.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = format!("param/{}", model.store.name(id));
            let shape = model.store.get(id).shape().to_vec();
            let values = ck.floats::<F>(&name, Some(&shape))?;
            model.store.get_mut(id).data_mut().copy_from_slice(&values);
        }
        let mut trainer = Self::with_model(model, cfg)?;
        let store = &trainer.model.store;
        for (k, &id) in trainer.opt.ids.iter().enumerate() {
            let shape = store.get(id).shape();
            trainer.opt.m[k] = ck.floats(&format!("adamw.m/{}", store.name(id)), Some(shape))?;
            trainer.opt.v[k] = ck.floats(&format!("adamw.v/{}", store.name(id)), Some(shape))?;
        }
        trainer.opt.step = single(ck.u64s("adamw.step")?, "adamw.step")?;
        let seed: [u8; 32] = ck
            .bytes("rng/seed")?
            .try_into()
            .map_err(|_| Error::Format("record `rng/seed` must hold 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(single(ck.u64s("rng/stream")?, "rng/stream")?);
        let pos = ck.u64s("rng/word_pos")?;
        if pos.len() != 2 {
            return Err(Error::Format(
                "record `rng/word_pos` must hold 2 words".into(),
            ));
        }
        rng.set_word_pos(u128::from(pos[0]) | (u128::from(pos[1]) << 64));
        trainer.rng = rng;
        trainer.epoch = single(ck.u64s("train.epoch")?, "train.epoch")? as usize;
        trainer.history = parse_json(ck.bytes("train.history")?, "train.history")?;
        Ok(trainer)
    }
}

fn single(values: Vec<u64>, name: &str) -> Result<u64> {
    match values[..] {
        [v] => Ok(v),
        _ => Err(Error::Format(format!(
            "record `{name}` must hold one value"
        ))),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], name: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("record `{name}`: {e}")))
}
