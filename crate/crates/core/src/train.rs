//! Training and evaluation loops, metrics and checkpointed state.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ecvit_tensor::Tensor;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointError, Entry, Values};
use crate::config::ModelConfig;
use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, cosine_lr, default_warmup, AdamW, AdamWConfig};
use crate::params::Mode;
use crate::pyramid::{build_model, Ecvit};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub warmup: bool,
    pub augment: bool,
    /// Train on this many fixed samples, unshuffled and unaugmented, and
    /// report on the same samples.
    pub overfit: Option<usize>,
    pub clip_grad: bool,
    /// Use only the first N training samples.
    pub limit_train: Option<usize>,
    /// Use only the first N validation samples.
    pub limit_val: Option<usize>,
    /// Keep `epoch_NNN.ckpt` files; `last.ckpt` and `best.ckpt` are always
    /// written.
    pub keep_epoch_checkpoints: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch: 64,
            lr: 0.01,
            weight_decay: 0.05,
            seed: 0,
            warmup: true,
            augment: true,
            overfit: None,
            clip_grad: false,
            limit_train: None,
            limit_val: None,
            keep_epoch_checkpoints: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

pub const CSV_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc,wall_seconds";

impl EpochMetrics {
    fn to_row(&self) -> [f64; 7] {
        [
            self.epoch as f64,
            self.lr,
            self.train_loss,
            self.train_acc,
            self.val_loss,
            self.val_acc,
            self.wall_seconds,
        ]
    }

    fn from_row(r: &[f64]) -> Self {
        EpochMetrics {
            epoch: r[0] as u64,
            lr: r[1],
            train_loss: r[2],
            train_acc: r[3],
            val_loss: r[4],
            val_acc: r[5],
            wall_seconds: r[6],
        }
    }

    /// Everything except wall-clock time, bit for bit.
    pub fn same_numbers(&self, other: &Self) -> bool {
        let (a, b) = (self.to_row(), other.to_row());
        a[..6].iter().zip(&b[..6]).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// Model, optimizer and loop position; enough to continue bitwise.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Ecvit<f32>,
    pub opt: AdamW<f32>,
    pub options: TrainOptions,
    /// Completed epochs.
    pub epoch: u64,
    pub global_step: u64,
    pub best_val_acc: f64,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(config: &ModelConfig, options: TrainOptions) -> Result<Self> {
        let model = build_model::<f32>(config, options.seed)?;
        let opt = AdamW::new(
            &model.store,
            AdamWConfig {
                weight_decay: options.weight_decay,
                ..AdamWConfig::default()
            },
        );
        Ok(TrainState {
            model,
            opt,
            options,
            epoch: 0,
            global_step: 0,
            best_val_acc: f64::NEG_INFINITY,
            history: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = Vec::new();
        let tensor = |name: String, t: &Tensor<f32>| Entry {
            name,
            dims: t.shape().to_vec(),
            values: Values::F32(t.data().to_vec()),
        };
        for p in self.model.store.params() {
            entries.push(tensor(format!("param.{}", p.name), &p.value));
        }
        for b in self.model.store.buffers() {
            entries.push(tensor(format!("buffer.{}.mean", b.name), &b.stats.mean));
            entries.push(tensor(format!("buffer.{}.var", b.name), &b.stats.var));
        }
        for (p, (m, v)) in self
            .model
            .store
            .params()
            .iter()
            .zip(self.opt.m.iter().zip(&self.opt.v))
        {
            entries.push(tensor(format!("opt.m.{}", p.name), m));
            entries.push(tensor(format!("opt.v.{}", p.name), v));
        }
        let o = &self.options;
        let u = |name: &str, v: u64| Entry {
            name: name.into(),
            dims: vec![1],
            values: Values::U64(vec![v]),
        };
        let f = |name: &str, v: f64| Entry {
            name: name.into(),
            dims: vec![1],
            values: Values::F64(vec![v]),
        };
        entries.extend([
            u("state.opt_step", self.opt.step),
            u("state.epoch", self.epoch),
            u("state.global_step", self.global_step),
            f("state.best_val_acc", self.best_val_acc),
            u("options.epochs", o.epochs),
            u("options.batch", o.batch as u64),
            f("options.lr", o.lr),
            f("options.weight_decay", o.weight_decay),
            u("options.seed", o.seed),
            u("options.warmup", o.warmup as u64),
            u("options.augment", o.augment as u64),
            u("options.overfit", o.overfit.map_or(0, |n| n as u64)),
            u("options.clip_grad", o.clip_grad as u64),
            u("options.limit_train", o.limit_train.map_or(0, |n| n as u64)),
            u("options.limit_val", o.limit_val.map_or(0, |n| n as u64)),
            u("options.keep_epoch_checkpoints", o.keep_epoch_checkpoints as u64),
        ]);
        entries.push(Entry {
            name: "state.history".into(),
            dims: vec![self.history.len(), 7],
            values: Values::F64(self.history.iter().flat_map(|m| m.to_row()).collect()),
        });
        Checkpoint {
            config_text: self.model.config.to_toml(),
            entries,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_toml(&ck.config_text)
            .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
        let mut state = TrainState::new(&config, TrainOptions::default())?;

        let mut expected: Vec<String> = state
            .to_checkpoint()
            .entries
            .into_iter()
            .map(|e| e.name)
            .collect();
        let mut present: Vec<String> = ck.entries.iter().map(|e| e.name.clone()).collect();
        expected.sort();
        present.sort();
        if expected != present {
            return Err(CheckpointError::NameMismatch {
                missing: expected.iter().filter(|n| !present.contains(n)).cloned().collect(),
                unexpected: present.iter().filter(|n| !expected.contains(n)).cloned().collect(),
            }
            .into());
        }

        let get = |name: &str| ck.get(name).expect("name set checked");
        let f32s = |name: String, shape: &[usize]| -> Result<Tensor<f32>> {
            let e = get(&name);
            match &e.values {
                Values::F32(v) if e.dims == shape => Ok(Tensor::new(shape.to_vec(), v.clone())?),
                _ => Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: shape.to_vec(),
                    actual: e.dims.clone(),
                }
                .into()),
            }
        };
        let scalar_u = |name: &str| -> Result<u64> {
            match &get(name).values {
                Values::U64(v) if v.len() == 1 => Ok(v[0]),
                _ => Err(CheckpointError::ShapeMismatch {
                    name: name.into(),
                    expected: vec![1],
                    actual: get(name).dims.clone(),
                }
                .into()),
            }
        };
        let scalar_f = |name: &str| -> Result<f64> {
            match &get(name).values {
                Values::F64(v) if v.len() == 1 => Ok(v[0]),
                _ => Err(CheckpointError::ShapeMismatch {
                    name: name.into(),
                    expected: vec![1],
                    actual: get(name).dims.clone(),
                }
                .into()),
            }
        };

        let store = &mut state.model.store;
        for i in 0..store.params().len() {
            let (name, shape) = {
                let p = &store.params()[i];
                (p.name.clone(), p.value.shape().to_vec())
            };
            store.params_mut()[i].value = f32s(format!("param.{name}"), &shape)?;
            state.opt.m[i] = f32s(format!("opt.m.{name}"), &shape)?;
            state.opt.v[i] = f32s(format!("opt.v.{name}"), &shape)?;
        }
        for b in store.buffers_mut() {
            let shape = b.stats.mean.shape().to_vec();
            b.stats.mean = f32s(format!("buffer.{}.mean", b.name), &shape)?;
            b.stats.var = f32s(format!("buffer.{}.var", b.name), &shape)?;
        }
        let opt_n = |name: &str| -> Result<Option<usize>> {
            Ok(match scalar_u(name)? {
                0 => None,
                n => Some(n as usize),
            })
        };
        state.options = TrainOptions {
            epochs: scalar_u("options.epochs")?,
            batch: scalar_u("options.batch")? as usize,
            lr: scalar_f("options.lr")?,
            weight_decay: scalar_f("options.weight_decay")?,
            seed: scalar_u("options.seed")?,
            warmup: scalar_u("options.warmup")? != 0,
            augment: scalar_u("options.augment")? != 0,
            overfit: opt_n("options.overfit")?,
            clip_grad: scalar_u("options.clip_grad")? != 0,
            limit_train: opt_n("options.limit_train")?,
            limit_val: opt_n("options.limit_val")?,
            keep_epoch_checkpoints: scalar_u("options.keep_epoch_checkpoints")? != 0,
        };
        state.opt.config.weight_decay = state.options.weight_decay;
        state.opt.step = scalar_u("state.opt_step")?;
        state.epoch = scalar_u("state.epoch")?;
        state.global_step = scalar_u("state.global_step")?;
        state.best_val_acc = scalar_f("state.best_val_acc")?;
        let h = get("state.history");
        state.history = match &h.values {
            Values::F64(v) if h.dims.len() == 2 && h.dims[1] == 7 && v.len() == h.dims[0] * 7 => {
                v.chunks_exact(7).map(EpochMetrics::from_row).collect()
            }
            _ => {
                return Err(CheckpointError::ShapeMismatch {
                    name: "state.history".into(),
                    expected: vec![h.dims.first().copied().unwrap_or(0), 7],
                    actual: h.dims.clone(),
                }
                .into())
            }
        };
        Ok(state)
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    state.to_checkpoint().write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::from_checkpoint(&Checkpoint::read(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
    /// Per-sample logits in dataset order, `[count, classes]`.
    pub logits: Vec<f32>,
}

/// Worker threads from `ECVIT_THREADS`, default 1.
pub fn threads() -> usize {
    std::env::var("ECVIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn eval_chunk(model: &Ecvit<f32>, ds: &Dataset, indices: &[usize], batch: usize) -> Result<(f64, Vec<f32>)> {
    let hw = (model.config.input_hw[0], model.config.input_hw[1]);
    let mut loss_sum = 0.0;
    let mut logits = Vec::new();
    for idx in indices.chunks(batch.max(1)) {
        let images = crate::data::preprocess(ds, idx, hw, None);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
        let y = model.predict(&images)?;
        for (row, &l) in y.data().chunks(model.config.num_classes).zip(&labels) {
            loss_sum += nll(row, l);
        }
        logits.extend_from_slice(y.data());
    }
    Ok((loss_sum, logits))
}

/// Eval-mode loss and top-1 accuracy over the whole dataset.
pub fn evaluate(model: &Ecvit<f32>, ds: &Dataset, batch: usize) -> Result<EvalMetrics> {
    if ds.num_classes() != model.config.num_classes {
        return Err(Error::Contract(format!(
            "model predicts {} classes, dataset has {}",
            model.config.num_classes,
            ds.num_classes()
        )));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let workers = threads().min(ds.len().max(1));
    let per = ds.len().div_ceil(workers).max(1);
    let parts: Vec<Result<(f64, Vec<f32>)>> = if workers <= 1 {
        vec![eval_chunk(model, ds, &all, batch)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = all
                .chunks(per)
                .map(|c| s.spawn(move || eval_chunk(model, ds, c, batch)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker")).collect()
        })
    };
    let mut loss = 0.0;
    let mut logits = Vec::with_capacity(ds.len() * model.config.num_classes);
    for p in parts {
        let (l, z) = p?;
        loss += l;
        logits.extend(z);
    }
    let c = model.config.num_classes;
    let correct = logits
        .chunks(c)
        .enumerate()
        .filter(|(i, row)| argmax(row) == ds.label(*i))
        .count();
    let n = ds.len().max(1) as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
        count: ds.len(),
        logits,
    })
}

/// Cross-entropy of one logit row against label `l`, in f64.
pub fn nll(row: &[f32], l: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - row[l] as f64
}

/// Index of the largest value, first one on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Training and validation sets as the options select them.
pub fn select_data(train: &Dataset, val: &Dataset, o: &TrainOptions) -> (Dataset, Dataset) {
    let first = |ds: &Dataset, n: Option<usize>| match n {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => ds.clone(),
    };
    match o.overfit {
        Some(n) => {
            let t = first(train, Some(n));
            (t.clone(), t)
        }
        None => (first(train, o.limit_train), first(val, o.limit_val)),
    }
}

/// Progress callback target; `None` keeps training silent.
pub type Progress<'a> = Option<&'a mut dyn FnMut(&EpochMetrics)>;

/// One optimizer step on a batch; returns the pre-update loss and logits.
pub fn train_step(state: &mut TrainState, images: &Tensor<f32>, labels: &[usize], lr: f64) -> Result<StepResult> {
    let mut out = state.model.loss_and_grads(images, labels, Mode::Train)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.global_step,
        });
    }
    if state.options.clip_grad {
        clip_grad_norm(&mut out.grads, 1.0);
    }
    state.opt.step(&mut state.model.store, &out.grads, lr)?;
    state.model.store.apply_updates(out.bn_updates);
    Ok(StepResult {
        loss: out.loss,
        logits: out.logits,
    })
}

pub struct StepResult {
    pub loss: f64,
    pub logits: Tensor<f32>,
}

/// Runs the remaining epochs of `state`, writing metrics and checkpoints to
/// `out_dir`. Stops early, keeping the last good checkpoint, when the loss
/// stops being finite.
pub fn train(
    state: &mut TrainState,
    train_set: &Dataset,
    val_set: &Dataset,
    out_dir: &Path,
    mut progress: Progress<'_>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let o = state.options.clone();
    if train_set.num_classes() != state.model.config.num_classes {
        return Err(Error::Contract(format!(
            "model predicts {} classes, dataset has {}",
            state.model.config.num_classes,
            train_set.num_classes()
        )));
    }
    let hw = (state.model.config.input_hw[0], state.model.config.input_hw[1]);
    let per_epoch = train_set.len().div_ceil(o.batch.max(1)) as u64;
    let total = o.epochs * per_epoch;
    let warmup = if o.warmup { default_warmup(total) } else { 0 };
    let fixed = o.overfit.is_some();

    while state.epoch < o.epochs {
        let start = Instant::now();
        let epoch = state.epoch;
        let batches = BatchIterator::new(train_set, o.batch, hw, o.seed, epoch, !fixed, o.augment && !fixed);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut lr = 0.0;
        for b in batches {
            lr = cosine_lr(state.global_step, total, o.lr, warmup);
            let out = train_step(state, &b.images, &b.labels, lr)?;
            let c = state.model.config.num_classes;
            correct += out
                .logits
                .data()
                .chunks(c)
                .zip(&b.labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            loss_sum += out.loss * b.labels.len() as f64;
            seen += b.labels.len();
            state.global_step += 1;
        }
        let val = evaluate(&state.model, val_set, o.batch)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        state.epoch += 1;
        state.history.push(m.clone());
        write_csv(&out_dir.join("metrics.csv"), &state.history)?;

        let is_best = m.val_acc > state.best_val_acc;
        if is_best {
            state.best_val_acc = m.val_acc;
        }
        let ck = state.to_checkpoint();
        if o.keep_epoch_checkpoints {
            ck.write(&epoch_checkpoint(out_dir, state.epoch))?;
        }
        ck.write(&out_dir.join("last.ckpt"))?;
        if is_best {
            ck.write(&out_dir.join("best.ckpt"))?;
        }
        if let Some(cb) = progress.as_mut() {
            cb(&m);
        }
    }
    Ok(())
}

pub fn epoch_checkpoint(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

pub fn write_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for m in rows {
        w.serialize(m).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rejects a checkpoint whose block size disagrees with a requested one.
pub fn check_partition_flag(config: &ModelConfig, requested: Option<usize>) -> Result<()> {
    match requested {
        Some(m) if m != config.partition_size => Err(CheckpointError::ConfigConflict {
            field: "partition_size".into(),
            checkpoint: config.partition_size.to_string(),
            requested: m.to_string(),
        }
        .into()),
        _ => Ok(()),
    }
}
