//! Training loop, optimizers, metrics and the linear-probe protocol.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{fmt_float, DENSITY_TAU};
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::filters::{apply_lpf, edge_filter, Dimensionality, FilterSpec, LpfKind};
use crate::nn::{accuracy, correct_count, cross_entropy, Arch, Mode, Model, Slot, SlotKind};
use crate::tensor::{add, global_avg_pool2d, matmul, mean_axis1, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

fn default_epochs() -> usize {
    15
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f32 {
    1e-3
}
fn default_momentum() -> f32 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f32,
    /// SGD momentum.
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    /// Shuffling seed. Experiment runs overwrite it with the run seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub capture_density: bool,
    #[serde(default = "default_one")]
    pub density_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            optimizer: OptimizerKind::Adam,
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: 0.0,
            seed: 0,
            capture_density: true,
            density_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be ≥ 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be a finite non-negative number"));
        }
        if self.density_every == 0 {
            return Err(Error::config("train.density_every must be ≥ 1"));
        }
        Ok(())
    }
}

/// SGD with momentum or Adam, over a selected subset of model slots.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    step: i32,
    state: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Optimizer {
            kind,
            lr,
            momentum,
            weight_decay,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay)
    }

    /// Updates every slot accepted by `select` from its accumulated gradient
    /// (a missing gradient counts as zero). Updated slots become fresh leaves.
    pub fn step(&mut self, model: &mut Model, select: impl Fn(&Slot) -> bool) -> Result<()> {
        self.step += 1;
        if self.state.len() < model.slots().len() {
            self.state.resize(model.slots().len(), None);
        }
        let t = self.step;
        for i in 0..model.slots().len() {
            let slot = &model.slots()[i];
            if slot.kind == SlotKind::Buffer || !select(slot) {
                continue;
            }
            let w = slot.tensor.data();
            let mut g = slot.tensor.grad().unwrap_or_else(|| vec![0.0; w.len()]);
            if self.weight_decay != 0.0 {
                for (gi, wi) in g.iter_mut().zip(w) {
                    *gi += self.weight_decay * wi;
                }
            }
            let (a, b) = self.state[i].get_or_insert_with(|| (vec![0.0; w.len()], vec![0.0; w.len()]));
            let new: Vec<f32> = match self.kind {
                OptimizerKind::Sgd => {
                    for (v, gi) in a.iter_mut().zip(&g) {
                        *v = self.momentum * *v + gi;
                    }
                    w.iter().zip(a.iter()).map(|(wi, v)| wi - self.lr * v).collect()
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    w.iter()
                        .enumerate()
                        .map(|(j, wi)| {
                            a[j] = ADAM_BETA1 * a[j] + (1.0 - ADAM_BETA1) * g[j];
                            b[j] = ADAM_BETA2 * b[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                            let m_hat = a[j] / c1;
                            let v_hat = b[j] / c2;
                            wi - self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS)
                        })
                        .collect()
                }
            };
            let shape = slot.tensor.shape().to_vec();
            model.set_slot(i, Tensor::param(new, &shape)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Train,
    Val,
    BlockDensity,
    Tta,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Train => "train",
            Scope::Val => "val",
            Scope::BlockDensity => "block-density",
            Scope::Tta => "tta",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub scope: Scope,
    pub key: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityRecord {
    pub run_id: String,
    pub epoch: usize,
    pub block: String,
    pub density: f64,
}

pub fn write_metrics_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::from("run_id,seed,epoch,scope,key,value\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.run_id,
            r.seed,
            r.epoch,
            r.scope.as_str(),
            r.key,
            fmt_float(r.value)
        ));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

pub fn write_density_csv(path: impl AsRef<Path>, records: &[DensityRecord]) -> Result<()> {
    let mut out = String::from("run_id,epoch,block,density\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.run_id, r.epoch, r.block, fmt_float(r.density)));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Accuracy over the whole dataset in fixed-size contiguous batches.
pub fn evaluate(model: &Model, ds: &Dataset, norm: &Normalization, batch_size: usize, mode: Mode) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let x = norm.batch(ds, chunk)?;
        let labels = Normalization::labels(ds, chunk)?;
        let logits = model.predict(&x, mode)?;
        correct += correct_count(&logits, &labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Names of the capture points whose density is tracked.
pub fn block_names(model: &Model) -> Vec<String> {
    std::iter::once("stem".to_string())
        .chain((1..=model.config().num_blocks()).map(|i| format!("block{i}")))
        .collect()
}

/// Fraction of activations above the density threshold at each block
/// output, pooled over the whole dataset (eval mode).
pub fn block_density(model: &Model, ds: &Dataset, norm: &Normalization, batch_size: usize) -> Result<Vec<(String, f64)>> {
    let names = block_names(model);
    let mut above = vec![0u64; names.len()];
    let mut total = vec![0u64; names.len()];
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let out = model.forward(&norm.batch(ds, chunk)?, Mode::Eval, true)?;
        for (i, name) in names.iter().enumerate() {
            let t = out
                .capture(name)
                .ok_or_else(|| Error::Contract(format!("missing capture {name}")))?;
            above[i] += t.data().iter().filter(|&&v| v > DENSITY_TAU).count() as u64;
            total[i] += t.numel() as u64;
        }
    }
    Ok(names
        .into_iter()
        .zip(above.iter().zip(&total))
        .map(|(n, (&a, &t))| (n, if t == 0 { 0.0 } else { a as f64 / t as f64 }))
        .collect())
}

/// Everything a training run records.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub metrics: Vec<MetricsRecord>,
    pub density: Vec<DensityRecord>,
}

impl TrainLog {
    pub fn final_density(&self, block: &str) -> Option<f64> {
        self.density.iter().rev().find(|r| r.block == block).map(|r| r.density)
    }

    pub fn last(&self, scope: Scope, key: &str) -> Option<f64> {
        self.metrics
            .iter()
            .rev()
            .find(|r| r.scope == scope && r.key == key)
            .map(|r| r.value)
    }
}

/// Trains `model` in place. Shuffling is driven by `cfg.seed`; every epoch
/// records train loss/accuracy and val accuracy, and block densities when
/// enabled (always including the final epoch).
pub fn train(
    model: &mut Model,
    train_ds: &Dataset,
    val_ds: &Dataset,
    norm: &Normalization,
    cfg: &TrainConfig,
    run_id: &str,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let mc = model.config();
    if (train_ds.channels, train_ds.height, train_ds.width) != (mc.in_channels, mc.image_size, mc.image_size) {
        return Err(Error::shape(format!(
            "dataset images are {}×{}×{}, model expects {}×{}×{}",
            train_ds.channels, train_ds.height, train_ds.width, mc.in_channels, mc.image_size, mc.image_size
        )));
    }
    if train_ds.num_classes() > mc.num_classes {
        return Err(Error::data(format!(
            "dataset has {} classes, model has {}",
            train_ds.num_classes(),
            mc.num_classes
        )));
    }
    let seed = mc.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::from_config(cfg);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let record = |log: &mut TrainLog, epoch, scope, key: &str, value: f64| {
        log.metrics.push(MetricsRecord {
            run_id: run_id.to_string(),
            seed,
            epoch,
            scope,
            key: key.to_string(),
            value,
        })
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = norm.batch(train_ds, chunk)?;
            let labels = Normalization::labels(train_ds, chunk)?;
            let out = model.forward(&x, Mode::Train, false)?;
            let loss = cross_entropy(&out.logits, &labels)?;
            let l = loss.data()[0];
            if !l.is_finite() {
                return Err(Error::TrainingDiverged { epoch, lr: cfg.lr });
            }
            loss_sum += l as f64 * chunk.len() as f64;
            correct += correct_count(&out.logits, &labels);
            loss.backward()?;
            opt.step(model, |_| true)?;
            model.apply_running(out.running)?;
        }
        let n = train_ds.len() as f64;
        record(&mut log, epoch, Scope::Train, "loss", loss_sum / n);
        record(&mut log, epoch, Scope::Train, "accuracy", correct as f64 / n);
        if !val_ds.is_empty() {
            let acc = evaluate(model, val_ds, norm, cfg.batch_size.max(128), Mode::Eval)?;
            record(&mut log, epoch, Scope::Val, "accuracy", acc);
        }
        if cfg.capture_density && (epoch % cfg.density_every == 0 || epoch == cfg.epochs) {
            for (block, d) in block_density(model, train_ds, norm, 256)? {
                record(&mut log, epoch, Scope::BlockDensity, &block, d);
                log.density.push(DensityRecord {
                    run_id: run_id.to_string(),
                    epoch,
                    block,
                    density: d,
                });
            }
        }
        log::info!(
            "{run_id} epoch {epoch}: loss {:.4} train acc {:.4}",
            loss_sum / n,
            correct as f64 / n
        );
    }
    Ok(log)
}

/// What the probe sees on top of the frozen extractor's final features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeVariant {
    None,
    Lpf,
    Edge,
}

impl ProbeVariant {
    pub const ALL: [ProbeVariant; 3] = [ProbeVariant::None, ProbeVariant::Lpf, ProbeVariant::Edge];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeVariant::None => "none",
            ProbeVariant::Lpf => "lpf",
            ProbeVariant::Edge => "edge",
        }
    }
}

fn default_probe_epochs() -> usize {
    30
}
fn default_probe_lr() -> f32 {
    1e-2
}
fn default_probe_batch() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub lr: f32,
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: default_probe_epochs(),
            lr: default_probe_lr(),
            batch_size: default_probe_batch(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

fn probe_spec(model: &Model) -> FilterSpec {
    match model.config().arch {
        Arch::SmallCnn => FilterSpec::new(LpfKind::Mean, Dimensionality::TwoD, 3),
        Arch::SeqMlp => FilterSpec::new(LpfKind::Mean, Dimensionality::OneD, 3),
    }
}

/// Pooled, detached probe inputs for a whole dataset.
fn probe_features(model: &Model, ds: &Dataset, norm: &Normalization, variant: ProbeVariant) -> Result<Tensor> {
    let spec = probe_spec(model);
    let mut rows = Vec::new();
    let mut dim = 0;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(256) {
        let f = model.forward(&norm.batch(ds, chunk)?, Mode::Eval, false)?.features.detach();
        let f = match variant {
            ProbeVariant::None => f,
            ProbeVariant::Lpf => apply_lpf(&f, &spec)?,
            ProbeVariant::Edge => edge_filter(&f, &spec)?,
        };
        let pooled = match model.config().arch {
            Arch::SmallCnn => global_avg_pool2d(&f)?,
            Arch::SeqMlp => mean_axis1(&f)?,
        };
        dim = pooled.shape()[1];
        rows.extend_from_slice(pooled.data());
    }
    Tensor::new(rows, &[ds.len(), dim])
}

fn gather(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = x.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(out, &[idx.len(), d])
}

fn grad_snapshot(model: &Model) -> Vec<Option<Vec<f32>>> {
    model.slots().iter().map(|s| s.tensor.grad()).collect()
}

/// Trains a linear classifier on frozen final-block features and reports
/// train/val accuracy. The extractor must not receive any gradient.
pub fn linear_probe(
    model: &Model,
    train_ds: &Dataset,
    val_ds: &Dataset,
    norm: &Normalization,
    cfg: &ProbeConfig,
    variant: ProbeVariant,
) -> Result<ProbeResult> {
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::data("linear probe needs non-empty train and val sets"));
    }
    let before = grad_snapshot(model);
    let xtr = probe_features(model, train_ds, norm, variant)?;
    let xva = probe_features(model, val_ds, norm, variant)?;
    let ytr: Vec<u8> = Normalization::labels(train_ds, &(0..train_ds.len()).collect::<Vec<_>>())?;
    let yva: Vec<u8> = Normalization::labels(val_ds, &(0..val_ds.len()).collect::<Vec<_>>())?;
    let classes = train_ds.num_classes().max(val_ds.num_classes());
    let d = xtr.shape()[1];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = (6.0 / d as f32).sqrt();
    let mut w = Tensor::param(
        (0..d * classes).map(|_| rand::Rng::gen_range(&mut rng, -bound..bound)).collect(),
        &[d, classes],
    )?;
    let mut b = Tensor::param(vec![0.0; classes], &[classes])?;
    let mut state = [(vec![0.0f32; d * classes], vec![0.0f32; d * classes]), (vec![0.0; classes], vec![0.0; classes])];
    let mut t = 0;
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = gather(&xtr, chunk)?;
            let y: Vec<u8> = chunk.iter().map(|&i| ytr[i]).collect();
            let loss = cross_entropy(&add(&matmul(&x, &w)?, &b)?, &y)?;
            loss.backward()?;
            t += 1;
            let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
            for (p, (m, v)) in [&mut w, &mut b].into_iter().zip(state.iter_mut()) {
                let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
                let new: Vec<f32> = p
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, pj)| {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        pj - cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS)
                    })
                    .collect();
                *p = Tensor::param(new, p.shape())?;
            }
        }
    }
    if grad_snapshot(model) != before {
        return Err(Error::Contract("linear probe leaked gradient into the frozen extractor".into()));
    }
    let eval = |x: &Tensor, y: &[u8]| -> Result<f64> { Ok(accuracy(&add(&matmul(x, &w)?, &b)?, y)) };
    Ok(ProbeResult {
        train_accuracy: eval(&xtr, &ytr)?,
        val_accuracy: eval(&xva, &yva)?,
    })
}
