//! Test-time adaptation: Direct evaluation, NORM (test-batch statistics) and
//! TENT (entropy minimization over normalization affine parameters).

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::fmt_float;
use crate::data::{corrupt_dataset, CorruptionKind, CorruptionSpec, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::nn::loss::softmax;
use crate::nn::{correct_count, entropy, Mode, Model, SlotKind};
use crate::train::{evaluate, Optimizer, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMethod {
    /// Clean validation accuracy of the unadapted model.
    Source,
    Direct,
    Norm,
    Tent,
}

impl TtaMethod {
    pub const ALL: [TtaMethod; 4] = [TtaMethod::Source, TtaMethod::Direct, TtaMethod::Norm, TtaMethod::Tent];

    pub fn as_str(self) -> &'static str {
        match self {
            TtaMethod::Source => "source",
            TtaMethod::Direct => "direct",
            TtaMethod::Norm => "norm",
            TtaMethod::Tent => "tent",
        }
    }
}

impl fmt::Display for TtaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TtaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TtaMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown TTA method {s:?}")))
    }
}

fn default_methods() -> Vec<TtaMethod> {
    TtaMethod::ALL.to_vec()
}
fn default_batch() -> usize {
    128
}
fn default_tent_lr() -> f32 {
    1e-3
}
fn default_one() -> usize {
    1
}
fn default_kinds() -> Vec<CorruptionKind> {
    CorruptionKind::ALL.to_vec()
}
fn default_severities() -> Vec<u8> {
    vec![5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<TtaMethod>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_tent_lr")]
    pub tent_lr: f32,
    #[serde(default = "default_one")]
    pub tent_steps_per_batch: usize,
    /// Reset the adapted parameters before every batch.
    #[serde(default)]
    pub episodic: bool,
    #[serde(default = "default_kinds")]
    pub corruptions: Vec<CorruptionKind>,
    #[serde(default = "default_severities")]
    pub severities: Vec<u8>,
    /// Seed for the corruption noise, shared by every model evaluated.
    #[serde(default)]
    pub corruption_seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            methods: default_methods(),
            batch_size: default_batch(),
            tent_lr: default_tent_lr(),
            tent_steps_per_batch: 1,
            episodic: false,
            corruptions: default_kinds(),
            severities: default_severities(),
            corruption_seed: 0,
        }
    }
}

pub const TENT_MOMENTUM: f32 = 0.9;

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("tta.batch_size must be ≥ 1"));
        }
        if !(self.tent_lr >= 0.0 && self.tent_lr.is_finite()) {
            return Err(Error::config("tta.tent_lr must be finite and non-negative"));
        }
        if self.tent_steps_per_batch == 0 {
            return Err(Error::config("tta.tent_steps_per_batch must be ≥ 1"));
        }
        for &s in &self.severities {
            CorruptionSpec { kind: CorruptionKind::Contrast, severity: s }
                .validate()
                .map_err(|_| Error::config(format!("tta.severities: {s} is outside 1..=5")))?;
        }
        Ok(())
    }

    fn corrupted_methods(&self) -> impl Iterator<Item = TtaMethod> + '_ {
        let mut seen = Vec::new();
        self.methods.iter().copied().filter(move |m| {
            let keep = *m != TtaMethod::Source && !seen.contains(m);
            seen.push(*m);
            keep
        })
    }

    /// Whether the suite emits the clean-data `source` record.
    pub fn emits_source(&self) -> bool {
        self.methods.iter().any(|m| matches!(m, TtaMethod::Source | TtaMethod::Direct))
    }

    /// Number of records [`run_tta_suite`] produces.
    pub fn record_count(&self) -> usize {
        self.corrupted_methods().count() * self.corruptions.len() * self.severities.len()
            + usize::from(self.emits_source())
    }
}

/// Eval-mode accuracy; never touches the model.
pub fn evaluate_direct(model: &Model, ds: &Dataset, norm: &Normalization, batch_size: usize) -> Result<f64> {
    evaluate(model, ds, norm, batch_size, Mode::Eval)
}

/// Accuracy with normalization statistics taken from each test batch.
pub fn evaluate_norm(model: &Model, ds: &Dataset, norm: &Normalization, batch_size: usize) -> Result<f64> {
    if !model.has_batchnorm() {
        return Err(Error::config(
            "NORM needs batch normalization layers; this model has none",
        ));
    }
    evaluate(model, ds, norm, batch_size, Mode::BatchStats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TentReport {
    pub accuracy: f64,
    /// Mean prediction entropy of the pre-step forwards.
    pub online_entropy: f64,
}

fn mode_for(model: &Model) -> Mode {
    if model.has_batchnorm() {
        Mode::BatchStats
    } else {
        Mode::Eval
    }
}

/// Runs TENT over the stream in dataset order, adapting `model` in place.
/// Only normalization affine parameters change. Each batch's prediction is
/// taken from the forward pass before that batch's update.
pub fn evaluate_tent(model: &mut Model, ds: &Dataset, norm: &Normalization, cfg: &TtaConfig) -> Result<TentReport> {
    cfg.validate()?;
    if !model.slots().iter().any(|s| s.kind == SlotKind::NormAffine) {
        return Err(Error::config("TENT needs normalization affine parameters; this model has none"));
    }
    if ds.is_empty() {
        return Err(Error::data("cannot adapt on an empty dataset"));
    }
    let mode = mode_for(model);
    let source: Vec<_> = model.slots().iter().map(|s| s.tensor.clone()).collect();
    let fresh = || Optimizer::new(OptimizerKind::Sgd, cfg.tent_lr, TENT_MOMENTUM, 0.0);
    let mut opt = fresh();
    let (mut correct, mut ent_sum) = (0usize, 0.0);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(cfg.batch_size) {
        if cfg.episodic {
            for (i, t) in source.iter().enumerate() {
                if model.slots()[i].kind == SlotKind::NormAffine {
                    model.set_slot(i, t.clone())?;
                }
            }
            opt = fresh();
        }
        let x = norm.batch(ds, chunk)?;
        let labels = Normalization::labels(ds, chunk)?;
        for step in 0..cfg.tent_steps_per_batch {
            let out = model.forward(&x, mode, false)?;
            let loss = entropy(&out.logits)?;
            if step == 0 {
                correct += correct_count(&out.logits, &labels);
                ent_sum += loss.data()[0] as f64 * chunk.len() as f64;
            }
            loss.backward()?;
            opt.step(model, |s| s.kind == SlotKind::NormAffine)?;
        }
    }
    // stray gradients on frozen leaves would show up as state differences
    for s in model.slots().iter().filter(|s| s.kind != SlotKind::NormAffine) {
        s.tensor.zero_grad();
    }
    Ok(TentReport {
        accuracy: correct as f64 / ds.len() as f64,
        online_entropy: ent_sum / ds.len() as f64,
    })
}

/// Mean prediction entropy over the stream without adapting (test-batch
/// statistics when the model has batch normalization).
pub fn stream_entropy(model: &Model, ds: &Dataset, norm: &Normalization, batch_size: usize) -> Result<f64> {
    let mode = mode_for(model);
    let mut sum = 0.0;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let logits = model.predict(&norm.batch(ds, chunk)?, mode)?;
        let k = logits.shape()[1];
        let p = softmax(logits.data(), k);
        for row in p.chunks_exact(k) {
            sum -= row.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
        }
    }
    Ok(sum / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaRecord {
    pub run_id: String,
    pub seed: u64,
    pub model_variant: String,
    pub method: TtaMethod,
    /// `none` for the clean source record.
    pub corruption: String,
    /// 0 for the clean source record.
    pub severity: u8,
    pub accuracy: f64,
}

/// Identifies the model a suite is run for.
#[derive(Debug, Clone)]
pub struct RunTag<'a> {
    pub run_id: &'a str,
    pub seed: u64,
    pub model_variant: &'a str,
}

/// Every requested method over every corruption kind × severity, plus one
/// clean `source` record when `source` or `direct` is requested. TENT
/// restarts from the pretrained weights for each corrupted stream.
pub fn run_tta_suite(
    model: &Model,
    clean_val: &Dataset,
    norm: &Normalization,
    cfg: &TtaConfig,
    tag: &RunTag<'_>,
) -> Result<Vec<TtaRecord>> {
    cfg.validate()?;
    if cfg.methods.contains(&TtaMethod::Norm) && !model.has_batchnorm() {
        return Err(Error::config(
            "tta.methods includes norm, but the model has no batch normalization",
        ));
    }
    let rec = |method, corruption: String, severity, accuracy| TtaRecord {
        run_id: tag.run_id.to_string(),
        seed: tag.seed,
        model_variant: tag.model_variant.to_string(),
        method,
        corruption,
        severity,
        accuracy,
    };
    let mut out = Vec::with_capacity(cfg.record_count());
    if cfg.emits_source() {
        let acc = evaluate_direct(model, clean_val, norm, cfg.batch_size)?;
        out.push(rec(TtaMethod::Source, "none".into(), 0, acc));
    }
    for &kind in &cfg.corruptions {
        for &severity in &cfg.severities {
            let spec = CorruptionSpec::new(kind, severity)?;
            let ds = corrupt_dataset(clean_val, spec, cfg.corruption_seed)?;
            for method in cfg.corrupted_methods() {
                let acc = match method {
                    TtaMethod::Direct => evaluate_direct(model, &ds, norm, cfg.batch_size)?,
                    TtaMethod::Norm => evaluate_norm(model, &ds, norm, cfg.batch_size)?,
                    TtaMethod::Tent => evaluate_tent(&mut model.clone(), &ds, norm, cfg)?.accuracy,
                    TtaMethod::Source => unreachable!(),
                };
                log::info!("{} {} {kind} s{severity}: {acc:.4}", tag.run_id, method);
                out.push(rec(method, kind.to_string(), severity, acc));
            }
        }
    }
    Ok(out)
}

pub const TTA_HEADER: &str = "run_id,seed,model_variant,method,corruption,severity,accuracy\n";

pub fn tta_csv(records: &[TtaRecord]) -> String {
    let mut out = String::from(TTA_HEADER);
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.run_id,
            r.seed,
            r.model_variant,
            r.method,
            r.corruption,
            r.severity,
            fmt_float(r.accuracy)
        ));
    }
    out
}

pub fn write_tta_csv(path: impl AsRef<Path>, records: &[TtaRecord]) -> Result<()> {
    std::fs::File::create(path)?.write_all(tta_csv(records).as_bytes())?;
    Ok(())
}
