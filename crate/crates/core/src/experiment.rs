//! Multi-seed experiment recipes shared by the command-line tool and the
//! acceptance suite.
//!
//! Every `cmd_*` function validates the whole configuration and loads its
//! data before it creates any file, so a bad config never leaves a partial
//! output directory behind. Runs are named `{variant}-s{seed}` and each run
//! owns the directory `{output_dir}/{run_id}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::analysis::{fmt_float, seed_stats, sigma_gain, spectrum_profile, SeedStats};
use crate::data::{
    corrupt_dataset, load_cifar10_bin, load_idx, subset, synthetic, CorruptionSpec, Dataset, Normalization, Split,
};
use crate::error::{Error, Result};
use crate::filters::{FilterSpec, LpfKind};
use crate::nn::{load_checkpoint, save_checkpoint, ConvReplacement, FilterVariant, Model, ModelConfig, NormKind};
use crate::train::{
    block_names, linear_probe, train, write_density_csv, write_metrics_csv, ProbeConfig, ProbeVariant, Scope,
    TrainConfig,
};
use crate::tta::{evaluate_direct, run_tta_suite, write_tta_csv, RunTag, TtaConfig, TtaMethod, TtaRecord};

/// Environment variable naming the root directory of on-disk datasets.
pub const DATA_DIR_ENV: &str = "EDGEFILTER_DATA_DIR";

pub const CHECKPOINT_FILE: &str = "checkpoint.defc";
pub const RUN_CONFIG_FILE: &str = "experiment.toml";

fn default_data_name() -> String {
    "synthetic-shapes".into()
}
fn default_probe_name() -> String {
    "synthetic-patterns".into()
}
fn default_train_size() -> usize {
    10_000
}
fn default_val_size() -> usize {
    2_000
}
fn default_probe_train_size() -> usize {
    2_000
}
fn default_probe_val_size() -> usize {
    1_000
}

/// Which images to train and evaluate on.
///
/// `synthetic-shapes` and `synthetic-patterns` are generated in memory.
/// `mnist`, `fashion-mnist` (IDX files) and `cifar10` (binary batches) are
/// read from `$EDGEFILTER_DATA_DIR/{name}/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_data_name")]
    pub name: String,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_val_size")]
    pub val_size: usize,
    /// Seed for generation or subset selection. Shared by every run.
    #[serde(default)]
    pub seed: u64,
    /// Transfer dataset for linear probing.
    #[serde(default = "default_probe_name")]
    pub probe_name: String,
    #[serde(default = "default_probe_train_size")]
    pub probe_train_size: usize,
    #[serde(default = "default_probe_val_size")]
    pub probe_val_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            name: default_data_name(),
            train_size: default_train_size(),
            val_size: default_val_size(),
            seed: 0,
            probe_name: default_probe_name(),
            probe_train_size: default_probe_train_size(),
            probe_val_size: default_probe_val_size(),
        }
    }
}

const DATASETS: [&str; 5] = ["synthetic-shapes", "synthetic-patterns", "mnist", "fashion-mnist", "cifar10"];

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, name) in [("data.name", &self.name), ("data.probe_name", &self.probe_name)] {
            if !DATASETS.contains(&name.as_str()) {
                return Err(Error::config(format!("{key}: unknown dataset {name:?} (known: {DATASETS:?})")));
            }
        }
        for (key, n) in [
            ("data.train_size", self.train_size),
            ("data.val_size", self.val_size),
            ("data.probe_train_size", self.probe_train_size),
            ("data.probe_val_size", self.probe_val_size),
        ] {
            if n == 0 {
                return Err(Error::config(format!("{key} must be ≥ 1")));
            }
        }
        Ok(())
    }
}

fn default_positions() -> Vec<usize> {
    vec![0, 1, 2, 3]
}
fn default_kernel_sizes() -> Vec<usize> {
    vec![3, 5, 7, 9, 11]
}

/// Grid for the position × kernel-size ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    #[serde(default = "default_positions")]
    pub positions: Vec<usize>,
    #[serde(default = "default_kernel_sizes")]
    pub kernel_sizes: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            positions: default_positions(),
            kernel_sizes: default_kernel_sizes(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_jobs() -> usize {
    1
}

/// The desk-scale default: SmallCNN with a mean k=7 edge filter after block 1.
pub fn default_model() -> ModelConfig {
    ModelConfig::small_cnn().with_filter(FilterSpec::mean_2d(7).at(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub tta: TtaConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads for independent runs. Results do not depend on it,
    /// so it is not written into run directories.
    #[serde(default = "default_jobs", skip_serializing)]
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: default_model(),
            train: TrainConfig::default(),
            tta: TtaConfig::default(),
            probe: ProbeConfig::default(),
            data: DataConfig::default(),
            ablate: AblateConfig::default(),
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            jobs: default_jobs(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config does not serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.tta.validate()?;
        self.data.validate()?;
        if self.probe.epochs == 0 || self.probe.batch_size == 0 || !(self.probe.lr >= 0.0 && self.probe.lr.is_finite()) {
            return Err(Error::config("probe: epochs and batch_size must be ≥ 1, lr finite and non-negative"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::config(format!("seeds: {s} listed twice")));
            }
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be ≥ 1"));
        }
        check_writable(&self.output_dir)
    }
}

fn check_writable(dir: &Path) -> Result<()> {
    let mut probe = dir;
    loop {
        if probe.exists() {
            let meta = fs::metadata(probe)?;
            if !meta.is_dir() {
                return Err(Error::config(format!("output_dir: {} is not a directory", probe.display())));
            }
            if meta.permissions().readonly() {
                return Err(Error::config(format!("output_dir: {} is not writable", probe.display())));
            }
            return Ok(());
        }
        match probe.parent() {
            Some(p) if !p.as_os_str().is_empty() => probe = p,
            _ => return Ok(()),
        }
    }
}

fn lpf_name(kind: LpfKind) -> &'static str {
    match kind {
        LpfKind::Mean => "mean",
        LpfKind::Median => "median",
        LpfKind::Gaussian => "gaussian",
    }
}

/// Short, path-safe name of a model variant, e.g. `edge-mean-k7-p1`.
pub fn variant_name(cfg: &ModelConfig) -> String {
    match (&cfg.filter, &cfg.conv_replacement) {
        (Some(f), _) => {
            let prefix = match cfg.filter_variant {
                FilterVariant::Edge => "edge",
                FilterVariant::Lowpass => "lpf",
            };
            format!("{prefix}-{}-k{}-p{}", lpf_name(f.lpf_kind), f.kernel_size, f.position)
        }
        (None, Some(c)) => format!("conv-k{}-p{}", c.kernel_size, c.position),
        (None, None) => "baseline".into(),
    }
}

pub fn run_id(cfg: &ModelConfig, seed: u64) -> String {
    format!("{}-s{seed}", variant_name(cfg))
}

/// Train and val splits plus the normalization fitted on the train split.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub norm: Normalization,
}

fn data_root(name: &str) -> Result<PathBuf> {
    let root = std::env::var_os(DATA_DIR_ENV)
        .ok_or_else(|| Error::data(format!("dataset {name:?} needs {DATA_DIR_ENV} to point at the data root")))?;
    Ok(PathBuf::from(root).join(name))
}

fn concat(parts: Vec<Dataset>, name: &str, split: Split) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::data(format!("{name}: no files")))?;
    let chw = (first.channels, first.height, first.width);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in &parts {
        pixels.extend_from_slice(p.pixels());
        labels.extend_from_slice(p.labels());
    }
    Dataset::new(name, split, chw, pixels, labels)
}

fn load_full(name: &str, split: Split, n: usize, seed: u64) -> Result<Dataset> {
    if let Ok(family) = name.parse::<synthetic::Family>() {
        return Ok(synthetic::generate(family, n, seed, split));
    }
    let root = data_root(name)?;
    let full = match name {
        "cifar10" => match split {
            Split::Train => concat(
                (1..=5)
                    .map(|i| load_cifar10_bin(root.join(format!("data_batch_{i}.bin")), name, split))
                    .collect::<Result<_>>()?,
                name,
                split,
            )?,
            Split::Val => load_cifar10_bin(root.join("test_batch.bin"), name, split)?,
        },
        _ => {
            let stem = match split {
                Split::Train => "train",
                Split::Val => "t10k",
            };
            load_idx(
                root.join(format!("{stem}-images-idx3-ubyte")),
                root.join(format!("{stem}-labels-idx1-ubyte")),
                name,
                split,
            )?
        }
    };
    if full.len() < n {
        return Err(Error::data(format!("{name} {split:?} has {} images, {n} requested", full.len())));
    }
    subset(&full, n, seed)
}

fn load_splits(name: &str, train_n: usize, val_n: usize, seed: u64) -> Result<Splits> {
    let train = load_full(name, Split::Train, train_n, seed)?;
    let val = load_full(name, Split::Val, val_n, seed)?;
    let norm = Normalization::from_dataset(&train);
    Ok(Splits { train, val, norm })
}

fn check_fits(model: &ModelConfig, ds: &Dataset) -> Result<()> {
    if ds.channels != model.in_channels || ds.height != model.image_size || ds.width != model.image_size {
        return Err(Error::config(format!(
            "model.in_channels/model.image_size ({}, {}) do not match {} images of {}×{}×{}",
            model.in_channels, model.image_size, ds.name, ds.channels, ds.height, ds.width
        )));
    }
    if ds.num_classes() > model.num_classes {
        return Err(Error::config(format!(
            "model.num_classes {} is smaller than the {} classes of {}",
            model.num_classes,
            ds.num_classes(),
            ds.name
        )));
    }
    Ok(())
}

/// Loads the pretraining splits named by `cfg.data`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.data;
    let splits = load_splits(&d.name, d.train_size, d.val_size, d.seed)?;
    check_fits(&cfg.model, &splits.train)?;
    Ok(splits)
}

/// Loads the transfer splits used by linear probing.
pub fn load_probe_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.data;
    if d.probe_name == d.name {
        return Err(Error::config("data.probe_name must differ from data.name (probing is a transfer test)"));
    }
    load_splits(&d.probe_name, d.probe_train_size, d.probe_val_size, d.seed)
}

/// Applies `f` to every item on up to `jobs` threads; results keep item order.
fn par_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

/// Corrupted copies of the val split for every configured kind × severity.
pub fn corrupted_streams(val: &Dataset, tta: &TtaConfig) -> Result<Vec<Dataset>> {
    let mut out = Vec::new();
    for &kind in &tta.corruptions {
        for &severity in &tta.severities {
            out.push(corrupt_dataset(val, CorruptionSpec::new(kind, severity)?, tta.corruption_seed)?);
        }
    }
    Ok(out)
}

/// Mean Direct accuracy over the given corrupted streams.
pub fn mean_direct_accuracy(model: &Model, streams: &[Dataset], norm: &Normalization, batch_size: usize) -> Result<f64> {
    if streams.is_empty() {
        return Err(Error::config("tta.corruptions and tta.severities must not be empty"));
    }
    let mut sum = 0.0;
    for ds in streams {
        sum += evaluate_direct(model, ds, norm, batch_size)?;
    }
    Ok(sum / streams.len() as f64)
}

fn train_model(cfg: &ExperimentConfig, data: &Splits, model_cfg: &ModelConfig, seed: u64) -> Result<(Model, crate::train::TrainLog, String)> {
    let model_cfg = model_cfg.clone().with_seed(seed);
    let id = run_id(&model_cfg, seed);
    let mut model = Model::build(&model_cfg)?;
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let log = train(&mut model, &data.train, &data.val, &data.norm, &tc, &id)?;
    Ok((model, log, id))
}

/// Outcome of one seed of `cmd_train`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub val_accuracy: f64,
    /// Final-epoch density per block (empty when density capture is off).
    pub final_density: Vec<(String, f64)>,
}

/// Trains one model per seed and writes `checkpoint.defc`, `metrics.csv`,
/// `density.csv` (when captured) and `experiment.toml` into each run
/// directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    par_map(cfg.jobs, &cfg.seeds, |&seed| {
        let (model, log, id) = train_model(cfg, &data, &cfg.model, seed)?;
        let dir = cfg.output_dir.join(&id);
        fs::create_dir_all(&dir)?;
        save_checkpoint(&model, dir.join(CHECKPOINT_FILE))?;
        write_metrics_csv(dir.join("metrics.csv"), &log.metrics)?;
        if cfg.train.capture_density {
            write_density_csv(dir.join("density.csv"), &log.density)?;
        }
        let run_cfg = ExperimentConfig {
            model: model.config().clone(),
            seeds: vec![seed],
            ..cfg.clone()
        };
        fs::write(dir.join(RUN_CONFIG_FILE), run_cfg.to_toml_string()?)?;
        Ok(RunSummary {
            run_id: id,
            seed,
            val_accuracy: log.last(Scope::Val, "accuracy").unwrap_or(0.0),
            final_density: block_names(&model)
                .into_iter()
                .filter_map(|b| log.final_density(&b).map(|d| (b, d)))
                .collect(),
            dir,
        })
    })
}

/// Checkpoint paths matching `pattern`, sorted.
pub fn find_checkpoints(pattern: &str) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Error::config(format!("bad checkpoint pattern {pattern:?}: {e}")))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::data(format!("cannot read {pattern:?}: {e}")))?;
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(format!("no checkpoints match {pattern:?}")));
    }
    Ok(paths)
}

fn run_id_of(path: &Path, model: &Model) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| run_id(model.config(), model.config().seed))
}

/// Runs the configured TTA suite on every matching checkpoint and writes
/// `{output_dir}/tta_results.csv`.
pub fn cmd_tta(cfg: &ExperimentConfig, checkpoint_glob: &str) -> Result<Vec<TtaRecord>> {
    cfg.validate()?;
    let paths = find_checkpoints(checkpoint_glob)?;
    // fail fast: every checkpoint must load and suit the requested methods
    for p in &paths {
        let m = load_checkpoint(p)?;
        if cfg.tta.methods.contains(&TtaMethod::Norm) && !m.has_batchnorm() {
            return Err(Error::config(format!(
                "tta.methods includes norm, but {} has no batch normalization",
                p.display()
            )));
        }
    }
    let data = load_data(cfg)?;
    let per_ckpt = par_map(cfg.jobs, &paths, |p| {
        let model = load_checkpoint(p)?;
        let id = run_id_of(p, &model);
        let variant = variant_name(model.config());
        let tag = RunTag {
            run_id: &id,
            seed: model.config().seed,
            model_variant: &variant,
        };
        run_tta_suite(&model, &data.val, &data.norm, &cfg.tta, &tag)
    })?;
    let records: Vec<TtaRecord> = per_ckpt.into_iter().flatten().collect();
    fs::create_dir_all(&cfg.output_dir)?;
    write_tta_csv(cfg.output_dir.join("tta_results.csv"), &records)?;
    Ok(records)
}

fn stats_or_single(values: &[f64]) -> (f64, Option<SeedStats>) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (mean, seed_stats(values).ok())
}

fn opt_float(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// One cell of the position × kernel-size heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapCell {
    pub position: usize,
    pub kernel_size: usize,
    pub baseline_mean: f64,
    pub baseline_sd: Option<f64>,
    pub filter_mean: f64,
    pub filter_sd: Option<f64>,
    pub gain: f64,
    /// Present only when the baseline SD is positive.
    pub sigma_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateReport {
    pub cells: Vec<HeatmapCell>,
    /// Number of baseline models trained (one per seed).
    pub baseline_trainings: usize,
    /// Grid cells left out because the kernel does not fit the feature map.
    pub skipped: Vec<(usize, usize)>,
}

pub const HEATMAP_HEADER: &str =
    "position,kernel_size,n_seeds,baseline_mean,baseline_sd,filter_mean,filter_sd,gain,sigma_gain\n";

/// Trains the baseline once per seed and one filtered model per grid cell
/// and seed, then writes `heatmap.csv` (Direct-accuracy gains) and
/// `ablate_runs.csv` (per-run accuracies).
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblateReport> {
    cfg.validate()?;
    let grid = &cfg.ablate;
    if grid.positions.is_empty() || grid.kernel_sizes.is_empty() {
        return Err(Error::config("ablate.positions and ablate.kernel_sizes must be non-empty"));
    }
    let template = cfg.model.filter.unwrap_or_else(|| FilterSpec::mean_2d(3));
    let base_cfg = ModelConfig { filter: None, conv_replacement: None, ..cfg.model.clone() };
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for &p in &grid.positions {
        for &k in &grid.kernel_sizes {
            let mc = ModelConfig {
                filter: Some(FilterSpec { kernel_size: k, position: p, ..template }),
                filter_variant: FilterVariant::Edge,
                ..base_cfg.clone()
            };
            match mc.validate() {
                Ok(()) => cells.push(mc),
                // a kernel wider than the feature map is a hole in the grid, not a failure
                Err(e) if p <= base_cfg.num_blocks() && k % 2 == 1 => {
                    log::warn!("skipping ablation cell p={p} k={k}: {e}");
                    skipped.push((p, k));
                }
                Err(e) => return Err(e),
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::config("no ablation cell fits the model"));
    }
    let data = load_data(cfg)?;
    let streams = corrupted_streams(&data.val, &cfg.tta)?;
    fs::create_dir_all(&cfg.output_dir)?;

    let mut tasks: Vec<(Option<usize>, u64)> = cfg.seeds.iter().map(|&s| (None, s)).collect();
    for i in 0..cells.len() {
        tasks.extend(cfg.seeds.iter().map(|&s| (Some(i), s)));
    }
    let results = par_map(cfg.jobs, &tasks, |&(cell, seed)| {
        let mc = cell.map_or(&base_cfg, |i| &cells[i]);
        let (model, _, id) = train_model(cfg, &data, mc, seed)?;
        Ok((id, mean_direct_accuracy(&model, &streams, &data.norm, cfg.tta.batch_size)?))
    })?;

    let n = cfg.seeds.len();
    let base: Vec<f64> = results[..n].iter().map(|r| r.1).collect();
    let (base_mean, base_stats) = stats_or_single(&base);
    let mut runs = String::from("run_id,seed,position,kernel_size,direct_accuracy\n");
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        writeln!(runs, "{},{seed},,,{}", results[i].0, fmt_float(base[i])).unwrap();
    }
    let mut report = AblateReport { cells: Vec::new(), baseline_trainings: n, skipped };
    for (ci, mc) in cells.iter().enumerate() {
        let f = mc.filter.as_ref().unwrap();
        let rows = &results[n * (ci + 1)..n * (ci + 2)];
        let vals: Vec<f64> = rows.iter().map(|r| r.1).collect();
        for ((id, acc), seed) in rows.iter().zip(&cfg.seeds) {
            writeln!(runs, "{id},{seed},{},{},{}", f.position, f.kernel_size, fmt_float(*acc)).unwrap();
        }
        let (filter_mean, filter_stats) = stats_or_single(&vals);
        let sg = base_stats.as_ref().and_then(|b| sigma_gain(filter_mean, b).ok());
        report.cells.push(HeatmapCell {
            position: f.position,
            kernel_size: f.kernel_size,
            baseline_mean: base_mean,
            baseline_sd: base_stats.map(|s| s.sd),
            filter_mean,
            filter_sd: filter_stats.map(|s| s.sd),
            gain: filter_mean - base_mean,
            sigma_gain: sg,
        });
    }
    fs::write(cfg.output_dir.join("heatmap.csv"), heatmap_csv(&report.cells, n))?;
    fs::write(cfg.output_dir.join("ablate_runs.csv"), runs)?;
    Ok(report)
}

pub fn heatmap_csv(cells: &[HeatmapCell], n_seeds: usize) -> String {
    let mut out = String::from(HEATMAP_HEADER);
    for c in cells {
        writeln!(
            out,
            "{},{},{n_seeds},{},{},{},{},{},{}",
            c.position,
            c.kernel_size,
            fmt_float(c.baseline_mean),
            opt_float(c.baseline_sd),
            fmt_float(c.filter_mean),
            opt_float(c.filter_sd),
            fmt_float(c.gain),
            opt_float(c.sigma_gain)
        )
        .unwrap();
    }
    out
}

/// One row of a per-seed result table.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub run_id: String,
    pub seed: u64,
    pub variant: String,
    pub accuracy: f64,
}

/// The five filter-type variants: baseline, edge with each LPF kind, and the
/// mean LPF applied directly. Kernel size and position come from
/// `cfg.model.filter` (mean k=7 after block 1 if unset).
pub fn type_ablation_variants(cfg: &ExperimentConfig) -> Vec<(String, ModelConfig)> {
    let f = cfg.model.filter.unwrap_or_else(|| FilterSpec::mean_2d(7).at(1));
    let base = ModelConfig { filter: None, conv_replacement: None, filter_variant: FilterVariant::Edge, ..cfg.model.clone() };
    let with = |kind, variant| ModelConfig {
        filter: Some(FilterSpec { lpf_kind: kind, ..f }),
        filter_variant: variant,
        ..base.clone()
    };
    vec![
        ("baseline".to_string(), base.clone()),
        ("edge_mean".to_string(), with(LpfKind::Mean, FilterVariant::Edge)),
        ("edge_median".to_string(), with(LpfKind::Median, FilterVariant::Edge)),
        ("edge_gaussian".to_string(), with(LpfKind::Gaussian, FilterVariant::Edge)),
        ("mean_lpf".to_string(), with(LpfKind::Mean, FilterVariant::Lowpass)),
    ]
}

fn variant_csv(header: &str, rows: &[VariantResult]) -> String {
    let mut out = String::from(header);
    for r in rows {
        writeln!(out, "{},{},{},{}", r.run_id, r.seed, r.variant, fmt_float(r.accuracy)).unwrap();
    }
    out
}

/// Direct accuracy (mean over the configured corruptions) of each filter
/// type per seed, written to `type_ablation.csv`.
pub fn cmd_type_ablation(cfg: &ExperimentConfig) -> Result<Vec<VariantResult>> {
    cfg.validate()?;
    let variants = type_ablation_variants(cfg);
    for (_, mc) in &variants {
        mc.validate()?;
    }
    let data = load_data(cfg)?;
    let streams = corrupted_streams(&data.val, &cfg.tta)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let tasks: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let rows = par_map(cfg.jobs, &tasks, |&(v, seed)| {
        let (name, mc) = &variants[v];
        let (model, _, id) = train_model(cfg, &data, mc, seed)?;
        Ok(VariantResult {
            run_id: id,
            seed,
            variant: name.clone(),
            accuracy: mean_direct_accuracy(&model, &streams, &data.norm, cfg.tta.batch_size)?,
        })
    })?;
    fs::write(
        cfg.output_dir.join("type_ablation.csv"),
        variant_csv("run_id,seed,variant,direct_accuracy\n", &rows),
    )?;
    Ok(rows)
}

/// One cell of the trainable-conv control table.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRow {
    pub run_id: String,
    pub seed: u64,
    pub variant: String,
    pub parameter_count: usize,
    pub method: TtaMethod,
    /// Clean accuracy for `source`; mean over corrupted streams otherwise.
    pub accuracy: f64,
}

pub fn control_variants(cfg: &ExperimentConfig) -> Result<Vec<(String, ModelConfig)>> {
    let f = cfg
        .model
        .filter
        .ok_or_else(|| Error::config("control-conv needs model.filter to set the kernel size and position"))?;
    let base = ModelConfig { filter: None, conv_replacement: None, filter_variant: FilterVariant::Edge, ..cfg.model.clone() };
    let conv = ModelConfig {
        conv_replacement: Some(ConvReplacement { kernel_size: f.kernel_size, position: f.position }),
        ..base.clone()
    };
    let edge = ModelConfig { filter: Some(f), ..base.clone() };
    Ok(vec![("no_filter".into(), base), ("conv".into(), conv), ("edge".into(), edge)])
}

/// No filter vs trainable depthwise conv vs edge filter, each scored with
/// Source/Direct/NORM/TENT; written to `control.csv`.
pub fn cmd_control_conv(cfg: &ExperimentConfig) -> Result<Vec<ControlRow>> {
    cfg.validate()?;
    let variants = control_variants(cfg)?;
    for (_, mc) in &variants {
        mc.validate()?;
    }
    if variants[0].1.norm() != NormKind::Batchnorm {
        return Err(Error::config("control-conv scores NORM and TENT, so model.norm must be batchnorm"));
    }
    let tta = TtaConfig {
        methods: vec![TtaMethod::Source, TtaMethod::Direct, TtaMethod::Norm, TtaMethod::Tent],
        ..cfg.tta.clone()
    };
    let data = load_data(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let tasks: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let per_run = par_map(cfg.jobs, &tasks, |&(v, seed)| {
        let (name, mc) = &variants[v];
        let (model, _, id) = train_model(cfg, &data, mc, seed)?;
        let tag = RunTag { run_id: &id, seed, model_variant: name };
        let records = run_tta_suite(&model, &data.val, &data.norm, &tta, &tag)?;
        Ok(tta.methods
            .iter()
            .map(|&method| {
                let accs: Vec<f64> = records.iter().filter(|r| r.method == method).map(|r| r.accuracy).collect();
                ControlRow {
                    run_id: id.clone(),
                    seed,
                    variant: name.clone(),
                    parameter_count: model.parameter_count(),
                    method,
                    accuracy: accs.iter().sum::<f64>() / accs.len().max(1) as f64,
                }
            })
            .collect::<Vec<_>>())
    })?;
    let rows: Vec<ControlRow> = per_run.into_iter().flatten().collect();
    let mut out = String::from("run_id,seed,variant,parameter_count,method,accuracy\n");
    for r in &rows {
        writeln!(out, "{},{},{},{},{},{}", r.run_id, r.seed, r.variant, r.parameter_count, r.method, fmt_float(r.accuracy)).unwrap();
    }
    fs::write(cfg.output_dir.join("control.csv"), out)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub run_id: String,
    pub variant: ProbeVariant,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Linear probes (none / LPF / edge on the frozen final features) of a
/// pretrained checkpoint on the transfer dataset; written to `probe.csv`.
pub fn cmd_probe(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<ProbeRow>> {
    cfg.validate()?;
    let model = load_checkpoint(checkpoint)?;
    let data = load_probe_data(cfg)?;
    check_fits(model.config(), &data.train)?;
    let id = run_id_of(checkpoint, &model);
    let mut rows = Vec::new();
    for variant in ProbeVariant::ALL {
        let r = linear_probe(&model, &data.train, &data.val, &data.norm, &cfg.probe, variant)?;
        rows.push(ProbeRow {
            run_id: id.clone(),
            variant,
            train_accuracy: r.train_accuracy,
            val_accuracy: r.val_accuracy,
        });
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let mut out = String::from("run_id,variant,split,accuracy\n");
    for r in &rows {
        writeln!(out, "{},{},train,{}", r.run_id, r.variant.as_str(), fmt_float(r.train_accuracy)).unwrap();
        writeln!(out, "{},{},val,{}", r.run_id, r.variant.as_str(), fmt_float(r.val_accuracy)).unwrap();
    }
    fs::write(cfg.output_dir.join(format!("probe-{id}.csv")), &out)?;
    fs::write(cfg.output_dir.join("probe.csv"), out)?;
    Ok(rows)
}

/// Run directories under `dir`: `dir` itself if it holds a checkpoint,
/// otherwise its immediate subdirectories that do.
pub fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(CHECKPOINT_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::data(format!("cannot read {}: {e}", dir.display())))? {
        let p = entry?.path();
        if p.join(CHECKPOINT_FILE).is_file() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::data(format!("no run directories with a checkpoint under {}", dir.display())));
    }
    Ok(out)
}

fn read_rows(path: &Path, want_header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| Error::data(format!("{}: {e}", path.display())))?.clone();
    if header.iter().collect::<Vec<_>>() != want_header {
        return Err(Error::data(format!("{}: unexpected header {:?}", path.display(), header)));
    }
    rdr.records()
        .map(|r| r.map_err(|e| Error::data(format!("{}: {e}", path.display()))))
        .collect()
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::data(format!("{}: {s:?} is not a number", path.display())))
}

/// Variant part of a run id (`edge-mean-k7-p1-s3` → `edge-mean-k7-p1`).
pub fn config_key(run_id: &str) -> &str {
    match run_id.rsplit_once("-s") {
        Some((head, tail)) if !tail.is_empty() && tail.bytes().all(|b| b.is_ascii_digit()) => head,
        _ => run_id,
    }
}

/// Metric rows gathered from one run directory.
fn run_metrics(dir: &Path, run_id: &str) -> Result<Vec<(String, f64)>> {
    let metrics = dir.join("metrics.csv");
    let rows = read_rows(&metrics, &["run_id", "seed", "epoch", "scope", "key", "value"])?;
    let mut out = Vec::new();
    let last_val = rows.iter().rfind(|r| &r[3] == "val" && &r[4] == "accuracy");
    if let Some(r) = last_val {
        out.push(("val_accuracy".to_string(), parse_f64(&metrics, &r[5])?));
    }
    let density = dir.join("density.csv");
    if !density.is_file() {
        return Err(Error::data(format!(
            "{run_id} has no density.csv; retrain with train.capture_density = true"
        )));
    }
    let rows = read_rows(&density, &["run_id", "epoch", "block", "density"])?;
    let mut finals: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for r in &rows {
        let epoch: usize = r[1].parse().map_err(|_| Error::data(format!("{}: bad epoch", density.display())))?;
        let d = parse_f64(&density, &r[3])?;
        let e = finals.entry(r[2].to_string()).or_insert((epoch, d));
        if epoch >= e.0 {
            *e = (epoch, d);
        }
    }
    if finals.is_empty() {
        return Err(Error::data(format!(
            "{run_id}: density.csv is empty; retrain with train.capture_density = true"
        )));
    }
    out.extend(finals.into_iter().map(|(b, (_, d))| (format!("density_{b}"), d)));
    Ok(out)
}

/// Files written by [`cmd_analyze`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeReport {
    pub runs: Vec<String>,
    pub spectra: Vec<PathBuf>,
    pub stats: Vec<(String, String, f64, Option<f64>, usize)>,
}

/// Regenerates the analysis tables of a run directory (or of every run under
/// an output directory): `{run}/spectrum.csv` for 2-d filter models,
/// `density_summary.csv` and `stats.csv` next to the runs. `tta_results.csv`
/// in `dir` is folded into the statistics when present.
pub fn cmd_analyze(dir: &Path) -> Result<AnalyzeReport> {
    let runs = run_dirs(dir)?;
    let mut per_run = Vec::new();
    for r in &runs {
        let id = r.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let metrics = run_metrics(r, &id)?;
        let cfg = ExperimentConfig::load(r.join(RUN_CONFIG_FILE))?;
        per_run.push((r.clone(), id, metrics, cfg));
    }
    let summary_dir = dir;

    let mut rows: Vec<(String, String, f64)> = Vec::new();
    let mut density_summary = String::from("run_id,block,density\n");
    let mut spectra = Vec::new();
    let mut data_cache: Option<(DataConfig, Splits)> = None;
    for (r, id, metrics, cfg) in &per_run {
        for (k, v) in metrics {
            if let Some(block) = k.strip_prefix("density_") {
                writeln!(density_summary, "{id},{block},{}", fmt_float(*v)).unwrap();
            }
            rows.push((config_key(id).to_string(), k.clone(), *v));
        }
        let model = load_checkpoint(r.join(CHECKPOINT_FILE))?;
        let is_2d = model
            .filter_spec()
            .is_some_and(|f| f.dimensionality == crate::filters::Dimensionality::TwoD);
        if is_2d {
            if data_cache.as_ref().is_none_or(|(d, _)| d != &cfg.data) {
                data_cache = Some((cfg.data.clone(), load_data(cfg)?));
            }
            let data = &data_cache.as_ref().unwrap().1;
            let profile = spectrum_profile(&model, &data.val, &data.norm, cfg.tta.batch_size)?;
            let mut out = String::from("freq_index,input_amp,output_amp\n");
            for (i, (a, b)) in profile.input_amp.iter().zip(&profile.output_amp).enumerate() {
                writeln!(out, "{i},{},{}", fmt_float(*a), fmt_float(*b)).unwrap();
            }
            let path = r.join("spectrum.csv");
            fs::write(&path, out)?;
            spectra.push(path);
        }
    }
    let tta = summary_dir.join("tta_results.csv");
    if tta.is_file() {
        let known: Vec<&str> = per_run.iter().map(|p| p.1.as_str()).collect();
        for r in read_rows(&tta, &["run_id", "seed", "model_variant", "method", "corruption", "severity", "accuracy"])? {
            if known.contains(&&r[0]) {
                let metric = if &r[3] == "source" {
                    "tta_source".to_string()
                } else {
                    format!("tta_{}_{}_s{}", &r[3], &r[4], &r[5])
                };
                rows.push((config_key(&r[0]).to_string(), metric, parse_f64(&tta, &r[6])?));
            }
        }
    }
    let stats = stats_rows(&rows);
    fs::write(summary_dir.join("density_summary.csv"), density_summary)?;
    fs::write(summary_dir.join("stats.csv"), stats_csv(&stats))?;
    Ok(AnalyzeReport {
        runs: per_run.into_iter().map(|p| p.1).collect(),
        spectra,
        stats,
    })
}

/// Mean/SD per `(config_key, metric)`, in first-seen order. SD is absent
/// for single-seed groups.
pub fn stats_rows(rows: &[(String, String, f64)]) -> Vec<(String, String, f64, Option<f64>, usize)> {
    let mut groups: Vec<((String, String), Vec<f64>)> = Vec::new();
    for (k, m, v) in rows {
        let key = (k.clone(), m.clone());
        match groups.iter_mut().find(|(g, _)| *g == key) {
            Some((_, vals)) => vals.push(*v),
            None => groups.push((key, vec![*v])),
        }
    }
    groups
        .into_iter()
        .map(|((k, m), vals)| {
            let (mean, s) = stats_or_single(&vals);
            (k, m, s.map_or(mean, |s| s.mean), s.map(|s| s.sd), vals.len())
        })
        .collect()
}

pub fn stats_csv(stats: &[(String, String, f64, Option<f64>, usize)]) -> String {
    let mut out = String::from("config_key,metric,mean,sd,n\n");
    for (k, m, mean, sd, n) in stats {
        writeln!(out, "{k},{m},{},{},{n}", fmt_float(*mean), opt_float(*sd)).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names() {
        assert_eq!(variant_name(&ModelConfig::small_cnn()), "baseline");
        assert_eq!(variant_name(&default_model()), "edge-mean-k7-p1");
        let mut lpf = default_model();
        lpf.filter_variant = FilterVariant::Lowpass;
        assert_eq!(run_id(&lpf, 3), "lpf-mean-k7-p1-s3");
        assert_eq!(config_key("lpf-mean-k7-p1-s3"), "lpf-mean-k7-p1");
        assert_eq!(config_key("baseline-s12"), "baseline");
        assert_eq!(config_key("odd-sx"), "odd-sx");
    }

    #[test]
    fn config_defaults_and_errors() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
        let e = ExperimentConfig::from_toml_str("[model.filter]\nlpf_kind = \"mean\"\ndimensionality = \"two_d\"\nkernel_size = 3\nposition = 9\n")
            .unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("filter.position")), "{e}");
        assert!(matches!(ExperimentConfig::from_toml_str("seeds = []"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("seeds = [1, 1]"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("[data]\nname = \"imagenet\""), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<u64> = (0..17).collect();
        let a = par_map(1, &items, |&i| Ok(i * i)).unwrap();
        let b = par_map(4, &items, |&i| Ok(i * i)).unwrap();
        assert_eq!(a, b);
        assert!(par_map(3, &items, |&i| if i == 5 { Err(Error::data("x")) } else { Ok(i) }).is_err());
    }

    #[test]
    fn stats_rows_group() {
        let rows = vec![
            ("a".to_string(), "m".to_string(), 1.0),
            ("a".to_string(), "m".to_string(), 2.0),
            ("a".to_string(), "m".to_string(), 3.0),
            ("b".to_string(), "m".to_string(), 5.0),
        ];
        let s = stats_rows(&rows);
        assert_eq!(s[0], ("a".into(), "m".into(), 2.0, Some(1.0), 3));
        assert_eq!(s[1], ("b".into(), "m".into(), 5.0, None, 1));
        assert_eq!(stats_csv(&s), "config_key,metric,mean,sd,n\na,m,2,1,3\nb,m,5,,1\n");
    }
}
