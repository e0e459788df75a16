//! Configuration, data ingestion, experiment execution, metrics and plots.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cs_codec::{MatrixKind, RecoveryMode};
use crate::error::{Error, Result};
use crate::learner::{
    run_fl_round, Architecture, LocalDataset, MagnitudeRule, Mode, Model, PipelineConfig, Quantization,
    RoundMetrics, SchedulerChoice, Simulation,
};
use crate::scheduler::{AdmmParams, ENUMERATION_CAP};
use crate::seed::{self, Purpose};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_SIDE: usize = 28;

/// Largest allowed rise of the perfect-mode training loss between rounds.
pub const PERFECT_LOSS_SLACK: f64 = 1e-6;

/// Synthetic stand-in for MNIST: each class owns a few sparse prototype
/// patterns in `[0, 1]`; samples are noisy, partially erased prototypes
/// blended with a prototype of another class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub features: usize,
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub prototypes_per_class: usize,
    /// Fraction of features active in a prototype.
    pub density: f64,
    /// Probability that an active feature survives in a sample.
    pub keep: f64,
    /// Largest blending weight of the distractor prototype.
    pub blend: f64,
    /// Standard deviation of the additive noise on active features.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            features: 784,
            classes: 10,
            train_samples: 30000,
            test_samples: 2000,
            prototypes_per_class: 4,
            density: 0.15,
            keep: 0.65,
            blend: 0.6,
            noise: 0.3,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.features == 0 || self.classes < 2 || self.prototypes_per_class == 0 {
            return Err(Error::Config("synthetic dataset needs features >= 1, classes >= 2".into()));
        }
        if !(unit(self.density) && self.density > 0.0 && unit(self.keep) && unit(self.blend)) {
            return Err(Error::Config("synthetic density, keep and blend must lie in [0, 1]".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("synthetic noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generates `(train, test)` sets. Feature values are multiples of 1/255 so
/// the data can be stored as IDX files.
pub fn generate_synthetic(spec: &SyntheticSpec, seed_: u64) -> Result<(LocalDataset, LocalDataset)> {
    spec.validate()?;
    let mut rng = seed::rng(seed_);
    let protos: Vec<Vec<f32>> = (0..spec.classes * spec.prototypes_per_class)
        .map(|_| {
            (0..spec.features)
                .map(|_| {
                    if rng.random_bool(spec.density) {
                        rng.random_range(0.5..1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut draw = |n: usize| -> Result<LocalDataset> {
        let mut ds = LocalDataset::empty(spec.features);
        let mut row = vec![0.0f32; spec.features];
        for k in 0..n {
            let class = k % spec.classes;
            let own = &protos[class * spec.prototypes_per_class + rng.random_range(0..spec.prototypes_per_class)];
            let other_class = (class + rng.random_range(1..spec.classes)) % spec.classes;
            let other =
                &protos[other_class * spec.prototypes_per_class + rng.random_range(0..spec.prototypes_per_class)];
            let weight = rng.random_range(0.0..=spec.blend);
            for j in 0..spec.features {
                let mut v = 0.0;
                if own[j] > 0.0 && rng.random_bool(spec.keep) {
                    v += f64::from(own[j]);
                }
                v += weight * f64::from(other[j]);
                if v > 0.0 {
                    v += noise.sample(&mut rng);
                }
                let v = v.clamp(0.0, 1.0);
                let pixel = (v * 255.0).round();
                row[j] = if pixel < 13.0 { 0.0 } else { (pixel / 255.0) as f32 };
            }
            ds.push(&row, class as u32)?;
        }
        Ok(ds)
    };
    let train = draw(spec.train_samples)?;
    let test = draw(spec.test_samples)?;
    Ok((shuffled(&train, &mut rng), shuffled(&test, &mut rng)))
}

fn shuffled(ds: &LocalDataset, rng: &mut impl Rng) -> LocalDataset {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    ds.subset(&order)
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path, field: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            field,
            reason: "file truncated in header".into(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Parses a pair of big-endian IDX files (28×28 images and their labels).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LocalDataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    let fmt = |path: &Path, field, reason: String| Error::Format {
        path: path.to_path_buf(),
        field,
        reason,
    };

    let magic = read_u32(&images, 0, images_path, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(fmt(images_path, "magic", format!("expected 0x00000803, got {magic:#010x}")));
    }
    let count = read_u32(&images, 4, images_path, "count")? as usize;
    let rows = read_u32(&images, 8, images_path, "rows")? as usize;
    let cols = read_u32(&images, 12, images_path, "cols")? as usize;
    if rows != MNIST_SIDE || cols != MNIST_SIDE {
        return Err(fmt(images_path, "dims", format!("expected 28x28, got {rows}x{cols}")));
    }
    let pixels = rows * cols;
    if images.len() != 16 + count * pixels {
        return Err(fmt(
            images_path,
            "pixels",
            format!("expected {} bytes of pixel data, found {}", count * pixels, images.len().saturating_sub(16)),
        ));
    }

    let magic = read_u32(&labels, 0, labels_path, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(fmt(labels_path, "magic", format!("expected 0x00000801, got {magic:#010x}")));
    }
    let label_count = read_u32(&labels, 4, labels_path, "count")? as usize;
    if label_count != count {
        return Err(fmt(labels_path, "count", format!("{label_count} labels for {count} images")));
    }
    if labels.len() != 8 + count {
        return Err(fmt(
            labels_path,
            "labels",
            format!("expected {count} label bytes, found {}", labels.len().saturating_sub(8)),
        ));
    }

    let mut ds = LocalDataset::empty(pixels);
    let mut row = vec![0.0f32; pixels];
    for k in 0..count {
        let label = labels[8 + k];
        if label > 9 {
            return Err(fmt(labels_path, "labels", format!("label {label} at index {k} is not a digit")));
        }
        let start = 16 + k * pixels;
        for (r, &p) in row.iter_mut().zip(&images[start..start + pixels]) {
            *r = f32::from(p) / 255.0;
        }
        ds.push(&row, u32::from(label))?;
    }
    Ok(ds)
}

/// Writes `data` as IDX files; features are rounded to the nearest 1/255.
pub fn write_mnist_idx(data: &LocalDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if data.dim() != MNIST_SIDE * MNIST_SIDE {
        return Err(Error::Input(format!("IDX export needs 784 features, got {}", data.dim())));
    }
    let n = data.len() as u32;
    let mut img = Vec::with_capacity(16 + data.len() * data.dim());
    for word in [IDX_IMAGES_MAGIC, n, MNIST_SIDE as u32, MNIST_SIDE as u32] {
        img.extend_from_slice(&word.to_be_bytes());
    }
    let mut lab = Vec::with_capacity(8 + data.len());
    for word in [IDX_LABELS_MAGIC, n] {
        lab.extend_from_slice(&word.to_be_bytes());
    }
    for k in 0..data.len() {
        img.extend(data.dense_row(k).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        let label = u8::try_from(data.label(k)).map_err(|_| Error::Input("label does not fit in a byte".into()))?;
        lab.push(label);
    }
    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

/// Seeded shuffle, then `per_worker` consecutive samples per worker.
pub fn partition_dataset(
    data: &LocalDataset,
    workers: usize,
    per_worker: usize,
    seed_: u64,
) -> Result<Vec<LocalDataset>> {
    if workers == 0 || per_worker == 0 {
        return Err(Error::param("partition", "need at least one worker and one sample each"));
    }
    let needed = workers * per_worker;
    if needed > data.len() {
        return Err(Error::Input(format!(
            "partition needs {needed} samples ({workers} x {per_worker}), dataset has {}",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::rng(seed_));
    Ok(order[..needed].chunks(per_worker).map(|rows| data.subset(rows)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSettings {
    pub lipschitz: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub grad_bound: f64,
    pub grad_bound_running_max: bool,
    pub delta: f64,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            lipschitz: 10.0,
            rho1: 20.0,
            rho2: 0.5,
            grad_bound: 1.0,
            grad_bound_running_max: false,
            delta: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverySettings {
    pub mode: RecoveryMode,
    pub max_iterations: usize,
    pub step_size: f64,
    pub tolerance: f64,
    pub sparsity_budget: Option<usize>,
}

impl Default for RecoverySettings {
    fn default() -> Self {
        Self {
            mode: RecoveryMode::IhtReal,
            max_iterations: 300,
            step_size: 1.0,
            tolerance: 1e-6,
            sparsity_budget: None,
        }
    }
}

/// A complete experiment description. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Label used in `run_id`; defaults to a summary of κ, S and SNR.
    pub name: Option<String>,
    pub workers: usize,
    pub kappa: usize,
    pub measurements: usize,
    pub rounds: usize,
    pub learning_rate: f64,
    /// `P/σ²` in dB. Ignored when `noise_variance` is set.
    pub snr_db: f64,
    pub noise_variance: Option<f64>,
    pub max_power: f64,
    pub samples_per_worker: usize,
    pub architecture: Architecture,
    pub modes: Vec<Mode>,
    pub scheduler: SchedulerChoice,
    pub enumeration_cap: usize,
    pub admm: AdmmParams,
    pub bounds: BoundSettings,
    pub matrix: MatrixKind,
    pub quantization: Quantization,
    pub recovery: RecoverySettings,
    pub magnitude: MagnitudeRule,
    pub master_seed: u64,
    /// Seeds `master_seed, master_seed + 1, …`.
    pub replicates: usize,
    pub dataset: DatasetSource,
    /// Evaluate on the first `test_samples` test points only.
    pub test_samples: Option<usize>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            workers: 10,
            kappa: 10,
            measurements: 1000,
            rounds: 200,
            learning_rate: 0.1,
            snr_db: 5.0,
            noise_variance: None,
            max_power: 10.0,
            samples_per_worker: 3000,
            architecture: Architecture::Mlp {
                input: 784,
                hidden: 16,
                output: 10,
            },
            modes: vec![Mode::Perfect, Mode::Obcsaa],
            scheduler: SchedulerChoice::Auto,
            enumeration_cap: ENUMERATION_CAP,
            admm: AdmmParams::default(),
            bounds: BoundSettings::default(),
            matrix: MatrixKind::Gaussian,
            quantization: Quantization::OneBit,
            recovery: RecoverySettings::default(),
            magnitude: MagnitudeRule::SideChannel,
            master_seed: 0,
            replicates: 1,
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            test_samples: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// The configuration as executed, plus the top-level keys the user did not
/// set.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub resolved_noise_variance: f64,
    pub defaults_applied: Vec<String>,
}

impl ExperimentConfig {
    /// Parses JSON; unknown keys are errors.
    pub fn from_json_str(text: &str) -> Result<ResolvedConfig> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let set: Vec<String> = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?
            .keys()
            .cloned()
            .collect();
        let config: ExperimentConfig = serde_json::from_value(value)?;
        let defaults = serde_json::to_value(ExperimentConfig::default())?;
        let defaults_applied = defaults
            .as_object()
            .map(|o| o.keys().filter(|k| !set.contains(k)).cloned().collect())
            .unwrap_or_default();
        config.resolve(defaults_applied)
    }

    pub fn from_path(path: &Path) -> Result<ResolvedConfig> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    /// Validates and resolves the noise variance; all keys count as set.
    pub fn resolved(self) -> Result<ResolvedConfig> {
        self.resolve(Vec::new())
    }

    fn resolve(self, defaults_applied: Vec<String>) -> Result<ResolvedConfig> {
        let resolved_noise_variance = self.noise_variance();
        if !(resolved_noise_variance >= 0.0 && resolved_noise_variance.is_finite()) {
            return Err(Error::Config(format!("noise variance must be >= 0, got {resolved_noise_variance}")));
        }
        if self.workers == 0 || self.samples_per_worker == 0 {
            return Err(Error::Config("workers and samples_per_worker must be >= 1".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be >= 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("modes must not be empty".into()));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
            if spec.features != self.architecture.input_dim() {
                return Err(Error::Config(format!(
                    "synthetic features ({}) differ from the model input ({})",
                    spec.features,
                    self.architecture.input_dim()
                )));
            }
        }
        Ok(ResolvedConfig {
            config: self,
            resolved_noise_variance,
            defaults_applied,
        })
    }

    /// `σ² = P / 10^(SNR/10)` unless set explicitly.
    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
            .unwrap_or_else(|| self.max_power / 10f64.powf(self.snr_db / 10.0))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            kappa: self.kappa,
            measurements: self.measurements,
            matrix: self.matrix,
            quantization: self.quantization,
            recovery: self.recovery.mode,
            recovery_max_iterations: self.recovery.max_iterations,
            recovery_step_size: self.recovery.step_size,
            recovery_tolerance: self.recovery.tolerance,
            sparsity_budget: self.recovery.sparsity_budget,
            magnitude: self.magnitude,
            scheduler: self.scheduler,
            enumeration_cap: self.enumeration_cap,
            admm: self.admm,
            noise_variance: self.noise_variance(),
            max_power: self.max_power,
            learning_rate: self.learning_rate,
            lipschitz: self.bounds.lipschitz,
            rho1: self.bounds.rho1,
            rho2: self.bounds.rho2,
            grad_bound: self.bounds.grad_bound,
            grad_bound_running_max: self.bounds.grad_bound_running_max,
            delta: self.bounds.delta,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|r| self.master_seed.wrapping_add(r)).collect()
    }

    /// `<name>-<first 8 hex digits of SHA-256 of the config JSON>`. The
    /// output directory is not part of the hash.
    pub fn run_id(&self) -> Result<String> {
        let json = serde_json::to_vec(&Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        })?;
        let digest = Sha256::digest(&json);
        let hash: String = digest.iter().take(4).map(|b| format!("{b:02x}")).collect();
        let name = self
            .name
            .clone()
            .unwrap_or_else(|| format!("k{}_s{}_snr{}", self.kappa, self.measurements, self.snr_label()));
        Ok(format!("{name}-{hash}"))
    }

    fn snr_label(&self) -> String {
        match self.noise_variance {
            Some(v) => format!("var{v}"),
            None => format!("{}", self.snr_db),
        }
    }
}

/// Per-worker training sets and the test set for one seed.
pub fn prepare_data(cfg: &ExperimentConfig, seed_: u64) -> Result<(Vec<LocalDataset>, LocalDataset)> {
    let (train, test) = match &cfg.dataset {
        DatasetSource::Synthetic(spec) => generate_synthetic(spec, seed::derive(seed_, Purpose::Dataset, 0, 0))?,
        DatasetSource::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            load_mnist_idx(train_images, train_labels)?,
            load_mnist_idx(test_images, test_labels)?,
        ),
    };
    let parts = partition_dataset(
        &train,
        cfg.workers,
        cfg.samples_per_worker,
        seed::derive(seed_, Purpose::Partition, 0, 0),
    )?;
    let test = match cfg.test_samples {
        Some(n) if n < test.len() => test.subset(&(0..n).collect::<Vec<_>>()),
        _ => test,
    };
    Ok((parts, test))
}

/// Runs one mode for one seed and returns the per-round metrics. Stops at the
/// first failing round; the rounds completed so far are returned alongside
/// the error.
pub fn run_single(cfg: &ExperimentConfig, mode: Mode, seed_: u64) -> (Vec<RoundMetrics>, Result<()>) {
    let mut rows = Vec::with_capacity(cfg.rounds);
    let result = (|| {
        let (data, test) = prepare_data(cfg, seed_)?;
        let model = Model::init(cfg.architecture, seed::derive(seed_, Purpose::ModelInit, 0, 0))?;
        let mut sim = Simulation::new(cfg.pipeline(), model, data, test, seed_, mode)?;
        let mut prev_loss = f64::INFINITY;
        for _ in 0..cfg.rounds {
            let m = run_fl_round(&mut sim, mode)?;
            if mode == Mode::Perfect && m.train_loss > prev_loss + PERFECT_LOSS_SLACK {
                return Err(Error::Numeric(format!(
                    "round {}: perfect-aggregation loss rose from {prev_loss} to {}",
                    m.round, m.train_loss
                )));
            }
            prev_loss = m.train_loss;
            rows.push(m);
        }
        Ok(())
    })();
    (rows, result)
}

/// One CSV line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub round: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub grad_err_sq: f64,
    pub err_bound: Option<f64>,
    pub beta_count: usize,
    /// Power scaling factor `b_t`.
    pub b_t: Option<f64>,
    #[serde(rename = "R_t")]
    pub r_t: Option<f64>,
}

impl MetricsRow {
    pub fn from_round(run_id: &str, mode: Mode, seed_: u64, m: &RoundMetrics) -> Self {
        Self {
            run_id: run_id.to_string(),
            mode: mode.as_str().to_string(),
            seed: seed_,
            round: m.round,
            train_loss: m.train_loss,
            test_acc: m.test_accuracy,
            grad_err_sq: m.grad_error_sq,
            err_bound: m.bound_report.map(|r| r.total_error_bound),
            beta_count: m.scheduled,
            b_t: m.decision.as_ref().map(|d| d.power_scale),
            r_t: m.objective_r,
        }
    }
}

pub const CSV_HEADER: &str = "run_id,mode,seed,round,train_loss,test_acc,grad_err_sq,err_bound,beta_count,b_t,R_t";

/// Marker written in the `mode` column when a run aborts.
pub const FAILED_MODE: &str = "FAILED";

/// Append-only list of metric rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    /// `(run_id, mode, seed, round, message)` of aborted runs.
    pub failures: Vec<(String, String, u64, usize, String)>,
}

impl MetricsTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_HEADER.split(','))
            .map_err(csv_err)?;
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        for (run_id, _, seed_, round, _) in &self.failures {
            w.write_record([run_id.as_str(), FAILED_MODE, &seed_.to_string(), &round.to_string(), "", "", "", "", "", "", ""])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
    }

    /// Reads a CSV written by [`MetricsTable::to_csv`]; failure markers are
    /// kept in `failures`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = r.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
            return Err(Error::Input(format!("unexpected metrics header: {}", headers.iter().collect::<Vec<_>>().join(","))));
        }
        let mut table = Self::default();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.get(1) == Some(FAILED_MODE) {
                let num = |i: usize| rec.get(i).and_then(|v| v.parse().ok()).unwrap_or(0);
                table.failures.push((
                    rec.get(0).unwrap_or_default().to_string(),
                    FAILED_MODE.to_string(),
                    num(2) as u64,
                    num(3),
                    String::new(),
                ));
                continue;
            }
            table.rows.push(rec.deserialize(Some(&headers)).map_err(csv_err)?);
        }
        Ok(table)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

/// Runs every mode and seed of `cfg`, writing `metrics.csv` and
/// `config.resolved.json` to the output directory. If a run fails, the rows
/// produced so far and a failure marker are still written before the error
/// is returned.
pub fn run_experiment(resolved: &ResolvedConfig) -> Result<MetricsTable> {
    let cfg = &resolved.config;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(
        cfg.output_dir.join("config.resolved.json"),
        serde_json::to_string_pretty(resolved)? + "\n",
    )?;
    let run_id = cfg.run_id()?;
    let mut table = MetricsTable::default();
    let mut outcome = Ok(());
    'outer: for &mode in &cfg.modes {
        for seed_ in cfg.seeds() {
            log::info!("run {run_id}: mode {} seed {seed_}", mode.as_str());
            let (rows, result) = run_single(cfg, mode, seed_);
            let done = rows.len();
            table
                .rows
                .extend(rows.iter().map(|m| MetricsRow::from_round(&run_id, mode, seed_, m)));
            if let Err(e) = result {
                table
                    .failures
                    .push((run_id.clone(), mode.as_str().to_string(), seed_, done, e.to_string()));
                outcome = Err(e);
                break 'outer;
            }
        }
    }
    fs::write(cfg.output_dir.join("metrics.csv"), table.to_csv()?)?;
    outcome.map(|()| table)
}

/// Series key: perfect-mode rows form one baseline series; every other run
/// is its own series.
fn series_key(row: &MetricsRow) -> String {
    if row.mode == Mode::Perfect.as_str() {
        "perfect".to_string()
    } else {
        format!("{} {}", row.mode, row.run_id)
    }
}

/// Seed-averaged `(round, value)` curves per series.
fn series(table: &MetricsTable, value: impl Fn(&MetricsRow) -> f64) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut acc: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for row in &table.rows {
        let e = acc.entry(series_key(row)).or_default().entry(row.round).or_insert((0.0, 0));
        e.0 += value(row);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, pts)| (k, pts.into_iter().map(|(r, (s, n))| (r as f64, s / n as f64)).collect()))
        .collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn line_chart(title: &str, y_label: &str, curves: &BTreeMap<String, Vec<(f64, f64)>>) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 200.0, 40.0, 50.0);
    let pts = curves.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        if y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        (w - right + left) / 2.0,
        escape_xml(title)
    );
    svg += &format!(
        "<g stroke=\"black\" fill=\"none\"><line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/><line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\"/></g>\n",
        h - bottom,
        w - right,
        h - bottom,
        h - bottom
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * f64::from(i) / 4.0;
        let fy = y0 + (y1 - y0) * f64::from(i) / 4.0;
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{:.0}</text>\n",
            sx(fx),
            h - bottom + 16.0,
            fx
        );
        svg += &format!(
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>\n",
            left - 6.0,
            sy(fy) + 4.0,
            fy
        );
    }
    svg += &format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">Communication round</text>\n",
        (w - right + left) / 2.0,
        h - 12.0
    );
    svg += &format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        h / 2.0,
        h / 2.0,
        escape_xml(y_label)
    );
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = curve
            .iter()
            .filter(|(_, y)| y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        );
        let ly = top + 18.0 * i as f64;
        svg += &format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            w - right + 10.0,
            w - right + 30.0,
            w - right + 36.0,
            ly + 4.0,
            escape_xml(name)
        );
    }
    svg + "</svg>\n"
}

/// Writes `loss.svg` and `accuracy.svg`; returns their paths.
pub fn emit_plots(table: &MetricsTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(Error::Input("no metric rows to plot".into()));
    }
    fs::create_dir_all(out_dir)?;
    let loss = out_dir.join("loss.svg");
    let acc = out_dir.join("accuracy.svg");
    fs::write(&loss, line_chart("Training loss", "Training loss", &series(table, |r| r.train_loss)))?;
    fs::write(&acc, line_chart("Test accuracy", "Test accuracy", &series(table, |r| r.test_acc)))?;
    Ok(vec![loss, acc])
}
