//! Experiment configuration, data splits, CSV persistence and evaluation.
//!
//! Configs are flat `key = value` text. Every key has a default, so an empty
//! file plus `dataset = ...` is a complete experiment. The canonical text
//! form (all keys, fixed order) is hashed into the run id.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::anchor_score::ProposalKind;
use crate::error::{MagtError, Result};
use crate::manifolds::{off_manifold_rate, sample_dataset, ManifoldName, ManifoldSpec, DEFAULT_OFF_MANIFOLD_THRESHOLD};
use crate::metrics::{timing_harness, w2_subsampled, DEFAULT_REPEATS, DEFAULT_SUBSAMPLE};
use crate::net::TransportNet;
use crate::prior::LatentPrior;
use crate::rng::{streams, substream};
use crate::samplers::{sample, SamplerConfig, SamplerKind};
use crate::scalar::Scalar;
use crate::trainer::{train_and_select, EpochRecord, OptimizerKind, TrainConfig, TrainOutcome};

pub const SEED_ENV: &str = "MAGT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = MagtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(MagtError::Config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: ManifoldName,
    pub jitter: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_generate: usize,
    pub train: TrainConfig,
    /// Samplers evaluated by `eval`; the M-DDIM settings live in `m_ddim`.
    pub samplers: Vec<SamplerKind>,
    pub m_ddim: SamplerConfig,
    pub w2_subsample: usize,
    pub w2_repeats: usize,
    pub off_threshold: f64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub seed: u64,
}

/// Keys in canonical order.
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "jitter",
    "n_train",
    "n_val",
    "n_test",
    "n_generate",
    "seed",
    "precision",
    "latent_dim",
    "hidden",
    "t_candidates",
    "anchor_count",
    "batch_size",
    "chunk_size",
    "learning_rate",
    "optimizer",
    "epochs",
    "steps_per_epoch",
    "proposal",
    "normalize",
    "val_samples",
    "val_subsample",
    "val_repeats",
    "samplers",
    "ddim_t_high",
    "ddim_t_low",
    "ddim_steps",
    "ddim_eta",
    "ddim_bank_size",
    "w2_subsample",
    "w2_repeats",
    "off_threshold",
    "out_dir",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| MagtError::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<V: fmt::Display>(values: &[V]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn new(dataset: ManifoldName) -> Self {
        let spec = ManifoldSpec::new(dataset);
        let mut train = TrainConfig::new(spec.intrinsic_dim);
        train.seed = 0;
        ExperimentConfig {
            dataset,
            jitter: spec.jitter_sigma,
            n_train: 10_000,
            n_val: 5_000,
            n_test: 10_000,
            n_generate: 10_000,
            train,
            samplers: vec![SamplerKind::OneShot, SamplerKind::MDdim],
            m_ddim: SamplerConfig::m_ddim(),
            w2_subsample: DEFAULT_SUBSAMPLE,
            w2_repeats: DEFAULT_REPEATS,
            off_threshold: DEFAULT_OFF_MANIFOLD_THRESHOLD,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Later lines win.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| MagtError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        // the dataset fixes several defaults, so it is applied first
        let dataset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "dataset")
            .map(|(_, v)| v.parse::<ManifoldName>())
            .transpose()?
            .ok_or_else(|| MagtError::Config("config must name a dataset".into()))?;
        let mut config = ExperimentConfig::new(dataset);
        for (key, value) in &pairs {
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MagtError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Sets one key. Does not re-validate; call [`validate`](Self::validate).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => {
                let name: ManifoldName = v.parse()?;
                if name != self.dataset {
                    let spec = ManifoldSpec::new(name);
                    self.dataset = name;
                    self.jitter = spec.jitter_sigma;
                    self.train.latent_dim = spec.intrinsic_dim;
                }
            }
            "jitter" => self.jitter = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_val" => self.n_val = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "n_generate" => self.n_generate = parse(key, v)?,
            "seed" => {
                self.seed = parse(key, v)?;
                self.train.seed = self.seed;
            }
            "precision" => self.precision = v.parse()?,
            "latent_dim" => self.train.latent_dim = parse(key, v)?,
            "hidden" => self.train.hidden = parse_list(key, v)?,
            "t_candidates" => self.train.t_candidates = parse_list(key, v)?,
            "anchor_count" => {
                self.train.anchor_count = parse(key, v)?;
                self.train.chunk_size = self.train.chunk_size.min(self.train.anchor_count);
            }
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "chunk_size" => self.train.chunk_size = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "optimizer" => self.train.optimizer = v.parse::<OptimizerKind>()?,
            "epochs" => self.train.max_epochs = parse(key, v)?,
            "steps_per_epoch" => {
                self.train.steps_per_epoch = match v {
                    "full" | "0" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "proposal" => self.train.proposal = v.parse::<ProposalKind>()?,
            "normalize" => self.train.normalize = parse(key, v)?,
            "val_samples" => self.train.val_samples = parse(key, v)?,
            "val_subsample" => self.train.val_subsample = parse(key, v)?,
            "val_repeats" => self.train.val_repeats = parse(key, v)?,
            "samplers" => self.samplers = parse_list(key, v)?,
            "ddim_t_high" => self.m_ddim.t_high = parse(key, v)?,
            "ddim_t_low" => self.m_ddim.t_low = parse(key, v)?,
            "ddim_steps" => self.m_ddim.steps = parse(key, v)?,
            "ddim_eta" => self.m_ddim.eta = parse(key, v)?,
            "ddim_bank_size" => self.m_ddim.bank_size = parse(key, v)?,
            "w2_subsample" => self.w2_subsample = parse(key, v)?,
            "w2_repeats" => self.w2_repeats = parse(key, v)?,
            "off_threshold" => self.off_threshold = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(MagtError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "dataset" => self.dataset.to_string(),
            "jitter" => self.jitter.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_val" => self.n_val.to_string(),
            "n_test" => self.n_test.to_string(),
            "n_generate" => self.n_generate.to_string(),
            "seed" => self.seed.to_string(),
            "precision" => self.precision.to_string(),
            "latent_dim" => t.latent_dim.to_string(),
            "hidden" => join(&t.hidden),
            "t_candidates" => join(&t.t_candidates),
            "anchor_count" => t.anchor_count.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "chunk_size" => t.chunk_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "optimizer" => t.optimizer.to_string(),
            "epochs" => t.max_epochs.to_string(),
            "steps_per_epoch" => t.steps_per_epoch.map_or("full".to_string(), |s| s.to_string()),
            "proposal" => t.proposal.as_str().to_string(),
            "normalize" => t.normalize.to_string(),
            "val_samples" => t.val_samples.to_string(),
            "val_subsample" => t.val_subsample.to_string(),
            "val_repeats" => t.val_repeats.to_string(),
            "samplers" => join(&self.samplers),
            "ddim_t_high" => self.m_ddim.t_high.to_string(),
            "ddim_t_low" => self.m_ddim.t_low.to_string(),
            "ddim_steps" => self.m_ddim.steps.to_string(),
            "ddim_eta" => self.m_ddim.eta.to_string(),
            "ddim_bank_size" => self.m_ddim.bank_size.to_string(),
            "w2_subsample" => self.w2_subsample.to_string(),
            "w2_repeats" => self.w2_repeats.to_string(),
            "off_threshold" => self.off_threshold.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Applies `MAGT_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.set("seed", &v),
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(MagtError::Config(format!("{SEED_ENV}: {e}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
            ("n_generate", self.n_generate),
            ("w2_subsample", self.w2_subsample),
            ("w2_repeats", self.w2_repeats),
        ];
        for (key, n) in counts {
            if n == 0 {
                return Err(MagtError::Config(format!("{key} must be at least 1")));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(MagtError::Config(format!("jitter must be finite and nonnegative, got {}", self.jitter)));
        }
        if !(self.off_threshold > 0.0) {
            return Err(MagtError::Config("off_threshold must be positive".into()));
        }
        if self.samplers.is_empty() {
            return Err(MagtError::Config("at least one sampler is required".into()));
        }
        self.train.validate()?;
        let mut ddim = self.m_ddim;
        ddim.kind = SamplerKind::MDdim;
        ddim.validate()
    }

    /// All keys in canonical order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// 16 hex digits of FNV-1a over the canonical text, excluding `out_dir`
    /// so that moving an output tree does not rename its runs.
    pub fn run_id(&self) -> String {
        let text: String = CONFIG_KEYS
            .iter()
            .filter(|k| **k != "out_dir")
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect();
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_id())
    }

    pub fn manifold(&self) -> Result<ManifoldSpec> {
        let spec = ManifoldSpec::new(self.dataset).with_jitter(self.jitter);
        spec.validate()?;
        Ok(spec)
    }

    pub fn sampler_config(&self, kind: SamplerKind) -> SamplerConfig {
        match kind {
            SamplerKind::OneShot => SamplerConfig::one_shot(),
            SamplerKind::MDdim => SamplerConfig {
                kind,
                ..self.m_ddim
            },
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Array2<f64>,
    pub val: Array2<f64>,
    pub test: Array2<f64>,
}

/// Train/val/test sets drawn from independent sub-streams of the seed.
pub fn generate_splits(config: &ExperimentConfig) -> Result<Splits> {
    let spec = config.manifold()?;
    let draw = |i: u64, n: usize| -> Result<Array2<f64>> {
        Ok(sample_dataset(&spec, n, substream(config.seed, i))?.points)
    };
    Ok(Splits {
        train: draw(0, config.n_train)?,
        val: draw(1, config.n_val)?,
        test: draw(2, config.n_test)?,
    })
}

/// Writes points with a `x0,x1,...` header, full f64 round-trip precision.
pub fn write_points<W: Write>(writer: W, points: ArrayView2<f64>) -> Result<()> {
    let wrap = |e: csv::Error| MagtError::Parse(format!("writing points: {e}"));
    let mut out = csv::Writer::from_writer(writer);
    let header: Vec<String> = (0..points.ncols()).map(|j| format!("x{j}")).collect();
    out.write_record(&header).map_err(wrap)?;
    for row in points.rows() {
        out.write_record(row.iter().map(|v| format!("{v:.16e}"))).map_err(wrap)?;
    }
    out.flush().map_err(|e| MagtError::io("<points>", e))
}

pub fn write_points_csv(path: impl AsRef<Path>, points: ArrayView2<f64>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| MagtError::io(path, e))?;
    write_points(BufWriter::new(file), points)
}

pub fn read_points_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let cols = reader.headers().map_err(|e| csv_error(path, e))?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        for field in record.iter() {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| MagtError::Parse(format!("{}: bad number {field:?}", path.display())))?,
            );
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| MagtError::Parse(format!("{}: {e}", path.display())))
}

fn csv_error(path: &Path, e: csv::Error) -> MagtError {
    MagtError::Parse(format!("{}: {e}", path.display()))
}

/// One evaluated (dataset, method, config) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub method: String,
    pub t: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "W2_mean")]
    pub w2_mean: f64,
    #[serde(rename = "W2_sd")]
    pub w2_sd: f64,
    pub offmanifold: f64,
    pub seconds: f64,
    #[serde(rename = "NFE")]
    pub nfe: usize,
    pub seed: u64,
}

/// An [`EvalRow`] tagged with the training-set size of its sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub dataset: String,
    pub method: String,
    pub t: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "W2_mean")]
    pub w2_mean: f64,
    #[serde(rename = "W2_sd")]
    pub w2_sd: f64,
    pub offmanifold: f64,
    pub seconds: f64,
    #[serde(rename = "NFE")]
    pub nfe: usize,
    pub seed: u64,
}

impl SweepRow {
    pub fn new(n: usize, row: EvalRow) -> Self {
        SweepRow {
            n,
            dataset: row.dataset,
            method: row.method,
            t: row.t,
            k: row.k,
            w2_mean: row.w2_mean,
            w2_sd: row.w2_sd,
            offmanifold: row.offmanifold,
            seconds: row.seconds,
            nfe: row.nfe,
            seed: row.seed,
        }
    }
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_csv<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| MagtError::io(parent, e))?;
    }
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| MagtError::io(path, e))?;
    let mut out = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        out.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    out.flush().map_err(|e| MagtError::io(path, e))
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<R>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

/// Appends the epoch log of a training run.
pub fn append_epoch_log(path: impl AsRef<Path>, records: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| MagtError::io(parent, e))?;
    }
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| MagtError::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(EpochRecord::CSV_HEADER);
        text.push('\n');
    }
    for r in records {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| MagtError::io(path, e))
}

/// Writes `bytes` to a fresh path, or accepts an existing file with the
/// same content. Never replaces a differing file.
pub fn write_once(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    match fs::read(path) {
        Ok(existing) if existing == bytes => return Ok(()),
        Ok(_) => {
            return Err(MagtError::Config(format!(
                "{} exists with different content; outputs are append-only",
                path.display()
            )))
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(MagtError::io(path, e)),
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| MagtError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| MagtError::io(path, e))
}

pub fn checkpoint_bytes<T: Scalar>(net: &TransportNet<T>) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    net.write_checkpoint(&mut bytes)
        .map_err(|e| MagtError::io("<memory>", e))?;
    Ok(bytes)
}

pub fn checkpoint_name(t: f64) -> String {
    format!("net_t{t:.3}.ckpt")
}

/// Trains every candidate level at the configured precision and returns
/// the outcome with f64 networks.
pub fn train_experiment(
    config: &ExperimentConfig,
    train: ArrayView2<f64>,
    val: ArrayView2<f64>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<f64>> {
    fn widen<T: Scalar>(outcome: TrainOutcome<T>) -> TrainOutcome<f64> {
        TrainOutcome {
            selected: outcome.selected,
            levels: outcome
                .levels
                .into_iter()
                .map(|l| crate::trainer::TrainedLevel {
                    t: l.t,
                    net: l.net.cast(),
                    val_metric: l.val_metric,
                    log: l.log,
                })
                .collect(),
        }
    }
    let mut train_config = config.train.clone();
    train_config.seed = config.seed;
    Ok(match config.precision {
        Precision::F32 => widen(train_and_select::<f32>(train, val, &train_config, on_epoch)?),
        Precision::F64 => train_and_select::<f64>(train, val, &train_config, on_epoch)?,
    })
}

/// Generates `n_generate` samples with `kind`, times the call, and scores
/// them against `test`.
pub fn evaluate(
    config: &ExperimentConfig,
    net: &TransportNet<f64>,
    t: f64,
    kind: SamplerKind,
    test: ArrayView2<f64>,
) -> Result<(EvalRow, Array2<f64>)> {
    let sampler = config.sampler_config(kind);
    let prior = LatentPrior::StandardNormal;
    let seed = substream(config.seed, streams::SAMPLER);
    let (timing, samples) = match config.precision {
        Precision::F32 => {
            let net32: TransportNet<f32> = net.cast();
            let (timing, out) =
                timing_harness(|n| sample(&net32, &prior, &sampler, n, seed), config.n_generate)?;
            (timing, out.samples.mapv(|v| v.as_f64()))
        }
        Precision::F64 => {
            let (timing, out) = timing_harness(|n| sample(net, &prior, &sampler, n, seed), config.n_generate)?;
            (timing, out.samples)
        }
    };
    let row = score_samples(config, kind.as_str(), t, samples.view(), test, timing.seconds, timing.nfe)?;
    Ok((row, samples))
}

/// W2 and off-manifold rate of `samples` against `test`.
pub fn score_samples(
    config: &ExperimentConfig,
    method: &str,
    t: f64,
    samples: ArrayView2<f64>,
    test: ArrayView2<f64>,
    seconds: f64,
    nfe: usize,
) -> Result<EvalRow> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(MagtError::Numerical(format!("{method} produced non-finite samples")));
    }
    let spec = config.manifold()?;
    let n = config.w2_subsample.min(samples.nrows()).min(test.nrows());
    let w2 = w2_subsampled(test, samples, n, config.w2_repeats, config.seed)?;
    let off = off_manifold_rate(&spec, samples, config.off_threshold)?;
    Ok(EvalRow {
        dataset: config.dataset.to_string(),
        method: method.to_string(),
        t,
        k: config.train.anchor_count,
        w2_mean: w2.mean,
        w2_sd: w2.sd,
        offmanifold: off,
        seconds,
        nfe,
        seed: config.seed,
    })
}
