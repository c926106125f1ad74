//! Experiment specs, datasets, the sweep runner and CSV output.
//!
//! Spec grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value
//! key = [value, value, ...]
//! ```
//!
//! Values may be wrapped in double quotes. Unknown or repeated keys are
//! rejected. Relative paths resolve against the spec file's directory when
//! the spec is loaded from disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{matmul, Mat};
use crate::net::{layer_signals, Activation, Dataset, Loss, MlpModel};
use crate::quant::{QuantGrid, Quantizer, RoundingPolicy, SourceKind};
use crate::seed;
use crate::statlab::{
    bias_check, fit_scaling, measure_weight_bias, mse_decompose, tq_bound_check, McConfig,
    ProductProbe, ScalingLaw,
};
use crate::trainer::{tail_window, train, RunRecord, TrainConfig, TrainMode};

/// Environment variable overriding the worker count of a spec.
pub const WORKERS_ENV: &str = "SRLAB_WORKERS";

pub const RUNS_HEADER: [&str; 9] = [
    "run_id",
    "step",
    "loss",
    "grad_norm_sq",
    "mode",
    "format",
    "batch_size",
    "lr",
    "seed",
];

pub const SUMMARY_HEADER: [&str; 14] = [
    "run_id",
    "mode",
    "format",
    "weight_format",
    "batch_size",
    "lr",
    "seed",
    "cell_seed",
    "evals",
    "tail_points",
    "tail_grad_norm_sq",
    "tail_stderr",
    "final_loss",
    "status",
];

pub const LEMMAS_HEADER: [&str; 6] = ["probe", "parameter", "value", "stderr", "reference", "pass"];

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    /// Gaussian inputs, fixed random linear teacher, Gaussian label noise.
    SyntheticRegression {
        n: usize,
        d_in: usize,
        d_out: usize,
        noise_sd: f64,
    },
    /// Two Gaussian clusters with one-hot labels.
    TwoBlob { n: usize, d_in: usize },
    /// Numeric CSV; the last `targets` columns are targets.
    Csv { path: PathBuf, targets: usize },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::SyntheticRegression { .. } => "synthetic_regression",
            Task::TwoBlob { .. } => "two_blob",
            Task::Csv { .. } => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub task: Task,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
    pub modes: Vec<TrainMode>,
    /// Activation/gradient grids; one sweep axis.
    pub formats: Vec<QuantGrid>,
    /// Weight grid. `None` means the same grid as the cell's format.
    pub weight_format: Option<QuantGrid>,
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub eval_every: usize,
    pub threshold_source: SourceKind,
    pub share_weight_thresholds: bool,
    pub data_seed: u64,
    pub output: PathBuf,
    pub lemmas: bool,
    pub lemma_step: f64,
    pub lemma_trials: usize,
    /// 0 picks the number of cores.
    pub workers: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".to_string(),
            task: Task::SyntheticRegression {
                n: 512,
                d_in: 16,
                d_out: 1,
                noise_sd: 0.1,
            },
            hidden: vec![16],
            activation: Activation::Relu,
            loss: Loss::Mse,
            modes: vec![TrainMode::SrMixedQat(Default::default())],
            formats: vec![QuantGrid::float(4, 3).expect("valid format")],
            weight_format: None,
            batch_sizes: vec![32],
            learning_rates: vec![0.05],
            seeds: vec![0],
            steps: 1000,
            eval_every: 50,
            threshold_source: SourceKind::Prng,
            share_weight_thresholds: true,
            data_seed: 0,
            output: PathBuf::from("results"),
            lemmas: false,
            lemma_step: 0.125,
            lemma_trials: 20_000,
            workers: 0,
        }
    }
}

/// One point of the sweep. `coords` indexes (mode, format, batch size,
/// learning rate, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub coords: [usize; 5],
    pub mode: TrainMode,
    pub format: QuantGrid,
    pub weight_format: QuantGrid,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub cell_seed: u64,
}

impl ExperimentSpec {
    pub fn widths(&self, d_in: usize, d_out: usize) -> Vec<usize> {
        let mut w = vec![d_in];
        w.extend(&self.hidden);
        w.push(d_out);
        w
    }

    pub fn num_cells(&self) -> usize {
        self.modes.len()
            * self.formats.len()
            * self.batch_sizes.len()
            * self.learning_rates.len()
            * self.seeds.len()
    }

    /// `derive(seed, [mode, format, batch, lr, seed index])`.
    pub fn cell_seed(&self, coords: [usize; 5]) -> u64 {
        let parts = coords.map(|c| c as u64);
        seed::derive(self.seeds[coords[4]], &parts)
    }

    /// Cells in coordinate order, seeds varying fastest.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::with_capacity(self.num_cells());
        for (m, &mode) in self.modes.iter().enumerate() {
            for (f, &format) in self.formats.iter().enumerate() {
                for (bi, &b) in self.batch_sizes.iter().enumerate() {
                    for (li, &lr) in self.learning_rates.iter().enumerate() {
                        for (si, &s) in self.seeds.iter().enumerate() {
                            let coords = [m, f, bi, li, si];
                            out.push(Cell {
                                index: out.len(),
                                coords,
                                mode,
                                format,
                                weight_format: self.weight_format.unwrap_or(format),
                                batch_size: b,
                                learning_rate: lr,
                                seed: s,
                                cell_seed: self.cell_seed(coords),
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn train_config(&self, cell: &Cell) -> TrainConfig {
        TrainConfig {
            mode: cell.mode,
            act_grid: cell.format,
            weight_grid: cell.weight_format,
            batch_size: cell.batch_size,
            learning_rate: cell.learning_rate,
            steps: self.steps,
            seed: cell.cell_seed,
            eval_every: self.eval_every,
            threshold_source: self.threshold_source,
            share_weight_thresholds: self.share_weight_thresholds,
        }
    }

    /// Initial model for a seed. Cells sharing a seed start from the same weights.
    pub fn initial_model(&self, data: &Dataset, seed_value: u64) -> Result<MlpModel> {
        MlpModel::init(
            &self.widths(data.input_dim(), data.target_dim()),
            self.activation,
            self.loss,
            seed::derive(seed_value, &[0x1417]),
        )
    }

    fn resolve_paths(&mut self, base: &Path) {
        if self.output.is_relative() {
            self.output = base.join(&self.output);
        }
        if let Task::Csv { path, .. } = &mut self.task {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}

#[derive(Debug)]
enum Value {
    Scalar(String),
    List(Vec<String>),
}

struct Entry {
    line: usize,
    value: Value,
}

fn unquote(s: &str) -> String {
    let s = s.trim();
    s.strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .unwrap_or(s)
        .to_string()
}

fn tokenize(text: &str) -> Result<BTreeMap<String, Entry>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `key = value`, found `{body}`"),
        })?;
        let key = key.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Parse {
                line,
                msg: format!("invalid key `{key}`"),
            });
        }
        let value = value.trim();
        let value = if let Some(inner) = value.strip_prefix('[') {
            let inner = inner.strip_suffix(']').ok_or_else(|| Error::Parse {
                line,
                msg: "unterminated list".to_string(),
            })?;
            let items: Vec<String> = inner
                .split(',')
                .map(unquote)
                .filter(|s| !s.is_empty())
                .collect();
            Value::List(items)
        } else {
            if value.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: format!("missing value for `{key}`"),
                });
            }
            Value::Scalar(unquote(value))
        };
        if out.insert(key.to_string(), Entry { line, value }).is_some() {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(out)
}

const KNOWN_KEYS: &[&str] = &[
    "name",
    "task",
    "n",
    "d_in",
    "d_out",
    "noise_sd",
    "csv_path",
    "targets",
    "hidden",
    "activation",
    "loss",
    "modes",
    "formats",
    "weight_format",
    "batch_sizes",
    "learning_rates",
    "seeds",
    "steps",
    "eval_every",
    "threshold_source",
    "share_weight_thresholds",
    "data_seed",
    "output",
    "lemmas",
    "lemma_step",
    "lemma_trials",
    "workers",
];

struct Fields(BTreeMap<String, Entry>);

impl Fields {
    fn bad(key: &str, line: usize, msg: impl std::fmt::Display) -> Error {
        Error::config(key, format!("line {line}: {msg}"))
    }

    fn scalar<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.remove(key) {
            None => Ok(None),
            Some(Entry {
                line,
                value: Value::List(_),
            }) => Err(Self::bad(key, line, "expected a single value, found a list")),
            Some(Entry {
                line,
                value: Value::Scalar(s),
            }) => s.parse().map(Some).map_err(|e| Self::bad(key, line, format!("`{s}`: {e}"))),
        }
    }

    /// A list; a bare scalar counts as a one-element list.
    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<(usize, Vec<T>)>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(Entry { line, value }) = self.0.remove(key) else {
            return Ok(None);
        };
        let items = match value {
            Value::Scalar(s) => vec![s],
            Value::List(v) => v,
        };
        let parsed = items
            .iter()
            .map(|s| s.parse().map_err(|e| Self::bad(key, line, format!("`{s}`: {e}"))))
            .collect::<Result<Vec<T>>>()?;
        Ok(Some((line, parsed)))
    }

    fn nonempty<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.list(key)? {
            None => Ok(default),
            Some((line, v)) if v.is_empty() => Err(Self::bad(key, line, "list is empty")),
            Some((_, v)) => Ok(v),
        }
    }
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    match s {
        "relu" => Ok(Activation::Relu),
        "none" | "linear" => Ok(Activation::None),
        _ => Err("expected relu or none".to_string()),
    }
}

fn parse_loss(s: &str) -> std::result::Result<Loss, String> {
    match s {
        "mse" => Ok(Loss::Mse),
        "ce" | "softmax_ce" => Ok(Loss::SoftmaxCrossEntropy),
        _ => Err("expected mse or ce".to_string()),
    }
}

struct Parsed<T>(T);

impl FromStr for Parsed<Activation> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_activation(s).map(Parsed)
    }
}

impl FromStr for Parsed<Loss> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_loss(s).map(Parsed)
    }
}

/// Weight grid: `same` or a grid string.
struct WeightFormat(Option<QuantGrid>);

impl FromStr for WeightFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "same" {
            Ok(WeightFormat(None))
        } else {
            s.parse().map(|g| WeightFormat(Some(g)))
        }
    }
}

fn positive(key: &str, v: usize) -> Result<usize> {
    if v == 0 {
        Err(Error::config(key, "must be positive"))
    } else {
        Ok(v)
    }
}

/// Parse and validate spec text. Defaults fill missing keys.
pub fn parse_spec(text: &str) -> Result<ExperimentSpec> {
    let tokens = tokenize(text)?;
    if let Some((key, entry)) = tokens.iter().find(|(k, _)| !KNOWN_KEYS.contains(&k.as_str())) {
        return Err(Error::Parse {
            line: entry.line,
            msg: format!("unknown key `{key}`"),
        });
    }
    let mut f = Fields(tokens);
    let d = ExperimentSpec::default();

    let task_kind: String = f.scalar("task")?.unwrap_or_else(|| "synthetic_regression".to_string());
    let n: Option<usize> = f.scalar("n")?;
    let d_in: Option<usize> = f.scalar("d_in")?;
    let d_out: Option<usize> = f.scalar("d_out")?;
    let noise_sd: Option<f64> = f.scalar("noise_sd")?;
    let csv_path: Option<String> = f.scalar("csv_path")?;
    let targets: Option<usize> = f.scalar("targets")?;
    let reject = |key: &str, present: bool| -> Result<()> {
        if present {
            Err(Error::config(key, format!("does not apply to task {task_kind}")))
        } else {
            Ok(())
        }
    };
    let task = match task_kind.as_str() {
        "synthetic_regression" => {
            reject("csv_path", csv_path.is_some())?;
            reject("targets", targets.is_some())?;
            let noise_sd = noise_sd.unwrap_or(0.1);
            if !(noise_sd.is_finite() && noise_sd >= 0.0) {
                return Err(Error::config("noise_sd", "must be finite and non-negative"));
            }
            Task::SyntheticRegression {
                n: positive("n", n.unwrap_or(512))?,
                d_in: positive("d_in", d_in.unwrap_or(16))?,
                d_out: positive("d_out", d_out.unwrap_or(1))?,
                noise_sd,
            }
        }
        "two_blob" => {
            for (k, p) in [
                ("csv_path", csv_path.is_some()),
                ("targets", targets.is_some()),
                ("noise_sd", noise_sd.is_some()),
                ("d_out", d_out.is_some()),
            ] {
                reject(k, p)?;
            }
            Task::TwoBlob {
                n: positive("n", n.unwrap_or(512))?,
                d_in: positive("d_in", d_in.unwrap_or(16))?,
            }
        }
        "csv" => {
            for (k, p) in [
                ("n", n.is_some()),
                ("d_in", d_in.is_some()),
                ("d_out", d_out.is_some()),
                ("noise_sd", noise_sd.is_some()),
            ] {
                reject(k, p)?;
            }
            Task::Csv {
                path: PathBuf::from(csv_path.ok_or_else(|| Error::config("csv_path", "required for task csv"))?),
                targets: positive("targets", targets.unwrap_or(1))?,
            }
        }
        other => {
            return Err(Error::config(
                "task",
                format!("unknown task `{other}` (expected synthetic_regression, two_blob, csv)"),
            ))
        }
    };

    let default_loss = match task {
        Task::TwoBlob { .. } => Loss::SoftmaxCrossEntropy,
        _ => Loss::Mse,
    };
    let hidden = match f.list::<usize>("hidden")? {
        None => d.hidden.clone(),
        Some((_, v)) => v,
    };
    if hidden.contains(&0) {
        return Err(Error::config("hidden", "layer widths must be positive"));
    }

    let spec = ExperimentSpec {
        name: f.scalar("name")?.unwrap_or(d.name),
        task,
        hidden,
        activation: f.scalar::<Parsed<Activation>>("activation")?.map_or(d.activation, |p| p.0),
        loss: f.scalar::<Parsed<Loss>>("loss")?.map_or(default_loss, |p| p.0),
        modes: f.nonempty("modes", d.modes)?,
        formats: f.nonempty("formats", d.formats)?,
        weight_format: f.scalar::<WeightFormat>("weight_format")?.map_or(d.weight_format, |w| w.0),
        batch_sizes: f.nonempty("batch_sizes", d.batch_sizes)?,
        learning_rates: f.nonempty("learning_rates", d.learning_rates)?,
        seeds: f.nonempty("seeds", d.seeds)?,
        steps: f.scalar("steps")?.unwrap_or(d.steps),
        eval_every: f.scalar("eval_every")?.unwrap_or(d.eval_every),
        threshold_source: f.scalar("threshold_source")?.unwrap_or(d.threshold_source),
        share_weight_thresholds: f.scalar("share_weight_thresholds")?.unwrap_or(d.share_weight_thresholds),
        data_seed: f.scalar("data_seed")?.unwrap_or(d.data_seed),
        output: f.scalar::<String>("output")?.map_or(d.output, PathBuf::from),
        lemmas: f.scalar("lemmas")?.unwrap_or(d.lemmas),
        lemma_step: f.scalar("lemma_step")?.unwrap_or(d.lemma_step),
        lemma_trials: f.scalar("lemma_trials")?.unwrap_or(d.lemma_trials),
        workers: f.scalar("workers")?.unwrap_or(d.workers),
    };
    validate(&spec)?;
    Ok(spec)
}

fn validate(spec: &ExperimentSpec) -> Result<()> {
    if spec.name.is_empty() || spec.name.contains([',', '\n', '"']) {
        return Err(Error::config("name", "must be non-empty without commas, quotes or newlines"));
    }
    if spec.batch_sizes.contains(&0) {
        return Err(Error::config("batch_sizes", "must be positive"));
    }
    if let Some(lr) = spec.learning_rates.iter().find(|lr| !(lr.is_finite() && **lr > 0.0)) {
        return Err(Error::config("learning_rates", format!("{lr} is not a positive finite number")));
    }
    positive("eval_every", spec.eval_every)?;
    positive("lemma_trials", spec.lemma_trials)?;
    if !(spec.lemma_step.is_finite() && spec.lemma_step > 0.0) {
        return Err(Error::config("lemma_step", "must be positive"));
    }
    if let Task::TwoBlob { n, .. } = spec.task {
        if n < 2 {
            return Err(Error::config("n", "two_blob needs at least two samples"));
        }
    }
    Ok(())
}

/// Read a spec file; relative paths resolve against its directory.
pub fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut spec = parse_spec(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    spec.resolve_paths(&base);
    Ok(spec)
}

fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> Mat {
    let normal = Normal::new(0.0, sd).expect("finite sd");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Mat::from_vec(rows, cols, data).expect("finite samples")
}

/// Deterministic dataset for a task.
pub fn generate_dataset(task: &Task, data_seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(data_seed, &[0xDA7A]));
    match *task {
        Task::SyntheticRegression {
            n,
            d_in,
            d_out,
            noise_sd,
        } => {
            let teacher = normal_mat(&mut rng, d_in, d_out, 1.0 / (d_in as f64).sqrt());
            let x = normal_mat(&mut rng, n, d_in, 1.0);
            let mut y = matmul(&x, &teacher)?;
            if noise_sd > 0.0 {
                let noise = normal_mat(&mut rng, n, d_out, noise_sd);
                y = y.add(&noise)?;
            }
            Dataset::new(x, y)
        }
        Task::TwoBlob { n, d_in } => {
            let center = normal_mat(&mut rng, 1, d_in, 1.5 / (d_in as f64).sqrt());
            let mut x = normal_mat(&mut rng, n, d_in, 1.0);
            let mut y = Mat::zeros(n, 2);
            for r in 0..n {
                let class = r % 2;
                let sign = if class == 0 { 1.0 } else { -1.0 };
                for c in 0..d_in {
                    x[(r, c)] += sign * center[(0, c)];
                }
                y[(r, class)] = 1.0;
            }
            Dataset::new(x, y)
        }
        Task::Csv { ref path, targets } => read_csv_dataset(path, targets),
    }
}

/// Numeric CSV with an optional header row; the last `targets` columns are
/// targets. Errors report 1-based row and column.
pub fn read_csv_dataset(path: &Path, targets: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv_dataset(&text, targets)
}

pub fn parse_csv_dataset(text: &str, targets: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Csv {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        let parsed: Vec<std::result::Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        if r == 0 && parsed.iter().any(|p| p.is_err()) {
            width = Some(record.len());
            continue;
        }
        match width {
            Some(w) if w != record.len() => {
                return Err(Error::Csv {
                    row,
                    col: record.len().min(w) + 1,
                    msg: format!("expected {w} columns, found {}", record.len()),
                })
            }
            _ => width = Some(record.len()),
        }
        let mut values = Vec::with_capacity(record.len());
        for (c, (p, raw)) in parsed.into_iter().zip(record.iter()).enumerate() {
            match p {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(Error::Csv {
                        row,
                        col: c + 1,
                        msg: format!("`{raw}` is not a finite number"),
                    })
                }
            }
        }
        rows.push(values);
    }
    let width = width.unwrap_or(0);
    if rows.is_empty() {
        return Err(Error::Csv {
            row: 1,
            col: 0,
            msg: "no data rows".to_string(),
        });
    }
    if targets == 0 || targets >= width {
        return Err(Error::config(
            "targets",
            format!("{targets} target columns leave no inputs in {width} columns"),
        ));
    }
    let n = rows.len();
    let d_in = width - targets;
    let mut x = Vec::with_capacity(n * d_in);
    let mut y = Vec::with_capacity(n * targets);
    for row in &rows {
        x.extend_from_slice(&row[..d_in]);
        y.extend_from_slice(&row[d_in..]);
    }
    Dataset::new(Mat::from_vec(n, d_in, x)?, Mat::from_vec(n, targets, y)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    Diverged,
    Failed(String),
}

impl std::fmt::Display for CellStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellStatus::Ok => write!(f, "ok"),
            CellStatus::Diverged => write!(f, "diverged"),
            CellStatus::Failed(msg) => write!(f, "failed: {msg}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub records: Vec<RunRecord>,
    pub status: CellStatus,
}

impl CellResult {
    pub fn tail(&self) -> Option<(f64, f64, usize)> {
        tail_window(&self.records)
    }
}

/// Train one cell. Errors are captured in the status.
pub fn run_cell(spec: &ExperimentSpec, data: &Dataset, cell: &Cell) -> CellResult {
    let outcome = spec
        .initial_model(data, cell.seed)
        .and_then(|m| train(&m, data, &spec.train_config(cell)));
    match outcome {
        Ok(out) => CellResult {
            cell: cell.clone(),
            status: if out.diverged { CellStatus::Diverged } else { CellStatus::Ok },
            records: out.records,
        },
        Err(e) => CellResult {
            cell: cell.clone(),
            records: Vec::new(),
            status: CellStatus::Failed(e.to_string()),
        },
    }
}

/// One row of lemmas.csv. `pass` is `None` for informational rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaRow {
    pub probe: String,
    pub parameter: String,
    pub value: f64,
    pub stderr: f64,
    pub reference: f64,
    pub pass: Option<bool>,
}

impl LemmaRow {
    fn new(probe: &str, parameter: impl Into<String>, value: f64, stderr: f64, reference: f64, pass: Option<bool>) -> Self {
        Self {
            probe: probe.to_string(),
            parameter: parameter.into(),
            value,
            stderr,
            reference,
            pass,
        }
    }

    fn failed(probe: &str, parameter: impl Into<String>, err: &Error) -> Self {
        Self::new(probe, format!("{} ({err})", parameter.into()), f64::NAN, f64::NAN, f64::NAN, Some(false))
    }
}

fn argmax_column(m: &Mat) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..m.cols() {
        let s: f64 = (0..m.rows()).map(|r| m[(r, c)].powi(2)).sum();
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

/// Statistical probes on the task's data at the initial model of the first
/// seed. The last layer's inputs and upstream gradients feed the
/// decomposition and quantization-MSE probes.
pub fn run_lemmas(spec: &ExperimentSpec, data: &Dataset) -> Result<Vec<LemmaRow>> {
    let model = spec.initial_model(data, spec.seeds[0])?;
    let signals = layer_signals(&model, data)?;
    let (a, aout) = signals.last().expect("at least one layer");
    let (i, j) = (argmax_column(a), argmax_column(aout));
    let step = spec.lemma_step;
    let sr = |s: f64| QuantGrid::uniform(s).map(Quantizer::sr);
    let q = sr(step)?;
    let trials = spec.lemma_trials;
    let base = seed::derive(spec.seeds[0], &[0x1E44A]);
    let b0 = spec.batch_sizes[0];
    let mut rows = Vec::new();

    let probe = ProductProbe::new(a, aout, (i, j), q, q)?;
    match mse_decompose(&probe, &McConfig::new(b0, trials, base)) {
        Ok(d) => {
            let p = format!("b={b0};delta={step}");
            rows.push(LemmaRow::new("decomposition.total", p.clone(), d.total.mean, d.total.stderr, f64::NAN, None));
            rows.push(LemmaRow::new("decomposition.sampling", p.clone(), d.sampling.mean, d.sampling.stderr, f64::NAN, None));
            rows.push(LemmaRow::new("decomposition.quant", p.clone(), d.quant.mean, d.quant.stderr, f64::NAN, None));
            rows.push(LemmaRow::new("decomposition.cross", p.clone(), d.cross.mean, d.cross.stderr, 0.0, Some(d.cross.within(0.0, 4.0))));
            rows.push(LemmaRow::new("decomposition.residual", p, d.residual.mean, d.residual.stderr, 0.0, Some(d.residual.within(0.0, 4.0))));
        }
        Err(e) => rows.push(LemmaRow::failed("decomposition", format!("b={b0}"), &e)),
    }

    let mut by_b = Vec::new();
    for (k, &b) in spec.batch_sizes.iter().enumerate() {
        match tq_bound_check(&probe, &McConfig::new(b, trials, seed::derive(base, &[1, k as u64]))) {
            Ok(t) => {
                rows.push(LemmaRow::new("tq_bound", format!("b={b};delta={step}"), t.measured.mean, t.measured.stderr, t.bound, Some(t.holds(4.0))));
                by_b.push((b as f64, t.measured.mean));
            }
            Err(e) => rows.push(LemmaRow::failed("tq_bound", format!("b={b}"), &e)),
        }
    }
    by_b.sort_by(|x, y| x.0.total_cmp(&y.0));
    by_b.dedup_by(|x, y| x.0 == y.0);
    if by_b.len() >= 4 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = by_b.into_iter().unzip();
        match fit_scaling(&xs, &ys, ScalingLaw::InverseB) {
            Ok(fit) => rows.push(LemmaRow::new("tq_scaling_b", "slope", fit.slope, fit.residual, -1.0, Some(fit.slope_within(0.15)))),
            Err(e) => rows.push(LemmaRow::failed("tq_scaling_b", "slope", &e)),
        }
    }

    let bits = [0.0, 1.0, 2.0, 3.0];
    let mut ys = Vec::new();
    let mut precision_err = None;
    for &bit in &bits {
        let s = step * (-bit as f64).exp2();
        let res = sr(s)
            .and_then(|qb| ProductProbe::new(a, aout, (i, j), qb, qb))
            .and_then(|p| tq_bound_check(&p, &McConfig::new(b0, trials, seed::derive(base, &[2, bit as u64]))));
        match res {
            Ok(t) => {
                rows.push(LemmaRow::new("tq_bound", format!("b={b0};delta={s}"), t.measured.mean, t.measured.stderr, t.bound, Some(t.holds(4.0))));
                ys.push(t.measured.mean);
            }
            Err(e) => precision_err = Some(e),
        }
    }
    let fit = match precision_err {
        Some(e) => Err(e),
        None => fit_scaling(&bits, &ys, ScalingLaw::TwoPowMinus2B),
    };
    match fit {
        Ok(fit) => rows.push(LemmaRow::new("tq_scaling_bits", "slope", fit.slope, fit.residual, -2.0, Some(fit.slope_within(0.3)))),
        Err(e) => rows.push(LemmaRow::failed("tq_scaling_bits", "slope", &e)),
    }

    let bias_trials = trials.min(1000);
    let certified = model.num_layers() == 1 && model.loss == Loss::Mse;
    for policy in [RoundingPolicy::Rtn, RoundingPolicy::Sr] {
        let name = format!("bias_{policy}");
        let param = format!("delta_w={step}");
        if certified {
            match bias_check(&model, data, step, policy, bias_trials, seed::derive(base, &[3])) {
                Ok(r) => rows.push(LemmaRow::new(&name, param, r.measured_bias, 0.0, r.bound, Some(r.within_bound()))),
                Err(e) => rows.push(LemmaRow::failed(&name, param, &e)),
            }
        } else {
            let wq = Quantizer::new(QuantGrid::uniform(step)?, policy);
            match measure_weight_bias(&model, data, &wq, bias_trials, seed::derive(base, &[3])) {
                Ok(v) => rows.push(LemmaRow::new(&name, param, v, 0.0, f64::NAN, None)),
                Err(e) => rows.push(LemmaRow::failed(&name, param, &e)),
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub cells: Vec<CellResult>,
    pub lemmas: Vec<LemmaRow>,
    pub output: PathBuf,
}

impl RunReport {
    pub fn all_passed(&self) -> bool {
        self.cells.iter().all(|c| c.status == CellStatus::Ok) && self.lemmas.iter().all(|r| r.pass != Some(false))
    }

    /// 0 when every cell and gate passed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_passed() {
            0
        } else {
            1
        }
    }
}

fn worker_count(spec: &ExperimentSpec) -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(WORKERS_ENV, format!("`{v}` is not a worker count"))),
        Err(_) => Ok(spec.workers),
    }
}

fn with_pool<T: Send>(spec: &ExperimentSpec, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(spec)?)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    Ok(pool.install(f))
}

/// Train every cell, run the probes when enabled, and write the CSVs into
/// `spec.output`. Cells run in parallel and are merged in coordinate order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunReport> {
    let data = generate_dataset(&spec.task, spec.data_seed)?;
    let cells = spec.cells();
    let results: Vec<CellResult> = with_pool(spec, || cells.par_iter().map(|c| run_cell(spec, &data, c)).collect())?;
    let lemmas = if spec.lemmas {
        with_pool(spec, || run_lemmas(spec, &data))??
    } else {
        Vec::new()
    };
    fs::create_dir_all(&spec.output).map_err(|e| Error::io(&spec.output, e))?;
    write_csv(&spec.output.join("runs.csv"), &RUNS_HEADER, runs_rows(&results))?;
    write_csv(&spec.output.join("summary.csv"), &SUMMARY_HEADER, summary_rows(&results))?;
    let lemma_path = spec.output.join("lemmas.csv");
    if spec.lemmas {
        write_csv(&lemma_path, &LEMMAS_HEADER, lemma_rows(&lemmas))?;
    } else if lemma_path.exists() {
        fs::remove_file(&lemma_path).map_err(|e| Error::io(&lemma_path, e))?;
    }
    Ok(RunReport {
        cells: results,
        lemmas,
        output: spec.output.clone(),
    })
}

/// Probes only; writes lemmas.csv.
pub fn verify_lemmas(spec: &ExperimentSpec) -> Result<RunReport> {
    let data = generate_dataset(&spec.task, spec.data_seed)?;
    let lemmas = with_pool(spec, || run_lemmas(spec, &data))??;
    fs::create_dir_all(&spec.output).map_err(|e| Error::io(&spec.output, e))?;
    write_csv(&spec.output.join("lemmas.csv"), &LEMMAS_HEADER, lemma_rows(&lemmas))?;
    Ok(RunReport {
        cells: Vec::new(),
        lemmas,
        output: spec.output.clone(),
    })
}

/// Shortest round-trip representation in scientific notation.
fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:e}")
    }
}

fn runs_rows(results: &[CellResult]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in results {
        for rec in &r.records {
            rows.push(vec![
                r.cell.index.to_string(),
                rec.step.to_string(),
                num(rec.train_loss),
                num(rec.grad_norm_sq),
                r.cell.mode.to_string(),
                r.cell.format.to_string(),
                r.cell.batch_size.to_string(),
                r.cell.learning_rate.to_string(),
                r.cell.seed.to_string(),
            ]);
        }
    }
    rows
}

fn summary_rows(results: &[CellResult]) -> Vec<Vec<String>> {
    results
        .iter()
        .map(|r| {
            let tail = r.tail();
            let c = &r.cell;
            vec![
                c.index.to_string(),
                c.mode.to_string(),
                c.format.to_string(),
                c.weight_format.to_string(),
                c.batch_size.to_string(),
                c.learning_rate.to_string(),
                c.seed.to_string(),
                c.cell_seed.to_string(),
                r.records.len().to_string(),
                tail.map_or(0, |t| t.2).to_string(),
                tail.map_or(String::new(), |t| num(t.0)),
                tail.map_or(String::new(), |t| num(t.1)),
                r.records.last().map_or(String::new(), |rec| num(rec.train_loss)),
                r.status.to_string(),
            ]
        })
        .collect()
}

fn lemma_rows(rows: &[LemmaRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.probe.clone(),
                r.parameter.clone(),
                num(r.value),
                num(r.stderr),
                num(r.reference),
                r.pass.map_or(String::new(), |p| p.to_string()),
            ]
        })
        .collect()
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    w.write_record(header).map_err(|e| io(e.into()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}
