//! Mini-batch mixed-precision SGD.
//!
//! One step draws `b` samples with replacement, quantizes the weights once
//! (shared by every sample in the batch), computes each sample's gradient
//! with its own activation/gradient thresholds, and averages. Weights stay
//! in f64 between steps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::net::{
    grad_norm_sq, grad_with_weights, loss_and_true_grad, prepare_weights, Dataset,
    LayerQuantConfig, MlpModel, ThresholdPlan,
};
use crate::quant::{QuantGrid, Quantizer, RoundingPolicy, SourceKind};
use crate::seed;

/// How weight thresholds are chosen in the quantized-weight modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum WeightRounding {
    /// Fresh SR thresholds each step, shared by the whole batch.
    #[default]
    Stochastic,
    /// Round to nearest.
    Nearest,
}

impl WeightRounding {
    fn policy(self) -> RoundingPolicy {
        match self {
            WeightRounding::Stochastic => RoundingPolicy::Sr,
            WeightRounding::Nearest => RoundingPolicy::Rtn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// No quantization anywhere.
    FullPrecision,
    /// Weights and backward activations/gradients rounded to nearest.
    RtnAll,
    /// Only the weights are quantized, identically in both passes.
    WeightOnlyQat(WeightRounding),
    /// Weights quantized and shared across the batch; backward activations
    /// and gradients stochastically rounded per sample; forward activations exact.
    SrMixedQat(WeightRounding),
}

impl TrainMode {
    /// Knobs for one layer. `act_grid` applies to backward activations and
    /// gradients, `weight_grid` to the weights in both passes.
    pub fn layer_config(&self, act_grid: QuantGrid, weight_grid: QuantGrid) -> LayerQuantConfig {
        match *self {
            TrainMode::FullPrecision => LayerQuantConfig::IDENTITY,
            TrainMode::RtnAll => {
                let w = Quantizer::rtn(weight_grid);
                let a = Quantizer::rtn(act_grid);
                LayerQuantConfig {
                    fwd_act: Quantizer::IDENTITY,
                    fwd_w: w,
                    bwd_act: a,
                    bwd_w: w,
                    bwd_grad: a,
                }
            }
            TrainMode::WeightOnlyQat(wr) => {
                LayerQuantConfig::weight_only(Quantizer::new(weight_grid, wr.policy()))
            }
            TrainMode::SrMixedQat(wr) => {
                let w = Quantizer::new(weight_grid, wr.policy());
                let a = Quantizer::sr(act_grid);
                LayerQuantConfig {
                    fwd_act: Quantizer::IDENTITY,
                    fwd_w: w,
                    bwd_act: a,
                    bwd_w: w,
                    bwd_grad: a,
                }
            }
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::FullPrecision => write!(f, "fp"),
            TrainMode::RtnAll => write!(f, "rtn"),
            TrainMode::WeightOnlyQat(WeightRounding::Stochastic) => write!(f, "wqat"),
            TrainMode::WeightOnlyQat(WeightRounding::Nearest) => write!(f, "wqat-rtn"),
            TrainMode::SrMixedQat(WeightRounding::Stochastic) => write!(f, "sr"),
            TrainMode::SrMixedQat(WeightRounding::Nearest) => write!(f, "sr-wrtn"),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "fp" | "full" => TrainMode::FullPrecision,
            "rtn" => TrainMode::RtnAll,
            "wqat" => TrainMode::WeightOnlyQat(WeightRounding::Stochastic),
            "wqat-rtn" => TrainMode::WeightOnlyQat(WeightRounding::Nearest),
            "sr" => TrainMode::SrMixedQat(WeightRounding::Stochastic),
            "sr-wrtn" => TrainMode::SrMixedQat(WeightRounding::Nearest),
            other => {
                return Err(Error::domain(format!(
                    "unknown mode `{other}` (expected fp, rtn, wqat, wqat-rtn, sr, sr-wrtn)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub act_grid: QuantGrid,
    pub weight_grid: QuantGrid,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub threshold_source: SourceKind,
    pub share_weight_thresholds: bool,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, grid: QuantGrid, batch_size: usize, learning_rate: f64, steps: usize) -> Self {
        Self {
            mode,
            act_grid: grid,
            weight_grid: grid,
            batch_size,
            learning_rate,
            steps,
            seed: 0,
            eval_every: (steps / 20).max(1),
            threshold_source: SourceKind::Prng,
            share_weight_thresholds: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be finite and > 0"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        Ok(())
    }

    pub fn layer_configs(&self, layers: usize) -> Vec<LayerQuantConfig> {
        vec![self.mode.layer_config(self.act_grid, self.weight_grid); layers]
    }

    /// `None` when `learning_rate <= 1/(4 L)`, otherwise a warning. Not enforced.
    pub fn learning_rate_warning(&self, smoothness: f64) -> Option<String> {
        let limit = 1.0 / (4.0 * smoothness);
        (self.learning_rate > limit).then(|| {
            format!(
                "learning rate {} exceeds 1/(4L) = {limit:.4e} for L = {smoothness:.4e}",
                self.learning_rate
            )
        })
    }

    /// Stable 64-bit digest of every field.
    pub fn fingerprint(&self) -> u64 {
        let text = format!("{self:?}");
        text.bytes().fold(seed::mix64(0x5151), |h, b| seed::mix64(h ^ u64::from(b)))
    }

    fn threshold_plan(&self, step: u64) -> ThresholdPlan {
        ThresholdPlan {
            kind: self.threshold_source,
            seed: seed::derive(self.seed, &[KEY_THRESHOLDS]),
            step,
            share_weight_thresholds: self.share_weight_thresholds,
        }
    }
}

const KEY_BATCH: u64 = 0xBA7C;
const KEY_THRESHOLDS: u64 = 0x7E5;

/// The mini-batch gradient estimate for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grads: Vec<Mat>,
    pub mode: TrainMode,
    pub batch_size: usize,
    pub seed: u64,
    pub step: u64,
    /// Mean per-sample loss seen during the quantized forward passes.
    pub batch_loss: f64,
    /// Fingerprint of the quantized weights seen by each sample.
    pub weight_fingerprints: Vec<u64>,
}

impl GradientEstimate {
    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }
}

/// Indices of the step-`step` mini-batch, drawn uniformly with replacement.
pub fn batch_indices(cfg: &TrainConfig, n: usize, step: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[KEY_BATCH, step]));
    (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect()
}

/// `G = (1/b) sum_j g(w, x_j, y_j)` over a freshly drawn batch.
pub fn minibatch_gradient(
    model: &MlpModel,
    data: &Dataset,
    cfg: &TrainConfig,
    step: u64,
) -> Result<GradientEstimate> {
    if data.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let idx = batch_indices(cfg, data.len(), step);
    minibatch_gradient_on(model, data, &idx, cfg, step)
}

/// As [`minibatch_gradient`] on explicit sample indices.
pub fn minibatch_gradient_on(
    model: &MlpModel,
    data: &Dataset,
    idx: &[usize],
    cfg: &TrainConfig,
    step: u64,
) -> Result<GradientEstimate> {
    if idx.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let cfgs = cfg.layer_configs(model.num_layers());
    let plan = cfg.threshold_plan(step);
    let prepared = prepare_weights(model, &cfgs, &plan)?;

    let mut sum: Vec<Mat> = model
        .layers()
        .iter()
        .map(|w| Mat::zeros(w.rows(), w.cols()))
        .collect();
    let mut loss = 0.0;
    let mut fingerprints = Vec::with_capacity(idx.len());
    for (j, &i) in idx.iter().enumerate() {
        let (x, y) = data.sample(i);
        let g = grad_with_weights(model, &prepared, x, y, &cfgs, &plan, j as u64)?;
        for (acc, gi) in sum.iter_mut().zip(&g.grads) {
            acc.axpy(1.0, gi)?;
        }
        loss += g.loss;
        fingerprints.push(g.weight_fingerprint);
    }
    let b = idx.len() as f64;
    Ok(GradientEstimate {
        grads: sum.iter().map(|m| m.scale(1.0 / b)).collect(),
        mode: cfg.mode,
        batch_size: idx.len(),
        seed: cfg.seed,
        step,
        batch_loss: loss / b,
        weight_fingerprints: fingerprints,
    })
}

/// `w - lr * g`, refusing non-finite gradients.
pub fn sgd_step(model: &MlpModel, grads: &[Mat], learning_rate: f64) -> Result<MlpModel> {
    if grads.len() != model.num_layers() {
        return Err(Error::dim(format!(
            "{} gradients for {} layers",
            grads.len(),
            model.num_layers()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of layer {i}")));
    }
    let mut layers = model.layers().to_vec();
    for (w, g) in layers.iter_mut().zip(grads) {
        w.axpy(-learning_rate, g)?;
    }
    if let Some(i) = layers.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("weights of layer {i} after update")));
    }
    model.with_layers(layers)
}

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub step: usize,
    pub train_loss: f64,
    /// `||∇L(w_t)||^2` over the full dataset in f64.
    pub grad_norm_sq: f64,
    pub wallclock_secs: f64,
    pub config_fingerprint: u64,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<RunRecord>,
    pub model: MlpModel,
    pub diverged: bool,
}

/// Run `cfg.steps` SGD steps from `model`, evaluating at step 0, every
/// `eval_every` steps, and at the final step.
///
/// A non-finite loss, gradient or weight ends the run early; the last record
/// then has `diverged = true`.
pub fn train(model: &MlpModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let start = Instant::now();
    let fingerprint = cfg.fingerprint();
    let mut records = Vec::new();
    let mut model = model.clone();

    let eval = |m: &MlpModel, step: usize| -> RunRecord {
        let (loss, g) = loss_and_true_grad(m, data).unwrap_or((f64::NAN, Vec::new()));
        let norm = if g.is_empty() { f64::NAN } else { grad_norm_sq(&g) };
        RunRecord {
            step,
            train_loss: loss,
            grad_norm_sq: norm,
            wallclock_secs: start.elapsed().as_secs_f64(),
            config_fingerprint: fingerprint,
            diverged: !(loss.is_finite() && norm.is_finite()),
        }
    };

    let first = eval(&model, 0);
    let mut diverged = first.diverged;
    records.push(first);
    if diverged {
        return Ok(TrainOutcome {
            records,
            model,
            diverged,
        });
    }

    for step in 0..cfg.steps {
        let update = minibatch_gradient(&model, data, cfg, step as u64)
            .and_then(|g| sgd_step(&model, &g.grads, cfg.learning_rate));
        match update {
            Ok(next) => model = next,
            Err(Error::NonFinite(_)) => {
                diverged = true;
                let mut rec = eval(&model, step + 1);
                rec.diverged = true;
                records.push(rec);
                break;
            }
            Err(e) => return Err(e),
        }
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let rec = eval(&model, done);
            let bad = rec.diverged;
            records.push(rec);
            if bad {
                diverged = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        records,
        model,
        diverged,
    })
}

/// Mean and standard error of `grad_norm_sq` over the last quarter of the
/// evaluation points (at least one point).
pub fn tail_window(records: &[RunRecord]) -> Option<(f64, f64, usize)> {
    if records.is_empty() || records.iter().any(|r| r.diverged) {
        return None;
    }
    let k = records.len().div_ceil(4).max(1);
    let tail: Vec<f64> = records[records.len() - k..].iter().map(|r| r.grad_norm_sq).collect();
    let mean = tail.iter().sum::<f64>() / k as f64;
    let stderr = if k > 1 {
        let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        (var / k as f64).sqrt()
    } else {
        0.0
    };
    Some((mean, stderr, k))
}
