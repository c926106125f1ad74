//! Quantized linear layers composed into a small bias-free MLP.
//!
//! Each linear layer has five quantization knobs: the forward input
//! activation and weight, and the backward input activation, weight and
//! upstream gradient. The forward pass computes `Q(A_in) Q(W)`; the backward
//! pass re-quantizes `A_in` and `W` with their own knobs and returns
//! `∇A_in = Q(∇A_out) Q(W)^T` and `∇W = Q(A_in)^T Q(∇A_out)`. The
//! nonlinearity and the loss run in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{matmul, quantize_mat, Mat};
use crate::quant::{Quantizer, SourceKind, ThresholdStream};
use crate::seed;

/// The five quantization knobs of one linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerQuantConfig {
    pub fwd_act: Quantizer,
    pub fwd_w: Quantizer,
    pub bwd_act: Quantizer,
    pub bwd_w: Quantizer,
    pub bwd_grad: Quantizer,
}

impl LayerQuantConfig {
    pub const IDENTITY: LayerQuantConfig = LayerQuantConfig {
        fwd_act: Quantizer::IDENTITY,
        fwd_w: Quantizer::IDENTITY,
        bwd_act: Quantizer::IDENTITY,
        bwd_w: Quantizer::IDENTITY,
        bwd_grad: Quantizer::IDENTITY,
    };

    /// Every knob set to `q`.
    pub fn uniform(q: Quantizer) -> Self {
        Self {
            fwd_act: q,
            fwd_w: q,
            bwd_act: q,
            bwd_w: q,
            bwd_grad: q,
        }
    }

    /// Weights quantized with `w` in both passes; activations and gradients exact.
    pub fn weight_only(w: Quantizer) -> Self {
        Self {
            fwd_w: w,
            bwd_w: w,
            ..Self::IDENTITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Loss {
    /// Per-sample `sum_k (z_k - y_k)^2`, averaged over samples.
    #[default]
    Mse,
    /// Per-sample `-sum_k y_k log softmax(z)_k`, averaged over samples.
    SoftmaxCrossEntropy,
}

impl Loss {
    /// Loss of each row and `dL/dz` for a batch of outputs, where the total
    /// loss is the mean over rows.
    fn eval(&self, z: &Mat, y: &Mat) -> Result<(f64, Mat)> {
        if z.shape() != y.shape() {
            return Err(Error::dim(format!(
                "output {:?} vs target {:?}",
                z.shape(),
                y.shape()
            )));
        }
        let n = z.rows() as f64;
        let mut grad = Mat::zeros(z.rows(), z.cols());
        let mut total = 0.0;
        for r in 0..z.rows() {
            let (zr, yr) = (z.row(r), y.row(r));
            match self {
                Loss::Mse => {
                    for c in 0..z.cols() {
                        let d = zr[c] - yr[c];
                        total += d * d;
                        grad[(r, c)] = 2.0 * d / n;
                    }
                }
                Loss::SoftmaxCrossEntropy => {
                    let max = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum_exp: f64 = zr.iter().map(|v| (v - max).exp()).sum();
                    let log_norm = max + sum_exp.ln();
                    let mass: f64 = yr.iter().sum();
                    for c in 0..z.cols() {
                        let logp = zr[c] - log_norm;
                        total -= yr[c] * logp;
                        grad[(r, c)] = (logp.exp() * mass - yr[c]) / n;
                    }
                }
            }
        }
        Ok((total / n, grad))
    }
}

/// Inputs and targets, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Mat,
    pub targets: Mat,
}

impl Dataset {
    pub fn new(inputs: Mat, targets: Mat) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::dim(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.rows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.cols()
    }

    pub fn sample(&self, i: usize) -> (&[f64], &[f64]) {
        (self.inputs.row(i), self.targets.row(i))
    }

    /// Rows `idx` (repeats allowed) as a new dataset.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let pick = |m: &Mat| {
            let mut data = Vec::with_capacity(idx.len() * m.cols());
            for &i in idx {
                data.extend_from_slice(m.row(i));
            }
            Mat::from_vec(idx.len(), m.cols(), data)
        };
        Dataset::new(pick(&self.inputs)?, pick(&self.targets)?)
    }
}

/// A stack of bias-free linear layers, `A_i = act(A_{i-1}) W_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Mat>,
    pub activation: Activation,
    pub loss: Loss,
}

impl MlpModel {
    pub fn new(layers: Vec<Mat>, activation: Activation, loss: Loss) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("model needs at least one layer".to_string()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].cols() != pair[1].rows() {
                return Err(Error::Layer {
                    layer: i + 1,
                    source: Box::new(Error::dim(format!(
                        "layer {} outputs {} features, layer {} expects {}",
                        i,
                        pair[0].cols(),
                        i + 1,
                        pair[1].rows()
                    ))),
                });
            }
        }
        if let Some(i) = layers.iter().position(|w| !w.is_finite()) {
            return Err(Error::Layer {
                layer: i,
                source: Box::new(Error::NonFinite("weights".to_string())),
            });
        }
        Ok(Self {
            layers,
            activation,
            loss,
        })
    }

    /// He-normal initialisation for layer widths `[d_in, h_1, ..., d_out]`.
    pub fn init(widths: &[usize], activation: Activation, loss: Loss, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::dim(format!("bad layer widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                let data = (0..w[0] * w[1]).map(|_| normal.sample(&mut rng)).collect();
                Mat::from_vec(w[0], w[1], data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, activation, loss)
    }

    pub fn layers(&self) -> &[Mat] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].cols()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Mat::len).sum()
    }

    /// Same architecture with replaced weights.
    pub fn with_layers(&self, layers: Vec<Mat>) -> Result<Self> {
        if layers.len() != self.layers.len()
            || layers.iter().zip(&self.layers).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::dim("replacement weights change the architecture".to_string()));
        }
        Self::new(layers, self.activation, self.loss)
    }

    /// Full-precision mean loss over `data`.
    pub fn loss_on(&self, data: &Dataset) -> Result<f64> {
        let mut a = data.inputs.clone();
        for (i, w) in self.layers.iter().enumerate() {
            let z = matmul(&a, w).map_err(|e| Error::Layer {
                layer: i,
                source: Box::new(e),
            })?;
            a = if i + 1 < self.layers.len() {
                self.activate(&z)
            } else {
                z
            };
        }
        Ok(self.loss.eval(&a, &data.targets)?.0)
    }

    fn activate(&self, z: &Mat) -> Mat {
        match self.activation {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::None => z.clone(),
        }
    }

    fn check_input(&self, x: &Mat, y: &Mat) -> Result<()> {
        if x.cols() != self.input_dim() || y.cols() != self.output_dim() || x.rows() != y.rows() {
            return Err(Error::dim(format!(
                "model maps {} -> {} features, got inputs {:?} and targets {:?}",
                self.input_dim(),
                self.output_dim(),
                x.shape(),
                y.shape()
            )));
        }
        Ok(())
    }
}

/// Values saved by the forward pass of one layer. Quantization is re-applied
/// from these in the backward pass.
#[derive(Debug, Clone)]
pub struct LinearCache {
    pub a_in: Mat,
    pub w: Mat,
}

/// Mixed-precision forward pass: `Q(A_in) Q(W)` with the forward knobs.
/// `A_in` is quantized before `W`, both from `stream`.
pub fn forward_linear(
    a_in: &Mat,
    w: &Mat,
    cfg: &LayerQuantConfig,
    stream: &mut ThresholdStream,
) -> Result<(Mat, LinearCache)> {
    if a_in.cols() != w.rows() {
        return Err(Error::dim(format!(
            "activation {:?} does not feed weight {:?}",
            a_in.shape(),
            w.shape()
        )));
    }
    let a_hat = quantize_mat(a_in, &cfg.fwd_act, stream)?;
    let w_hat = quantize_mat(w, &cfg.fwd_w, stream)?;
    let out = matmul(&a_hat, &w_hat)?;
    Ok((
        out,
        LinearCache {
            a_in: a_in.clone(),
            w: w.clone(),
        },
    ))
}

/// Mixed-precision backward pass. Quantizes `A_in`, `W` and `∇A_out` in
/// that order and returns `(∇A_in, ∇W)`.
pub fn backward_linear(
    cache: &LinearCache,
    grad_out: &Mat,
    cfg: &LayerQuantConfig,
    stream: &mut ThresholdStream,
) -> Result<(Mat, Mat)> {
    let expected = (cache.a_in.rows(), cache.w.cols());
    if grad_out.shape() != expected {
        return Err(Error::dim(format!(
            "upstream gradient {:?}, layer output is {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let a_hat = quantize_mat(&cache.a_in, &cfg.bwd_act, stream)?;
    let w_hat = quantize_mat(&cache.w, &cfg.bwd_w, stream)?;
    let g_hat = quantize_mat(grad_out, &cfg.bwd_grad, stream)?;
    Ok((
        matmul(&g_hat, &w_hat.transpose())?,
        matmul(&a_hat.transpose(), &g_hat)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Forward,
    Backward,
}

const ROLE_WEIGHT_FWD: u64 = 0;
const ROLE_WEIGHT_BWD: u64 = 1;
const ROLE_SAMPLE_FWD: u64 = 2;
const ROLE_SAMPLE_BWD: u64 = 3;

/// Derives every threshold stream of one optimisation step.
///
/// Weight streams are keyed by `(step, layer, pass)` and are therefore the
/// same for every sample of the step. Activation/gradient streams are keyed
/// by `(step, layer, pass, sample)`. With `share_weight_thresholds` both
/// passes use the forward weight stream, so identically configured forward
/// and backward weight knobs produce the same quantized weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThresholdPlan {
    pub kind: SourceKind,
    pub seed: u64,
    pub step: u64,
    pub share_weight_thresholds: bool,
}

impl ThresholdPlan {
    pub fn new(seed: u64, step: u64) -> Self {
        Self {
            kind: SourceKind::Prng,
            seed,
            step,
            share_weight_thresholds: true,
        }
    }

    pub fn weight_key(&self, layer: usize, pass: Pass) -> u64 {
        let role = match (pass, self.share_weight_thresholds) {
            (Pass::Forward, _) | (Pass::Backward, true) => ROLE_WEIGHT_FWD,
            (Pass::Backward, false) => ROLE_WEIGHT_BWD,
        };
        seed::derive(self.seed, &[self.step, layer as u64, role])
    }

    pub fn sample_key(&self, sample: u64, layer: usize, pass: Pass) -> u64 {
        let role = match pass {
            Pass::Forward => ROLE_SAMPLE_FWD,
            Pass::Backward => ROLE_SAMPLE_BWD,
        };
        seed::derive(self.seed, &[self.step, layer as u64, role, sample])
    }

    pub fn weight_stream(&self, layer: usize, pass: Pass) -> ThresholdStream {
        stream_for(self.kind, self.weight_key(layer, pass))
    }

    pub fn sample_stream(&self, sample: u64, layer: usize, pass: Pass) -> ThresholdStream {
        stream_for(self.kind, self.sample_key(sample, layer, pass))
    }
}

fn stream_for(kind: SourceKind, key: u64) -> ThresholdStream {
    ThresholdStream::new(kind.from_key(key)).expect("derived sources are always valid")
}

/// Quantized copies of every weight matrix for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedWeights {
    pub fwd: Vec<Mat>,
    pub bwd: Vec<Mat>,
}

impl PreparedWeights {
    /// Hash of the exact bit patterns of all quantized weights.
    pub fn fingerprint(&self) -> u64 {
        self.fwd
            .iter()
            .chain(&self.bwd)
            .flat_map(|m| m.as_slice())
            .fold(seed::mix64(0), |h, v| seed::mix64(h ^ v.to_bits()))
    }
}

pub fn prepare_weights(
    model: &MlpModel,
    cfgs: &[LayerQuantConfig],
    plan: &ThresholdPlan,
) -> Result<PreparedWeights> {
    check_cfgs(model, cfgs)?;
    let mut fwd = Vec::with_capacity(model.num_layers());
    let mut bwd = Vec::with_capacity(model.num_layers());
    for (i, (w, cfg)) in model.layers.iter().zip(cfgs).enumerate() {
        let layer_err = |e| Error::Layer {
            layer: i,
            source: Box::new(e),
        };
        let wf = quantize_mat(w, &cfg.fwd_w, &mut plan.weight_stream(i, Pass::Forward))
            .map_err(layer_err)?;
        let wb = if plan.share_weight_thresholds && cfg.bwd_w == cfg.fwd_w {
            wf.clone()
        } else {
            quantize_mat(w, &cfg.bwd_w, &mut plan.weight_stream(i, Pass::Backward))
                .map_err(layer_err)?
        };
        fwd.push(wf);
        bwd.push(wb);
    }
    Ok(PreparedWeights { fwd, bwd })
}

fn check_cfgs(model: &MlpModel, cfgs: &[LayerQuantConfig]) -> Result<()> {
    if cfgs.len() != model.num_layers() {
        return Err(Error::dim(format!(
            "{} layer configs for a {}-layer model",
            cfgs.len(),
            model.num_layers()
        )));
    }
    Ok(())
}

/// Gradient approximation for one sample, with per-layer weight gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGradient {
    pub grads: Vec<Mat>,
    pub loss: f64,
    pub sample: u64,
    pub step: u64,
    pub weight_fingerprint: u64,
}

/// Forward then backward through every layer for a single sample `(x, y)`.
pub fn grad_approx(
    model: &MlpModel,
    x: &[f64],
    y: &[f64],
    cfgs: &[LayerQuantConfig],
    plan: &ThresholdPlan,
    sample: u64,
) -> Result<PerSampleGradient> {
    let prepared = prepare_weights(model, cfgs, plan)?;
    grad_with_weights(model, &prepared, x, y, cfgs, plan, sample)
}

/// As [`grad_approx`], reusing weights quantized once for the whole step.
pub fn grad_with_weights(
    model: &MlpModel,
    prepared: &PreparedWeights,
    x: &[f64],
    y: &[f64],
    cfgs: &[LayerQuantConfig],
    plan: &ThresholdPlan,
    sample: u64,
) -> Result<PerSampleGradient> {
    check_cfgs(model, cfgs)?;
    let x = Mat::row_vector(x)?;
    let y = Mat::row_vector(y)?;
    let (loss, grads) = backprop(model, prepared, &x, &y, cfgs, |layer, pass| {
        plan.sample_stream(sample, layer, pass)
    })?;
    Ok(PerSampleGradient {
        grads,
        loss,
        sample,
        step: plan.step,
        weight_fingerprint: prepared.fingerprint(),
    })
}

/// Shared forward/backward over a block of rows. The loss gradient is the
/// gradient of the mean loss over the rows.
fn backprop(
    model: &MlpModel,
    prepared: &PreparedWeights,
    x: &Mat,
    y: &Mat,
    cfgs: &[LayerQuantConfig],
    mut stream: impl FnMut(usize, Pass) -> ThresholdStream,
) -> Result<(f64, Vec<Mat>)> {
    model.check_input(x, y)?;
    let n = model.num_layers();
    let layer_err = |i: usize| {
        move |e| Error::Layer {
            layer: i,
            source: Box::new(e),
        }
    };

    // Forward: keep each layer's high-precision input and pre-activation.
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut a = x.clone();
    for i in 0..n {
        let mut s = stream(i, Pass::Forward);
        let a_hat = quantize_mat(&a, &cfgs[i].fwd_act, &mut s).map_err(layer_err(i))?;
        let z = matmul(&a_hat, &prepared.fwd[i]).map_err(layer_err(i))?;
        let next = if i + 1 < n { model.activate(&z) } else { z.clone() };
        inputs.push(a);
        pre.push(z);
        a = next;
    }
    let (loss, mut grad) = model.loss.eval(&a, y)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }

    let mut grads = vec![Mat::zeros(0, 0); n];
    for i in (0..n).rev() {
        let mut s = stream(i, Pass::Backward);
        let a_hat = quantize_mat(&inputs[i], &cfgs[i].bwd_act, &mut s).map_err(layer_err(i))?;
        let g_hat = quantize_mat(&grad, &cfgs[i].bwd_grad, &mut s).map_err(layer_err(i))?;
        grads[i] = matmul(&a_hat.transpose(), &g_hat).map_err(layer_err(i))?;
        if i > 0 {
            let mut g_in = matmul(&g_hat, &prepared.bwd[i].transpose()).map_err(layer_err(i))?;
            if model.activation == Activation::Relu {
                let mask = &pre[i - 1];
                for (g, &z) in g_in.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            grad = g_in;
        }
    }
    Ok((loss, grads))
}

/// Exact full-batch loss and gradient over `data`.
pub fn loss_and_true_grad(model: &MlpModel, data: &Dataset) -> Result<(f64, Vec<Mat>)> {
    if data.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let cfgs = vec![LayerQuantConfig::IDENTITY; model.num_layers()];
    let prepared = PreparedWeights {
        fwd: model.layers.clone(),
        bwd: model.layers.clone(),
    };
    let unused = ThresholdStream::seeded(0);
    backprop(model, &prepared, &data.inputs, &data.targets, &cfgs, |_, _| {
        unused.clone()
    })
}

/// Per-layer full-precision inputs `A` (`n x h_in`) and per-sample upstream
/// gradients `Aout` (`n x h_out`) over `data`, scaled so that the exact
/// gradient of layer `i` is `A^T Aout / n`.
pub fn layer_signals(model: &MlpModel, data: &Dataset) -> Result<Vec<(Mat, Mat)>> {
    if data.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    model.check_input(&data.inputs, &data.targets)?;
    let n = model.num_layers();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut a = data.inputs.clone();
    for (i, w) in model.layers.iter().enumerate() {
        let z = matmul(&a, w)?;
        let next = if i + 1 < n { model.activate(&z) } else { z.clone() };
        inputs.push(a);
        pre.push(z);
        a = next;
    }
    let (_, grad) = model.loss.eval(&a, &data.targets)?;
    let mut grad = grad.scale(data.len() as f64);
    let mut out = vec![(Mat::zeros(0, 0), Mat::zeros(0, 0)); n];
    for i in (0..n).rev() {
        let g_in = if i > 0 {
            let mut g = matmul(&grad, &model.layers[i].transpose())?;
            if model.activation == Activation::Relu {
                for (v, &z) in g.as_mut_slice().iter_mut().zip(pre[i - 1].as_slice()) {
                    if z <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Some(g)
        } else {
            None
        };
        let a_in = inputs.pop().expect("one input per layer");
        out[i] = (a_in, std::mem::replace(&mut grad, g_in.unwrap_or_else(|| Mat::zeros(0, 0))));
    }
    Ok(out)
}

/// Squared Euclidean norm of a per-layer gradient.
pub fn grad_norm_sq(grads: &[Mat]) -> f64 {
    grads.iter().map(Mat::frobenius_sq).sum()
}
