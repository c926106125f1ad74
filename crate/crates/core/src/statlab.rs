//! Monte Carlo and closed-form probes of the error structure of SR
//! mini-batch gradients.
//!
//! The product probes work on a single weight-gradient component
//! `∇W_ij = (1/D) sum_k A_ki Aout_kj` where `A` holds layer inputs and `Aout`
//! upstream gradients for a whole dataset of `D` rows. A trial draws a batch
//! of `b` rows, stochastically rounds the factors of each row product with
//! fresh thresholds, and compares the batch average with the full average.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{matmul, quantize_mat, Mat};
use crate::net::{loss_and_true_grad, Dataset, Loss, MlpModel};
use crate::quant::{sr_error_variance, QuantGrid, Quantizer, RoundingPolicy, ThresholdStream};
use crate::seed;
use crate::trainer::{tail_window, train, TrainConfig};

/// Welford accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStat {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStat {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n > 0 {
            (self.variance() / self.n as f64).sqrt()
        } else {
            0.0
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.mean(),
            stderr: self.stderr(),
        }
    }
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    /// `|mean - target| <= k * stderr`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

/// Which gradient component a probe looks at and how its factors are quantized.
#[derive(Debug, Clone, Copy)]
pub struct ProductProbe<'a> {
    /// `D x h1` layer inputs.
    pub a: &'a Mat,
    /// `D x h2` upstream gradients.
    pub aout: &'a Mat,
    pub i: usize,
    pub j: usize,
    pub quant_a: Quantizer,
    pub quant_out: Quantizer,
}

impl<'a> ProductProbe<'a> {
    pub fn new(
        a: &'a Mat,
        aout: &'a Mat,
        (i, j): (usize, usize),
        quant_a: Quantizer,
        quant_out: Quantizer,
    ) -> Result<Self> {
        if a.rows() != aout.rows() {
            return Err(Error::dim(format!(
                "A has {} rows, Aout has {}",
                a.rows(),
                aout.rows()
            )));
        }
        if i >= a.cols() || j >= aout.cols() {
            return Err(Error::dim(format!(
                "component ({i}, {j}) outside {}x{}",
                a.cols(),
                aout.cols()
            )));
        }
        Ok(Self {
            a,
            aout,
            i,
            j,
            quant_a,
            quant_out,
        })
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    /// `(1/D) sum_k A_ki Aout_kj`.
    pub fn full_gradient(&self) -> f64 {
        (0..self.rows()).map(|k| self.exact(k)).sum::<f64>() / self.rows() as f64
    }

    fn exact(&self, k: usize) -> f64 {
        self.a[(k, self.i)] * self.aout[(k, self.j)]
    }

    fn quantized(&self, k: usize, stream: &mut ThresholdStream) -> Result<f64> {
        let x = self.quant_a.apply(self.a[(k, self.i)], stream)?;
        let y = self.quant_out.apply(self.aout[(k, self.j)], stream)?;
        Ok(x * y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub batch: usize,
    pub trials: usize,
    pub seed: u64,
    pub with_replacement: bool,
}

impl McConfig {
    pub fn new(batch: usize, trials: usize, seed: u64) -> Self {
        Self {
            batch,
            trials,
            seed,
            with_replacement: true,
        }
    }
}

fn draw_batch(rng: &mut ChaCha8Rng, d: usize, b: usize, with_replacement: bool, buf: &mut Vec<usize>) {
    buf.clear();
    if with_replacement {
        buf.extend((0..b).map(|_| rng.random_range(0..d)));
    } else {
        let mut pool: Vec<usize> = (0..d).collect();
        for t in 0..b {
            let s = rng.random_range(t..d);
            pool.swap(t, s);
        }
        buf.extend_from_slice(&pool[..b]);
    }
}

fn check_mc(probe: &ProductProbe, mc: &McConfig) -> Result<()> {
    if mc.batch == 0 || mc.trials == 0 {
        return Err(Error::domain("batch size and trial count must be positive"));
    }
    if !mc.with_replacement && mc.batch > probe.rows() {
        return Err(Error::domain(format!(
            "batch {} larger than dataset {} without replacement",
            mc.batch,
            probe.rows()
        )));
    }
    Ok(())
}

/// Empirical decomposition of the mini-batch gradient MSE into sampling,
/// quantization and cross terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseDecomposition {
    pub total: Estimate,
    pub sampling: Estimate,
    pub quant: Estimate,
    pub cross: Estimate,
    /// Per-trial `total - sampling - quant`, paired across trials.
    pub residual: Estimate,
    pub trials: usize,
}

impl MseDecomposition {
    /// `|cross| <= k stderr` and `|total - T^s - T^Q| <= k stderr`.
    pub fn cross_vanishes(&self, k: f64) -> bool {
        self.cross.within(0.0, k) && self.residual.within(0.0, k)
    }
}

/// Per trial, with `S = full - true_mini` and `Q' = true_mini - quant_mini`
/// on the same batch: total `(S+Q')^2`, sampling `S^2`, quantization `Q'^2`,
/// cross `2 S Q'`.
pub fn mse_decompose(probe: &ProductProbe, mc: &McConfig) -> Result<MseDecomposition> {
    check_mc(probe, mc)?;
    let full = probe.full_gradient();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(mc.seed, &[0xD5]));
    let mut stream = ThresholdStream::seeded(seed::derive(mc.seed, &[0xD6]));
    let mut stats = [RunningStat::default(); 5];
    let mut batch = Vec::with_capacity(mc.batch);
    let b = mc.batch as f64;
    for _ in 0..mc.trials {
        draw_batch(&mut rng, probe.rows(), mc.batch, mc.with_replacement, &mut batch);
        let mut true_sum = 0.0;
        let mut quant_sum = 0.0;
        for &k in &batch {
            true_sum += probe.exact(k);
            quant_sum += probe.quantized(k, &mut stream)?;
        }
        let true_mini = true_sum / b;
        let quant_mini = quant_sum / b;
        let s = full - true_mini;
        let q = true_mini - quant_mini;
        let e = full - quant_mini;
        let values = [e * e, s * s, q * q, 2.0 * s * q, e * e - s * s - q * q];
        for (st, v) in stats.iter_mut().zip(values) {
            st.push(v);
        }
    }
    let [total, sampling, quant, cross, residual] = stats.map(|s| s.estimate());
    Ok(MseDecomposition {
        total,
        sampling,
        quant,
        cross,
        residual,
        trials: mc.trials,
    })
}

/// Measured quantization MSE against its analytic upper bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TqCheck {
    pub measured: Estimate,
    /// `(1/b)(E[A^2] Δ_out^2 + E[Aout^2] Δ_A^2 + Δ_A^2 Δ_out^2)`.
    pub bound: f64,
    /// `(1/b) E_k[A^2 σ_out^2 + Aout^2 σ_A^2 + σ_A^2 σ_out^2]` with the exact
    /// per-element SR variances.
    pub expected: f64,
    pub second_moment_a: f64,
    pub second_moment_out: f64,
    pub batch: usize,
}

impl TqCheck {
    /// Measured never exceeds the bound by more than `k` standard errors.
    pub fn holds(&self, k: f64) -> bool {
        if self.bound == 0.0 {
            return self.measured.mean == 0.0;
        }
        self.measured.mean <= self.bound + k * self.measured.stderr
    }
}

fn uniform_step(q: &Quantizer) -> Result<f64> {
    match (q.policy, q.grid) {
        (RoundingPolicy::Identity, _) | (_, QuantGrid::Identity) => Ok(0.0),
        (RoundingPolicy::Sr, QuantGrid::Uniform { step }) => Ok(step),
        (RoundingPolicy::Rtn, _) => Err(Error::domain("quantization bound requires stochastic rounding")),
        (_, QuantGrid::Float(_)) => Err(Error::domain("quantization bound requires a uniform grid")),
    }
}

/// Monte Carlo `T^Q = E[Q'^2]` together with its bound.
pub fn tq_bound_check(probe: &ProductProbe, mc: &McConfig) -> Result<TqCheck> {
    check_mc(probe, mc)?;
    let da = uniform_step(&probe.quant_a)?;
    let dout = uniform_step(&probe.quant_out)?;
    let d = probe.rows() as f64;
    let b = mc.batch as f64;
    let m2 = |m: &Mat, c: usize| (0..m.rows()).map(|k| m[(k, c)].powi(2)).sum::<f64>() / d;
    let m2a = m2(probe.a, probe.i);
    let m2o = m2(probe.aout, probe.j);
    let bound = (m2a * dout * dout + m2o * da * da + da * da * dout * dout) / b;

    let ga = if da > 0.0 { probe.quant_a.grid } else { QuantGrid::Identity };
    let go = if dout > 0.0 { probe.quant_out.grid } else { QuantGrid::Identity };
    let mut per_sample = 0.0;
    for k in 0..probe.rows() {
        let x = probe.a[(k, probe.i)];
        let y = probe.aout[(k, probe.j)];
        let vx = sr_error_variance(x, &ga)?;
        let vy = sr_error_variance(y, &go)?;
        per_sample += x * x * vy + y * y * vx + vx * vy;
    }
    let expected = per_sample / d / b;

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(mc.seed, &[0x7A]));
    let mut stream = ThresholdStream::seeded(seed::derive(mc.seed, &[0x7B]));
    let mut stat = RunningStat::default();
    let mut batch = Vec::with_capacity(mc.batch);
    for _ in 0..mc.trials {
        draw_batch(&mut rng, probe.rows(), mc.batch, mc.with_replacement, &mut batch);
        let mut q = 0.0;
        for &k in &batch {
            q += probe.exact(k) - probe.quantized(k, &mut stream)?;
        }
        let q = q / b;
        stat.push(q * q);
    }
    Ok(TqCheck {
        measured: stat.estimate(),
        bound,
        expected,
        second_moment_a: m2a,
        second_moment_out: m2o,
        batch: mc.batch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingLaw {
    /// `y ∝ 1/x`: slope of `ln y` against `ln x`, expected −1.
    InverseB,
    /// `y ∝ 4^(−x)`: slope of `log2 y` against `x` (bits), expected −2.
    TwoPowMinus2B,
}

impl ScalingLaw {
    pub fn expected_slope(&self) -> f64 {
        match self {
            ScalingLaw::InverseB => -1.0,
            ScalingLaw::TwoPowMinus2B => -2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    pub law: ScalingLaw,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// RMS residual in the fitted log domain.
    pub residual: f64,
}

impl ScalingFit {
    pub fn slope_within(&self, tol: f64) -> bool {
        (self.slope - self.law.expected_slope()).abs() <= tol
    }
}

/// Ordinary least squares in the log domain of `law`.
pub fn fit_scaling(xs: &[f64], ys: &[f64], law: ScalingLaw) -> Result<ScalingFit> {
    if xs.len() != ys.len() || xs.len() < 4 {
        return Err(Error::domain(format!(
            "need at least 4 paired points, got {} xs and {} ys",
            xs.len(),
            ys.len()
        )));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("xs must be strictly increasing"));
    }
    if let Some(y) = ys.iter().find(|y| !(y.is_finite() && **y > 0.0)) {
        return Err(Error::domain(format!("ys must be positive, found {y}")));
    }
    let (u, v): (Vec<f64>, Vec<f64>) = match law {
        ScalingLaw::InverseB => {
            if xs[0] <= 0.0 {
                return Err(Error::domain("xs must be positive for a power-law fit"));
            }
            xs.iter().zip(ys).map(|(x, y)| (x.ln(), y.ln())).unzip()
        }
        ScalingLaw::TwoPowMinus2B => xs.iter().zip(ys).map(|(x, y)| (*x, y.log2())).unzip(),
    };
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let sxy: f64 = u.iter().zip(&v).map(|(a, b)| (a - mu) * (b - mv)).sum();
    let sxx: f64 = u.iter().map(|a| (a - mu).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = mv - slope * mu;
    let residual = (u
        .iter()
        .zip(&v)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(ScalingFit {
        law,
        xs: xs.to_vec(),
        ys: ys.to_vec(),
        slope,
        intercept,
        residual,
    })
}

/// Smoothness constant of the mean squared loss of a linear model,
/// `2 λ_max(X^T X) / n`.
pub fn least_squares_smoothness(inputs: &Mat) -> f64 {
    let xtx = matmul(&inputs.transpose(), inputs).expect("X^T X conforms");
    let n = xtx.rows();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, xtx.as_slice()));
    let lmax = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    2.0 * lmax / inputs.rows() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasReport {
    /// `||∇L(ŵ) − ∇L(w)||`, worst case over trials for SR.
    pub measured_bias: f64,
    /// `c L sqrt(d) Δ_W` with `c = 1/2` for RTN and `c = 1` for SR.
    pub bound: f64,
    pub smoothness: f64,
    pub dim: usize,
    pub step: f64,
    pub policy: RoundingPolicy,
}

impl BiasReport {
    /// Bound check with a relative slack of `1e-12` for f64 rounding.
    pub fn within_bound(&self) -> bool {
        self.measured_bias <= self.bound * (1.0 + 1e-12) + 1e-300
    }
}

/// Worst-case gradient bias from quantizing the weights, for any model. No
/// bound is attached.
pub fn measure_weight_bias(
    model: &MlpModel,
    data: &Dataset,
    weights: &Quantizer,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let (_, g) = loss_and_true_grad(model, data)?;
    let trials = if weights.policy == RoundingPolicy::Sr { trials.max(1) } else { 1 };
    let mut stream = ThresholdStream::seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let layers = model
            .layers()
            .iter()
            .map(|w| quantize_mat(w, weights, &mut stream))
            .collect::<Result<Vec<_>>>()?;
        let (_, gq) = loss_and_true_grad(&model.with_layers(layers)?, data)?;
        let diff: f64 = g
            .iter()
            .zip(&gq)
            .map(|(a, b)| a.sub(b).map(|d| d.frobenius_sq()))
            .sum::<Result<f64>>()?;
        worst = worst.max(diff.sqrt());
    }
    Ok(worst)
}

/// Weight-quantization bias of a single-layer least-squares model against
/// its certified bound. Any other model is refused.
pub fn bias_check(
    model: &MlpModel,
    data: &Dataset,
    step: f64,
    policy: RoundingPolicy,
    trials: usize,
    seed: u64,
) -> Result<BiasReport> {
    if model.num_layers() != 1 || model.loss != Loss::Mse {
        return Err(Error::Refused(
            "bias bound needs a closed-form smoothness constant; only single-layer least-squares models have one"
                .to_string(),
        ));
    }
    let grid = QuantGrid::uniform(step)?;
    let smoothness = least_squares_smoothness(&data.inputs);
    let dim = model.num_params();
    let c = match policy {
        RoundingPolicy::Identity => 0.0,
        RoundingPolicy::Rtn => 0.5,
        RoundingPolicy::Sr => 1.0,
    };
    let measured_bias = measure_weight_bias(model, data, &Quantizer::new(grid, policy), trials, seed)?;
    Ok(BiasReport {
        measured_bias,
        bound: c * smoothness * (dim as f64).sqrt() * step,
        smoothness,
        dim,
        step,
        policy,
    })
}

/// Late-run gradient norm of one training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FloorCell {
    pub label: String,
    /// `None` when the run diverged.
    pub tail_mean: Option<f64>,
    pub tail_stderr: f64,
    pub points: usize,
    /// Relative change of the training loss across the tail window is below 10%.
    pub loss_stable: bool,
}

/// Train every configuration from the same initial model and report the
/// mean `||∇L||^2` over the last quarter of evaluations. Runs in parallel.
pub fn error_floor_probe(
    model: &MlpModel,
    data: &Dataset,
    cells: &[(String, TrainConfig)],
) -> Result<Vec<FloorCell>> {
    cells
        .par_iter()
        .map(|(label, cfg)| {
            let out = train(model, data, cfg)?;
            let cell = match tail_window(&out.records) {
                Some((mean, stderr, points)) => {
                    let tail = &out.records[out.records.len() - points..];
                    let first = tail[0].train_loss;
                    let last = tail[tail.len() - 1].train_loss;
                    let loss_stable = (first - last).abs() <= 0.1 * first.abs().max(last.abs()).max(1e-300);
                    FloorCell {
                        label: label.clone(),
                        tail_mean: Some(mean),
                        tail_stderr: stderr,
                        points,
                        loss_stable,
                    }
                }
                None => FloorCell {
                    label: label.clone(),
                    tail_mean: None,
                    tail_stderr: 0.0,
                    points: 0,
                    loss_stable: false,
                },
            };
            Ok(cell)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;

    fn col(values: &[f64]) -> Mat {
        Mat::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    fn sr(step: f64) -> Quantizer {
        Quantizer::sr(QuantGrid::uniform(step).unwrap())
    }

    #[test]
    fn running_stat_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 0.5, 3.25];
        let mut s = RunningStat::default();
        xs.iter().for_each(|&x| s.push(x));
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((s.mean() - mean).abs() < 1e-15);
        assert!((s.variance() - var).abs() < 1e-13);
        assert_eq!(s.count(), 5);
    }

    #[test]
    fn identity_grids_have_no_quantization_term() {
        let a = col(&[0.3, -1.2, 0.7, 2.0]);
        let o = col(&[1.0, 0.5, -0.25, 0.1]);
        let probe = ProductProbe::new(&a, &o, (0, 0), Quantizer::IDENTITY, Quantizer::IDENTITY).unwrap();
        let d = mse_decompose(&probe, &McConfig::new(2, 2000, 1)).unwrap();
        assert_eq!(d.quant.mean, 0.0);
        assert_eq!(d.total.mean, d.sampling.mean);
    }

    #[test]
    fn full_batch_without_replacement_is_exact() {
        let a = col(&[0.3, -1.2, 0.7, 2.0]);
        let o = col(&[1.0, 0.5, -0.25, 0.1]);
        let probe = ProductProbe::new(&a, &o, (0, 0), Quantizer::IDENTITY, Quantizer::IDENTITY).unwrap();
        let mc = McConfig {
            with_replacement: false,
            ..McConfig::new(4, 100, 2)
        };
        let d = mse_decompose(&probe, &mc).unwrap();
        assert!(d.total.mean < 1e-30);
        let too_big = McConfig { batch: 5, ..mc };
        assert!(mse_decompose(&probe, &too_big).is_err());
    }

    #[test]
    fn rtn_cross_term_is_nonzero_on_crafted_fixture() {
        // Row 0 rounds 0.4 -> 0 and sits below the mean; row 1 is on grid.
        // S and Q' are then positively correlated: E[2SQ'] = 0.12.
        let a = col(&[0.4, 1.0]);
        let o = col(&[1.0, 1.0]);
        let rtn = Quantizer::rtn(QuantGrid::uniform(1.0).unwrap());
        let probe = ProductProbe::new(&a, &o, (0, 0), rtn, rtn).unwrap();
        let d = mse_decompose(&probe, &McConfig::new(1, 20_000, 3)).unwrap();
        assert!((d.cross.mean - 0.12).abs() < 0.01);
        assert!(!d.cross.within(0.0, 10.0));
    }

    #[test]
    fn tq_on_grid_is_zero() {
        let a = col(&[1.0, -2.0, 3.0]);
        let o = col(&[0.5, 1.5, -1.0]);
        let probe = ProductProbe::new(&a, &o, (0, 0), sr(1.0), sr(0.5)).unwrap();
        let t = tq_bound_check(&probe, &McConfig::new(2, 1000, 0)).unwrap();
        assert_eq!(t.measured.mean, 0.0);
        assert_eq!(t.expected, 0.0);
        assert!(t.holds(4.0));
    }

    #[test]
    fn tq_degenerate_zero_inputs() {
        let a = col(&[0.0, 0.0]);
        let probe = ProductProbe::new(&a, &a, (0, 0), Quantizer::IDENTITY, Quantizer::IDENTITY).unwrap();
        let t = tq_bound_check(&probe, &McConfig::new(1, 10, 0)).unwrap();
        assert_eq!(t.bound, 0.0);
        assert!(t.holds(4.0));
    }

    #[test]
    fn tq_half_fractions_strictly_below_bound() {
        // Every factor sits mid-cell, so each per-element variance is 0.25.
        let a = col(&[0.5, 1.5, -0.5, 2.5]);
        let o = col(&[1.5, -0.5, 0.5, 0.5]);
        let probe = ProductProbe::new(&a, &o, (0, 0), sr(1.0), sr(1.0)).unwrap();
        let t = tq_bound_check(&probe, &McConfig::new(2, 50_000, 4)).unwrap();
        // E[X^2] = (0.25+2.25+0.25+6.25)/4 = 2.25, E[Y^2] = (2.25+0.25+0.25+0.25)/4 = 0.75.
        assert!((t.bound - (2.25 + 0.75 + 1.0) / 2.0).abs() < 1e-12);
        assert!((t.expected - (2.25 * 0.25 + 0.75 * 0.25 + 0.0625) / 2.0).abs() < 1e-12);
        assert!(t.measured.within(t.expected, 4.0));
        assert!(t.measured.mean < t.bound);
    }

    #[test]
    fn tq_requires_sr_uniform() {
        let a = col(&[0.3]);
        let rtn = Quantizer::rtn(QuantGrid::uniform(1.0).unwrap());
        let fp = Quantizer::sr(QuantGrid::float(4, 1).unwrap());
        for q in [rtn, fp] {
            let probe = ProductProbe::new(&a, &a, (0, 0), q, q).unwrap();
            assert!(tq_bound_check(&probe, &McConfig::new(1, 1, 0)).is_err());
        }
    }

    #[test]
    fn fit_exact_power_laws() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 / x).collect();
        let f = fit_scaling(&xs, &ys, ScalingLaw::InverseB).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12 && f.residual < 1e-12);

        let bits = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = bits.iter().map(|b| 5.0 * 4f64.powf(-b)).collect();
        let f = fit_scaling(&bits, &ys, ScalingLaw::TwoPowMinus2B).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-12);
        assert!(f.slope_within(1e-9));
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_scaling(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], ScalingLaw::InverseB).is_err());
        assert!(fit_scaling(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 1.0, 1.0], ScalingLaw::InverseB).is_err());
        assert!(fit_scaling(&[1.0, 3.0, 2.0, 4.0], &[1.0; 4], ScalingLaw::InverseB).is_err());
    }

    #[test]
    fn smoothness_of_diagonal_design() {
        // X^T X = diag(1+9, 4) -> λ_max = 10, n = 2 -> L = 10.
        let x = Mat::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0]]).unwrap();
        let xtx = matmul(&x.transpose(), &x).unwrap();
        // Largest eigenvalue of [[10, 6], [6, 4]] is 7 + sqrt(45).
        assert_eq!(xtx.as_slice(), &[10.0, 6.0, 6.0, 4.0]);
        let want = 2.0 * (7.0 + 45f64.sqrt()) / 2.0;
        assert!((least_squares_smoothness(&x) - want).abs() < 1e-12);
    }

    #[test]
    fn bias_check_trivial_cases() {
        let x = Mat::from_rows(&[vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.7, 0.7]]).unwrap();
        let y = col(&[1.0, 0.0, -1.0]);
        let data = Dataset::new(x, y).unwrap();
        let on_grid = MlpModel::new(vec![col(&[0.25, -0.5])], Activation::None, Loss::Mse).unwrap();
        let r = bias_check(&on_grid, &data, 0.25, RoundingPolicy::Rtn, 1, 0).unwrap();
        assert_eq!(r.measured_bias, 0.0);
        let r = bias_check(&on_grid, &data, 0.0, RoundingPolicy::Sr, 10, 0).unwrap();
        assert_eq!((r.measured_bias, r.bound), (0.0, 0.0));
        assert!(r.within_bound());
    }

    #[test]
    fn bias_check_refuses_uncertified_models() {
        let model = MlpModel::init(&[2, 3, 1], Activation::Relu, Loss::Mse, 0).unwrap();
        let data = Dataset::new(Mat::zeros(1, 2), Mat::zeros(1, 1)).unwrap();
        assert!(matches!(
            bias_check(&model, &data, 0.1, RoundingPolicy::Rtn, 1, 0),
            Err(Error::Refused(_))
        ));
        assert!(measure_weight_bias(&model, &data, &Quantizer::rtn(QuantGrid::uniform(0.1).unwrap()), 1, 0).is_ok());
    }
}
