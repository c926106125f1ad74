//! Quantization grids and rounding.
//!
//! Everything here is built on one primitive, [`threshold_quantize`]: scale
//! `x` onto the grid, take the floor, and move up one grid point unless the
//! fractional part is below the threshold `eps`. Round-to-nearest is the
//! fixed threshold 0.5 (ties go up), and stochastic rounding draws `eps`
//! uniformly from a [`ThresholdStream`], which makes it unbiased.

mod grid;
mod stream;

use std::fmt;
use std::str::FromStr;

pub use grid::{FloatFormat, QuantGrid};
pub use stream::{lfsr6_next, SourceKind, ThresholdSource, ThresholdStream};

use crate::error::{Error, Result};

/// Threshold quantization of a scalar.
///
/// Grid points are returned unchanged for every `eps`, including `eps = 0`.
/// Float formats use the spacing of the binade containing `x` and saturate
/// to `±max_finite`.
pub fn threshold_quantize(x: f64, grid: &QuantGrid, eps: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::domain(format!("cannot quantize non-finite value {x}")));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::domain(format!("threshold {eps} outside [0, 1]")));
    }
    Ok(quantize_unchecked(x, grid, eps))
}

#[inline]
fn quantize_unchecked(x: f64, grid: &QuantGrid, eps: f64) -> f64 {
    match grid {
        QuantGrid::Identity => x,
        QuantGrid::Uniform { step } => quantize_step(x, *step, eps),
        QuantGrid::Float(f) => {
            let max = f.max_finite();
            if x.abs() >= max {
                return max.copysign(x);
            }
            quantize_step(x, f.step_at(x), eps).clamp(-max, max)
        }
    }
}

#[inline]
fn quantize_step(x: f64, step: f64, eps: f64) -> f64 {
    let scaled = x / step;
    if scaled.round() * step == x {
        return x;
    }
    let floor = scaled.floor();
    if scaled - floor < eps {
        floor * step
    } else {
        (floor + 1.0) * step
    }
}

/// Round to nearest, ties toward positive infinity.
pub fn rtn(x: f64, grid: &QuantGrid) -> Result<f64> {
    threshold_quantize(x, grid, 0.5)
}

/// Stochastic rounding with one threshold drawn from `stream`.
///
/// A threshold is consumed even when `x` is already on the grid, so the
/// stream position depends only on how many values were rounded.
pub fn sr(x: f64, grid: &QuantGrid, stream: &mut ThresholdStream) -> Result<f64> {
    let eps = stream.next_eps();
    threshold_quantize(x, grid, eps)
}

/// Variance of the SR error at `x`: `p (1 - p) step^2` where `p` is the
/// fractional position of `x` between its two neighbouring grid points.
pub fn sr_error_variance(x: f64, grid: &QuantGrid) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::domain(format!("non-finite value {x}")));
    }
    let step = grid.local_step(x);
    if step == 0.0 || x.abs() >= grid.max_finite() {
        return Ok(0.0);
    }
    let scaled = x / step;
    if scaled.round() * step == x {
        return Ok(0.0);
    }
    let p = scaled - scaled.floor();
    Ok(p * (1.0 - p) * step * step)
}

/// How a quantizer picks its thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RoundingPolicy {
    /// Pass-through; the grid is ignored.
    #[default]
    Identity,
    /// Fixed threshold 0.5.
    Rtn,
    /// Thresholds drawn from the stream supplied at call time.
    Sr,
}

impl fmt::Display for RoundingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoundingPolicy::Identity => write!(f, "id"),
            RoundingPolicy::Rtn => write!(f, "rtn"),
            RoundingPolicy::Sr => write!(f, "sr"),
        }
    }
}

impl FromStr for RoundingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "id" | "identity" => Ok(RoundingPolicy::Identity),
            "rtn" => Ok(RoundingPolicy::Rtn),
            "sr" => Ok(RoundingPolicy::Sr),
            other => Err(Error::domain(format!("unknown rounding mode `{other}`"))),
        }
    }
}

/// A grid paired with a rounding policy: one quantization knob.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quantizer {
    pub grid: QuantGrid,
    pub policy: RoundingPolicy,
}

impl Default for QuantGrid {
    fn default() -> Self {
        QuantGrid::Identity
    }
}

impl Quantizer {
    pub const IDENTITY: Quantizer = Quantizer {
        grid: QuantGrid::Identity,
        policy: RoundingPolicy::Identity,
    };

    pub fn new(grid: QuantGrid, policy: RoundingPolicy) -> Self {
        Self { grid, policy }
    }

    pub fn rtn(grid: QuantGrid) -> Self {
        Self::new(grid, RoundingPolicy::Rtn)
    }

    pub fn sr(grid: QuantGrid) -> Self {
        Self::new(grid, RoundingPolicy::Sr)
    }

    /// True when applying this knob can never change a value.
    pub fn is_passthrough(&self) -> bool {
        self.policy == RoundingPolicy::Identity || self.grid.is_identity()
    }

    /// Quantize one value. Only SR draws from `stream`.
    pub fn apply(&self, x: f64, stream: &mut ThresholdStream) -> Result<f64> {
        match self.policy {
            RoundingPolicy::Identity => {
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(Error::domain(format!("cannot quantize non-finite value {x}")))
                }
            }
            RoundingPolicy::Rtn => rtn(x, &self.grid),
            RoundingPolicy::Sr => sr(x, &self.grid, stream),
        }
    }
}
