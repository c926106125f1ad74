use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A low-precision floating-point format with `exp_bits` exponent bits and
/// `man_bits` explicit mantissa bits (ExMy).
///
/// The exponent bias is `2^(exp_bits-1) - 1`. Every exponent code encodes a
/// finite binade (no infinity or NaN encodings), the lowest code holds
/// subnormals, and values beyond the largest finite number saturate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FloatFormat {
    exp_bits: u32,
    man_bits: u32,
}

impl FloatFormat {
    pub fn new(exp_bits: u32, man_bits: u32) -> Result<Self> {
        if !(1..=10).contains(&exp_bits) {
            return Err(Error::domain(format!(
                "exponent bits must be in 1..=10, got {exp_bits}"
            )));
        }
        if man_bits > 40 {
            return Err(Error::domain(format!(
                "mantissa bits must be at most 40, got {man_bits}"
            )));
        }
        Ok(Self { exp_bits, man_bits })
    }

    pub fn exp_bits(&self) -> u32 {
        self.exp_bits
    }

    pub fn man_bits(&self) -> u32 {
        self.man_bits
    }

    pub fn exp_bias(&self) -> i32 {
        (1 << (self.exp_bits - 1)) - 1
    }

    /// Exponent of the smallest normal binade.
    pub fn min_exp(&self) -> i32 {
        1 - self.exp_bias()
    }

    /// Exponent of the largest binade.
    pub fn max_exp(&self) -> i32 {
        (1 << self.exp_bits) - 1 - self.exp_bias()
    }

    pub fn max_finite(&self) -> f64 {
        let top = 2f64.powi(self.max_exp());
        top * (2.0 - 2f64.powi(-(self.man_bits as i32)))
    }

    /// Grid spacing around `x`: `2^(e - man_bits)` with `e` the binade of `|x|`,
    /// clamped to the subnormal binade from below and the top binade from above.
    pub fn step_at(&self, x: f64) -> f64 {
        let e = binade(x).clamp(self.min_exp(), self.max_exp());
        2f64.powi(e - self.man_bits as i32)
    }
}

/// Unbiased exponent of `|x|` (`floor(log2|x|)`), with zero and f64
/// subnormals mapped far below any ExMy range.
fn binade(x: f64) -> i32 {
    let biased = ((x.abs().to_bits() >> 52) & 0x7ff) as i32;
    if biased == 0 {
        -1100
    } else {
        biased - 1023
    }
}

/// A quantization lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantGrid {
    /// No quantization; every finite value is a grid point.
    Identity,
    /// `{k * step : k integer}` with `step > 0`.
    Uniform { step: f64 },
    /// An ExMy floating-point format.
    Float(FloatFormat),
}

impl QuantGrid {
    /// Uniform grid with spacing `step`. A zero step is the identity grid.
    pub fn uniform(step: f64) -> Result<Self> {
        if !step.is_finite() || step < 0.0 {
            return Err(Error::domain(format!(
                "uniform step must be finite and >= 0, got {step}"
            )));
        }
        if step == 0.0 {
            Ok(QuantGrid::Identity)
        } else {
            Ok(QuantGrid::Uniform { step })
        }
    }

    pub fn float(exp_bits: u32, man_bits: u32) -> Result<Self> {
        Ok(QuantGrid::Float(FloatFormat::new(exp_bits, man_bits)?))
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, QuantGrid::Identity)
    }

    /// Spacing of the grid around `x`; zero for the identity grid.
    pub fn local_step(&self, x: f64) -> f64 {
        match self {
            QuantGrid::Identity => 0.0,
            QuantGrid::Uniform { step } => *step,
            QuantGrid::Float(f) => f.step_at(x),
        }
    }

    /// Saturation bound; infinite for grids that never saturate.
    pub fn max_finite(&self) -> f64 {
        match self {
            QuantGrid::Float(f) => f.max_finite(),
            _ => f64::INFINITY,
        }
    }

    /// Mantissa bits of a float format.
    pub fn mantissa_bits(&self) -> Option<u32> {
        match self {
            QuantGrid::Float(f) => Some(f.man_bits()),
            _ => None,
        }
    }
}

impl fmt::Display for QuantGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantGrid::Identity => write!(f, "id"),
            QuantGrid::Uniform { step } => write!(f, "u:{step}"),
            QuantGrid::Float(ff) => write!(f, "fp:E{}M{}", ff.exp_bits, ff.man_bits),
        }
    }
}

fn parse_exmy(s: &str) -> Option<(u32, u32)> {
    let rest = s.strip_prefix('E').or_else(|| s.strip_prefix('e'))?;
    let m = rest.find(['M', 'm'])?;
    let e = rest[..m].parse().ok()?;
    let man = rest[m + 1..].parse().ok()?;
    Some((e, man))
}

impl FromStr for QuantGrid {
    type Err = Error;

    /// Accepts `id`, `u:<step>`, `fp:E<e>M<m>` and the bare shorthand `E<e>M<m>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "id" {
            return Ok(QuantGrid::Identity);
        }
        if let Some(step) = s.strip_prefix("u:") {
            let step: f64 = step
                .trim()
                .parse()
                .map_err(|_| Error::domain(format!("bad uniform step in grid `{s}`")))?;
            return QuantGrid::uniform(step);
        }
        let body = s.strip_prefix("fp:").unwrap_or(s);
        match parse_exmy(body) {
            Some((e, m)) => QuantGrid::float(e, m),
            None => Err(Error::domain(format!(
                "unrecognised grid `{s}` (expected id, u:<step>, fp:E<e>M<m>)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e4m3_matches_fp8_fn_range_layout() {
        let f = FloatFormat::new(4, 3).unwrap();
        assert_eq!(f.exp_bias(), 7);
        assert_eq!(f.min_exp(), -6);
        assert_eq!(f.max_exp(), 8);
        // No inf/NaN codes, so the top binade is fully usable: 2^8 * 1.875.
        assert_eq!(f.max_finite(), 480.0);
        assert_eq!(f.step_at(1.0), 0.125);
        assert_eq!(f.step_at(1.99), 0.125);
        assert_eq!(f.step_at(2.0), 0.25);
        // Subnormal spacing extends the minimum binade down to zero.
        assert_eq!(f.step_at(0.0), 2f64.powi(-9));
        assert_eq!(f.step_at(1e-30), 2f64.powi(-9));
    }

    #[test]
    fn e4m0_is_powers_of_two() {
        let f = FloatFormat::new(4, 0).unwrap();
        assert_eq!(f.max_finite(), 256.0);
        assert_eq!(f.step_at(3.0), 2.0);
        assert_eq!(f.step_at(-0.3), 0.25);
    }

    #[test]
    fn grid_spec_strings() {
        for s in ["id", "u:0.25", "fp:E4M1", "fp:E5M2"] {
            let g: QuantGrid = s.parse().unwrap();
            assert_eq!(g.to_string(), s);
        }
        assert_eq!("E4M2".parse::<QuantGrid>().unwrap(), QuantGrid::float(4, 2).unwrap());
        assert_eq!("u:0".parse::<QuantGrid>().unwrap(), QuantGrid::Identity);
        assert!("u:-1".parse::<QuantGrid>().is_err());
        assert!("fp:E0M3".parse::<QuantGrid>().is_err());
        assert!("bf16".parse::<QuantGrid>().is_err());
    }
}
