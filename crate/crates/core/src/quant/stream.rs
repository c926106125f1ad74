use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Advance a 6-bit Fibonacci LFSR with feedback polynomial `x^6 + x^5 + 1`.
///
/// The register shifts left; the bit shifted in is `b6 XOR b5` of the old
/// state (bits numbered 1..=6 from the least significant end). The returned
/// threshold is the new state divided by 64, so it lies in `{1/64, ..., 63/64}`.
pub fn lfsr6_next(state: u8) -> Result<(f64, u8)> {
    if state == 0 || state > 0x3f {
        return Err(Error::domain(format!(
            "lfsr6 state must be in 1..=63, got {state}"
        )));
    }
    let next = lfsr6_step(state);
    Ok((f64::from(next) / 64.0, next))
}

#[inline]
fn lfsr6_step(state: u8) -> u8 {
    let feedback = ((state >> 5) ^ (state >> 4)) & 1;
    ((state << 1) | feedback) & 0x3f
}

/// Where SR thresholds come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThresholdSource {
    /// ChaCha8 seeded with `seed`; thresholds are 53-bit uniforms in `[0, 1)`.
    SeededUniform(u64),
    /// 6-bit LFSR starting from a nonzero state.
    Lfsr6(u8),
}

/// The family of a threshold source, without its seed or state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SourceKind {
    #[default]
    Prng,
    Lfsr6,
}

impl SourceKind {
    /// Build a source of this kind from a derived 64-bit key. LFSR states are
    /// mapped onto `1..=63` as `key % 63 + 1`.
    pub fn from_key(self, key: u64) -> ThresholdSource {
        match self {
            SourceKind::Prng => ThresholdSource::SeededUniform(key),
            SourceKind::Lfsr6 => ThresholdSource::Lfsr6((key % 63) as u8 + 1),
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceKind::Prng => write!(f, "prng"),
            SourceKind::Lfsr6 => write!(f, "lfsr6"),
        }
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "prng" => Ok(SourceKind::Prng),
            "lfsr6" => Ok(SourceKind::Lfsr6),
            other => Err(Error::domain(format!(
                "unknown threshold source kind `{other}` (expected prng or lfsr6)"
            ))),
        }
    }
}

impl ThresholdSource {
    pub fn kind(&self) -> SourceKind {
        match self {
            ThresholdSource::SeededUniform(_) => SourceKind::Prng,
            ThresholdSource::Lfsr6(_) => SourceKind::Lfsr6,
        }
    }

    pub fn stream(&self) -> Result<ThresholdStream> {
        ThresholdStream::new(*self)
    }
}

impl fmt::Display for ThresholdSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdSource::SeededUniform(seed) => write!(f, "prng:{seed}"),
            ThresholdSource::Lfsr6(state) => write!(f, "lfsr6:{state}"),
        }
    }
}

impl FromStr for ThresholdSource {
    type Err = Error;

    /// `prng:<seed>` or `lfsr6:<state>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::domain(format!("bad threshold source `{s}`")))?;
        match kind {
            "prng" => value
                .parse()
                .map(ThresholdSource::SeededUniform)
                .map_err(|_| Error::domain(format!("bad prng seed in `{s}`"))),
            "lfsr6" => {
                let state: u8 = value
                    .parse()
                    .map_err(|_| Error::domain(format!("bad lfsr6 state in `{s}`")))?;
                lfsr6_next(state)?;
                Ok(ThresholdSource::Lfsr6(state))
            }
            _ => Err(Error::domain(format!(
                "unknown threshold source `{s}` (expected prng:<seed> or lfsr6:<state>)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
enum StreamState {
    Prng(ChaCha8Rng),
    Lfsr6(u8),
}

/// A single-owner sequence of SR thresholds in `[0, 1)`.
#[derive(Debug, Clone)]
pub struct ThresholdStream {
    state: StreamState,
    draws: u64,
}

impl ThresholdStream {
    pub fn new(source: ThresholdSource) -> Result<Self> {
        let state = match source {
            ThresholdSource::SeededUniform(seed) => StreamState::Prng(ChaCha8Rng::seed_from_u64(seed)),
            ThresholdSource::Lfsr6(s) => {
                lfsr6_next(s)?;
                StreamState::Lfsr6(s)
            }
        };
        Ok(Self { state, draws: 0 })
    }

    pub fn seeded(seed: u64) -> Self {
        Self {
            state: StreamState::Prng(ChaCha8Rng::seed_from_u64(seed)),
            draws: 0,
        }
    }

    pub fn next_eps(&mut self) -> f64 {
        self.draws += 1;
        match &mut self.state {
            StreamState::Prng(rng) => rng.random::<f64>(),
            StreamState::Lfsr6(s) => {
                *s = lfsr6_step(*s);
                f64::from(*s) / 64.0
            }
        }
    }

    /// Number of thresholds drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }
}
