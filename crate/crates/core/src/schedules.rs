//! Per-epoch decay of the noise variance and of the upper clipping threshold.
//!
//! All noise schedules decay the *variance* `σ_e²`; the trainer draws noise
//! with standard deviation `sqrt(σ_e²)`.
//!
//! | kind   | `σ_e²`                  |
//! |--------|-------------------------|
//! | none   | `σ_0²`                  |
//! | linear | `σ_0² R^e`              |
//! | time   | `σ_0² / (1 + R e)`      |
//! | step   | `σ_0² R^⌊e/K⌋`          |
//!
//! "Linear" is the historical name of the geometric rule `σ_0² R^e`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which noise decay rule applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    None,
    Linear,
    Time,
    Step,
}

impl DecayKind {
    pub const ALL: [DecayKind; 4] = [DecayKind::None, DecayKind::Linear, DecayKind::Time, DecayKind::Step];

    pub fn as_str(self) -> &'static str {
        match self {
            DecayKind::None => "none",
            DecayKind::Linear => "linear",
            DecayKind::Time => "time",
            DecayKind::Step => "step",
        }
    }
}

impl fmt::Display for DecayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecayKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DecayKind::None),
            "linear" => Ok(DecayKind::Linear),
            "time" => Ok(DecayKind::Time),
            "step" => Ok(DecayKind::Step),
            other => Err(Error::invalid(
                "decay",
                format!("unknown decay kind `{other}` (expected none|linear|time|step)"),
            )),
        }
    }
}

/// Noise-variance decay rule together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySchedule {
    kind: DecayKind,
    initial_variance: f64,
    rate: f64,
    drop_every: usize,
}

impl DecaySchedule {
    /// `rate` is ignored for `none`; `drop_every` is only used by `step`
    /// but must still be at least 1.
    pub fn new(kind: DecayKind, initial_variance: f64, rate: f64, drop_every: usize) -> Result<Self> {
        if !(initial_variance > 0.0) || !initial_variance.is_finite() {
            return Err(Error::invalid(
                "sigma0_squared",
                format!("must be positive and finite, got {initial_variance}"),
            ));
        }
        match kind {
            DecayKind::Linear | DecayKind::Step if !(rate > 0.0 && rate < 1.0) => {
                return Err(Error::invalid(
                    "rate",
                    format!("{kind} decay needs 0 < R < 1, got {rate}"),
                ));
            }
            DecayKind::Time if !(rate > 0.0) || !rate.is_finite() => {
                return Err(Error::invalid("rate", format!("time decay needs R > 0, got {rate}")));
            }
            _ => {}
        }
        if drop_every == 0 {
            return Err(Error::invalid("drop_every", "K must be at least 1"));
        }
        Ok(Self {
            kind,
            initial_variance,
            rate,
            drop_every,
        })
    }

    /// Constant variance.
    pub fn constant(initial_variance: f64) -> Result<Self> {
        Self::new(DecayKind::None, initial_variance, 0.0, 1)
    }

    pub fn kind(&self) -> DecayKind {
        self.kind
    }

    pub fn initial_variance(&self) -> f64 {
        self.initial_variance
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn drop_every(&self) -> usize {
        self.drop_every
    }

    /// Same decay shape, different `σ_0²`.
    pub fn with_initial_variance(&self, initial_variance: f64) -> Result<Self> {
        Self::new(self.kind, initial_variance, self.rate, self.drop_every)
    }

    /// `σ_e²` for epoch `e`.
    pub fn variance_at(&self, epoch: usize) -> f64 {
        let s0 = self.initial_variance;
        match self.kind {
            DecayKind::None => s0,
            DecayKind::Linear => s0 * powi(self.rate, epoch),
            DecayKind::Time => s0 / (1.0 + self.rate * epoch as f64),
            DecayKind::Step => s0 * powi(self.rate, epoch / self.drop_every),
        }
    }
}

/// Free-function form of [`DecaySchedule::variance_at`].
pub fn noise_variance_at(schedule: &DecaySchedule, epoch: usize) -> f64 {
    schedule.variance_at(epoch)
}

/// Step decay of the upper clipping threshold: `z_e = z_0 R^⌊e/K⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSchedule {
    initial: f64,
    rate: f64,
    drop_every: usize,
}

impl ClipSchedule {
    pub fn new(initial: f64, rate: f64, drop_every: usize) -> Result<Self> {
        if !(initial > 0.0) || !initial.is_finite() {
            return Err(Error::invalid("z0", format!("must be positive, got {initial}")));
        }
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::invalid("clip_rate", format!("needs 0 < R <= 1, got {rate}")));
        }
        if drop_every == 0 {
            return Err(Error::invalid("clip_every", "K must be at least 1"));
        }
        Ok(Self {
            initial,
            rate,
            drop_every,
        })
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn drop_every(&self) -> usize {
        self.drop_every
    }

    pub fn threshold_at(&self, epoch: usize) -> f64 {
        self.initial * powi(self.rate, epoch / self.drop_every)
    }
}

/// Free-function form of [`ClipSchedule::threshold_at`].
pub fn clip_threshold_at(schedule: &ClipSchedule, epoch: usize) -> f64 {
    schedule.threshold_at(epoch)
}

/// `⌊q·t⌋`. A few ulps of headroom keep exact products like `t·b/n = 1`
/// from landing one below the integer after rounding.
pub fn epoch_of_iteration(iteration: usize, sampling_rate: f64) -> usize {
    let x = sampling_rate * iteration as f64;
    (x * (1.0 + 4.0 * f64::EPSILON)).floor() as usize
}

fn powi(base: f64, exp: usize) -> f64 {
    // exponents beyond i32 only occur for absurd epoch counts; saturate.
    base.powi(i32::try_from(exp).unwrap_or(i32::MAX))
}
