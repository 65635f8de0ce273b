//! Per-sample gradient scaling rules.
//!
//! Every rule maps a gradient `g` to `γ g` (or discards it) such that the
//! result has norm at most the lower bound `c0`. That bound is the
//! sensitivity the accountant charges for.
//!
//! | kind          | `norm <= z`   | `norm > z`                       |
//! |---------------|---------------|----------------------------------|
//! | v2            | `c0 / z`      | `c0 / (norm + w / (norm + w))`   |
//! | global        | `c0 / z`      | discard                          |
//! | global_adapt  | `c0 / z`      | `c0 / norm`                      |
//! | dpsgd         | `min(1, c0 / norm)`                             ||
//! | autos         | `c0 / (norm + r)`                               ||
//! | psac          | `c0 / (norm + w / (norm + w))`                  ||
//!
//! At `norm == z` the inside branch applies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseVector, RandomSource};

pub const DEFAULT_STABILITY: f64 = 1.0;
pub const DEFAULT_AUTOS_REGULARIZER: f64 = 0.01;

/// Margin kept above `c0` when an adaptive threshold update would cross it.
const THRESHOLD_FLOOR_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipKind {
    V2,
    Dpsgd,
    Autos,
    Psac,
    Global,
    GlobalAdapt,
}

impl ClipKind {
    pub const ALL: [ClipKind; 6] = [
        ClipKind::V2,
        ClipKind::Dpsgd,
        ClipKind::Autos,
        ClipKind::Psac,
        ClipKind::Global,
        ClipKind::GlobalAdapt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClipKind::V2 => "v2",
            ClipKind::Dpsgd => "dpsgd",
            ClipKind::Autos => "autos",
            ClipKind::Psac => "psac",
            ClipKind::Global => "global",
            ClipKind::GlobalAdapt => "global_adapt",
        }
    }

    /// Whether the rule has an upper threshold `z` that must stay above `c0`.
    pub fn uses_threshold(self) -> bool {
        matches!(self, ClipKind::V2 | ClipKind::Global | ClipKind::GlobalAdapt)
    }
}

impl fmt::Display for ClipKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClipKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClipKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid("clip", format!("unknown clipping rule `{s}`")))
    }
}

/// Result of scaling one gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Factor(f64),
    Discard,
}

/// A scaling rule plus its live state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPolicy {
    kind: ClipKind,
    lower: f64,
    threshold: f64,
    stability: f64,
    regularizer: f64,
    target_fraction: f64,
}

impl ClipPolicy {
    fn build(kind: ClipKind, lower: f64, threshold: f64) -> Result<Self> {
        if !(lower > 0.0) || !lower.is_finite() {
            return Err(Error::invalid("c0", format!("must be positive, got {lower}")));
        }
        let policy = Self {
            kind,
            lower,
            threshold,
            stability: DEFAULT_STABILITY,
            regularizer: DEFAULT_AUTOS_REGULARIZER,
            target_fraction: 0.0,
        };
        policy.check_threshold(threshold)?;
        Ok(policy)
    }

    /// Global scaling inside `z0`, per-sample adaptive clipping outside.
    pub fn v2(lower: f64, threshold: f64, stability: f64) -> Result<Self> {
        Self::build(ClipKind::V2, lower, threshold)?.with_stability(stability)
    }

    pub fn dpsgd(lower: f64) -> Result<Self> {
        Self::build(ClipKind::Dpsgd, lower, f64::INFINITY)
    }

    pub fn autos(lower: f64, regularizer: f64) -> Result<Self> {
        if !(regularizer >= 0.0) || !regularizer.is_finite() {
            return Err(Error::invalid("r", format!("must be non-negative, got {regularizer}")));
        }
        let mut p = Self::build(ClipKind::Autos, lower, f64::INFINITY)?;
        p.regularizer = regularizer;
        Ok(p)
    }

    pub fn psac(lower: f64, stability: f64) -> Result<Self> {
        Self::build(ClipKind::Psac, lower, f64::INFINITY)?.with_stability(stability)
    }

    pub fn global(lower: f64, threshold: f64) -> Result<Self> {
        Self::build(ClipKind::Global, lower, threshold)
    }

    /// `target_fraction` is the share of per-sample norms the threshold
    /// update aims to leave above `z`.
    pub fn global_adapt(lower: f64, threshold: f64, target_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&target_fraction) {
            return Err(Error::invalid(
                "target_fraction",
                format!("must lie in [0, 1), got {target_fraction}"),
            ));
        }
        let mut p = Self::build(ClipKind::GlobalAdapt, lower, threshold)?;
        p.target_fraction = target_fraction;
        Ok(p)
    }

    fn with_stability(mut self, stability: f64) -> Result<Self> {
        if !(stability > 0.0) || !stability.is_finite() {
            return Err(Error::invalid("w", format!("must be positive, got {stability}")));
        }
        self.stability = stability;
        Ok(self)
    }

    fn check_threshold(&self, threshold: f64) -> Result<()> {
        if self.kind.uses_threshold() && !(threshold > self.lower && threshold.is_finite()) {
            return Err(Error::invalid(
                "z",
                format!(
                    "{} needs a finite threshold above c0 = {}, got {threshold}",
                    self.kind, self.lower
                ),
            ));
        }
        Ok(())
    }

    pub fn kind(&self) -> ClipKind {
        self.kind
    }

    /// `c0`, the sensitivity of every scaled gradient.
    pub fn lower(&self) -> f64 {
        self.lower
    }

    /// Live upper threshold `z` (infinite for rules without one).
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn stability(&self) -> f64 {
        self.stability
    }

    pub fn regularizer(&self) -> f64 {
        self.regularizer
    }

    pub fn target_fraction(&self) -> f64 {
        self.target_fraction
    }

    /// Replaces `z`, keeping the `c0 < z` invariant.
    pub fn set_threshold(&mut self, threshold: f64) -> Result<()> {
        self.check_threshold(threshold)?;
        self.threshold = threshold;
        Ok(())
    }

    fn adaptive_clip(&self, norm: f64) -> f64 {
        let w = self.stability;
        self.lower / (norm + w / (norm + w))
    }

    /// `γ` for a gradient of the given norm.
    pub fn scale_factor(&self, norm: f64) -> Scale {
        let c0 = self.lower;
        let z = self.threshold;
        let factor = match self.kind {
            ClipKind::V2 if norm <= z => c0 / z,
            ClipKind::V2 => self.adaptive_clip(norm),
            ClipKind::Global if norm <= z => c0 / z,
            ClipKind::Global => return Scale::Discard,
            ClipKind::GlobalAdapt if norm <= z => c0 / z,
            ClipKind::GlobalAdapt => c0 / norm,
            ClipKind::Dpsgd if norm <= c0 => 1.0,
            ClipKind::Dpsgd => c0 / norm,
            ClipKind::Autos => {
                let denom = norm + self.regularizer;
                if denom > 0.0 {
                    c0 / denom
                } else {
                    // r = 0 and a zero gradient: any factor leaves it at zero
                    1.0
                }
            }
            ClipKind::Psac => self.adaptive_clip(norm),
        };
        Scale::Factor(factor)
    }

    /// Applies [`Self::scale_factor`] to every gradient of a batch.
    pub fn scale_batch(&self, gradients: &[DenseVector]) -> Result<ScaledBatch> {
        let dim = gradients.first().map_or(0, DenseVector::len);
        let mut scaled = Vec::with_capacity(gradients.len());
        let mut norms = Vec::with_capacity(gradients.len());
        let mut discarded = 0;
        for g in gradients {
            if g.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: g.len(),
                });
            }
            let norm = g.l2_norm();
            norms.push(norm);
            match self.scale_factor(norm) {
                Scale::Factor(gamma) => scaled.push(Some(g.scaled(gamma)?)),
                Scale::Discard => {
                    discarded += 1;
                    scaled.push(None);
                }
            }
        }
        let max_norm = norms.iter().copied().fold(0.0, f64::max);
        let mean_norm = if norms.is_empty() {
            0.0
        } else {
            norms.iter().sum::<f64>() / norms.len() as f64
        };
        Ok(ScaledBatch {
            dim,
            scaled,
            norms,
            discarded,
            max_norm,
            mean_norm,
        })
    }

    /// Privatized geometric update of a `global_adapt` threshold.
    ///
    /// With `f` the fraction of `norms` above `z`, releases
    /// `f~ = f + N(0, noise_std²) / |B|` and sets `z <- z exp(f~ - target)`,
    /// floored at `c0 (1 + 1e-6)`. An empty batch leaves `z` unchanged.
    pub fn adapt_threshold(&mut self, norms: &[f64], rng: &mut RandomSource, noise_std: f64) -> Result<f64> {
        if self.kind != ClipKind::GlobalAdapt {
            return Err(Error::invalid(
                "clip",
                format!("threshold adaptation applies to global_adapt, not {}", self.kind),
            ));
        }
        if norms.is_empty() {
            return Ok(self.threshold);
        }
        let size = norms.len() as f64;
        let above = norms.iter().filter(|&&n| n > self.threshold).count() as f64;
        let noise = if noise_std > 0.0 {
            noise_std * rng.standard_normal()
        } else {
            0.0
        };
        let released = (above + noise) / size;
        self.threshold = self.next_threshold(released);
        Ok(self.threshold)
    }

    fn next_threshold(&self, released_fraction: f64) -> f64 {
        let proposed = self.threshold * (released_fraction - self.target_fraction).exp();
        let floor = self.lower * (1.0 + THRESHOLD_FLOOR_MARGIN);
        if proposed <= self.lower {
            floor
        } else {
            proposed.min(f64::MAX)
        }
    }
}

/// Scaled gradients of one batch plus the statistics the trainer records.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledBatch {
    dim: usize,
    /// `None` marks a discarded sample.
    pub scaled: Vec<Option<DenseVector>>,
    /// Raw per-sample norms, before scaling.
    pub norms: Vec<f64>,
    pub discarded: usize,
    pub max_norm: f64,
    pub mean_norm: f64,
}

impl ScaledBatch {
    pub fn len(&self) -> usize {
        self.scaled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scaled.is_empty()
    }

    /// Sum of the kept scaled gradients, in batch order.
    pub fn sum(&self) -> Result<DenseVector> {
        let mut total = DenseVector::zeros(self.dim);
        for g in self.scaled.iter().flatten() {
            total.add_assign(g)?;
        }
        Ok(total)
    }
}
