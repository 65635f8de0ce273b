//! Truncated concentrated DP (tCDP) accounting for decayed noise schedules.
//!
//! Each epoch is treated as one Gaussian mechanism with sensitivity `C` and
//! variance `σ_e²`, amplified by sampling with rate `h = b/n`:
//!
//! ```text
//! ρ_e = 13 (b/n)² C² / (2 σ_e²)
//! ω_e = ln(n/b) σ_e² / (2 C²)
//! ```
//!
//! Composition sums `ρ` and takes the minimum `ω`. [`compose_bruteforce`]
//! does exactly that epoch by epoch; [`compose_closed_form`] evaluates the
//! summed geometric/arithmetic series directly. The two must agree.
//!
//! Conversion to `(ε, δ)` uses `ε = ρ + 2 sqrt(ρ ln(1/δ))`. Logarithms are
//! natural throughout.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedules::{DecayKind, DecaySchedule};

/// Amplification constant of the subsampling bound.
pub const AMPLIFICATION: f64 = 13.0;

/// Everything the accountant composes over a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    sensitivity: f64,
    batch_size: usize,
    dataset_size: usize,
    epochs: usize,
    schedule: DecaySchedule,
    delta: f64,
}

impl PrivacySpec {
    pub fn new(
        sensitivity: f64,
        batch_size: usize,
        dataset_size: usize,
        epochs: usize,
        schedule: DecaySchedule,
        delta: f64,
    ) -> Result<Self> {
        if !(sensitivity > 0.0) || !sensitivity.is_finite() {
            return Err(Error::invalid(
                "sensitivity",
                format!("must be positive, got {sensitivity}"),
            ));
        }
        if batch_size == 0 || batch_size > dataset_size {
            return Err(Error::invalid(
                "batch_size",
                format!("need 1 <= b <= n, got b = {batch_size}, n = {dataset_size}"),
            ));
        }
        if epochs == 0 {
            return Err(Error::invalid("epochs", "need at least one epoch"));
        }
        check_delta(delta)?;
        Ok(Self {
            sensitivity,
            batch_size,
            dataset_size,
            epochs,
            schedule,
            delta,
        })
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn dataset_size(&self) -> usize {
        self.dataset_size
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn schedule(&self) -> &DecaySchedule {
        &self.schedule
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `q = b/n`.
    pub fn sampling_rate(&self) -> f64 {
        self.batch_size as f64 / self.dataset_size as f64
    }

    pub fn with_schedule(&self, schedule: DecaySchedule) -> Self {
        Self { schedule, ..*self }
    }

    pub fn with_epochs(&self, epochs: usize) -> Result<Self> {
        Self::new(
            self.sensitivity,
            self.batch_size,
            self.dataset_size,
            epochs,
            self.schedule,
            self.delta,
        )
    }

    fn log_inverse_rate(&self) -> Result<f64> {
        if self.batch_size >= self.dataset_size {
            return Err(Error::invalid(
                "batch_size",
                "omega needs b < n: without subsampling there is no amplification",
            ));
        }
        Ok((self.dataset_size as f64 / self.batch_size as f64).ln())
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta", format!("must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// Accumulated `(ρ, ω)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcdpBudget {
    pub rho: f64,
    pub omega: f64,
}

impl TcdpBudget {
    /// Composition: `ρ` adds, `ω` takes the minimum.
    pub fn compose(self, other: TcdpBudget) -> TcdpBudget {
        TcdpBudget {
            rho: self.rho + other.rho,
            omega: self.omega.min(other.omega),
        }
    }
}

/// Final `(ε, δ)` guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpBudget {
    pub epsilon: f64,
    pub delta: f64,
}

/// Conditions that the conversion and amplification bounds assume but that
/// practical settings routinely violate. They are reported, never enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AccountingWarning {
    /// `δ < exp(-(ω-1)² ρ)`.
    DeltaBelowConversionBound { delta: f64, bound: f64 },
    /// Some epochs fail a precondition of the sampling amplification bound.
    AmplificationPrecondition {
        condition: AmplificationCondition,
        failing_epochs: usize,
        first_epoch: usize,
    },
    /// Extra budget charged for privatized threshold updates.
    ThresholdUpdateCharged { rho: f64 },
}

impl fmt::Display for AccountingWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccountingWarning::DeltaBelowConversionBound { delta, bound } => write!(
                f,
                "delta {delta:e} is below the conversion side condition exp(-(omega-1)^2 rho) = {bound:e}"
            ),
            AccountingWarning::AmplificationPrecondition {
                condition,
                failing_epochs,
                first_epoch,
            } => write!(
                f,
                "amplification precondition `{condition}` fails in {failing_epochs} epoch(s), first at epoch {first_epoch}"
            ),
            AccountingWarning::ThresholdUpdateCharged { rho } => {
                write!(f, "threshold updates charged rho = {rho:e}")
            }
        }
    }
}

/// `(ε, δ)` together with any side-condition warnings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConversion {
    pub budget: DpBudget,
    pub warnings: Vec<AccountingWarning>,
}

/// `ρ` of one subsampled Gaussian release: `13 q² C² / (2 σ²)`.
pub fn subsampled_gaussian_rho(sampling_rate: f64, sensitivity: f64, variance: f64) -> f64 {
    AMPLIFICATION * sampling_rate * sampling_rate * sensitivity * sensitivity / (2.0 * variance)
}

/// `ω` of one subsampled Gaussian release: `ln(1/q) σ² / (2 C²)`.
pub fn subsampled_gaussian_omega(sampling_rate: f64, sensitivity: f64, variance: f64) -> f64 {
    (1.0 / sampling_rate).ln() * variance / (2.0 * sensitivity * sensitivity)
}

/// `ρ_e` for epoch `e`.
pub fn rho_epoch(spec: &PrivacySpec, epoch: usize) -> f64 {
    subsampled_gaussian_rho(spec.sampling_rate(), spec.sensitivity, spec.schedule.variance_at(epoch))
}

/// `ω_e = ln(n/b) σ_e² / (2 C²)`. Fails when `b = n`.
pub fn omega_epoch(spec: &PrivacySpec, epoch: usize) -> Result<f64> {
    let c = spec.sensitivity;
    Ok(spec.log_inverse_rate()? * spec.schedule.variance_at(epoch) / (2.0 * c * c))
}

/// Epoch-by-epoch composition; the reference the closed forms are checked against.
pub fn compose_bruteforce(spec: &PrivacySpec) -> Result<TcdpBudget> {
    let mut rho = 0.0;
    let mut omega = f64::INFINITY;
    for e in 0..spec.epochs {
        rho += rho_epoch(spec, e);
        omega = omega.min(omega_epoch(spec, e)?);
    }
    Ok(TcdpBudget { rho, omega })
}

/// `Σ_{i<N} R^{-i} = (1 - R^N) / (R^{N-1} - R^N)`, evaluated without
/// cancellation: the numerator as `-expm1(N ln R)`, the denominator as
/// `R^{N-1} (1 - R)`.
fn inverse_geometric_sum(rate: f64, terms: usize) -> f64 {
    let n = terms as f64;
    let numerator = -(n * rate.ln()).exp_m1();
    let denominator = rate.powf(n - 1.0) * (1.0 - rate);
    numerator / denominator
}

/// Closed-form totals per decay kind.
///
/// ```text
/// none:   ρ = A E / σ0²                      ω = L σ0² / (2C²)
/// linear: ρ = A (1-R^E) / (σ0² (R^{E-1}-R^E)) ω = L σ0² R^{E-1} / (2C²)
/// time:   ρ = A (2E + R E (E-1)) / (2 σ0²)   ω = L σ0² / (2C² (1 + R(E-1)))
/// step:   ρ = A K (1-R^P) / (σ0² (R^{P-1}-R^P)) ω = L σ0² R^{P-1} / (2C²)
/// ```
///
/// with `A = 13 (b/n)² C² / 2`, `L = ln(n/b)` and `P = E/K`. Step decay
/// requires `K | E`.
pub fn compose_closed_form(spec: &PrivacySpec) -> Result<TcdpBudget> {
    let schedule = spec.schedule;
    let q = spec.sampling_rate();
    let c2 = spec.sensitivity * spec.sensitivity;
    let s0 = schedule.initial_variance();
    let epochs = spec.epochs;
    let e = epochs as f64;
    let r = schedule.rate();
    let per_unit = AMPLIFICATION * q * q * c2 / 2.0;
    let omega_unit = spec.log_inverse_rate()? / (2.0 * c2);

    let (rho, omega) = match schedule.kind() {
        DecayKind::None => (per_unit * e / s0, omega_unit * s0),
        DecayKind::Linear => (
            per_unit * inverse_geometric_sum(r, epochs) / s0,
            omega_unit * s0 * r.powf(e - 1.0),
        ),
        DecayKind::Time => (
            AMPLIFICATION * q * q * c2 * (2.0 * e + r * e * (e - 1.0)) / (4.0 * s0),
            omega_unit * s0 / (1.0 + r * (e - 1.0)),
        ),
        DecayKind::Step => {
            let k = schedule.drop_every();
            if !epochs.is_multiple_of(k) {
                return Err(Error::EpochsNotDivisible { epochs, drop_every: k });
            }
            let periods = epochs / k;
            (
                per_unit * k as f64 * inverse_geometric_sum(r, periods) / s0,
                omega_unit * s0 * r.powf(periods as f64 - 1.0),
            )
        }
    };
    Ok(TcdpBudget { rho, omega })
}

/// `ε = ρ + 2 sqrt(ρ ln(1/δ))`, with the `δ ≥ exp(-(ω-1)² ρ)` side
/// condition reported as a warning.
pub fn tcdp_to_dp(budget: TcdpBudget, delta: f64) -> Result<DpConversion> {
    check_delta(delta)?;
    let rho = budget.rho;
    if !(rho >= 0.0) {
        return Err(Error::invalid("rho", format!("must be non-negative, got {rho}")));
    }
    let epsilon = rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt();
    let mut warnings = Vec::new();
    let bound = (-(budget.omega - 1.0).powi(2) * rho).exp();
    if delta < bound {
        warnings.push(AccountingWarning::DeltaBelowConversionBound { delta, bound });
    }
    Ok(DpConversion {
        budget: DpBudget { epsilon, delta },
        warnings,
    })
}

/// Inverse of the conversion: the `ρ` whose `ε` at `δ` equals `epsilon`.
///
/// `ρ = (sqrt(L + ε) - sqrt(L))² = ε² / (sqrt(L + ε) + sqrt(L))²` with
/// `L = ln(1/δ)`; the second form avoids cancellation for small `ε`.
pub fn dp_to_rho(epsilon: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid("epsilon", format!("must be positive, got {epsilon}")));
    }
    let l = (1.0 / delta).ln();
    let denom = (l + epsilon).sqrt() + l.sqrt();
    Ok((epsilon / denom).powi(2))
}

/// Initial variance `σ0²` such that the run spends exactly `epsilon` at
/// `spec.delta()`. The schedule's own `σ0²` is ignored.
///
/// Every closed form is `A / σ0²`, so `σ0² = A / dp_to_rho(ε, δ)`.
pub fn solve_sigma0(epsilon: f64, spec: &PrivacySpec) -> Result<f64> {
    solve_sigma0_with_overhead(epsilon, spec, 0.0)
}

/// As [`solve_sigma0`], reserving `overhead_rho` of the budget for other
/// releases (e.g. privatized threshold updates).
pub fn solve_sigma0_with_overhead(epsilon: f64, spec: &PrivacySpec, overhead_rho: f64) -> Result<f64> {
    let target = dp_to_rho(epsilon, spec.delta)?;
    let available = target - overhead_rho;
    if !(available > 0.0) {
        return Err(Error::invalid(
            "epsilon",
            format!("overhead rho {overhead_rho:e} exhausts the target rho {target:e}"),
        ));
    }
    let unit = spec.with_schedule(spec.schedule.with_initial_variance(1.0)?);
    let a = compose_closed_form(&unit)?.rho;
    Ok(a / available)
}

/// Budget of a count query with sensitivity 1 released once per epoch with
/// Gaussian noise of the given variance, amplified by the same sampling.
pub fn threshold_update_budget(spec: &PrivacySpec, count_variance: f64) -> Result<TcdpBudget> {
    if !(count_variance > 0.0) {
        return Err(Error::invalid(
            "count_noise",
            format!("threshold updates need positive noise, got variance {count_variance}"),
        ));
    }
    let q = spec.sampling_rate();
    let per_epoch = subsampled_gaussian_rho(q, 1.0, count_variance);
    Ok(TcdpBudget {
        rho: per_epoch * spec.epochs as f64,
        omega: spec.log_inverse_rate()? * count_variance / 2.0,
    })
}

/// Named preconditions of the sampling amplification bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplificationCondition {
    /// `ρ, h ∈ (0, 0.1]`.
    RhoAndRateRange,
    /// `ln(1/h) ≥ 3ρ(2 + ln(1/ρ))`.
    LogRate,
    /// `ω ≥ ln(1/h) / (2ρ)`.
    Omega,
}

impl fmt::Display for AmplificationCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AmplificationCondition::RhoAndRateRange => "rho, h in (0, 0.1]",
            AmplificationCondition::LogRate => "ln(1/h) >= 3 rho (2 + ln(1/rho))",
            AmplificationCondition::Omega => "omega >= ln(1/h) / (2 rho)",
        })
    }
}

/// Outcome of each precondition for a single epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochCheck {
    pub epoch: usize,
    /// `ρ` of the un-amplified Gaussian release, `C² / (2 σ_e²)`.
    pub base_rho: f64,
    pub rho_and_rate_in_range: bool,
    pub log_rate: bool,
    pub omega: bool,
}

impl EpochCheck {
    pub fn passes(&self) -> bool {
        self.rho_and_rate_in_range && self.log_rate && self.omega
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationReport {
    pub sampling_rate: f64,
    pub epochs: Vec<EpochCheck>,
}

impl AmplificationReport {
    /// Epochs failing at least one condition.
    pub fn failures(&self) -> impl Iterator<Item = &EpochCheck> {
        self.epochs.iter().filter(|c| !c.passes())
    }

    pub fn all_pass(&self) -> bool {
        self.failures().next().is_none()
    }

    /// One warning per condition that fails somewhere.
    pub fn warnings(&self) -> Vec<AccountingWarning> {
        let mut out = Vec::new();
        let conditions: [ConditionCheck; 3] = [
            (AmplificationCondition::RhoAndRateRange, |c| c.rho_and_rate_in_range),
            (AmplificationCondition::LogRate, |c| c.log_rate),
            (AmplificationCondition::Omega, |c| c.omega),
        ];
        for (condition, holds) in conditions {
            let failing: Vec<usize> = self.epochs.iter().filter(|c| !holds(c)).map(|c| c.epoch).collect();
            if let Some(&first_epoch) = failing.first() {
                out.push(AccountingWarning::AmplificationPrecondition {
                    condition,
                    failing_epochs: failing.len(),
                    first_epoch,
                });
            }
        }
        out
    }
}

/// Evaluates the amplification preconditions for every epoch with `h = q`.
/// The base Gaussian mechanism has `ω = ∞`, so the `ω` condition holds
/// whenever `ρ > 0`.
pub fn check_amplification_preconditions(spec: &PrivacySpec) -> AmplificationReport {
    let h = spec.sampling_rate();
    let c2 = spec.sensitivity * spec.sensitivity;
    let base_omega = f64::INFINITY;
    let epochs = (0..spec.epochs)
        .map(|epoch| {
            let rho = c2 / (2.0 * spec.schedule.variance_at(epoch));
            let in_range = |x: f64| x > 0.0 && x <= 0.1;
            EpochCheck {
                epoch,
                base_rho: rho,
                rho_and_rate_in_range: in_range(rho) && in_range(h),
                log_rate: (1.0 / h).ln() >= 3.0 * rho * (2.0 + (1.0 / rho).ln()),
                omega: rho > 0.0 && base_omega >= (1.0 / h).ln() / (2.0 * rho),
            }
        })
        .collect();
    AmplificationReport {
        sampling_rate: h,
        epochs,
    }
}

type ConditionCheck = (AmplificationCondition, fn(&EpochCheck) -> bool);

/// Forward accounting result: totals, `(ε, δ)` and all warnings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub rho_total: f64,
    pub omega_total: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub warnings: Vec<AccountingWarning>,
}

/// Closed-form budget, conversion and precondition checks in one call.
pub fn account(spec: &PrivacySpec) -> Result<AccountingReport> {
    let budget = compose_closed_form(spec)?;
    account_budget(spec, budget)
}

/// As [`account`] but for an already composed budget.
pub fn account_budget(spec: &PrivacySpec, budget: TcdpBudget) -> Result<AccountingReport> {
    let conversion = tcdp_to_dp(budget, spec.delta)?;
    let mut warnings = conversion.warnings;
    warnings.extend(check_amplification_preconditions(spec).warnings());
    Ok(AccountingReport {
        rho_total: budget.rho,
        omega_total: budget.omega,
        epsilon: conversion.budget.epsilon,
        delta: spec.delta,
        warnings,
    })
}
