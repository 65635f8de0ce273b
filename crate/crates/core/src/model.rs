//! Small classifiers with hand-written backpropagation: multinomial softmax
//! regression and a one-hidden-layer perceptron.
//!
//! Parameters live in one flat vector. Softmax regression stores `W`
//! (`classes x input`, row-major) followed by `b`. The MLP stores
//! `W1, b1, W2, b2` in that order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseVector, RandomSource};

/// Probabilities are floored here before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

// Standard SELU constants (Klambauer et al. 2017).
const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Selu,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Selu if a > 0.0 => SELU_LAMBDA * a,
            Activation::Selu => SELU_LAMBDA * SELU_ALPHA * a.exp_m1(),
        }
    }

    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu if a > 0.0 => 1.0,
            Activation::Relu => 0.0,
            Activation::Selu if a > 0.0 => SELU_LAMBDA,
            Activation::Selu => SELU_LAMBDA * SELU_ALPHA * a.exp(),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "selu" => Ok(Activation::Selu),
            other => Err(Error::invalid("activation", format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Selu => "selu",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hidden {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Option<Hidden>,
    pub classes: usize,
}

impl Architecture {
    pub fn softmax_regression(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: None,
            classes,
        }
    }

    pub fn mlp(input_dim: usize, width: usize, activation: Activation, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: Some(Hidden { width, activation }),
            classes,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.hidden {
            None => self.classes * (self.input_dim + 1),
            Some(h) => h.width * (self.input_dim + 1) + self.classes * (h.width + 1),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("classes", "need at least two classes"));
        }
        if matches!(self.hidden, Some(h) if h.width == 0) {
            return Err(Error::invalid("hidden", "width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal,
}

/// `FL(p_t) = -α (1 - p_t)^γ ln p_t`; cross-entropy is `α = 1, γ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub alpha: f64,
    pub gamma: f64,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            alpha: 1.0,
            gamma: 0.0,
        }
    }

    pub fn focal(alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid("focal_alpha", format!("must be positive, got {alpha}")));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::invalid(
                "focal_gamma",
                format!("must be non-negative, got {gamma}"),
            ));
        }
        Ok(Self {
            kind: LossKind::Focal,
            alpha,
            gamma,
        })
    }

    fn coefficients(&self) -> (f64, f64) {
        match self.kind {
            LossKind::CrossEntropy => (1.0, 0.0),
            LossKind::Focal => (self.alpha, self.gamma),
        }
    }

    /// `p dL/dp`, so that `dL/dz_k = factor (δ_ky - p_k)`. This is the
    /// gradient of the unfloored loss: the floor only guards the logarithm,
    /// and confidently wrong predictions keep a useful gradient.
    fn logit_factor(&self, p: f64) -> f64 {
        let (alpha, gamma) = self.coefficients();
        if gamma == 0.0 {
            return -alpha;
        }
        let one_minus = 1.0 - p;
        if one_minus <= 0.0 {
            return 0.0;
        }
        // p dL/dp = α γ (1-p)^(γ-1) p ln p - α (1-p)^γ, with p ln p -> 0 at 0
        let p_log_p = if p > 0.0 { p * p.ln() } else { 0.0 };
        alpha * gamma * one_minus.powf(gamma - 1.0) * p_log_p - alpha * one_minus.powf(gamma)
    }
}

/// Loss of one prediction.
pub fn loss(spec: &LossSpec, probs: &[f64], label: usize) -> f64 {
    let p = probs[label].max(PROBABILITY_FLOOR);
    let (alpha, gamma) = spec.coefficients();
    let modulating = if gamma == 0.0 { 1.0 } else { (1.0 - p).powf(gamma) };
    // -0.0 for p = 1
    (-alpha * modulating * p.ln()).max(0.0)
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Affine map `W x + b` for a `rows x cols` block `W` followed by `b`.
fn affine(params: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut Vec<f64>) {
    let (w, b) = params.split_at(rows * cols);
    out.clear();
    out.extend((0..rows).map(|r| {
        let row = &w[r * cols..(r + 1) * cols];
        b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }));
}

/// Accumulates `scale * (dz ⊗ x, dz)` into a `rows x cols` block plus bias.
fn accumulate_outer(grad: &mut [f64], dz: &[f64], x: &[f64], scale: f64) {
    let cols = x.len();
    let (gw, gb) = grad.split_at_mut(dz.len() * cols);
    for (r, &d) in dz.iter().enumerate() {
        let d = d * scale;
        if d == 0.0 {
            continue;
        }
        for (g, &xi) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *g += d * xi;
        }
        gb[r] += d;
    }
}

/// Intermediate values of one forward pass.
struct Trace {
    pre_activation: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

/// Parameters plus architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    arch: Architecture,
    params: Vec<f64>,
}

impl ModelState {
    pub fn new(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                actual: params.len(),
            });
        }
        let params = DenseVector::new(params)?.into_inner();
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        Self::new(arch, vec![0.0; arch.param_count()])
    }

    /// Uniform in `±1/sqrt(fan_in)` for every weight and bias of a layer.
    pub fn init(arch: Architecture, rng: &mut RandomSource) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::with_capacity(arch.param_count());
        let mut layer = |rows: usize, fan_in: usize, params: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..rows * (fan_in + 1) {
                params.push((2.0 * rng.uniform() - 1.0) * bound);
            }
        };
        match arch.hidden {
            None => layer(arch.classes, arch.input_dim, &mut params),
            Some(h) => {
                layer(h.width, arch.input_dim, &mut params);
                layer(arch.classes, h.width, &mut params);
            }
        }
        Self::new(arch, params)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Replaces the parameters, rejecting non-finite values.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params = DenseVector::new(params)?.into_inner();
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let classes = self.arch.classes;
        let d = self.arch.input_dim;
        let mut probs = Vec::with_capacity(classes);
        match self.arch.hidden {
            None => {
                affine(&self.params, classes, d, x, &mut probs);
                softmax_in_place(&mut probs);
                Trace {
                    pre_activation: Vec::new(),
                    hidden: Vec::new(),
                    probs,
                }
            }
            Some(h) => {
                let split = h.width * (d + 1);
                let mut pre = Vec::with_capacity(h.width);
                affine(&self.params[..split], h.width, d, x, &mut pre);
                let hidden: Vec<f64> = pre.iter().map(|&a| h.activation.apply(a)).collect();
                affine(&self.params[split..], classes, h.width, &hidden, &mut probs);
                softmax_in_place(&mut probs);
                Trace {
                    pre_activation: pre,
                    hidden,
                    probs,
                }
            }
        }
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).probs)
    }

    /// Index of the most probable class (lowest index on ties).
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let probs = self.forward(x)?;
        Ok(argmax(&probs))
    }

    pub fn loss_at(&self, spec: &LossSpec, x: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        Ok(loss(spec, &self.forward(x)?, label))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.arch.classes {
            return Err(Error::invalid(
                "label",
                format!("{label} out of range for {} classes", self.arch.classes),
            ));
        }
        Ok(())
    }

    /// Adds `scale * ∇θ loss(x, y)` into `grad`; returns the loss.
    fn backprop_into(&self, spec: &LossSpec, x: &[f64], label: usize, scale: f64, grad: &mut [f64]) -> f64 {
        let trace = self.trace(x);
        let probs = &trace.probs;
        let factor = spec.logit_factor(probs[label]);
        let dz: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, &p)| factor * (f64::from(u8::from(k == label)) - p))
            .collect();
        let d = self.arch.input_dim;
        match self.arch.hidden {
            None => accumulate_outer(grad, &dz, x, scale),
            Some(h) => {
                let split = h.width * (d + 1);
                let (g1, g2) = grad.split_at_mut(split);
                accumulate_outer(g2, &dz, &trace.hidden, scale);
                let w2 = &self.params[split..split + self.arch.classes * h.width];
                let da: Vec<f64> = (0..h.width)
                    .map(|j| {
                        let back: f64 = dz.iter().enumerate().map(|(k, &g)| g * w2[k * h.width + j]).sum();
                        back * h.activation.derivative(trace.pre_activation[j])
                    })
                    .collect();
                accumulate_outer(g1, &da, x, scale);
            }
        }
        loss(spec, probs, label)
    }

    /// Gradient of the loss of a single sample with respect to every parameter.
    pub fn per_sample_gradient(&self, spec: &LossSpec, x: &[f64], label: usize) -> Result<DenseVector> {
        self.loss_and_gradient(spec, x, label).map(|(_, g)| g)
    }

    /// Loss and per-sample gradient from one forward/backward pass.
    pub fn loss_and_gradient(&self, spec: &LossSpec, x: &[f64], label: usize) -> Result<(f64, DenseVector)> {
        self.check_input(x)?;
        self.check_label(label)?;
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.backprop_into(spec, x, label, 1.0, &mut grad);
        Ok((loss, DenseVector::new(grad)?))
    }

    /// Gradient of the mean loss over a batch, accumulated in one buffer.
    /// Returns the gradient and the mean loss.
    pub fn batch_gradient(&self, spec: &LossSpec, xs: &[&[f64]], labels: &[usize]) -> Result<(DenseVector, f64)> {
        if xs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.len(),
                actual: labels.len(),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        if xs.is_empty() {
            return Ok((DenseVector::new(grad)?, 0.0));
        }
        let scale = 1.0 / xs.len() as f64;
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(labels) {
            self.check_input(x)?;
            self.check_label(y)?;
            total += self.backprop_into(spec, x, y, scale, &mut grad);
        }
        Ok((DenseVector::new(grad)?, total * scale))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
