//! Dense vectors and matrices, L2 norms, and the seeded random source.
//!
//! Every public constructor and arithmetic operation verifies that the
//! result is finite; a NaN or infinity surfaces as [`Error::NonFinite`]
//! instead of silently propagating into a privacy mechanism.
//!
//! Gaussian samples come from a ChaCha12 stream through the Box–Muller
//! transform:
//!
//! ```text
//! u1 = 1 - (x1 >> 11) * 2^-53     in (0, 1]
//! u2 =     (x2 >> 11) * 2^-53     in [0, 1)
//! r  = sqrt(-2 ln u1)
//! z0 = r cos(2π u2),  z1 = r sin(2π u2)
//! ```
//!
//! where `x1`, `x2` are consecutive 64-bit outputs. Both `z0` and `z1` are
//! used, in that order.

use std::f64::consts::TAU;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Sum of squares followed by a square root.
pub fn l2_norm_slice(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A finite, fixed-length vector of doubles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm_slice(&self.0)
    }

    /// `factor * self`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &DenseVector) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &DenseVector) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
        check_finite(&self.0)
    }

    pub fn dot(&self, other: &DenseVector) -> Result<f64> {
        if other.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

/// Euclidean norm of a vector. Finiteness is guaranteed by construction.
pub fn l2_norm(v: &DenseVector) -> f64 {
    v.l2_norm()
}

/// Row-major matrix of finite doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Assembles a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// New matrix holding the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Deterministic random source keyed by `(seed, stream)`.
///
/// Not for concurrent mutation: hand each worker its own [`RandomSource::child`].
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    stream: u64,
    rng: ChaCha12Rng,
    spare_normal: Option<f64>,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            seed,
            stream,
            rng,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent stream for a sub-task. The child depends only on this
    /// source's `(seed, stream)` and `id`, never on how much of the parent
    /// has been consumed.
    pub fn child(&self, id: u64) -> Self {
        let stream = splitmix64(self.stream ^ splitmix64(id.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..bound` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "bound must be positive");
        let bound = bound as u64;
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let wide = u128::from(self.next_u64()) * u128::from(bound);
            if (wide as u64) >= threshold {
                return (wide >> 64) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (sin, cos) = (TAU * u2).sin_cos();
        self.spare_normal = Some(r * sin);
        r * cos
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `dim` i.i.d. samples from `N(0, variance)`. Zero variance yields an
    /// exact zero vector and consumes no randomness.
    pub fn gaussian_noise(&mut self, dim: usize, variance: f64) -> Result<DenseVector> {
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::invalid(
                "variance",
                format!("must be finite and non-negative, got {variance}"),
            ));
        }
        if variance == 0.0 {
            return Ok(DenseVector::zeros(dim));
        }
        let std = variance.sqrt();
        DenseVector::new((0..dim).map(|_| std * self.standard_normal()).collect())
    }
}

/// Free-function form of [`RandomSource::gaussian_noise`].
pub fn gaussian_noise(rng: &mut RandomSource, dim: usize, variance: f64) -> Result<DenseVector> {
    rng.gaussian_noise(dim, variance)
}

/// SplitMix64 finalizer, used to derive well-mixed stream ids and seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
