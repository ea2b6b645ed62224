//! Spatial correlation kernels, covariance assembly, the mean pairwise
//! correlation and the effective number of measurements it implies.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Independent,
    /// `(sin(k0 d) / (k0 d))^2`, the far-field diffraction pattern.
    DiffractionSinc2,
    /// `exp(-2 d / chi)`.
    Exponential,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Independent => "independent",
            KernelKind::DiffractionSinc2 => "sinc2",
            KernelKind::Exponential => "exponential",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(KernelKind::Independent),
            "sinc2" | "diffraction_sinc2" => Ok(KernelKind::DiffractionSinc2),
            "exponential" | "exp" => Ok(KernelKind::Exponential),
            other => Err(Error::InvalidConfig(format!(
                "unknown correlation kernel '{other}' (expected independent, sinc2 or exponential)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationKernel {
    pub kind: KernelKind,
    pub wavelength: f64,
    /// Correlation length chi, only used by the exponential kernel.
    pub correlation_length: f64,
}

impl CorrelationKernel {
    /// Builds a kernel for `wavelength`; the correlation length defaults to
    /// half a wavelength.
    pub fn new(kind: KernelKind, wavelength: f64) -> Self {
        Self {
            kind,
            wavelength,
            correlation_length: wavelength / 2.0,
        }
    }

    pub fn independent() -> Self {
        Self::new(KernelKind::Independent, 1.0)
    }

    pub fn sinc2(wavelength: f64) -> Self {
        Self::new(KernelKind::DiffractionSinc2, wavelength)
    }

    pub fn exponential(wavelength: f64, chi: f64) -> Self {
        Self {
            kind: KernelKind::Exponential,
            wavelength,
            correlation_length: chi,
        }
    }

    pub fn with_correlation_length(mut self, chi: f64) -> Self {
        self.correlation_length = chi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            KernelKind::Independent => Ok(()),
            KernelKind::DiffractionSinc2 if !(self.wavelength > 0.0) => Err(Error::InvalidConfig(
                "sinc2 kernel needs a positive wavelength".into(),
            )),
            KernelKind::Exponential if !(self.correlation_length > 0.0) => Err(
                Error::InvalidConfig("exponential kernel needs a positive chi".into()),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, dx: f64) -> f64 {
        match self.kind {
            KernelKind::Independent => {
                if dx == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            KernelKind::DiffractionSinc2 => {
                let u = std::f64::consts::TAU / self.wavelength * dx;
                if u == 0.0 {
                    1.0
                } else {
                    let s = u.sin() / u;
                    s * s
                }
            }
            KernelKind::Exponential => (-2.0 * dx / self.correlation_length).exp(),
        }
    }

    /// Correlation coefficient at separation `dx` (meters).
    pub fn eval(&self, dx: f64) -> Result<f64> {
        if !(dx >= 0.0) {
            return Err(Error::Domain(format!("separation must be >= 0, got {dx}")));
        }
        Ok(self.eval_unchecked(dx))
    }
}

/// Noise covariance in dB^2; entries are `rho(|x_i - x_j|) * sigma_db^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    pub entries: DMatrix<f64>,
    pub sigma_db: f64,
}

impl CovarianceMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|j| (0..n).all(|i| i == j || self.entries[(i, j)] == 0.0))
    }
}

pub fn build_covariance(
    kernel: &CorrelationKernel,
    positions: &[Point],
    sigma_db: f64,
) -> CovarianceMatrix {
    let n = positions.len();
    let var = sigma_db * sigma_db;
    let mut entries = DMatrix::<f64>::zeros(n, n);
    if kernel.kind == KernelKind::Independent {
        entries.fill_diagonal(var);
        return CovarianceMatrix { entries, sigma_db };
    }
    // Upper triangle by row, mirrored so the result is bitwise symmetric.
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| kernel.eval_unchecked(distance(&positions[i], &positions[j])) * var)
                .collect()
        })
        .collect();
    for (i, row) in rows.into_iter().enumerate() {
        entries[(i, i)] = var;
        for (offset, v) in row.into_iter().enumerate() {
            let j = i + 1 + offset;
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    CovarianceMatrix { entries, sigma_db }
}

/// Average correlation over the `n (n - 1)` ordered pairs of distinct positions.
pub fn mean_correlation(kernel: &CorrelationKernel, positions: &[Point]) -> Result<f64> {
    let n = positions.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "mean correlation needs at least 2 positions, got {n}"
        )));
    }
    if kernel.kind == KernelKind::Independent {
        return Ok(0.0);
    }
    let row_sums: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| kernel.eval_unchecked(distance(&positions[i], &positions[j])))
                .sum()
        })
        .collect();
    let upper: f64 = row_sums.iter().sum();
    Ok(2.0 * upper / (n as f64 * (n as f64 - 1.0)))
}

/// Effective number of independent measurements, `n / (1 + (n - 1) rho_bar)`.
pub fn effective_count(n: usize, rho_bar: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("measurement count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&rho_bar) {
        return Err(Error::Domain(format!(
            "mean correlation must lie in [0, 1], got {rho_bar}"
        )));
    }
    let n = n as f64;
    Ok(n / (1.0 + (n - 1.0) * rho_bar))
}

/// Variance of an equally weighted mean of `n` measurements with mean
/// correlation `rho_bar`, as a multiple of the single-measurement variance.
pub fn bienayme_variance_factor(n: usize, rho_bar: f64) -> f64 {
    let n = n as f64;
    1.0 / n + (n - 1.0) / n * rho_bar
}
