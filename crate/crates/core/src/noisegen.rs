//! Correlated Gaussian shadowing noise and synthetic measurement sets.
//!
//! Sampling uses the eigen route for every covariance: `C = V diag(l) V^T`,
//! eigenvalues below `1e-10 * sigma_db^2` are clipped to zero and draws are
//! `V_r diag(sqrt(l_r)) z` over the retained subspace. Singular (sinc2 above
//! the Nyquist density) and regular covariances share this path. A diagonal
//! covariance is its own eigen-decomposition and skips the solver.
//!
//! # Seed schema
//!
//! One master seed drives a ChaCha8 generator; each draw gets its own stream:
//!
//! * spatial draw `i` uses stream `i`,
//! * temporal (per-repeat) noise for draw `i` uses stream `i | 2^63`.
//!
//! Draw `i` therefore depends only on `(seed, i)`, so draws may be generated
//! in any order or in parallel without changing the result.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{build_covariance, CorrelationKernel, CovarianceMatrix};
use crate::error::{Error, Result};
use crate::geometry::{perimeter_positions, Point, SetupConfig};
use crate::propagation::{mean_power_vector, PropagationParams};

/// Eigenvalues below this multiple of `sigma_db^2` are treated as zero.
pub const EIGEN_CLIP: f64 = 1e-10;

/// Clipping may discard at most this fraction of the total variance.
const MAX_DISCARDED_VARIANCE: f64 = 0.999;

const TEMPORAL_STREAM: u64 = 1 << 63;

/// Generator for draw `stream` under master `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
enum Factor {
    Zero,
    Diagonal(Vec<f64>),
    /// n x r, columns scaled by the square roots of the retained eigenvalues.
    Dense(DMatrix<f64>),
}

/// Square-root factor of a covariance matrix, ready for repeated draws.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    dim: usize,
    rank: usize,
    clipped: bool,
    factor: Factor,
}

impl NoiseSampler {
    pub fn new(cov: &CovarianceMatrix) -> Result<Self> {
        let n = cov.dim();
        let var = cov.sigma_db * cov.sigma_db;
        let trace = cov.entries.trace();
        if n == 0 {
            return Err(Error::Empty("covariance has no rows".into()));
        }
        if var == 0.0 || trace == 0.0 {
            return Ok(Self {
                dim: n,
                rank: 0,
                clipped: false,
                factor: Factor::Zero,
            });
        }
        let threshold = EIGEN_CLIP * var;

        if cov.is_diagonal() {
            let d: Vec<f64> = cov.entries.diagonal().iter().copied().collect();
            let rank = d.iter().filter(|&&v| v > threshold).count();
            let stds = d
                .iter()
                .map(|&v| if v > threshold { v.sqrt() } else { 0.0 })
                .collect();
            return Ok(Self {
                dim: n,
                rank,
                clipped: rank < n,
                factor: Factor::Diagonal(stds),
            });
        }

        let eig = cov.entries.clone().symmetric_eigen();
        let retained: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > threshold).collect();
        let kept: f64 = retained.iter().map(|&k| eig.eigenvalues[k]).sum();
        if kept < (1.0 - MAX_DISCARDED_VARIANCE) * trace {
            return Err(Error::Decomposition(format!(
                "eigenvalue clipping removed {:.4}% of the total variance",
                100.0 * (1.0 - kept / trace)
            )));
        }
        let mut factor = DMatrix::<f64>::zeros(n, retained.len());
        for (col, &k) in retained.iter().enumerate() {
            let s = eig.eigenvalues[k].sqrt();
            factor.set_column(col, &(eig.eigenvectors.column(k) * s));
        }
        Ok(Self {
            dim: n,
            rank: retained.len(),
            clipped: retained.len() < n,
            factor: Factor::Dense(factor),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of eigenvalues kept above the clip threshold.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// True when clipping removed at least one direction.
    pub fn clipped(&self) -> bool {
        self.clipped
    }

    /// One zero-mean draw from the regularized covariance.
    pub fn draw(&self, seed: u64, stream: u64) -> DVector<f64> {
        let mut rng = stream_rng(seed, stream);
        match &self.factor {
            Factor::Zero => DVector::zeros(self.dim),
            Factor::Diagonal(stds) => DVector::from_iterator(
                self.dim,
                stds.iter()
                    .map(|s| s * rng.sample::<f64, _>(StandardNormal)),
            ),
            Factor::Dense(f) => {
                let z = DVector::from_iterator(
                    f.ncols(),
                    (0..f.ncols()).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                f * z
            }
        }
    }
}

/// `draws` independent rows from `N(0, C_reg)`; row `i` uses stream `i`.
pub fn sample_noise(cov: &CovarianceMatrix, seed: u64, draws: usize) -> Result<DMatrix<f64>> {
    let sampler = NoiseSampler::new(cov)?;
    let rows: Vec<DVector<f64>> = (0..draws as u64)
        .into_par_iter()
        .map(|i| sampler.draw(seed, i))
        .collect();
    let mut out = DMatrix::<f64>::zeros(draws, cov.dim());
    for (i, row) in rows.iter().enumerate() {
        out.set_row(i, &row.transpose());
    }
    Ok(out)
}

/// Reference positions with their measured or synthesized powers.
///
/// `powers` is laid out position-major: entry `i * repeats + r` is repeat `r`
/// at position `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub positions: Vec<Point>,
    pub powers: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
}

impl MeasurementSet {
    pub fn new(positions: Vec<Point>, powers: Vec<f64>, repeats: usize, seed: u64) -> Result<Self> {
        let set = Self {
            positions,
            powers,
            repeats,
            seed,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be >= 1".into()));
        }
        if self.powers.len() != self.positions.len() * self.repeats {
            return Err(Error::InvalidConfig(format!(
                "{} powers for {} positions x {} repeats",
                self.powers.len(),
                self.positions.len(),
                self.repeats
            )));
        }
        if let Some(i) = self.powers.iter().position(|p| !p.is_finite()) {
            return Err(Error::Domain(format!("power {i} is not finite")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.powers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers.is_empty()
    }

    /// Position of measurement `k`.
    pub fn position_of(&self, k: usize) -> &Point {
        &self.positions[k / self.repeats]
    }

    /// Iterates `(position, power)` over every measurement.
    pub fn measurements(&self) -> impl Iterator<Item = (&Point, f64)> + '_ {
        self.powers
            .iter()
            .enumerate()
            .map(move |(k, &p)| (self.position_of(k), p))
    }

    /// Powers of one repeat, one per position.
    pub fn repeat(&self, r: usize) -> Vec<f64> {
        (0..self.positions.len())
            .map(|i| self.powers[i * self.repeats + r])
            .collect()
    }
}

/// Precomputed geometry, mean powers and noise factor for repeated synthesis.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    positions: Vec<Point>,
    mean: Vec<f64>,
    sampler: NoiseSampler,
    temporal_sigma_db: f64,
}

impl Synthesizer {
    pub fn new(
        cfg: &SetupConfig,
        params: &PropagationParams,
        kernel: &CorrelationKernel,
    ) -> Result<Self> {
        params.validate()?;
        kernel.validate()?;
        let positions = perimeter_positions(cfg)?;
        let mean = mean_power_vector(
            params,
            &positions,
            &cfg.blind_position,
            cfg.min_far_field_distance,
        )?;
        let cov = build_covariance(kernel, &positions, params.sigma_db);
        let sampler = NoiseSampler::new(&cov)?;
        Ok(Self {
            positions,
            mean,
            sampler,
            temporal_sigma_db: 0.0,
        })
    }

    /// Adds independent per-repeat noise of the given standard deviation on
    /// top of the shared spatial draw. The default of 0 dB makes repeats
    /// duplicates of the spatial draw.
    pub fn with_temporal_noise(mut self, sigma_db: f64) -> Result<Self> {
        if !(sigma_db >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temporal noise must be >= 0 dB, got {sigma_db}"
            )));
        }
        self.temporal_sigma_db = sigma_db;
        Ok(self)
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sampler(&self) -> &NoiseSampler {
        &self.sampler
    }

    /// Measurement set for draw `index` under master `seed`.
    pub fn draw(&self, seed: u64, index: u64, repeats: usize) -> Result<MeasurementSet> {
        if repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be >= 1".into()));
        }
        let spatial = self.sampler.draw(seed, index);
        let mut temporal =
            (self.temporal_sigma_db > 0.0).then(|| stream_rng(seed, index | TEMPORAL_STREAM));
        let mut powers = Vec::with_capacity(self.positions.len() * repeats);
        for (i, m) in self.mean.iter().enumerate() {
            let base = m + spatial[i];
            for _ in 0..repeats {
                let extra = match temporal.as_mut() {
                    Some(rng) => self.temporal_sigma_db * rng.sample::<f64, _>(StandardNormal),
                    None => 0.0,
                };
                powers.push(base + extra);
            }
        }
        MeasurementSet::new(self.positions.clone(), powers, repeats, seed)
    }
}

/// One synthetic measurement set: mean powers plus a single spatially
/// correlated draw shared by all repeats.
pub fn synthesize(
    cfg: &SetupConfig,
    params: &PropagationParams,
    kernel: &CorrelationKernel,
    repeats: usize,
    seed: u64,
) -> Result<MeasurementSet> {
    Synthesizer::new(cfg, params, kernel)?.draw(seed, 0, repeats)
}
