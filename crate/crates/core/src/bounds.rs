//! Fisher information and Cramér-Rao bounds for `theta = [x, y, p_r0, eta]`.
//!
//! The position bound is the `(x, y)` block of `F^-1` with `p_r0` and `eta`
//! kept as nuisance parameters in the inversion. [`TraceMode::Full`] gives the
//! trace over all four parameters instead.

use nalgebra::{DMatrix, Matrix4, RowVector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{
    build_covariance, effective_count, mean_correlation, CorrelationKernel, CovarianceMatrix,
    KernelKind,
};
use crate::error::{Error, Result};
use crate::geometry::{distance, perimeter_positions, Point, SetupConfig};
use crate::noisegen::EIGEN_CLIP;
use crate::propagation::PropagationParams;

/// Covariances at or above this condition number are treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Relative eigenvalue floor below which a Fisher matrix is rank deficient.
const FISHER_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// `[x, y, p_r0, eta]`
    PositionPowerExponent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    pub entries: Matrix4<f64>,
    pub parameterization: Parameterization,
    /// Set when the covariance had to be pseudo-inverted.
    pub regularized: bool,
}

impl FisherMatrix {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            entries: self.entries * factor,
            ..self.clone()
        }
    }
}

/// How [`fisher`] treats a singular or ill-conditioned covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inversion {
    /// Refuse with [`Error::Degenerate`].
    Exact,
    /// Pseudo-invert over the eigenvalues retained by the clip.
    Regularized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    #[default]
    Position,
    Full,
}

/// Jacobian of the mean powers with respect to `[x, y, p_r0, eta]`,
/// evaluated with the transmitter at `blind`; one row per position.
pub fn mean_jacobian(
    params: &PropagationParams,
    positions: &[Point],
    blind: &Point,
) -> Result<DMatrix<f64>> {
    let b = params.log_slope();
    let mut j = DMatrix::<f64>::zeros(positions.len(), 4);
    for (i, p) in positions.iter().enumerate() {
        let r = distance(p, blind);
        if !(r > 0.0) {
            return Err(Error::Domain(format!(
                "position {i} coincides with the transmitter"
            )));
        }
        let r2 = r * r;
        j.set_row(
            i,
            &RowVector4::new(
                -b * (blind.x - p.x) / r2,
                -b * (blind.y - p.y) / r2,
                1.0,
                -10.0 * (r / params.r0).log10(),
            ),
        );
    }
    Ok(j)
}

/// `F = J^T C^-1 J`.
pub fn fisher(
    j: &DMatrix<f64>,
    cov: &CovarianceMatrix,
    inversion: Inversion,
) -> Result<FisherMatrix> {
    let n = j.nrows();
    if cov.dim() != n || j.ncols() != 4 {
        return Err(Error::InvalidConfig(format!(
            "jacobian is {}x{} but covariance is {}x{}",
            n,
            j.ncols(),
            cov.dim(),
            cov.dim()
        )));
    }
    let wrap = |m: DMatrix<f64>, regularized: bool| FisherMatrix {
        entries: Matrix4::from_fn(|a, b| 0.5 * (m[(a, b)] + m[(b, a)])),
        parameterization: Parameterization::PositionPowerExponent,
        regularized,
    };

    if cov.is_diagonal() {
        let d = cov.entries.diagonal();
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Degenerate("covariance has a zero variance".into()));
        }
        let mut weighted = j.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row /= d[i];
        }
        return Ok(wrap(j.transpose() * weighted, false));
    }

    let threshold = EIGEN_CLIP * cov.sigma_db * cov.sigma_db;
    match inversion {
        Inversion::Exact => {
            let eig = cov.entries.clone().symmetric_eigenvalues();
            let (lo, hi) = eig
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            if lo <= threshold || hi / lo >= CONDITION_LIMIT {
                return Err(Error::Degenerate(format!(
                    "covariance is singular (condition number {:.3e}); the bound needs regularization",
                    if lo > 0.0 { hi / lo } else { f64::INFINITY }
                )));
            }
            Ok(wrap(whitened_gram(j, cov)?, false))
        }
        Inversion::Regularized => {
            let eig = cov.entries.clone().symmetric_eigen();
            let hi = eig.eigenvalues.max();
            let floor = threshold.max(hi / CONDITION_LIMIT);
            let projected = eig.eigenvectors.transpose() * j;
            let mut f = DMatrix::<f64>::zeros(4, 4);
            let mut clipped = false;
            for k in 0..n {
                let l = eig.eigenvalues[k];
                if l <= floor {
                    clipped = true;
                    continue;
                }
                let row = projected.row(k);
                f += row.transpose() * row / l;
            }
            Ok(wrap(f, clipped))
        }
    }
}

/// `(L^-1 J)^T (L^-1 J)` with `C = L L^T`.
fn whitened_gram(j: &DMatrix<f64>, cov: &CovarianceMatrix) -> Result<DMatrix<f64>> {
    let chol = cov
        .entries
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Degenerate("covariance is not positive definite".into()))?;
    let whitened = chol
        .l()
        .solve_lower_triangular(j)
        .ok_or_else(|| Error::Degenerate("singular Cholesky factor".into()))?;
    Ok(whitened.transpose() * whitened)
}

fn invert(f: &FisherMatrix) -> Result<Matrix4<f64>> {
    let eig = f.entries.symmetric_eigenvalues();
    let hi = eig.max();
    let lo = eig.min();
    if !(hi > 0.0) || lo <= FISHER_RANK_TOL * hi {
        return Err(Error::RankDeficient(format!(
            "Fisher matrix eigenvalues span [{lo:.3e}, {hi:.3e}]; the bound is undefined"
        )));
    }
    f.entries
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::RankDeficient("Fisher matrix is not positive definite".into()))
}

/// Lower bound on the position RMSE, `sqrt([F^-1]_xx + [F^-1]_yy)`, or the
/// square root of the full trace.
pub fn crlb_rmse(f: &FisherMatrix, mode: TraceMode) -> Result<f64> {
    let inv = invert(f)?;
    Ok(match mode {
        TraceMode::Position => (inv[(0, 0)] + inv[(1, 1)]).sqrt(),
        TraceMode::Full => inv.trace().sqrt(),
    })
}

/// Independent-noise bound inflated by `sqrt(n / n_eff)`.
pub fn bienayme_bound(
    f_indep: &FisherMatrix,
    n: usize,
    n_eff: f64,
    mode: TraceMode,
) -> Result<f64> {
    if !(n_eff > 0.0) || n_eff > n as f64 * (1.0 + 1e-12) {
        return Err(Error::Domain(format!("n_eff {n_eff} must lie in (0, {n}]")));
    }
    Ok((n as f64 / n_eff).sqrt() * crlb_rmse(f_indep, mode)?)
}

/// Bounds for one sampling density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub density_per_lambda: f64,
    pub n: usize,
    pub rho_bar: f64,
    pub n_eff: f64,
    pub rmse_crlb_indep: f64,
    pub rmse_crlb_correlated: Option<f64>,
    pub rmse_bienayme: f64,
    pub condition_number: f64,
    pub degenerate: bool,
}

fn condition_number(cov: &CovarianceMatrix) -> f64 {
    if cov.is_diagonal() {
        let d = cov.entries.diagonal();
        return d.max() / d.min();
    }
    let eig = cov.entries.clone().symmetric_eigenvalues();
    let lo = eig.min();
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        eig.max() / lo
    }
}

/// Independent-noise CRLB and Bienaymé bound for an explicit position list,
/// without the covariance condition analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceBounds {
    pub rho_bar: f64,
    pub n_eff: f64,
    pub crlb_indep: f64,
    pub bienayme: f64,
}

pub fn reference_bounds(
    params: &PropagationParams,
    kernel: &CorrelationKernel,
    positions: &[Point],
    blind: &Point,
    mode: TraceMode,
) -> Result<ReferenceBounds> {
    if !(params.sigma_db > 0.0) {
        return Err(Error::Domain("bounds need sigma_db > 0".into()));
    }
    let n = positions.len();
    let j = mean_jacobian(params, positions, blind)?;
    let white = CovarianceMatrix {
        entries: DMatrix::identity(n, n) * params.sigma_db.powi(2),
        sigma_db: params.sigma_db,
    };
    let f_indep = fisher(&j, &white, Inversion::Exact)?;
    let crlb_indep = crlb_rmse(&f_indep, mode)?;
    let rho_bar = if n >= 2 {
        mean_correlation(kernel, positions)?
    } else {
        0.0
    };
    let n_eff = effective_count(n, rho_bar)?;
    let bienayme = bienayme_bound(&f_indep, n, n_eff, mode)?;
    Ok(ReferenceBounds {
        rho_bar,
        n_eff,
        crlb_indep,
        bienayme,
    })
}

/// Bounds at a single density, evaluated at the true transmitter position.
pub fn bound_at_density(
    cfg: &SetupConfig,
    params: &PropagationParams,
    kernel: &CorrelationKernel,
    density: f64,
    mode: TraceMode,
) -> Result<BoundReport> {
    if !(params.sigma_db > 0.0) {
        return Err(Error::Domain("bounds need sigma_db > 0".into()));
    }
    params.validate()?;
    kernel.validate()?;
    let cfg = cfg.with_density(density)?;
    let positions = perimeter_positions(&cfg)?;
    let n = positions.len();
    let reference = reference_bounds(params, kernel, &positions, &cfg.blind_position, mode)?;
    let rmse_crlb_indep = reference.crlb_indep;

    let (condition_number, rmse_crlb_correlated, degenerate) =
        if kernel.kind == KernelKind::Independent {
            (1.0, Some(rmse_crlb_indep), false)
        } else {
            let cov = build_covariance(kernel, &positions, params.sigma_db);
            let cond = condition_number(&cov);
            if cond < CONDITION_LIMIT {
                let j = mean_jacobian(params, &positions, &cfg.blind_position)?;
                match whitened_gram(&j, &cov) {
                    Ok(m) => {
                        let f = FisherMatrix {
                            entries: Matrix4::from_fn(|a, b| 0.5 * (m[(a, b)] + m[(b, a)])),
                            parameterization: Parameterization::PositionPowerExponent,
                            regularized: false,
                        };
                        (cond, Some(crlb_rmse(&f, mode)?), false)
                    }
                    Err(Error::Degenerate(_)) => (cond, None, true),
                    Err(e) => return Err(e),
                }
            } else {
                (cond, None, true)
            }
        };

    Ok(BoundReport {
        density_per_lambda: density,
        n,
        rho_bar: reference.rho_bar,
        n_eff: reference.n_eff,
        rmse_crlb_indep,
        rmse_crlb_correlated,
        rmse_bienayme: reference.bienayme,
        condition_number,
        degenerate,
    })
}

/// [`bound_at_density`] over a list of densities, evaluated in parallel and
/// returned in input order.
pub fn bound_sweep(
    cfg: &SetupConfig,
    params: &PropagationParams,
    kernel: &CorrelationKernel,
    densities: &[f64],
    mode: TraceMode,
) -> Result<Vec<BoundReport>> {
    if let Some(d) = densities.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "densities must be positive, got {d}"
        )));
    }
    densities
        .par_iter()
        .map(|&d| bound_at_density(cfg, params, kernel, d, mode))
        .collect()
}
