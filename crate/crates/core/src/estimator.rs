//! Calibration of the shadowing model at a known transmitter position, and
//! bound-constrained maximum-likelihood localization.
//!
//! The localizer treats noise as independent (`C = I sigma^2`) even when the
//! data are correlated, so the objective is the plain residual sum of squares
//! and `sigma` drops out of the argmin. It is solved with a damped
//! Gauss-Newton (Levenberg-Marquardt) iteration whose iterates are projected
//! onto the box `x in bounds_x`, `y in bounds_y`, `eta >= eta_floor`.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance, Interval, Point, SetupConfig};
use crate::noisegen::MeasurementSet;
use crate::propagation::PropagationParams;

/// Parameter vector `[x, y, p_r0, eta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub x: f64,
    pub y: f64,
    pub p_r0: f64,
    pub eta: f64,
}

impl Theta {
    fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.p_r0, self.eta)
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    XLow,
    XHigh,
    YLow,
    YHigh,
    EtaFloor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub x_mle: f64,
    pub y_mle: f64,
    pub p_r0_mle: f64,
    pub eta_mle: f64,
    /// Residual sum of squares at the returned parameters.
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub active_constraints: Vec<Constraint>,
    /// Index of the start that produced this result.
    pub start_index: usize,
}

impl EstimateResult {
    pub fn theta(&self) -> Theta {
        Theta {
            x: self.x_mle,
            y: self.y_mle,
            p_r0: self.p_r0_mle,
            eta: self.eta_mle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocateOptions {
    pub bounds_x: Interval,
    pub bounds_y: Interval,
    pub r0: f64,
    pub eta_floor: f64,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub max_iterations: usize,
}

impl LocateOptions {
    pub fn new(bounds_x: Interval, bounds_y: Interval) -> Self {
        Self {
            bounds_x,
            bounds_y,
            r0: 1.0,
            eta_floor: 1e-3,
            gradient_tolerance: 1e-9,
            step_tolerance: 1e-12,
            max_iterations: 500,
        }
    }

    pub fn from_config(cfg: &SetupConfig) -> Self {
        Self::new(cfg.bounds_x, cfg.bounds_y)
    }

    fn project(&self, v: &mut Vector4<f64>) {
        v[0] = self.bounds_x.clamp(v[0]);
        v[1] = self.bounds_y.clamp(v[1]);
        v[3] = v[3].max(self.eta_floor);
    }

    /// Default starts: the square center, then the points halfway between the
    /// center and the midpoint of each side (bottom, right, top, left).
    pub fn start_positions(&self) -> [Point; 5] {
        let cx = self.bounds_x.midpoint();
        let cy = self.bounds_y.midpoint();
        let hx = self.bounds_x.width() / 4.0;
        let hy = self.bounds_y.width() / 4.0;
        [
            Point::new(cx, cy),
            Point::new(cx, cy - hy),
            Point::new(cx + hx, cy),
            Point::new(cx, cy + hy),
            Point::new(cx - hx, cy),
        ]
    }
}

/// Closed-form least-squares fit of `(p_r0, eta)` with regressor
/// `-10 log10(r / r0)`.
fn fit_log_distance(meas: &MeasurementSet, blind: &Point, r0: f64) -> Result<(f64, f64, f64)> {
    if meas.is_empty() {
        return Err(Error::Empty("no measurements to calibrate".into()));
    }
    let mut g = Vec::with_capacity(meas.len());
    for (k, (p, _)) in meas.measurements().enumerate() {
        let r = distance(p, blind);
        if !(r > 0.0) {
            return Err(Error::Domain(format!(
                "measurement {k} is at the blind position"
            )));
        }
        g.push(-10.0 * (r / r0).log10());
    }
    let n = g.len() as f64;
    let g_mean = g.iter().sum::<f64>() / n;
    let p_mean = meas.powers.iter().sum::<f64>() / n;
    let sxx: f64 = g.iter().map(|v| (v - g_mean).powi(2)).sum();
    let scale: f64 = g.iter().map(|v| v * v).sum::<f64>().max(1.0);
    if sxx <= 1e-12 * scale {
        return Err(Error::RankDeficient(
            "all measurements are equidistant from the transmitter; eta is unidentifiable".into(),
        ));
    }
    let sxy: f64 = g
        .iter()
        .zip(&meas.powers)
        .map(|(gv, p)| (gv - g_mean) * (p - p_mean))
        .sum();
    let eta = sxy / sxx;
    let p_r0 = p_mean - eta * g_mean;
    let ssr: f64 = g
        .iter()
        .zip(&meas.powers)
        .map(|(gv, p)| (p - p_r0 - eta * gv).powi(2))
        .sum();
    Ok((p_r0, eta, (ssr / n).sqrt()))
}

/// Fits `(p_r0, eta)` with the transmitter position known; `sigma_db` is the
/// residual standard deviation of the fit.
pub fn calibrate(meas: &MeasurementSet, blind: &Point) -> Result<PropagationParams> {
    let (p_r0, eta, sigma_db) = fit_log_distance(meas, blind, 1.0)?;
    if !(eta > 0.0) {
        return Err(Error::Domain(format!(
            "calibrated path-loss exponent {eta} is not positive"
        )));
    }
    Ok(PropagationParams::new(p_r0, eta, sigma_db))
}

struct Linearization {
    objective: f64,
    jtj: Matrix4<f64>,
    /// `J^T r` with `r = P - Pbar`; the gradient of the objective is `-2 J^T r`.
    jtr: Vector4<f64>,
}

fn objective(meas: &MeasurementSet, theta: &Vector4<f64>, r0: f64) -> f64 {
    let blind = Point::new(theta[0], theta[1]);
    meas.measurements()
        .map(|(q, p)| {
            let r = distance(q, &blind);
            let res = p - (theta[2] - 10.0 * theta[3] * (r / r0).log10());
            res * res
        })
        .sum()
}

fn linearize(meas: &MeasurementSet, theta: &Vector4<f64>, r0: f64) -> Linearization {
    let b = 10.0 * theta[3] / std::f64::consts::LN_10;
    let mut objective = 0.0;
    let mut jtj = Matrix4::<f64>::zeros();
    let mut jtr = Vector4::<f64>::zeros();
    for (q, p) in meas.measurements() {
        let dx = theta[0] - q.x;
        let dy = theta[1] - q.y;
        let r2 = dx * dx + dy * dy;
        let log_term = -10.0 * (r2.sqrt() / r0).log10();
        let res = p - (theta[2] + theta[3] * log_term);
        let row = Vector4::new(-b * dx / r2, -b * dy / r2, 1.0, log_term);
        objective += res * res;
        jtj += row * row.transpose();
        jtr += row * res;
    }
    Linearization {
        objective,
        jtj,
        jtr,
    }
}

fn active_constraints(v: &Vector4<f64>, opts: &LocateOptions) -> Vec<Constraint> {
    let mut out = Vec::new();
    if v[0] <= opts.bounds_x.low {
        out.push(Constraint::XLow);
    }
    if v[0] >= opts.bounds_x.high {
        out.push(Constraint::XHigh);
    }
    if v[1] <= opts.bounds_y.low {
        out.push(Constraint::YLow);
    }
    if v[1] >= opts.bounds_y.high {
        out.push(Constraint::YHigh);
    }
    if v[3] <= opts.eta_floor {
        out.push(Constraint::EtaFloor);
    }
    out
}

fn solve_from(
    meas: &MeasurementSet,
    opts: &LocateOptions,
    start: Theta,
    start_index: usize,
) -> EstimateResult {
    let mut theta = start.to_vector();
    opts.project(&mut theta);
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut lin = linearize(meas, &theta, opts.r0);

    'outer: while iterations < opts.max_iterations {
        iterations += 1;
        if !lin.objective.is_finite() {
            break;
        }
        let grad = -2.0 * lin.jtr;
        let mut probe = theta - grad;
        opts.project(&mut probe);
        if (theta - probe).norm() < opts.gradient_tolerance {
            converged = true;
            break;
        }
        loop {
            let mut damped = lin.jtj;
            for k in 0..4 {
                damped[(k, k)] += mu * lin.jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&lin.jtr)) else {
                mu *= 4.0;
                if mu > 1e16 {
                    break 'outer;
                }
                continue;
            };
            let mut candidate = theta + step;
            opts.project(&mut candidate);
            let moved = candidate - theta;
            if moved.fixed_rows::<2>(0).norm() < opts.step_tolerance
                && moved.fixed_rows::<2>(2).norm() < opts.step_tolerance
            {
                converged = true;
                break 'outer;
            }
            let value = objective(meas, &candidate, opts.r0);
            if value.is_finite() && value < lin.objective {
                theta = candidate;
                lin = linearize(meas, &theta, opts.r0);
                mu = (mu / 3.0).max(1e-12);
                break;
            }
            mu *= 4.0;
            if mu > 1e16 {
                break 'outer;
            }
        }
    }

    EstimateResult {
        x_mle: theta[0],
        y_mle: theta[1],
        p_r0_mle: theta[2],
        eta_mle: theta[3],
        objective_value: objective(meas, &theta, opts.r0),
        iterations,
        converged,
        active_constraints: active_constraints(&theta, opts),
        start_index,
    }
}

fn check_geometry(meas: &MeasurementSet) -> Result<()> {
    if meas.len() < 4 {
        return Err(Error::Degenerate(format!(
            "localization needs at least 4 measurements, got {}",
            meas.len()
        )));
    }
    let pts = &meas.positions;
    let a = pts[0];
    let far = pts
        .iter()
        .max_by(|p, q| distance(p, &a).total_cmp(&distance(q, &a)))
        .copied()
        .unwrap_or(a);
    let base = far - a;
    let scale = base.norm();
    let spread = pts
        .iter()
        .map(|p| {
            let d = p - a;
            (base.x * d.y - base.y * d.x).abs()
        })
        .fold(0.0, f64::max);
    if scale == 0.0 || spread <= 1e-9 * scale * scale {
        return Err(Error::Degenerate(
            "localization needs at least 3 non-collinear positions".into(),
        ));
    }
    Ok(())
}

/// Maximum-likelihood transmitter position and propagation parameters.
///
/// With `init = None` the solver runs from every default start (see
/// [`LocateOptions::start_positions`]) with `(p_r0, eta)` warm-started by a
/// calibration at the start position, and keeps the lowest objective; ties go
/// to the lower start index. A non-converged best result is returned inside
/// [`Error::NotConverged`].
pub fn locate(
    meas: &MeasurementSet,
    opts: &LocateOptions,
    init: Option<Theta>,
) -> Result<EstimateResult> {
    meas.validate()?;
    check_geometry(meas)?;

    let starts: Vec<Theta> = match init {
        Some(t) => {
            if !(opts.bounds_x.contains(t.x) && opts.bounds_y.contains(t.y)) {
                return Err(Error::InfeasibleStart(format!(
                    "start ({}, {}) lies outside the search box",
                    t.x, t.y
                )));
            }
            if !(t.eta > 0.0) || !t.p_r0.is_finite() {
                return Err(Error::InfeasibleStart(format!(
                    "start eta {} must be > 0",
                    t.eta
                )));
            }
            vec![t]
        }
        None => opts
            .start_positions()
            .iter()
            .map(|s| {
                let (p_r0, eta) = match fit_log_distance(meas, s, opts.r0) {
                    Ok((p, e, _)) => (p, e.max(opts.eta_floor)),
                    Err(_) => (meas.powers.iter().sum::<f64>() / meas.len() as f64, 2.0),
                };
                Theta {
                    x: s.x,
                    y: s.y,
                    p_r0,
                    eta,
                }
            })
            .collect(),
    };

    let mut best: Option<EstimateResult> = None;
    for (index, start) in starts.into_iter().enumerate() {
        let result = solve_from(meas, opts, start, index);
        let better = match &best {
            None => true,
            Some(b) => result.objective_value < b.objective_value,
        };
        if better {
            best = Some(result);
        }
    }
    let best = best.expect("at least one start");
    if best.converged {
        Ok(best)
    } else {
        Err(Error::NotConverged(Box::new(best)))
    }
}
