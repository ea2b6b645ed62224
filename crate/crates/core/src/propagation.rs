//! Log-normal shadowing mean power law, carried in dBm throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationParams {
    /// Mean power at the reference distance, dBm.
    pub p_r0: f64,
    /// Path-loss exponent.
    pub eta: f64,
    /// Shadowing standard deviation, dB.
    pub sigma_db: f64,
    /// Reference distance, meters.
    pub r0: f64,
}

impl Default for PropagationParams {
    fn default() -> Self {
        Self::calibrated()
    }
}

impl PropagationParams {
    pub fn new(p_r0: f64, eta: f64, sigma_db: f64) -> Self {
        Self {
            p_r0,
            eta,
            sigma_db,
            r0: 1.0,
        }
    }

    /// Values fitted to the 2.4 GHz measurement campaign: -16.7 dBm, 3.36, 1.68 dB.
    pub fn calibrated() -> Self {
        Self::new(-16.7, 3.36, 1.68)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "eta must be > 0, got {}",
                self.eta
            )));
        }
        if !(self.sigma_db >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma_db must be >= 0, got {}",
                self.sigma_db
            )));
        }
        if !(self.r0 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "r0 must be > 0, got {}",
                self.r0
            )));
        }
        if !self.p_r0.is_finite() {
            return Err(Error::InvalidConfig("p_r0 must be finite".into()));
        }
        Ok(())
    }

    /// `10 * eta / ln 10`, the slope of mean power against ln r.
    pub fn log_slope(&self) -> f64 {
        10.0 * self.eta / std::f64::consts::LN_10
    }

    /// Mean power without the domain check, for inner loops that have
    /// already validated `r`.
    #[inline]
    pub(crate) fn mean_power_unchecked(&self, r: f64) -> f64 {
        self.p_r0 - 10.0 * self.eta * (r / self.r0).log10()
    }

    pub fn mean_power(&self, r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(Error::Domain(format!("distance must be > 0, got {r}")));
        }
        Ok(self.mean_power_unchecked(r))
    }

    /// Mean power with the far-field guard applied.
    pub fn mean_power_guarded(&self, r: f64, guard: f64) -> Result<f64> {
        let p = self.mean_power(r)?;
        if r < guard {
            return Err(Error::FarField {
                index: 0,
                distance: r,
                guard,
            });
        }
        Ok(p)
    }
}

/// Mean power at every position for a transmitter at `blind`.
pub fn mean_power_vector(
    params: &PropagationParams,
    positions: &[Point],
    blind: &Point,
    guard: f64,
) -> Result<Vec<f64>> {
    positions
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let r = distance(p, blind);
            params.mean_power_guarded(r, guard).map_err(|e| match e {
                Error::FarField {
                    distance, guard, ..
                } => Error::FarField {
                    index,
                    distance,
                    guard,
                },
                Error::Domain(msg) => Error::Domain(format!("position {index}: {msg}")),
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_distance_returns_p_r0() {
        let p = PropagationParams::calibrated();
        assert_eq!(p.mean_power(1.0).unwrap(), -16.7);
        for eta in [0.5, 2.0, 3.36, 7.0] {
            let q = PropagationParams::new(-3.0, eta, 1.0);
            assert_eq!(q.mean_power(q.r0).unwrap(), -3.0);
        }
    }

    #[test]
    fn ten_meters() {
        let p = PropagationParams::calibrated();
        assert!((p.mean_power(10.0).unwrap() - (-50.3)).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_distance_is_a_domain_error() {
        let p = PropagationParams::calibrated();
        assert!(matches!(p.mean_power(0.0), Err(Error::Domain(_))));
        assert!(matches!(p.mean_power(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn opposite_corners_at_equal_range_match() {
        let corners = [
            Point::new(-1.0, -2.0),
            Point::new(2.0, -2.0),
            Point::new(2.0, 1.0),
            Point::new(-1.0, 1.0),
        ];
        let v = mean_power_vector(
            &PropagationParams::calibrated(),
            &corners,
            &Point::zeros(),
            0.25,
        )
        .unwrap();
        assert_eq!(v.len(), 4);
        // Ranges are sqrt(5), sqrt(8), sqrt(5), sqrt(2).
        assert_eq!(v[0], v[2]);
        assert!(v[3] > v[0] && v[0] > v[1]);
    }

    #[test]
    fn guard_violation_names_the_index() {
        let pts = [Point::new(3.0, 0.0), Point::new(0.1, 0.0)];
        let err = mean_power_vector(
            &PropagationParams::calibrated(),
            &pts,
            &Point::zeros(),
            0.25,
        )
        .unwrap_err();
        assert!(matches!(err, Error::FarField { index: 1, .. }), "{err}");
    }

    #[test]
    fn invalid_params() {
        assert!(PropagationParams::new(0.0, 0.0, 1.0).validate().is_err());
        assert!(PropagationParams::new(0.0, 1.0, -1.0).validate().is_err());
        assert!(PropagationParams::calibrated().validate().is_ok());
    }

    proptest! {
        #[test]
        fn doubling_distance_drops_by_log2_term(
            eta in 0.1f64..6.0,
            p_r0 in -80.0f64..20.0,
            r in 0.3f64..50.0,
        ) {
            let p = PropagationParams::new(p_r0, eta, 1.0);
            let drop = p.mean_power(r).unwrap() - p.mean_power(2.0 * r).unwrap();
            prop_assert!((drop - 10.0 * eta * 2f64.log10()).abs() < 1e-9);
        }

        #[test]
        fn strictly_decreasing(eta in 0.1f64..6.0, r in 0.3f64..50.0, dr in 1e-3f64..10.0) {
            let p = PropagationParams::new(-16.7, eta, 1.0);
            prop_assert!(p.mean_power(r + dr).unwrap() < p.mean_power(r).unwrap());
        }

        #[test]
        fn shift_covariance(delta in -30.0f64..30.0, x in -1.0f64..2.0) {
            let pts = [Point::new(x, -2.0), Point::new(2.0, 0.3), Point::new(-1.0, 0.9)];
            let a = PropagationParams::calibrated();
            let b = PropagationParams { p_r0: a.p_r0 + delta, ..a };
            let va = mean_power_vector(&a, &pts, &Point::zeros(), 0.25).unwrap();
            let vb = mean_power_vector(&b, &pts, &Point::zeros(), 0.25).unwrap();
            for (u, v) in va.iter().zip(&vb) {
                prop_assert!((v - u - delta).abs() < 1e-9);
            }
        }
    }
}
