//! Experiment geometry: the localization square, the blind radio and the
//! reference positions laid out along the square's perimeter.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the localization plane, in meters.
pub type Point = Vector2<f64>;

const TILE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.low && v <= self.high
    }

    pub fn contains_strict(&self, v: f64) -> bool {
        v > self.low && v < self.high
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.low, self.high)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.low + self.high)
    }
}

/// Localization geometry, wavelength and far-field guard for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupConfig {
    pub side_length: f64,
    pub spacing: f64,
    pub wavelength: f64,
    pub blind_position: Point,
    pub bounds_x: Interval,
    pub bounds_y: Interval,
    pub min_far_field_distance: f64,
}

impl Default for SetupConfig {
    /// 3 m square spanning x in [-1, 2], y in [-2, 1], one position every
    /// 0.5 cm, 2.4 GHz carrier and the blind radio at the origin.
    fn default() -> Self {
        Self::square(3.0, 0.005, 0.125, Point::new(0.0, 0.0))
    }
}

impl SetupConfig {
    /// Builds a square of the given side whose placement relative to the
    /// origin scales the default layout: x in [-s/3, 2s/3], y in [-2s/3, s/3].
    pub fn square(side_length: f64, spacing: f64, wavelength: f64, blind_position: Point) -> Self {
        Self {
            side_length,
            spacing,
            wavelength,
            blind_position,
            bounds_x: Interval::new(-side_length / 3.0, 2.0 * side_length / 3.0),
            bounds_y: Interval::new(-2.0 * side_length / 3.0, side_length / 3.0),
            min_far_field_distance: 2.0 * wavelength,
        }
    }

    pub fn perimeter(&self) -> f64 {
        4.0 * self.side_length
    }

    pub fn wavenumber(&self) -> f64 {
        std::f64::consts::TAU / self.wavelength
    }

    pub fn center(&self) -> Point {
        Point::new(self.bounds_x.midpoint(), self.bounds_y.midpoint())
    }

    /// Number of perimeter positions implied by the spacing.
    pub fn position_count(&self) -> usize {
        (self.perimeter() / self.spacing + TILE_TOLERANCE).floor() as usize
    }

    /// Reference density in samples per wavelength.
    pub fn density(&self) -> f64 {
        self.wavelength / self.spacing
    }

    /// Returns a copy whose spacing tiles the perimeter with the integer
    /// position count closest to `samples_per_wavelength`.
    pub fn with_density(&self, samples_per_wavelength: f64) -> Result<Self> {
        if !(samples_per_wavelength > 0.0 && samples_per_wavelength.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "density must be positive, got {samples_per_wavelength}"
            )));
        }
        let count = (self.perimeter() * samples_per_wavelength / self.wavelength)
            .round()
            .max(1.0);
        let mut cfg = self.clone();
        cfg.spacing = self.perimeter() / count;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("side_length", self.side_length)?;
        positive("spacing", self.spacing)?;
        positive("wavelength", self.wavelength)?;
        if !(self.min_far_field_distance >= 0.0) {
            return Err(Error::InvalidConfig(
                "min_far_field_distance must be nonnegative".into(),
            ));
        }
        for (name, b) in [("bounds_x", self.bounds_x), ("bounds_y", self.bounds_y)] {
            if ((b.width() - self.side_length) / self.side_length).abs() > TILE_TOLERANCE {
                return Err(Error::InvalidConfig(format!(
                    "{name} width {} does not match side_length {}",
                    b.width(),
                    self.side_length
                )));
            }
        }
        let ratio = self.perimeter() / self.spacing;
        if (ratio - ratio.round()).abs() > TILE_TOLERANCE * ratio.max(1.0) || ratio.round() < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "spacing {} does not tile the perimeter {} ({} positions)",
                self.spacing,
                self.perimeter(),
                ratio
            )));
        }
        let p = self.blind_position;
        if !(self.bounds_x.contains_strict(p.x) && self.bounds_y.contains_strict(p.y)) {
            return Err(Error::InvalidConfig(format!(
                "blind position ({}, {}) is not strictly inside the square",
                p.x, p.y
            )));
        }
        Ok(())
    }
}

/// Reference positions on the perimeter, counter-clockwise from the
/// lower-left corner.
pub fn perimeter_positions(cfg: &SetupConfig) -> Result<Vec<Point>> {
    cfg.validate()?;
    let n = (cfg.perimeter() / cfg.spacing).round() as usize;
    let side = cfg.side_length;
    let (x0, y0) = (cfg.bounds_x.low, cfg.bounds_y.low);
    let (x1, y1) = (cfg.bounds_x.high, cfg.bounds_y.high);

    let positions: Vec<Point> = (0..n)
        .map(|i| {
            let t = i as f64 * cfg.spacing;
            let edge = ((t / side) + TILE_TOLERANCE).floor() as usize;
            let along = (t - edge as f64 * side).max(0.0);
            match edge {
                0 => Point::new(x0 + along, y0),
                1 => Point::new(x1, y0 + along),
                2 => Point::new(x1 - along, y1),
                _ => Point::new(x0, y1 - along),
            }
        })
        .collect();

    for (index, p) in positions.iter().enumerate() {
        let d = distance(p, &cfg.blind_position);
        if d < cfg.min_far_field_distance {
            return Err(Error::FarField {
                index,
                distance: d,
                guard: cfg.min_far_field_distance,
            });
        }
    }
    Ok(positions)
}

#[inline]
pub fn distance(a: &Point, b: &Point) -> f64 {
    (a - b).norm()
}
