//! Angular and polar arithmetic shared by the simulator, controller and metrics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("cell ({i}, {j}) outside {h}x{w} grid")]
    CellOutOfRange { i: usize, j: usize, h: usize, w: usize },
    #[error("field of view span must be in (0, pi], got {0}")]
    BadSpan(f64),
}

/// Wraps any finite angle into `(-pi, pi]`.
pub fn wrap(x: f64) -> f64 {
    let r = x.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// An angle in radians, normalized to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);

    pub fn from_radians(r: f64) -> Self {
        Angle(wrap(r))
    }

    pub fn from_degrees(d: f64) -> Self {
        Self::from_radians(d.to_radians())
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    pub fn degrees(self) -> f64 {
        self.0.to_degrees()
    }

    /// Shortest signed difference `self - other`, in `(-pi, pi]`.
    pub fn diff(self, other: Angle) -> f64 {
        wrap(self.0 - other.0)
    }
}

impl From<f64> for Angle {
    fn from(r: f64) -> Self {
        Angle::from_radians(r)
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

impl std::ops::Add<f64> for Angle {
    type Output = Angle;
    fn add(self, rhs: f64) -> Angle {
        Angle::from_radians(self.0 + rhs)
    }
}

/// Wrap-aware unsigned distance in `[0, pi]`.
pub fn angular_distance(a: Angle, b: Angle) -> f64 {
    a.diff(b).abs()
}

/// Distance and bearing of a point relative to an observer's forward axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarOffset {
    pub rho: f64,
    pub theta: Angle,
}

impl PolarOffset {
    pub fn new(rho: f64, theta: Angle) -> Self {
        Self {
            rho: rho.max(0.0),
            theta,
        }
    }
}

/// Two-axis direction relative to the optical axis, radians. Positive pan is
/// to the right of the image, positive tilt is up.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Bearing {
    pub pan: f64,
    pub tilt: f64,
}

impl Bearing {
    pub const CENTER: Bearing = Bearing { pan: 0.0, tilt: 0.0 };

    pub fn new(pan: f64, tilt: f64) -> Self {
        Self { pan, tilt }
    }

    pub fn from_degrees(pan: f64, tilt: f64) -> Self {
        Self::new(pan.to_radians(), tilt.to_radians())
    }

    pub fn is_finite(&self) -> bool {
        self.pan.is_finite() && self.tilt.is_finite()
    }

    /// Componentwise wrap-aware `self - other`.
    pub fn wrapped_sub(&self, other: &Bearing) -> Bearing {
        Bearing::new(wrap(self.pan - other.pan), wrap(self.tilt - other.tilt))
    }

    /// Euclidean norm of the wrap-aware componentwise difference, radians.
    pub fn distance(&self, other: &Bearing) -> f64 {
        let d = self.wrapped_sub(other);
        d.pan.hypot(d.tilt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldOfView {
    horizontal: f64,
    vertical: f64,
}

impl FieldOfView {
    pub fn new(horizontal: f64, vertical: f64) -> Result<Self, GeometryError> {
        for s in [horizontal, vertical] {
            if !(s > 0.0 && s <= PI) {
                return Err(GeometryError::BadSpan(s));
            }
        }
        Ok(Self {
            horizontal,
            vertical,
        })
    }

    pub fn from_degrees(h: f64, v: f64) -> Result<Self, GeometryError> {
        Self::new(h.to_radians(), v.to_radians())
    }

    pub fn horizontal(&self) -> f64 {
        self.horizontal
    }

    pub fn vertical(&self) -> f64 {
        self.vertical
    }

    pub fn contains(&self, b: &Bearing) -> bool {
        b.pan.abs() <= self.horizontal / 2.0 && b.tilt.abs() <= self.vertical / 2.0
    }
}

/// Bearing of a fractional grid position, where integer cell `(i, j)` has its
/// center at `(i + 0.5, j + 0.5)`. Row `i` grows downward, column `j` rightward.
pub fn grid_point_to_bearing(i: f64, j: f64, grid: (usize, usize), fov: &FieldOfView) -> Bearing {
    let (h, w) = grid;
    Bearing::new(
        (j / w as f64 - 0.5) * fov.horizontal,
        (0.5 - i / h as f64) * fov.vertical,
    )
}

/// Bearing of the center of cell `(i, j)`.
pub fn grid_cell_to_bearing(
    cell: (usize, usize),
    grid: (usize, usize),
    fov: &FieldOfView,
) -> Result<Bearing, GeometryError> {
    let (i, j) = cell;
    let (h, w) = grid;
    if i >= h || j >= w {
        return Err(GeometryError::CellOutOfRange { i, j, h, w });
    }
    Ok(grid_point_to_bearing(i as f64 + 0.5, j as f64 + 0.5, grid, fov))
}

/// Fractional grid position of a bearing (inverse of [`grid_point_to_bearing`]).
pub fn bearing_to_grid_point(b: &Bearing, grid: (usize, usize), fov: &FieldOfView) -> (f64, f64) {
    let (h, w) = grid;
    (
        (0.5 - b.tilt / fov.vertical) * h as f64,
        (b.pan / fov.horizontal + 0.5) * w as f64,
    )
}

/// Cell containing a bearing, or `None` if it falls outside the field of view.
pub fn bearing_to_grid_cell(
    b: &Bearing,
    grid: (usize, usize),
    fov: &FieldOfView,
) -> Option<(usize, usize)> {
    let (fi, fj) = bearing_to_grid_point(b, grid, fov);
    let (h, w) = grid;
    if !(0.0..=h as f64).contains(&fi) || !(0.0..=w as f64).contains(&fj) {
        return None;
    }
    Some(((fi as usize).min(h - 1), (fj as usize).min(w - 1)))
}
