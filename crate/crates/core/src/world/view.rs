//! Mapping between image pixels, camera-relative bearings and world points.
//!
//! Pan-tilt: the scene is a plane covering `scene_span` degrees; the image is
//! a linear angular window around the camera's pan/tilt.
//!
//! Follower: the image is an egocentric polar view. Columns are bearings
//! across the horizontal field of view; rows are distances, far at the top and
//! the agent itself at the bottom edge. The vertical "tilt" coordinate of a
//! bearing therefore encodes range: `range = view_range * (0.5 + tilt / fov_v)`.

use serde::{Deserialize, Serialize};

use super::camera::CameraState;
use super::scenario::{Mode, Scenario};
use crate::geometry::{
    bearing_to_grid_point, grid_point_to_bearing, wrap, Bearing, FieldOfView,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewGeometry {
    pub mode: Mode,
    pub fov: FieldOfView,
    pub image_size: usize,
    pub scene_size: [f64; 2],
    /// Radians covered by the whole scene plane (pan-tilt only).
    pub scene_span: [f64; 2],
    /// Farthest distance shown (follower only).
    pub view_range: f64,
}

impl ViewGeometry {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            mode: s.mode,
            fov: s.fov(),
            image_size: s.render.image_size,
            scene_size: s.scene_size,
            scene_span: [
                s.camera.scene_span_deg[0].to_radians(),
                s.camera.scene_span_deg[1].to_radians(),
            ],
            view_range: s.camera.view_range,
        }
    }

    fn grid(&self) -> (usize, usize) {
        (self.image_size, self.image_size)
    }

    /// Bearing at a fractional pixel position; the center of pixel `(r, c)`
    /// is `(r + 0.5, c + 0.5)`.
    pub fn pixel_to_bearing(&self, r: f64, c: f64) -> Bearing {
        grid_point_to_bearing(r, c, self.grid(), &self.fov)
    }

    /// Fractional pixel position of a bearing (may lie outside the image).
    pub fn bearing_to_pixel(&self, b: &Bearing) -> (f64, f64) {
        bearing_to_grid_point(b, self.grid(), &self.fov)
    }

    /// Integer pixel containing a bearing, if inside the image.
    pub fn bearing_to_pixel_index(&self, b: &Bearing) -> Option<(usize, usize)> {
        let (r, c) = self.bearing_to_pixel(b);
        let n = self.image_size as f64;
        if !(0.0..n).contains(&r) || !(0.0..n).contains(&c) {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn range_to_tilt(&self, rho: f64) -> f64 {
        (rho / self.view_range - 0.5) * self.fov.vertical()
    }

    pub fn tilt_to_range(&self, tilt: f64) -> f64 {
        self.view_range * (0.5 + tilt / self.fov.vertical())
    }

    /// Absolute scene angles of a scene-plane point (pan-tilt).
    pub fn scene_angles(&self, p: [f64; 2]) -> Bearing {
        Bearing::new(
            (p[0] / self.scene_size[0] - 0.5) * self.scene_span[0],
            (0.5 - p[1] / self.scene_size[1]) * self.scene_span[1],
        )
    }

    /// Scene-plane point at absolute scene angles (pan-tilt).
    pub fn scene_point(&self, abs: &Bearing) -> [f64; 2] {
        [
            (abs.pan / self.scene_span[0] + 0.5) * self.scene_size[0],
            (0.5 - abs.tilt / self.scene_span[1]) * self.scene_size[1],
        ]
    }

    /// World point seen along a camera-relative bearing.
    pub fn world_point(&self, cam: &CameraState, rel: &Bearing) -> [f64; 2] {
        match self.mode {
            Mode::PanTilt => {
                self.scene_point(&Bearing::new(cam.pan + rel.pan, cam.tilt + rel.tilt))
            }
            Mode::Follower => {
                let phi = cam.heading.radians() - rel.pan;
                let rho = self.tilt_to_range(rel.tilt);
                [
                    cam.position[0] + rho * phi.cos(),
                    cam.position[1] + rho * phi.sin(),
                ]
            }
        }
    }

    /// Camera-relative bearing of a world point.
    pub fn relative_bearing(&self, cam: &CameraState, p: [f64; 2]) -> Bearing {
        match self.mode {
            Mode::PanTilt => {
                let abs = self.scene_angles(p);
                Bearing::new(abs.pan - cam.pan, abs.tilt - cam.tilt)
            }
            Mode::Follower => {
                let (dx, dy) = (p[0] - cam.position[0], p[1] - cam.position[1]);
                let theta = wrap(cam.heading.radians() - dy.atan2(dx));
                Bearing::new(theta, self.range_to_tilt(dx.hypot(dy)))
            }
        }
    }

    /// Fraction of the scene plane visible from a centered pan-tilt camera,
    /// estimated on a regular `n x n` lattice of scene points.
    pub fn visible_fraction(&self, n: usize) -> f64 {
        let cam = CameraState {
            pan: 0.0,
            tilt: 0.0,
            position: [0.0, 0.0],
            heading: crate::geometry::Angle::ZERO,
            fov: self.fov,
        };
        let mut seen = 0usize;
        for i in 0..n {
            for j in 0..n {
                let p = [
                    (j as f64 + 0.5) / n as f64 * self.scene_size[0],
                    (i as f64 + 0.5) / n as f64 * self.scene_size[1],
                ];
                if self.fov.contains(&self.relative_bearing(&cam, p)) {
                    seen += 1;
                }
            }
        }
        seen as f64 / (n * n) as f64
    }
}
