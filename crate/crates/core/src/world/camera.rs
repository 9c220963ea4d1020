use serde::{Deserialize, Serialize};

use super::scenario::{Mode, Scenario};
use super::WorldError;
use crate::geometry::{Angle, FieldOfView};

/// Active camera pose. In pan-tilt mode only `pan`/`tilt` move; in follower
/// mode only `position`/`heading` move. Heading is counter-clockwise from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraState {
    pub pan: f64,
    pub tilt: f64,
    pub position: [f64; 2],
    pub heading: Angle,
    pub fov: FieldOfView,
}

impl CameraState {
    pub fn initial(s: &Scenario) -> Self {
        let c = &s.camera;
        Self {
            pan: c.start_pan_deg.to_radians(),
            tilt: c.start_tilt_deg.to_radians(),
            position: c.start,
            heading: Angle::from_degrees(c.start_heading_deg),
            fov: s.fov(),
        }
    }

    pub fn forward(&self) -> [f64; 2] {
        let h = self.heading.radians();
        [h.cos(), h.sin()]
    }
}

/// Relative command for one step. Pan-tilt deltas are radians per step;
/// follower `turn` is radians per step (positive = clockwise, i.e. toward the
/// right of the image) and `speed` is world units per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlCommand {
    PanTilt { d_pan: f64, d_tilt: f64 },
    Follower { turn: f64, speed: f64 },
}

impl ControlCommand {
    pub fn zero(mode: Mode) -> Self {
        match mode {
            Mode::PanTilt => ControlCommand::PanTilt {
                d_pan: 0.0,
                d_tilt: 0.0,
            },
            Mode::Follower => ControlCommand::Follower {
                turn: 0.0,
                speed: 0.0,
            },
        }
    }

    pub fn is_finite(&self) -> bool {
        match *self {
            ControlCommand::PanTilt { d_pan, d_tilt } => d_pan.is_finite() && d_tilt.is_finite(),
            ControlCommand::Follower { turn, speed } => turn.is_finite() && speed.is_finite(),
        }
    }
}

/// Actuator limits, radians and world units per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorLimits {
    pub pan_rate: f64,
    pub tilt_rate: f64,
    pub pan_travel: f64,
    pub tilt_travel: f64,
    pub turn_rate: f64,
    pub max_speed: f64,
    pub bounds: [f64; 2],
}

impl ActuatorLimits {
    pub fn from_scenario(s: &Scenario) -> Self {
        let c = &s.camera;
        Self {
            pan_rate: c.pan_rate_deg.to_radians(),
            tilt_rate: c.tilt_rate_deg.to_radians(),
            pan_travel: c.pan_limit_deg.to_radians(),
            tilt_travel: c.tilt_limit_deg.to_radians(),
            turn_rate: c.turn_rate_deg.to_radians(),
            max_speed: c.max_speed,
            bounds: s.scene_size,
        }
    }
}

/// Result of pushing a command through the actuator model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Actuation {
    pub camera: CameraState,
    /// The command after rate and travel limits.
    pub applied: ControlCommand,
    pub clamped: bool,
}

pub fn apply_command(
    cam: &CameraState,
    cmd: &ControlCommand,
    limits: &ActuatorLimits,
) -> Result<Actuation, WorldError> {
    if !cmd.is_finite() {
        return Err(WorldError::NonFiniteCommand);
    }
    let mut next = *cam;
    match *cmd {
        ControlCommand::PanTilt { d_pan, d_tilt } => {
            let dp = d_pan.clamp(-limits.pan_rate, limits.pan_rate);
            let dt = d_tilt.clamp(-limits.tilt_rate, limits.tilt_rate);
            next.pan = (cam.pan + dp).clamp(-limits.pan_travel, limits.pan_travel);
            next.tilt = (cam.tilt + dt).clamp(-limits.tilt_travel, limits.tilt_travel);
            let applied = ControlCommand::PanTilt {
                d_pan: next.pan - cam.pan,
                d_tilt: next.tilt - cam.tilt,
            };
            Ok(Actuation {
                camera: next,
                applied,
                clamped: applied != *cmd,
            })
        }
        ControlCommand::Follower { turn, speed } => {
            let t = turn.clamp(-limits.turn_rate, limits.turn_rate);
            let v = speed.clamp(0.0, limits.max_speed);
            next.heading = cam.heading + (-t);
            let f = next.forward();
            let target = [cam.position[0] + v * f[0], cam.position[1] + v * f[1]];
            next.position = [
                target[0].clamp(0.0, limits.bounds[0]),
                target[1].clamp(0.0, limits.bounds[1]),
            ];
            let applied = ControlCommand::Follower { turn: t, speed: v };
            Ok(Actuation {
                camera: next,
                applied,
                clamped: applied != *cmd || next.position != target,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pan_tilt_cam() -> CameraState {
        CameraState {
            pan: 0.0,
            tilt: 0.0,
            position: [0.0, 0.0],
            heading: Angle::ZERO,
            fov: FieldOfView::from_degrees(90.0, 90.0).unwrap(),
        }
    }

    fn limits() -> ActuatorLimits {
        ActuatorLimits {
            pan_rate: 4f64.to_radians(),
            tilt_rate: 4f64.to_radians(),
            pan_travel: 60f64.to_radians(),
            tilt_travel: 60f64.to_radians(),
            turn_rate: 15f64.to_radians(),
            max_speed: 10.0,
            bounds: [1000.0, 1000.0],
        }
    }

    #[test]
    fn zero_command_is_identity() {
        let cam = pan_tilt_cam();
        let out = apply_command(&cam, &ControlCommand::zero(Mode::PanTilt), &limits()).unwrap();
        assert_eq!(out.camera, cam);
        assert!(!out.clamped);
    }

    #[test]
    fn rate_limit_clamps() {
        let cam = pan_tilt_cam();
        let cmd = ControlCommand::PanTilt {
            d_pan: 10f64.to_radians(),
            d_tilt: -10f64.to_radians(),
        };
        let out = apply_command(&cam, &cmd, &limits()).unwrap();
        assert!((out.camera.pan.to_degrees() - 4.0).abs() < 1e-12);
        assert!((out.camera.tilt.to_degrees() + 4.0).abs() < 1e-12);
        assert!(out.clamped);
    }

    #[test]
    fn travel_limit_holds() {
        let mut cam = pan_tilt_cam();
        cam.pan = 60f64.to_radians();
        let cmd = ControlCommand::PanTilt {
            d_pan: 2f64.to_radians(),
            d_tilt: 0.0,
        };
        let out = apply_command(&cam, &cmd, &limits()).unwrap();
        assert_eq!(out.camera.pan, 60f64.to_radians());
    }

    #[test]
    fn follower_turn_and_move() {
        let mut cam = pan_tilt_cam();
        cam.position = [500.0, 500.0];
        cam.heading = Angle::from_degrees(90.0);
        // right turn of 10 degrees, then 5 units forward
        let cmd = ControlCommand::Follower {
            turn: 10f64.to_radians(),
            speed: 5.0,
        };
        let out = apply_command(&cam, &cmd, &limits()).unwrap();
        assert!((out.camera.heading.degrees() - 80.0).abs() < 1e-9);
        let h = 80f64.to_radians();
        assert!((out.camera.position[0] - (500.0 + 5.0 * h.cos())).abs() < 1e-9);
        assert!((out.camera.position[1] - (500.0 + 5.0 * h.sin())).abs() < 1e-9);
        let back = ControlCommand::Follower { turn: 0.0, speed: -3.0 };
        let out = apply_command(&cam, &back, &limits()).unwrap();
        assert_eq!(out.camera.position, cam.position);
    }

    #[test]
    fn non_finite_rejected() {
        let cmd = ControlCommand::PanTilt {
            d_pan: f64::NAN,
            d_tilt: 0.0,
        };
        assert!(apply_command(&pan_tilt_cam(), &cmd, &limits()).is_err());
    }
}
