//! Reactive proportional-derivative control from a localized bearing to a
//! camera command.

use serde::{Deserialize, Serialize};

use crate::geometry::{Angle, Bearing};
use crate::world::{ControlCommand, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub lambda_p: f64,
    pub lambda_d: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_d: 0.1,
        }
    }
}

impl ControllerGains {
    pub fn new(lambda_p: f64, lambda_d: f64) -> Self {
        Self { lambda_p, lambda_d }
    }

    /// Gain pairs compared in the ablation table.
    pub const SWEEP: [(f64, f64); 4] = [(1.0, 0.1), (0.5, 0.1), (1.0, 0.0), (1.0, 1.0)];
}

/// Two-component error: `(pan, tilt)` radians in pan-tilt mode,
/// `(distance error, bearing)` in follower mode.
pub type ErrorVec = [f64; 2];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub prev_error: Option<ErrorVec>,
    /// Count of steps whose error was non-finite.
    pub incidents: u32,
}

/// Wrap-aware `q - c`.
pub fn control_error(q: &Bearing, c: &Bearing) -> Bearing {
    q.wrapped_sub(c)
}

/// `cmd = lp * e + ld * (e - prev)`, derivative zero on the first step.
/// A non-finite error yields a zero command and leaves the history untouched.
pub fn pd_step(e: ErrorVec, state: &ControllerState, gains: &ControllerGains) -> (ErrorVec, ControllerState) {
    let mut next = *state;
    if !e.iter().all(|v| v.is_finite()) {
        log::warn!("non-finite control error {e:?}; issuing zero command");
        next.incidents += 1;
        return ([0.0, 0.0], next);
    }
    let prev = state.prev_error.unwrap_or(e);
    let cmd = [
        gains.lambda_p * e[0] + gains.lambda_d * (e[0] - prev[0]),
        gains.lambda_p * e[1] + gains.lambda_d * (e[1] - prev[1]),
    ];
    next.prev_error = Some(e);
    (cmd, next)
}

/// Follower mapping: the error is `(rho - ideal, theta)`; turn follows the
/// bearing and forward speed follows the distance error, never negative.
pub fn follower_map(
    rho: f64,
    theta: Angle,
    ideal_distance: f64,
    state: &ControllerState,
    gains: &ControllerGains,
) -> (ControlCommand, ControllerState) {
    let (cmd, next) = pd_step([rho - ideal_distance, theta.radians()], state, gains);
    (
        ControlCommand::Follower {
            turn: cmd[1],
            speed: cmd[0].max(0.0),
        },
        next,
    )
}

/// Pan-tilt mapping: pan and tilt deltas follow the bearing error.
pub fn pan_tilt_map(
    e: &Bearing,
    state: &ControllerState,
    gains: &ControllerGains,
) -> (ControlCommand, ControllerState) {
    let (cmd, next) = pd_step([e.pan, e.tilt], state, gains);
    (
        ControlCommand::PanTilt {
            d_pan: cmd[0],
            d_tilt: cmd[1],
        },
        next,
    )
}

/// Reactive controller bound to one scenario mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub mode: Mode,
    pub gains: ControllerGains,
    pub ideal_distance: f64,
    pub state: ControllerState,
}

impl Controller {
    pub fn new(mode: Mode, gains: ControllerGains, ideal_distance: f64) -> Self {
        Self {
            mode,
            gains,
            ideal_distance,
            state: ControllerState::default(),
        }
    }

    /// Command from a target expressed relative to the camera. In follower
    /// mode `rho` is the estimated distance to the target.
    pub fn command(&mut self, target: &Bearing, rho: f64) -> ControlCommand {
        let (cmd, next) = match self.mode {
            Mode::PanTilt => {
                pan_tilt_map(&control_error(target, &Bearing::CENTER), &self.state, &self.gains)
            }
            Mode::Follower => follower_map(
                rho,
                Angle::from_radians(target.pan),
                self.ideal_distance,
                &self.state,
                &self.gains,
            ),
        };
        self.state = next;
        cmd
    }
}

/// Peak overshoot of a rate-limited one-axis PD loop tracking `profile`.
///
/// The actuator applies each command `latency` steps after it is issued and
/// moves at most `rate` per step. Overshoot is the largest excursion past the
/// final target value, measured once the profile has reached it.
pub fn ramp_overshoot(profile: &[f64], gains: &ControllerGains, rate: f64, latency: usize) -> f64 {
    let Some(&target_end) = profile.last() else {
        return 0.0;
    };
    let direction = if target_end < 0.0 { -1.0 } else { 1.0 };
    let stop = profile.iter().position(|&v| v == target_end).unwrap_or(0);
    let mut cam = 0.0;
    let mut state = ControllerState::default();
    let mut pipeline = std::collections::VecDeque::from(vec![0.0; latency]);
    let mut peak = 0.0f64;
    for (t, &q) in profile.iter().enumerate() {
        let (cmd, next) = pd_step([q - cam, 0.0], &state, gains);
        state = next;
        pipeline.push_back(cmd[0].clamp(-rate, rate));
        cam += pipeline.pop_front().unwrap_or(0.0);
        if t >= stop {
            peak = peak.max(direction * (cam - target_end));
        }
    }
    peak
}

/// Ramp at `speed` per step for `ramp` steps, then hold for `hold` steps.
pub fn ramp_stop_profile(speed: f64, ramp: usize, hold: usize) -> Vec<f64> {
    (0..ramp + hold).map(|t| speed * t.min(ramp) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    #[test]
    fn control_error_examples() {
        assert_eq!(control_error(&Bearing::CENTER, &Bearing::CENTER), Bearing::CENTER);
        let e = control_error(&Bearing::from_degrees(30.0, 0.0), &Bearing::CENTER);
        assert!((e.pan - deg(30.0)).abs() < 1e-15 && e.tilt == 0.0);
        let e = control_error(&Bearing::from_degrees(179.0, 0.0), &Bearing::from_degrees(-179.0, 0.0));
        assert!((e.pan - deg(-2.0)).abs() < 1e-12);
    }

    #[test]
    fn pd_examples() {
        let g = ControllerGains::default();
        let (cmd, _) = pd_step([0.0, 0.0], &ControllerState { prev_error: Some([0.0, 0.0]), incidents: 0 }, &g);
        assert_eq!(cmd, [0.0, 0.0]);
        let st = ControllerState { prev_error: Some([4.0, 0.0]), incidents: 0 };
        let (cmd, next) = pd_step([10.0, 0.0], &st, &g);
        assert!((cmd[0] - 10.6).abs() < 1e-12);
        assert_eq!(next.prev_error, Some([10.0, 0.0]));
        let p = ControllerGains::new(1.0, 0.0);
        let (cmd, _) = pd_step([7.0, -3.0], &st, &p);
        assert_eq!(cmd, [7.0, -3.0]);
    }

    #[test]
    fn first_step_has_no_derivative() {
        let (cmd, _) = pd_step([2.0, 1.0], &ControllerState::default(), &ControllerGains::new(1.0, 1.0));
        assert_eq!(cmd, [2.0, 1.0]);
    }

    #[test]
    fn non_finite_error_is_an_incident() {
        let st = ControllerState { prev_error: Some([1.0, 1.0]), incidents: 0 };
        let (cmd, next) = pd_step([f64::NAN, 0.0], &st, &ControllerGains::default());
        assert_eq!(cmd, [0.0, 0.0]);
        assert_eq!(next.incidents, 1);
        assert_eq!(next.prev_error, Some([1.0, 1.0]));
    }

    #[test]
    fn follower_examples() {
        let g = ControllerGains::default();
        let s = ControllerState::default();
        let (cmd, _) = follower_map(250.0, Angle::ZERO, 250.0, &s, &g);
        assert_eq!(cmd, ControlCommand::Follower { turn: 0.0, speed: 0.0 });
        let (cmd, _) = follower_map(500.0, Angle::ZERO, 250.0, &s, &g);
        match cmd {
            ControlCommand::Follower { turn, speed } => assert!(speed > 0.0 && turn == 0.0),
            _ => unreachable!(),
        }
        let (cmd, _) = follower_map(250.0, Angle::from_degrees(45.0), 250.0, &s, &g);
        match cmd {
            ControlCommand::Follower { turn, speed } => {
                assert!((turn - deg(45.0)).abs() < 1e-12);
                assert_eq!(speed, 0.0);
            }
            _ => unreachable!(),
        }
        let (cmd, _) = follower_map(100.0, Angle::ZERO, 250.0, &s, &g);
        assert_eq!(cmd, ControlCommand::Follower { turn: 0.0, speed: 0.0 });
    }

    #[test]
    fn derivative_reduces_overshoot() {
        let profile = ramp_stop_profile(deg(3.0), 30, 30);
        let rate = deg(4.0);
        let with_d = ramp_overshoot(&profile, &ControllerGains::new(1.0, 0.1), rate, 1);
        let without = ramp_overshoot(&profile, &ControllerGains::new(1.0, 0.0), rate, 1);
        assert!(with_d < without, "{with_d} vs {without}");
        // an immediate actuator makes unit proportional gain deadbeat
        assert_eq!(ramp_overshoot(&profile, &ControllerGains::new(1.0, 0.0), rate, 0), 0.0);
    }

    proptest! {
        #[test]
        fn pd_is_linear(a in -5.0f64..5.0, e0 in -1.0f64..1.0, e1 in -1.0f64..1.0, p0 in -1.0f64..1.0) {
            let g = ControllerGains::default();
            let st = ControllerState { prev_error: Some([p0, 0.0]), incidents: 0 };
            let scaled = ControllerState { prev_error: Some([a * p0, 0.0]), incidents: 0 };
            let (c1, _) = pd_step([e0, e1], &st, &g);
            let (c2, _) = pd_step([a * e0, a * e1], &scaled, &g);
            prop_assert!((c2[0] - a * c1[0]).abs() < 1e-12);
            prop_assert!((c2[1] - a * c1[1]).abs() < 1e-12);
        }

        #[test]
        fn proportional_sign_matches_error(e0 in -3.0f64..3.0, e1 in -3.0f64..3.0, p in 0.01f64..4.0) {
            let g = ControllerGains::new(p, 0.0);
            let (c, _) = pd_step([e0, e1], &ControllerState::default(), &g);
            prop_assert_eq!(c[0].signum(), e0.signum());
            prop_assert_eq!(c[1].signum(), e1.signum());
        }
    }
}
