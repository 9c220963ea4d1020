//! Scenario files: TOML with a `schema_version`, validated on load.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::WorldError;
use crate::geometry::FieldOfView;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_DURATION: u32 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Fixed-base camera steering an angular window over a larger scene plane.
    PanTilt,
    /// Embodied agent with position and heading on a 2D floor.
    Follower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Dominant,
    Distractor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    #[default]
    Solid,
    /// Intensity oscillates in time.
    Pulse,
    /// Travelling stripes aligned with the direction of motion.
    Stripes,
    /// Checkerboard whose phase flips every step.
    Checker,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub step: u32,
    pub pos: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub name: String,
    pub role: Role,
    pub radius: f64,
    pub intensity: f64,
    #[serde(default)]
    pub texture: Texture,
    pub waypoints: Vec<Waypoint>,
}

/// Axis-aligned static rectangle that hides whatever lies behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occluder {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub intensity: f64,
}

impl Occluder {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    /// Whether the segment `a -> b` passes through the rectangle (slab test).
    pub fn blocks(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for k in 0..2 {
            let d = b[k] - a[k];
            if d.abs() < 1e-12 {
                if a[k] < self.min[k] || a[k] > self.max[k] {
                    return false;
                }
            } else {
                let (mut lo, mut hi) = ((self.min[k] - a[k]) / d, (self.max[k] - a[k]) / d);
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                t0 = t0.max(lo);
                t1 = t1.min(hi);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// Global intensity multiplier from this step on.
    Lighting { multiplier: f64 },
    /// The named actor only exists from this step on.
    Spawn { actor: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEvent")]
pub struct Event {
    pub step: u32,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Flat on-disk form of an event, so unknown keys can still be rejected.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    step: u32,
    kind: String,
    multiplier: Option<f64>,
    actor: Option<String>,
}

impl TryFrom<RawEvent> for Event {
    type Error = String;

    fn try_from(r: RawEvent) -> Result<Self, String> {
        let kind = match (r.kind.as_str(), r.multiplier, r.actor) {
            ("lighting", Some(multiplier), None) => EventKind::Lighting { multiplier },
            ("spawn", None, Some(actor)) => EventKind::Spawn { actor },
            ("lighting", _, _) => return Err("lighting events take exactly `multiplier`".into()),
            ("spawn", _, _) => return Err("spawn events take exactly `actor`".into()),
            (other, _, _) => {
                return Err(format!("unknown event kind `{other}`, expected lighting or spawn"))
            }
        };
        Ok(Event { step: r.step, kind })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub fov_deg: [f64; 2],
    /// Angular extent of the whole scene plane (pan-tilt).
    #[serde(default = "default_span")]
    pub scene_span_deg: [f64; 2],
    #[serde(default = "default_rate")]
    pub pan_rate_deg: f64,
    #[serde(default = "default_rate")]
    pub tilt_rate_deg: f64,
    #[serde(default = "default_travel")]
    pub pan_limit_deg: f64,
    #[serde(default = "default_travel")]
    pub tilt_limit_deg: f64,
    #[serde(default)]
    pub start_pan_deg: f64,
    #[serde(default)]
    pub start_tilt_deg: f64,
    /// Farthest distance shown in the follower view.
    #[serde(default = "default_view_range")]
    pub view_range: f64,
    #[serde(default = "default_turn_rate")]
    pub turn_rate_deg: f64,
    #[serde(default = "default_max_speed")]
    pub max_speed: f64,
    #[serde(default)]
    pub start: [f64; 2],
    #[serde(default)]
    pub start_heading_deg: f64,
}

fn default_span() -> [f64; 2] {
    [164.0, 164.0]
}
fn default_rate() -> f64 {
    4.0
}
fn default_travel() -> f64 {
    60.0
}
fn default_view_range() -> f64 {
    500.0
}
fn default_turn_rate() -> f64 {
    15.0
}
fn default_max_speed() -> f64 {
    15.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSpec {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_background")]
    pub background: f64,
    /// Intensity beyond the scene bounds.
    #[serde(default)]
    pub outside: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

fn default_image_size() -> usize {
    112
}
fn default_background() -> f64 {
    0.25
}
fn default_noise() -> f64 {
    0.02
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            image_size: default_image_size(),
            background: default_background(),
            outside: 0.0,
            noise_sigma: default_noise(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub mode: Mode,
    pub duration: u32,
    pub seed: u64,
    pub scene_size: [f64; 2],
    #[serde(default = "default_ideal_distance")]
    pub ideal_distance: f64,
    /// Per-episode uniform perturbation of every waypoint, world units.
    #[serde(default)]
    pub trajectory_jitter: f64,
    #[serde(default)]
    pub allow_long_duration: bool,
    pub camera: CameraSpec,
    #[serde(default)]
    pub render: RenderSpec,
    #[serde(default)]
    pub actors: Vec<ActorSpec>,
    #[serde(default)]
    pub occluders: Vec<Occluder>,
    #[serde(default)]
    pub events: Vec<Event>,
}

fn default_ideal_distance() -> f64 {
    250.0
}

fn invalid(path: impl Into<String>, msg: impl Into<String>) -> WorldError {
    WorldError::Invalid {
        path: path.into(),
        msg: msg.into(),
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, WorldError> {
        let de = toml::Deserializer::parse(text).map_err(|e| WorldError::Parse {
            path: String::new(),
            msg: e.to_string(),
        })?;
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            WorldError::Parse {
                path: e.path().to_string(),
                msg: e.inner().to_string(),
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn fov(&self) -> FieldOfView {
        FieldOfView::from_degrees(self.camera.fov_deg[0], self.camera.fov_deg[1])
            .expect("validated on load")
    }

    pub fn dominant_count(&self) -> usize {
        self.actors.iter().filter(|a| a.role == Role::Dominant).count()
    }

    pub fn in_bounds(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[0] <= self.scene_size[0] && p[1] >= 0.0 && p[1] <= self.scene_size[1]
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.duration == 0 {
            return Err(invalid("duration", "must be positive"));
        }
        if self.duration > DEFAULT_MAX_DURATION && !self.allow_long_duration {
            return Err(invalid(
                "duration",
                format!("{} exceeds {DEFAULT_MAX_DURATION} without allow_long_duration", self.duration),
            ));
        }
        if !(self.scene_size[0] > 0.0 && self.scene_size[1] > 0.0) {
            return Err(invalid("scene_size", "must be positive"));
        }
        let c = &self.camera;
        FieldOfView::from_degrees(c.fov_deg[0], c.fov_deg[1])
            .map_err(|e| invalid("camera.fov_deg", e.to_string()))?;
        for (name, v) in [
            ("camera.pan_rate_deg", c.pan_rate_deg),
            ("camera.tilt_rate_deg", c.tilt_rate_deg),
            ("camera.pan_limit_deg", c.pan_limit_deg),
            ("camera.tilt_limit_deg", c.tilt_limit_deg),
            ("camera.view_range", c.view_range),
            ("camera.turn_rate_deg", c.turn_rate_deg),
            ("camera.max_speed", c.max_speed),
            ("camera.scene_span_deg[0]", c.scene_span_deg[0]),
            ("camera.scene_span_deg[1]", c.scene_span_deg[1]),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(name, "must be finite and non-negative"));
            }
        }
        if self.mode == Mode::Follower && !self.in_bounds(c.start) {
            return Err(invalid("camera.start", "outside scene bounds"));
        }
        if self.render.image_size < 14 {
            return Err(invalid("render.image_size", "too small"));
        }
        if self.dominant_count() == 0 {
            return Err(invalid("actors", "at least one actor must have role = \"dominant\""));
        }
        let mut names = HashSet::new();
        for (k, a) in self.actors.iter().enumerate() {
            let path = format!("actors[{k}] ({})", a.name);
            if !names.insert(a.name.as_str()) {
                return Err(invalid(path, "duplicate actor name"));
            }
            if a.waypoints.is_empty() {
                return Err(invalid(path, "needs at least one waypoint"));
            }
            for w in a.waypoints.windows(2) {
                if w[1].step <= w[0].step {
                    return Err(invalid(
                        path,
                        format!(
                            "waypoint steps must be strictly increasing ({} then {})",
                            w[0].step, w[1].step
                        ),
                    ));
                }
            }
            if let Some(w) = a.waypoints.iter().find(|w| !self.in_bounds(w.pos)) {
                return Err(invalid(
                    path,
                    format!("waypoint at step {} lies outside the scene", w.step),
                ));
            }
            if a.radius.is_nan() || a.radius <= 0.0 {
                return Err(invalid(path, "radius must be positive"));
            }
            if !(0.0..=1.0).contains(&a.intensity) {
                return Err(invalid(path, "intensity must be in [0, 1]"));
            }
        }
        for (k, e) in self.events.iter().enumerate() {
            match &e.kind {
                EventKind::Lighting { multiplier } if multiplier.is_nan() || *multiplier < 0.0 => {
                    return Err(invalid(format!("events[{k}]"), "multiplier must be >= 0"));
                }
                EventKind::Spawn { actor } if !names.contains(actor.as_str()) => {
                    return Err(invalid(
                        format!("events[{k}]"),
                        format!("spawn references unknown actor `{actor}`"),
                    ));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, WorldError> {
    let text = std::fs::read_to_string(path).map_err(|e| WorldError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Scenario::from_toml_str(&text)
}

/// Scenarios shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("follower_basic", include_str!("../../scenarios/follower_basic.toml")),
    ("sharp_turns", include_str!("../../scenarios/sharp_turns.toml")),
    ("clutter_multi_actor", include_str!("../../scenarios/clutter_multi_actor.toml")),
    ("lighting_change", include_str!("../../scenarios/lighting_change.toml")),
    ("dual_dominant", include_str!("../../scenarios/dual_dominant.toml")),
    ("dueling_room_like", include_str!("../../scenarios/dueling_room_like.toml")),
];

pub fn bundled(name: &str) -> Option<Scenario> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Scenario::from_toml_str(text).expect("bundled scenario is valid"))
}

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
name = "minimal"
mode = "pan_tilt"
duration = 20
seed = 1
scene_size = [1000.0, 1000.0]

[camera]
fov_deg = [90.0, 90.0]

[[actors]]
name = "a"
role = "dominant"
radius = 30.0
intensity = 0.9
waypoints = [{ step = 0, pos = [500.0, 500.0] }]
"#;

    #[test]
    fn minimal_file_loads() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(s.actors.len(), 1);
        assert_eq!(s.dominant_count(), 1);
        assert_eq!(s.render.image_size, 112);
    }

    #[test]
    fn unknown_field_reports_path() {
        let text = MINIMAL.replace("radius = 30.0", "radius = 30.0\ncolour = 3");
        let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("actors[0]") && err.contains("colour"), "{err}");
    }

    #[test]
    fn out_of_order_waypoints_name_actor() {
        let text = MINIMAL.replace(
            "waypoints = [{ step = 0, pos = [500.0, 500.0] }]",
            "waypoints = [{ step = 5, pos = [500.0, 500.0] }, { step = 3, pos = [400.0, 500.0] }]",
        );
        let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("(a)") && err.contains("strictly increasing"), "{err}");
    }

    #[test]
    fn requires_dominant_actor() {
        let text = MINIMAL.replace("role = \"dominant\"", "role = \"distractor\"");
        assert!(Scenario::from_toml_str(&text).is_err());
    }

    #[test]
    fn long_duration_needs_override() {
        let text = MINIMAL.replace("duration = 20", "duration = 800");
        assert!(Scenario::from_toml_str(&text).is_err());
        let text = text.replace("seed = 1", "seed = 1\nallow_long_duration = true");
        assert_eq!(Scenario::from_toml_str(&text).unwrap().duration, 800);
    }

    #[test]
    fn events_parse_and_validate() {
        let text = format!(
            "{MINIMAL}\n[[events]]\nstep = 50\nkind = \"lighting\"\nmultiplier = 0.5\n\n[[events]]\nstep = 9\nkind = \"spawn\"\nactor = \"a\"\n"
        );
        let s = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(s.events[0].kind, EventKind::Lighting { multiplier: 0.5 });
        let bad = text.replace("actor = \"a\"", "actor = \"ghost\"");
        assert!(Scenario::from_toml_str(&bad).unwrap_err().to_string().contains("ghost"));
    }

    #[test]
    fn bundled_scenarios_validate() {
        for name in bundled_names() {
            let s = bundled(name).unwrap();
            assert_eq!(s.name, name);
            assert!(s.dominant_count() >= 1);
        }
        let d = bundled("dueling_room_like").unwrap();
        assert_eq!(d.duration, 500);
        assert_eq!(d.dominant_count(), 1);
        assert_eq!(d.actors.iter().filter(|a| a.role == Role::Distractor).count(), 0);
    }

    #[test]
    fn round_trips_through_toml() {
        let s = bundled("clutter_multi_actor").unwrap();
        let again = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn segment_blocking() {
        let o = Occluder { min: [4.0, -1.0], max: [6.0, 1.0], intensity: 0.1 };
        assert!(o.blocks([0.0, 0.0], [10.0, 0.0]));
        assert!(!o.blocks([0.0, 2.0], [10.0, 2.0]));
        assert!(!o.blocks([0.0, 0.0], [3.0, 0.0]));
    }
}
