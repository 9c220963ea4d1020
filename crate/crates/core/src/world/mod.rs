//! Deterministic 2D world: moving actors, static occluders, scripted events,
//! a rate-limited active camera, rendering and ground-truth queries.

mod camera;
mod scenario;
mod view;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use camera::{apply_command, ActuatorLimits, Actuation, CameraState, ControlCommand};
pub use scenario::{
    bundled, bundled_names, load_scenario, ActorSpec, CameraSpec, Event, EventKind, Mode,
    Occluder, RenderSpec, Role, Scenario, Texture, Waypoint, BUNDLED, SCHEMA_VERSION,
};
pub use view::ViewGeometry;

use crate::geometry::{Bearing, PolarOffset};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("cannot read scenario {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("scenario parse error at `{path}`: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid scenario field `{path}`: {msg}")]
    Invalid { path: String, msg: String },
    #[error("cannot step past the scenario duration ({duration})")]
    PastDuration { duration: u32 },
    #[error("non-finite camera command")]
    NonFiniteCommand,
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub step: u32,
    pub actors: Vec<ActorState>,
    pub lighting: f64,
}

#[derive(Debug, Clone)]
pub struct ObservationFrame {
    /// `[1, H, W]` grayscale in `[0, 1]`.
    pub image: Tensor,
    pub step: u32,
    pub camera: CameraState,
}

/// Where the nearest dominant actor is, relative to the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub actor: usize,
    /// Camera-relative bearing in view coordinates (follower: tilt encodes range).
    pub bearing: Bearing,
    /// Distance and bearing from the agent (follower only).
    pub offset: Option<PolarOffset>,
    pub visible: bool,
    /// Image pixel of the actor center, when it falls inside the image.
    pub pixel: Option<(usize, usize)>,
}

/// A scenario resolved for one episode: per-episode trajectory jitter and the
/// pixel-noise seed are fixed here.
#[derive(Debug, Clone)]
pub struct World {
    scenario: Scenario,
    view: ViewGeometry,
    limits: ActuatorLimits,
    tracks: Vec<Vec<Waypoint>>,
    spawn_steps: Vec<Option<u32>>,
    noise_seed: u64,
}

fn lerp(a: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

/// Piecewise-linear position and per-step velocity along a waypoint track.
fn track_at(track: &[Waypoint], step: u32) -> ([f64; 2], [f64; 2]) {
    let first = &track[0];
    if step <= first.step || track.len() == 1 {
        let v = if track.len() > 1 && step == first.step {
            let n = &track[1];
            let dt = (n.step - first.step) as f64;
            [(n.pos[0] - first.pos[0]) / dt, (n.pos[1] - first.pos[1]) / dt]
        } else {
            [0.0, 0.0]
        };
        return (first.pos, v);
    }
    for w in track.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if step <= b.step {
            let dt = (b.step - a.step) as f64;
            let t = (step - a.step) as f64 / dt;
            let v = [(b.pos[0] - a.pos[0]) / dt, (b.pos[1] - a.pos[1]) / dt];
            return (lerp(a.pos, b.pos, t), v);
        }
    }
    (track.last().expect("non-empty").pos, [0.0, 0.0])
}

fn texture_value(spec: &ActorSpec, local: [f64; 2], heading: f64, step: u32) -> f64 {
    let base = spec.intensity;
    let t = step as f64;
    match spec.texture {
        Texture::Solid => base,
        Texture::Pulse => base * (0.55 + 0.45 * (2.0 * std::f64::consts::PI * t / 6.0).sin()),
        Texture::Stripes => {
            let (c, s) = (heading.cos(), heading.sin());
            let along = local[0] * c + local[1] * s;
            let phase = 2.0 * std::f64::consts::PI * (along - 3.0 * t) / 12.0;
            base * (0.55 + 0.45 * phase.cos())
        }
        Texture::Checker => {
            let cell = (local[0] / 8.0).floor() as i64 + (local[1] / 8.0).floor() as i64;
            if (cell + step as i64).rem_euclid(2) == 0 {
                base
            } else {
                0.3 * base
            }
        }
    }
}

impl World {
    /// Resolves `scenario` for an episode whose world stream is seeded by `seed`.
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed));
        let jitter = scenario.trajectory_jitter;
        let tracks = scenario
            .actors
            .iter()
            .map(|a| {
                a.waypoints
                    .iter()
                    .map(|w| {
                        let mut pos = w.pos;
                        if jitter > 0.0 {
                            for (k, p) in pos.iter_mut().enumerate() {
                                *p = (*p + rng.random_range(-jitter..=jitter))
                                    .clamp(0.0, scenario.scene_size[k]);
                            }
                        }
                        Waypoint { step: w.step, pos }
                    })
                    .collect()
            })
            .collect();
        let spawn_steps = scenario
            .actors
            .iter()
            .map(|a| {
                scenario.events.iter().find_map(|e| match &e.kind {
                    EventKind::Spawn { actor } if *actor == a.name => Some(e.step),
                    _ => None,
                })
            })
            .collect();
        let noise_seed = rng.random();
        Self {
            view: ViewGeometry::from_scenario(&scenario),
            limits: ActuatorLimits::from_scenario(&scenario),
            scenario,
            tracks,
            spawn_steps,
            noise_seed,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn view(&self) -> &ViewGeometry {
        &self.view
    }

    pub fn limits(&self) -> &ActuatorLimits {
        &self.limits
    }

    pub fn initial_camera(&self) -> CameraState {
        CameraState::initial(&self.scenario)
    }

    pub fn initial_state(&self) -> WorldState {
        self.state_at(0)
    }

    /// The state at any step, computed directly from the scenario.
    pub fn state_at(&self, step: u32) -> WorldState {
        let actors = self
            .tracks
            .iter()
            .zip(&self.spawn_steps)
            .map(|(track, spawn)| {
                let (position, velocity) = track_at(track, step);
                ActorState {
                    position,
                    velocity,
                    active: spawn.is_none_or(|s| step >= s),
                }
            })
            .collect();
        let mut lighting = 1.0;
        let mut latest = None;
        for e in &self.scenario.events {
            if let EventKind::Lighting { multiplier } = e.kind {
                if e.step <= step && latest.is_none_or(|s| e.step >= s) {
                    lighting = multiplier;
                    latest = Some(e.step);
                }
            }
        }
        WorldState {
            step,
            actors,
            lighting,
        }
    }

    pub fn step(&self, w: &WorldState) -> Result<WorldState, WorldError> {
        if w.step >= self.scenario.duration {
            return Err(WorldError::PastDuration {
                duration: self.scenario.duration,
            });
        }
        Ok(self.state_at(w.step + 1))
    }

    fn occluded(&self, cam: &CameraState, p: [f64; 2]) -> bool {
        match self.scenario.mode {
            Mode::PanTilt => self.scenario.occluders.iter().any(|o| o.contains(p)),
            Mode::Follower => self
                .scenario
                .occluders
                .iter()
                .any(|o| o.blocks(cam.position, p)),
        }
    }

    /// Noise-free intensity of a world point.
    fn shade(&self, w: &WorldState, cam: &CameraState, p: [f64; 2]) -> f64 {
        let s = &self.scenario;
        if !s.in_bounds(p) {
            return s.render.outside;
        }
        if let Some(o) = s.occluders.iter().rev().find(|o| o.contains(p)) {
            return o.intensity;
        }
        for (k, a) in s.actors.iter().enumerate().rev() {
            let st = &w.actors[k];
            if !st.active {
                continue;
            }
            let local = [p[0] - st.position[0], p[1] - st.position[1]];
            if local[0].hypot(local[1]) > a.radius {
                continue;
            }
            if s.mode == Mode::Follower && self.occluded(cam, p) {
                continue;
            }
            let heading = st.velocity[1].atan2(st.velocity[0]);
            return texture_value(a, local, heading, w.step);
        }
        s.render.background
    }

    /// Renders what the camera sees. Pure in `(scenario, episode seed, step, camera)`.
    pub fn render(&self, w: &WorldState, cam: &CameraState) -> ObservationFrame {
        let n = self.view.image_size;
        let sigma = self.scenario.render.noise_sigma;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.noise_seed ^ u64::from(w.step)));
        let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
        let mut data = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let b = self.view.pixel_to_bearing(r as f64 + 0.5, c as f64 + 0.5);
                let p = self.view.world_point(cam, &b);
                let v = self.shade(w, cam, p) * w.lighting;
                let noise = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                data.push((v + noise).clamp(0.0, 1.0));
            }
        }
        ObservationFrame {
            image: Tensor::new(vec![1, n, n], data).expect("sized"),
            step: w.step,
            camera: *cam,
        }
    }

    /// Ground truth for the nearest active dominant actor, or `None` when no
    /// dominant actor is active.
    pub fn ground_truth(&self, w: &WorldState, cam: &CameraState) -> Option<GroundTruth> {
        let s = &self.scenario;
        let mut best: Option<(f64, GroundTruth)> = None;
        for (k, a) in s.actors.iter().enumerate() {
            let st = &w.actors[k];
            if a.role != Role::Dominant || !st.active {
                continue;
            }
            let bearing = self.view.relative_bearing(cam, st.position);
            let (key, offset, in_view) = match s.mode {
                Mode::PanTilt => (
                    bearing.pan.hypot(bearing.tilt),
                    None,
                    cam.fov.contains(&bearing),
                ),
                Mode::Follower => {
                    let rho = (st.position[0] - cam.position[0])
                        .hypot(st.position[1] - cam.position[1]);
                    let within = bearing.pan.abs() <= cam.fov.horizontal() / 2.0
                        && rho <= self.view.view_range;
                    (
                        rho,
                        Some(PolarOffset::new(rho, bearing.pan.into())),
                        within,
                    )
                }
            };
            let visible = in_view && !self.occluded(cam, st.position);
            let gt = GroundTruth {
                actor: k,
                bearing,
                offset,
                visible,
                pixel: self.view.bearing_to_pixel_index(&bearing),
            };
            if best.as_ref().is_none_or(|(d, _)| key < *d) {
                best = Some((key, gt));
            }
        }
        best.map(|(_, g)| g)
    }

    pub fn apply(&self, cam: &CameraState, cmd: &ControlCommand) -> Result<Actuation, WorldError> {
        apply_command(cam, cmd, &self.limits)
    }
}

pub fn frame_filename(episode: usize, step: u32) -> String {
    format!("ep{episode}_t{step}.pgm")
}

/// Writes a frame as a binary 8-bit portable graymap.
/// Binary PGM with an optional header comment line.
pub fn write_pgm(frame: &ObservationFrame, path: &Path, comment: Option<&str>) -> std::io::Result<()> {
    let (h, w) = (frame.image.shape()[1], frame.image.shape()[2]);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    match comment {
        Some(c) => write!(out, "P5\n# {c}\n{w} {h}\n255\n")?,
        None => write!(out, "P5\n{w} {h}\n255\n")?,
    }
    let bytes: Vec<u8> = frame
        .image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()
}
