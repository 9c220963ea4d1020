//! Comparison agents that share the control pathway with the learned one:
//! a random gaze, a ground-truth oracle and a correlation template tracker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{bearing_to_grid_point, Bearing, FieldOfView};
use crate::tensor::Tensor;
use crate::world::{CameraState, GroundTruth, Mode, ObservationFrame, ViewGeometry};

/// What an agent sees each step. `truth` is only consulted by the oracle.
pub struct Observation<'a> {
    pub frame: &'a ObservationFrame,
    pub truth: Option<&'a GroundTruth>,
    pub view: &'a ViewGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutput {
    /// Target bearing relative to the camera, in view coordinates.
    pub bearing: Bearing,
    /// Saliency over the feature grid, used for AUC.
    pub saliency: Tensor,
    pub loss_global: f64,
    pub loss_attn: f64,
    pub confidence: Option<f64>,
}

pub trait Agent: Send {
    fn name(&self) -> &'static str;
    fn act(&mut self, obs: &Observation) -> Result<AgentOutput, crate::tensor::TensorError>;
}

/// Gaussian bump (one cell sigma) centred on `b` over a `grid x grid` map.
pub fn bump_saliency(b: &Bearing, grid: usize, fov: &FieldOfView) -> Tensor {
    let (pi, pj) = bearing_to_grid_point(b, (grid, grid), fov);
    Tensor::from_fn(&[grid, grid], |k| {
        let (i, j) = ((k / grid) as f64 + 0.5, (k % grid) as f64 + 0.5);
        (-((i - pi).powi(2) + (j - pj).powi(2)) / 2.0).exp()
    })
}

fn point_output(b: Bearing, grid: usize, fov: &FieldOfView, confidence: Option<f64>) -> AgentOutput {
    AgentOutput {
        bearing: b,
        saliency: bump_saliency(&b, grid, fov),
        loss_global: 0.0,
        loss_attn: 0.0,
        confidence,
    }
}

/// Uniform draw in `[-spread, spread]` on both axes, radians.
pub fn random_bearing(rng: &mut impl Rng, spread: f64) -> Bearing {
    if spread <= 0.0 {
        return Bearing::CENTER;
    }
    Bearing::new(rng.random_range(-spread..=spread), rng.random_range(-spread..=spread))
}

#[derive(Debug, Clone)]
pub struct RandomAgent {
    rng: ChaCha8Rng,
    spread: f64,
    grid: usize,
}

impl RandomAgent {
    pub fn new(seed: u64, spread: f64, grid: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spread,
            grid,
        }
    }
}

impl Agent for RandomAgent {
    fn name(&self) -> &'static str {
        "random"
    }

    /// Pan-tilt: a random spot around the middle of the scene. Follower: a
    /// random spot around the middle of the view.
    fn act(&mut self, obs: &Observation) -> Result<AgentOutput, crate::tensor::TensorError> {
        let draw = random_bearing(&mut self.rng, self.spread);
        let cam = &obs.frame.camera;
        let b = match obs.view.mode {
            Mode::PanTilt => Bearing::new(draw.pan - cam.pan, draw.tilt - cam.tilt),
            Mode::Follower => draw,
        };
        Ok(point_output(b, self.grid, &obs.view.fov, None))
    }
}

/// Exact bearing of the nearest dominant actor.
pub fn oracle_bearing(truth: Option<&GroundTruth>) -> Bearing {
    truth.map_or(Bearing::CENTER, |t| t.bearing)
}

#[derive(Debug, Clone)]
pub struct OracleAgent {
    grid: usize,
}

impl OracleAgent {
    pub fn new(grid: usize) -> Self {
        Self { grid }
    }
}

impl Agent for OracleAgent {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn act(&mut self, obs: &Observation) -> Result<AgentOutput, crate::tensor::TensorError> {
        Ok(point_output(oracle_bearing(obs.truth), self.grid, &obs.view.fov, None))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    /// Odd side length of the template patch, pixels.
    pub side: usize,
    /// Half-width of the local search window, pixels.
    pub search_radius: usize,
    pub blend: f64,
    pub confident: f64,
    pub reacquire_after: u32,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            side: 15,
            search_radius: 16,
            blend: 0.1,
            confident: 0.5,
            reacquire_after: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateState {
    pub template: Tensor,
    /// Center pixel of the last match.
    pub last: (usize, usize),
    pub confidence: f64,
    pub low_confidence_steps: u32,
    pub camera: CameraState,
}

/// Zero-mean normalized cross-correlation of equal-length patches; zero when
/// either patch is flat.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 1e-18 || vb <= 1e-18 {
        return 0.0;
    }
    (num / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

fn patch(img: &Tensor, center: (usize, usize), side: usize) -> Vec<f64> {
    let w = img.shape()[2];
    let half = side / 2;
    let mut out = Vec::with_capacity(side * side);
    for r in center.0 - half..=center.0 + half {
        let row = r * w;
        out.extend_from_slice(&img.data()[row + center.1 - half..=row + center.1 + half]);
    }
    out
}

/// Center of the brightest `side x side` window of a `[1, H, W]` frame.
pub fn brightest_blob(img: &Tensor, side: usize) -> (usize, usize) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let half = side / 2;
    // summed-area table
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += img.data()[r * w + c];
            sat[(r + 1) * (w + 1) + c + 1] = sat[r * (w + 1) + c + 1] + row;
        }
    }
    let mut best = (f64::NEG_INFINITY, (half, half));
    for r in half..h - half {
        for c in half..w - half {
            let (r0, c0, r1, c1) = (r - half, c - half, r + half + 1, c + half + 1);
            let s = sat[r1 * (w + 1) + c1] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0]
                + sat[r0 * (w + 1) + c0];
            if s > best.0 {
                best = (s, (r, c));
            }
        }
    }
    best.1
}

fn clamp_center(p: (f64, f64), h: usize, w: usize, half: usize) -> (usize, usize) {
    let r = p.0.floor().clamp(half as f64, (h - 1 - half) as f64) as usize;
    let c = p.1.floor().clamp(half as f64, (w - 1 - half) as f64) as usize;
    (r, c)
}

fn seed_state(img: &Tensor, cfg: &TemplateConfig, camera: CameraState) -> TemplateState {
    let last = brightest_blob(img, cfg.side);
    TemplateState {
        template: Tensor::new(vec![cfg.side, cfg.side], patch(img, last, cfg.side)).expect("sized"),
        last,
        confidence: 1.0,
        low_confidence_steps: 0,
        camera,
    }
}

/// One tracking step. The previous match is carried through the camera's own
/// motion before searching, so only the target's motion has to be found.
pub fn template_track(
    frame: &ObservationFrame,
    state: Option<&TemplateState>,
    view: &ViewGeometry,
    cfg: &TemplateConfig,
) -> (Bearing, f64, TemplateState) {
    let img = &frame.image;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let half = cfg.side / 2;
    let Some(prev) = state else {
        let st = seed_state(img, cfg, frame.camera);
        let b = view.pixel_to_bearing(st.last.0 as f64 + 0.5, st.last.1 as f64 + 0.5);
        return (b, 1.0, st);
    };

    let old = view.pixel_to_bearing(prev.last.0 as f64 + 0.5, prev.last.1 as f64 + 0.5);
    let world = view.world_point(&prev.camera, &old);
    let now = view.bearing_to_pixel(&view.relative_bearing(&frame.camera, world));
    let guess = if now.0.is_finite() && now.1.is_finite() {
        clamp_center(now, h, w, half)
    } else {
        prev.last
    };

    let rad = cfg.search_radius;
    let (r_lo, r_hi) = (guess.0.saturating_sub(rad).max(half), (guess.0 + rad).min(h - 1 - half));
    let (c_lo, c_hi) = (guess.1.saturating_sub(rad).max(half), (guess.1 + rad).min(w - 1 - half));
    let mut best = (f64::NEG_INFINITY, guess);
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            let s = ncc(prev.template.data(), &patch(img, (r, c), cfg.side));
            if s > best.0 {
                best = (s, (r, c));
            }
        }
    }
    let (conf, at) = best;
    let mut next = prev.clone();
    next.camera = frame.camera;
    next.last = at;
    next.confidence = conf;
    if conf > cfg.confident {
        let p = patch(img, at, cfg.side);
        for (t, v) in next.template.data_mut().iter_mut().zip(p) {
            *t = (1.0 - cfg.blend) * *t + cfg.blend * v;
        }
        next.low_confidence_steps = 0;
    } else {
        next.low_confidence_steps += 1;
        if next.low_confidence_steps >= cfg.reacquire_after {
            next = seed_state(img, cfg, frame.camera);
            next.confidence = conf;
        }
    }
    let b = view.pixel_to_bearing(next.last.0 as f64 + 0.5, next.last.1 as f64 + 0.5);
    (b, conf, next)
}

#[derive(Debug, Clone)]
pub struct TemplateAgent {
    cfg: TemplateConfig,
    state: Option<TemplateState>,
    grid: usize,
}

impl TemplateAgent {
    pub fn new(cfg: TemplateConfig, grid: usize) -> Self {
        Self {
            cfg,
            state: None,
            grid,
        }
    }
}

impl Agent for TemplateAgent {
    fn name(&self) -> &'static str {
        "template"
    }

    fn act(&mut self, obs: &Observation) -> Result<AgentOutput, crate::tensor::TensorError> {
        let (b, conf, st) = template_track(obs.frame, self.state.as_ref(), obs.view, &self.cfg);
        self.state = Some(st);
        Ok(point_output(b, self.grid, &obs.view.fov, Some(conf)))
    }
}
