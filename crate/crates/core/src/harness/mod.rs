//! Episode loop, run configuration, logs, suites, ablations and plots.

mod ablation;
mod plot;
mod suite;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use ablation::{apply_overrides, load_grid, run_ablation, AblationGrid, AblationResult, Variant};
pub use plot::emit_plots;
pub use suite::{
    run_suite, write_metrics_csv, write_summary_csv, EpisodeRow, Execution, SuiteResult,
    METRICS_HEADER,
};

use crate::baselines::{
    Agent, AgentOutput, Observation, OracleAgent, RandomAgent, TemplateAgent, TemplateConfig,
};
use crate::control::{Controller, ControllerGains};
use crate::geometry::{Angle, Bearing, PolarOffset};
use crate::metrics::{
    auc_judd, episode_metrics, tracking_quality, tracking_quality_raw, upsample_nearest,
    EpisodeMetrics, StepRecord, TrackingQualityParams,
};
use crate::perception::{compute_energy, Perception, PerceptionConfig, GRID_STRIDE};
use crate::tensor::TensorError;
use crate::world::{
    bundled, load_scenario, mix_seed, write_pgm, frame_filename, GroundTruth, Mode, Scenario,
    World, WorldError,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUT_DIR_ENV: &str = "ACTIVIS_OUT_DIR";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run error: {0}")]
    Run(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }
}

impl From<WorldError> for HarnessError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::Parse { .. } | WorldError::Invalid { .. } | WorldError::Io { .. } => {
                HarnessError::Config(e.to_string())
            }
            _ => HarnessError::Run(e.to_string()),
        }
    }
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        HarnessError::Run(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Ours,
    Random,
    Oracle,
    #[serde(alias = "template_ncc")]
    Template,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [AgentKind::Ours, AgentKind::Random, AgentKind::Oracle, AgentKind::Template];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Ours => "ours",
            AgentKind::Random => "random",
            AgentKind::Oracle => "oracle",
            AgentKind::Template => "template",
        }
    }
}

impl std::str::FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ours" => Ok(AgentKind::Ours),
            "random" => Ok(AgentKind::Random),
            "oracle" => Ok(AgentKind::Oracle),
            "template" | "template_ncc" => Ok(AgentKind::Template),
            other => Err(format!("unknown agent `{other}` (ours, random, oracle, template)")),
        }
    }
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scenario file path, or the name of a bundled scenario.
    pub scenario: String,
    pub agent: AgentKind,
    /// Scenario mode the agent setup expects; `None` accepts either.
    pub mode: Option<Mode>,
    pub seeds: Vec<u64>,
    pub max_steps: usize,
    pub loss_termination_window: usize,
    pub gains: ControllerGains,
    pub perception: PerceptionConfig,
    pub metrics: TrackingQualityParams,
    pub template: TemplateConfig,
    pub random_spread_deg: f64,
    pub output_dir: String,
    /// Write every observed frame as a PGM image.
    pub dump_frames: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: "follower_basic".into(),
            agent: AgentKind::Ours,
            mode: None,
            seeds: vec![0],
            max_steps: 500,
            loss_termination_window: 10,
            gains: ControllerGains::default(),
            perception: PerceptionConfig::default(),
            metrics: TrackingQualityParams::default(),
            template: TemplateConfig::default(),
            random_spread_deg: 30.0,
            output_dir: "out".into(),
            dump_frames: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let de = toml::Deserializer::parse(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| HarnessError::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if self.loss_termination_window == 0 {
            return bad("loss_termination_window must be positive");
        }
        if !(self.gains.lambda_p >= 0.0 && self.gains.lambda_d >= 0.0) {
            return bad("controller gains must be non-negative");
        }
        self.metrics
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let p = &self.perception;
        if p.hidden_dim == 0 || p.attn_dim == 0 || p.layers == 0 {
            return bad("perception dimensions must be positive");
        }
        if self.template.side.is_multiple_of(2) {
            return bad("template.side must be odd");
        }
        Ok(())
    }

    /// Output directory, honouring the environment override.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var(OUT_DIR_ENV) {
            Ok(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(&self.output_dir),
        }
    }

    /// Short stable digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn load_scenario(&self) -> Result<Scenario, HarnessError> {
        let path = Path::new(&self.scenario);
        let scenario = if path.is_file() {
            load_scenario(path)?
        } else {
            bundled(&self.scenario).ok_or_else(|| {
                HarnessError::Config(format!(
                    "scenario `{}` is neither a file nor a bundled scenario",
                    self.scenario
                ))
            })?
        };
        self.check_scenario(&scenario)?;
        Ok(scenario)
    }

    pub fn check_scenario(&self, scenario: &Scenario) -> Result<(), HarnessError> {
        match self.mode {
            Some(m) if m != scenario.mode => Err(HarnessError::Config(format!(
                "config expects a {m:?} scenario but `{}` is {:?}",
                scenario.name, scenario.mode
            ))),
            _ => Ok(()),
        }
    }
}

/// World and agent seeds for one episode, derived from the episode seed.
pub fn episode_streams(scenario: &Scenario, seed: u64) -> (u64, u64) {
    let mut root = ChaCha8Rng::seed_from_u64(mix_seed(scenario.seed) ^ seed);
    (root.next_u64(), root.next_u64())
}

/// The learned agent: online predictive perception.
pub struct OursAgent {
    perception: Perception,
}

impl OursAgent {
    pub fn new(cfg: PerceptionConfig, scenario: &Scenario, seed: u64) -> Self {
        Self {
            perception: Perception::new(cfg, scenario.render.image_size, scenario.fov(), seed),
        }
    }

    pub fn perception(&self) -> &Perception {
        &self.perception
    }
}

impl Agent for OursAgent {
    fn name(&self) -> &'static str {
        "ours"
    }

    fn act(&mut self, obs: &Observation) -> Result<AgentOutput, TensorError> {
        let out = self.perception.perceive_step(&obs.frame.image)?;
        Ok(AgentOutput {
            bearing: out.action_bearing,
            saliency: out.error_map.raw,
            loss_global: out.loss_global,
            loss_attn: out.loss_attn,
            confidence: None,
        })
    }
}

pub fn make_agent(kind: AgentKind, cfg: &RunConfig, scenario: &Scenario, seed: u64) -> Box<dyn Agent> {
    let grid = scenario.render.image_size / GRID_STRIDE;
    match kind {
        AgentKind::Ours => Box::new(OursAgent::new(cfg.perception.clone(), scenario, seed)),
        AgentKind::Random => {
            Box::new(RandomAgent::new(seed, cfg.random_spread_deg.to_radians(), grid))
        }
        AgentKind::Oracle => Box::new(OracleAgent::new(grid)),
        AgentKind::Template => Box::new(TemplateAgent::new(cfg.template, grid)),
    }
}

/// Counts consecutive lost steps; fires on exactly the `window`-th.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossWindow {
    window: usize,
    run: usize,
}

impl LossWindow {
    pub fn new(window: usize) -> Self {
        Self { window, run: 0 }
    }

    /// Records one step; true when the episode must end.
    pub fn observe(&mut self, lost: bool) -> bool {
        self.run = if lost { self.run + 1 } else { 0 };
        self.run >= self.window
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxSteps,
    Lost,
}

/// Append-only JSON-lines record of an episode: one header line, one line
/// per step, one summary line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub lines: Vec<String>,
    pub records: Vec<StepRecord>,
    pub termination: Termination,
}

impl EpisodeLog {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &self.lines {
            out.extend_from_slice(l.as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    /// Per-step trace as CSV text (`step,gamma,...`).
    pub fn trace_csv(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash} version={VERSION}\n");
        s.push_str("step,gamma,gamma_relaxed,lost,aae_deg\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.gamma, r.gamma_relaxed, r.lost, r.aae_deg
            ));
        }
        s
    }
}

/// Camera-relative truth turned into the quality inputs and angular error.
fn score(
    mode: Mode,
    truth: &GroundTruth,
    ideal_distance: f64,
) -> (PolarOffset, PolarOffset, f64) {
    match mode {
        Mode::Follower => {
            let off = truth.offset.expect("follower truth has an offset");
            let aae = off.theta.radians().abs().to_degrees();
            (off, PolarOffset::new(ideal_distance, Angle::ZERO), aae)
        }
        Mode::PanTilt => {
            let err = truth.bearing.distance(&Bearing::CENTER);
            (
                PolarOffset::new(0.0, Angle::from_radians(err)),
                PolarOffset::new(0.0, Angle::ZERO),
                err.to_degrees(),
            )
        }
    }
}

/// Everything an episode needs besides the agent.
pub struct EpisodeSetup<'a> {
    pub cfg: &'a RunConfig,
    pub scenario: &'a Scenario,
    pub seed: u64,
    pub agent_kind: &'a str,
    /// Directory for frame dumps when `cfg.dump_frames` is set.
    pub frame_dir: Option<&'a Path>,
}

/// Runs one episode with an arbitrary agent.
pub fn run_episode_with(
    setup: &EpisodeSetup,
    agent: &mut dyn Agent,
) -> Result<(EpisodeLog, EpisodeMetrics), HarnessError> {
    let EpisodeSetup { cfg, scenario, seed, agent_kind, .. } = *setup;
    cfg.check_scenario(scenario)?;
    let (world_seed, _) = episode_streams(scenario, seed);
    let world = World::new(scenario.clone(), world_seed);
    let view = *world.view();
    let mode = scenario.mode;
    let horizon = cfg.max_steps.min(scenario.duration as usize);
    let relaxed = cfg.metrics.relaxed();
    let factor = scenario.render.image_size / (scenario.render.image_size / GRID_STRIDE);
    let config_hash = cfg.hash();

    let mut lines = vec![serde_json::to_string(&json!({
        "type": "header",
        "tool": "activis",
        "version": VERSION,
        "config_hash": config_hash,
        "config": cfg,
        "scenario": scenario.name,
        "agent": agent_kind,
        "seed": seed,
        "horizon": horizon,
    }))
    .expect("json")];

    let mut ws = world.initial_state();
    let mut cam = world.initial_camera();
    let mut ctrl = Controller::new(mode, cfg.gains, scenario.ideal_distance);
    let mut records = Vec::with_capacity(horizon);
    let mut window = LossWindow::new(cfg.loss_termination_window);
    let mut termination = Termination::MaxSteps;

    for t in 0..horizon {
        let frame = world.render(&ws, &cam);
        if cfg.dump_frames {
            if let Some(dir) = setup.frame_dir {
                let path = dir.join(frame_filename(seed as usize, ws.step));
                let tag = format!("config_hash={config_hash} version={VERSION}");
                write_pgm(&frame, &path, Some(&tag)).map_err(|e| HarnessError::io(&path, e))?;
            }
        }
        let truth = world.ground_truth(&ws, &cam);
        let out = agent.act(&Observation {
            frame: &frame,
            truth: truth.as_ref(),
            view: &view,
        })?;

        let rho_est = match mode {
            Mode::Follower => view.tilt_to_range(out.bearing.tilt),
            Mode::PanTilt => 0.0,
        };
        let cmd = ctrl.command(&out.bearing, rho_est);
        let act = world.apply(&cam, &cmd)?;
        cam = act.camera;
        ws = world.step(&ws)?;

        let auc = match &truth {
            Some(tr) if tr.visible => match tr.pixel {
                Some(px) => Some(
                    auc_judd(&upsample_nearest(&out.saliency, factor), &[px])
                        .map_err(|e| HarnessError::Run(e.to_string()))?,
                ),
                None => None,
            },
            _ => None,
        };
        let after = world.ground_truth(&ws, &cam);
        let (gamma, gamma_relaxed, raw, aae, gt_bearing, visible) = match &after {
            Some(tr) => {
                let (cur, ideal, aae) = score(mode, tr, scenario.ideal_distance);
                (
                    tracking_quality(&cur, &ideal, &cfg.metrics),
                    tracking_quality(&cur, &ideal, &relaxed),
                    tracking_quality_raw(&cur, &ideal, &cfg.metrics),
                    aae,
                    tr.bearing,
                    tr.visible,
                )
            }
            // no dominant actor in play: neutral step
            None => (0.0, 0.0, 0.0, 0.0, Bearing::CENTER, false),
        };
        let lost = raw <= -1.0;
        let energy = compute_energy(out.loss_global, &out.bearing, &Bearing::CENTER);
        let record = StepRecord {
            step: t as u32,
            gamma,
            gamma_relaxed,
            lost,
            aae_deg: aae,
            camera_bearing: Bearing::new(cam.pan, cam.tilt),
            action_bearing: out.bearing,
            auc,
        };
        lines.push(
            serde_json::to_string(&json!({
                "type": "step",
                "step": t,
                "agent": agent_kind,
                "seed": seed,
                "camera": cam,
                "command": cmd,
                "applied": act.applied,
                "clamped": act.clamped,
                "action_bearing": out.bearing,
                "gt_bearing": gt_bearing,
                "visible": visible,
                "gamma": gamma,
                "gamma_relaxed": gamma_relaxed,
                "lost": lost,
                "aae_deg": aae,
                "auc": auc,
                "loss_global": out.loss_global,
                "loss_attn": out.loss_attn,
                "energy": energy,
                "confidence": out.confidence,
                "incidents": ctrl.state.incidents,
            }))
            .expect("json"),
        );
        records.push(record);

        if window.observe(lost) {
            termination = Termination::Lost;
            break;
        }
    }

    let metrics = episode_metrics(&records, horizon);
    lines.push(
        serde_json::to_string(&json!({
            "type": "summary",
            "termination": termination,
            "metrics": metrics,
        }))
        .expect("json"),
    );
    Ok((
        EpisodeLog {
            lines,
            records,
            termination,
        },
        metrics,
    ))
}

/// Runs one episode of `cfg.agent` on the configured scenario.
pub fn run_episode(cfg: &RunConfig, seed: u64) -> Result<(EpisodeLog, EpisodeMetrics), HarnessError> {
    let scenario = cfg.load_scenario()?;
    run_agent_episode(cfg, &scenario, cfg.agent, seed)
}

pub fn run_agent_episode(
    cfg: &RunConfig,
    scenario: &Scenario,
    kind: AgentKind,
    seed: u64,
) -> Result<(EpisodeLog, EpisodeMetrics), HarnessError> {
    let (_, agent_seed) = episode_streams(scenario, seed);
    let mut agent = make_agent(kind, cfg, scenario, agent_seed);
    let setup = EpisodeSetup {
        cfg,
        scenario,
        seed,
        agent_kind: kind.name(),
        frame_dir: None,
    };
    run_episode_with(&setup, agent.as_mut())
}

/// Writes the JSONL log, the step trace and a one-row metrics CSV for a
/// single episode; returns the written paths.
pub fn write_episode_outputs(
    cfg: &RunConfig,
    scenario: &Scenario,
    seed: u64,
    log: &EpisodeLog,
    metrics: &EpisodeMetrics,
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let stem = format!("{}_{}_seed{seed}", scenario.name, cfg.agent);
    let log_path = dir.join(format!("{stem}.jsonl"));
    log.write(&log_path)?;
    let trace_path = dir.join(format!("{stem}_trace.csv"));
    std::fs::write(&trace_path, log.trace_csv(&cfg.hash()))
        .map_err(|e| HarnessError::io(&trace_path, e))?;
    let csv_path = dir.join(format!("{stem}_metrics.csv"));
    let row = EpisodeRow {
        agent: cfg.agent,
        scenario: scenario.name.clone(),
        seed,
        metrics: *metrics,
    };
    let mut f = std::fs::File::create(&csv_path).map_err(|e| HarnessError::io(&csv_path, e))?;
    write_metrics_csv(&mut f, &[row], &cfg.hash()).map_err(|e| HarnessError::io(&csv_path, e))?;
    f.flush().map_err(|e| HarnessError::io(&csv_path, e))?;
    Ok(vec![log_path, trace_path, csv_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        let err = RunConfig::from_toml_str("agent = \"ours\"\nbogus = 1\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("bogus"));
        let err = RunConfig::from_toml_str("[gains]\nlambda_p = -1.0\nlambda_d = 0.0\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn shipped_config_is_the_default() {
        let cfg = RunConfig::from_toml_str(include_str!("../../configs/default.toml")).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn agent_names_parse() {
        for k in AgentKind::ALL {
            assert_eq!(k.name().parse::<AgentKind>().unwrap(), k);
        }
        assert_eq!("template_ncc".parse::<AgentKind>().unwrap(), AgentKind::Template);
        assert!("human".parse::<AgentKind>().is_err());
    }

    #[test]
    fn loss_window_fires_on_tenth_consecutive() {
        let mut w = LossWindow::new(10);
        let pattern: Vec<bool> = (0..9).map(|_| true).chain([false]).chain((0..10).map(|_| true)).collect();
        let fired: Vec<usize> = pattern
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| w.observe(l).then_some(i))
            .collect();
        assert_eq!(fired.first(), Some(&19));
    }

    #[test]
    fn mode_mismatch_is_config_error() {
        let cfg = RunConfig {
            scenario: "clutter_multi_actor".into(),
            mode: Some(Mode::Follower),
            ..RunConfig::default()
        };
        let err = cfg.load_scenario().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = run_episode(&cfg, 0).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn hash_tracks_config() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.gains.lambda_d = 0.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn streams_differ_by_seed() {
        let s = bundled("follower_basic").unwrap();
        assert_eq!(episode_streams(&s, 3), episode_streams(&s, 3));
        assert_ne!(episode_streams(&s, 3), episode_streams(&s, 4));
        let (w, a) = episode_streams(&s, 3);
        assert_ne!(w, a);
    }

    #[test]
    fn oracle_episode_is_clean() {
        let cfg = RunConfig {
            agent: AgentKind::Oracle,
            max_steps: 60,
            ..RunConfig::default()
        };
        let (log, m) = run_episode(&cfg, 1).unwrap();
        assert_eq!(log.records.len(), 60);
        assert_eq!(m.recall, 1.0);
        assert_eq!(log.termination, Termination::MaxSteps);
        assert_eq!(log.lines.len(), 62);
        assert!(log.lines[0].contains(&cfg.hash()));
    }
}
