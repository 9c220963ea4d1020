//! Online predictive perception: encode each frame, predict the next feature
//! grid, treat the gated prediction error as saliency and learn from it.

mod model;

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use model::{
    encode, init_params, loss_attn, loss_global, predict_next, LossFlags, LstmState,
    PerceptionConfig, Prediction, CHANNELS, GRID_STRIDE,
};

use crate::geometry::{grid_cell_to_bearing, Bearing, FieldOfView};
use crate::tensor::{
    softmax, AdaptiveLr, Graph, ParameterSet, Result, Sgd, StepOutcome, Tensor, TensorError,
};

/// Raw per-cell errors and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub raw: Tensor,
    pub normalized: Tensor,
}

impl ErrorMap {
    pub fn from_raw(raw: Tensor) -> Self {
        let normalized = softmax(&raw);
        Self { raw, normalized }
    }

    pub fn uniform(grid: usize) -> Self {
        Self::from_raw(Tensor::zeros(&[grid, grid]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    /// Recurrent state that produced the pending prediction.
    pub state_in: LstmState,
    /// Recurrent state after the pending prediction.
    pub state_out: LstmState,
    /// Error map from the most recent step.
    pub prev_error: ErrorMap,
    /// Error map the pending attention is trained to match.
    pub attn_target: ErrorMap,
    pub prev_frame: Option<Tensor>,
    pub step: u32,
}

impl PredictorState {
    pub fn reset(cfg: &PerceptionConfig, grid: usize) -> Self {
        let z = LstmState::zeros(cfg.layers, cfg.hidden_dim);
        Self {
            state_in: z.clone(),
            state_out: z,
            prev_error: ErrorMap::uniform(grid),
            attn_target: ErrorMap::uniform(grid),
            prev_frame: None,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptOutput {
    pub loss_global: f64,
    pub loss_attn: f64,
    pub error_map: ErrorMap,
    pub action_cell: (usize, usize),
    pub action_bearing: Bearing,
    /// Effective learning rate, or `None` if no update was applied.
    pub lr_eff: Option<f64>,
}

/// Cell of maximum error. Exact ties go to the cell nearest the grid center,
/// then lexicographically. The bearing is the mean over tied cells, so a
/// uniform map points straight ahead.
pub fn localize(raw: &Tensor, fov: &FieldOfView) -> ((usize, usize), Bearing) {
    let (h, w) = (raw.shape()[0], raw.shape()[1]);
    let best = raw.max();
    let (ci, cj) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut ties = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if raw.at2(i, j) == best {
                ties.push((i, j));
            }
        }
    }
    if ties.is_empty() {
        // all-NaN map
        let (i, j) = (h / 2, w / 2);
        return ((i, j), Bearing::CENTER);
    }
    let dist = |&(i, j): &(usize, usize)| {
        (i as f64 + 0.5 - ci).powi(2) + (j as f64 + 0.5 - cj).powi(2)
    };
    let cell = *ties
        .iter()
        .min_by(|a, b| dist(a).total_cmp(&dist(b)).then(a.cmp(b)))
        .expect("non-empty");
    let n = ties.len() as f64;
    let (mut pan, mut tilt) = (0.0, 0.0);
    for &c in &ties {
        let b = grid_cell_to_bearing(c, (h, w), fov).expect("in range");
        pan += b.pan;
        tilt += b.tilt;
    }
    (cell, Bearing::new(pan / n, tilt / n))
}

/// Diagnostic energy: the global loss plus the squared angular gap between
/// where the action is and where the camera points.
pub fn compute_energy(loss_global: f64, q: &Bearing, c: &Bearing) -> f64 {
    let d = q.distance(c);
    loss_global + d * d
}

/// One online learner: parameters, optimizer and recurrent state.
#[derive(Debug, Clone)]
pub struct Perception {
    cfg: PerceptionConfig,
    grid: usize,
    fov: FieldOfView,
    params: ParameterSet,
    sgd: Sgd,
    state: PredictorState,
}

impl Perception {
    /// Fresh learner for `image_size` square frames; parameters drawn from `seed`.
    pub fn new(cfg: PerceptionConfig, image_size: usize, fov: FieldOfView, seed: u64) -> Self {
        let grid = image_size / GRID_STRIDE;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, grid, &mut rng);
        Self::with_params(cfg, grid, fov, params)
    }

    pub fn with_params(
        cfg: PerceptionConfig,
        grid: usize,
        fov: FieldOfView,
        params: ParameterSet,
    ) -> Self {
        let mut sgd = Sgd::new(cfg.lr, cfg.clip);
        if cfg.adaptive_lr {
            sgd = sgd.with_adaptive(AdaptiveLr::default());
        }
        let state = PredictorState::reset(&cfg, grid);
        Self {
            cfg,
            grid,
            fov,
            params,
            sgd,
            state,
        }
    }

    pub fn config(&self) -> &PerceptionConfig {
        &self.cfg
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn state(&self) -> &PredictorState {
        &self.state
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.cfg.frozen = frozen;
    }

    /// Clears the recurrent state; parameters are kept.
    pub fn reset(&mut self) {
        self.state = PredictorState::reset(&self.cfg, self.grid);
    }

    pub fn save_params<W: Write>(&self, out: W) -> std::io::Result<()> {
        self.params.save(out)
    }

    pub fn load_params<R: BufRead>(&mut self, input: R) -> Result<()> {
        let loaded = ParameterSet::load(input)?;
        for name in self.params.names() {
            let want = self.params.get(name).expect("listed").shape();
            match loaded.get(name) {
                Some(t) if t.shape() == want => {}
                _ => return Err(TensorError::Snapshot(format!("missing or misshapen `{name}`"))),
            }
        }
        if loaded.len() != self.params.len() {
            return Err(TensorError::Snapshot("unexpected extra tensors".into()));
        }
        self.params = loaded;
        Ok(())
    }

    fn flags(&self) -> LossFlags {
        LossFlags {
            disable_motion_gate: self.cfg.disable_motion_gate,
            literal_eq2: self.cfg.literal_eq2,
        }
    }

    /// Learns from `frame` against the pending prediction, then predicts the
    /// next step. `frame` is `[1, H, W]`.
    pub fn perceive_step(&mut self, frame: &Tensor) -> Result<PerceptOutput> {
        let mut out = PerceptOutput {
            loss_global: 0.0,
            loss_attn: 0.0,
            error_map: ErrorMap::uniform(self.grid),
            action_cell: (0, 0),
            action_bearing: Bearing::CENTER,
            lr_eff: None,
        };

        if let Some(prev) = &self.state.prev_frame {
            let mut g = Graph::new();
            let f_prev = encode(&mut g, &self.params, prev)?;
            let pred = predict_next(&mut g, &self.params, f_prev, &self.state.state_in, &self.cfg)?;
            let f_now = encode(&mut g, &self.params, frame)?;
            let (lg, e) = loss_global(&mut g, pred.f_hat, f_now, f_prev, self.flags())?;
            let la = loss_attn(&mut g, pred.alpha, &self.state.attn_target.normalized, f_prev)?;
            out.loss_global = g.value(lg).item();
            out.loss_attn = g.value(la).item();
            out.error_map = ErrorMap::from_raw(g.value(e).clone());
            if !self.cfg.frozen {
                let total = if self.cfg.disable_attn_loss {
                    lg
                } else {
                    g.add(lg, la)?
                };
                let loss = g.value(total).item();
                g.backward(total, &mut self.params)?;
                if let StepOutcome::Applied { lr_eff } = self.sgd.step(&mut self.params, loss) {
                    out.lr_eff = Some(lr_eff);
                }
            }
        }
        let (cell, bearing) = localize(&out.error_map.raw, &self.fov);
        out.action_cell = cell;
        out.action_bearing = bearing;

        // predict forward from the current frame with the updated parameters
        let mut g = Graph::new();
        let f_now = encode(&mut g, &self.params, frame)?;
        let pred = predict_next(&mut g, &self.params, f_now, &self.state.state_out, &self.cfg)?;
        let next_out = pred.state(&g);
        let st = &mut self.state;
        st.state_in = std::mem::replace(&mut st.state_out, next_out);
        st.attn_target = std::mem::replace(&mut st.prev_error, out.error_map.clone());
        st.prev_frame = Some(frame.clone());
        st.step += 1;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fov() -> FieldOfView {
        FieldOfView::from_degrees(90.0, 90.0).unwrap()
    }

    #[test]
    fn uniform_map_points_at_center() {
        let (cell, b) = localize(&Tensor::zeros(&[14, 14]), &fov());
        assert_eq!(cell, (6, 6));
        assert!(b.pan.abs() < 1e-12 && b.tilt.abs() < 1e-12);
    }

    #[test]
    fn single_peak_localizes() {
        let mut m = Tensor::zeros(&[14, 14]);
        m.data_mut()[3 * 14 + 10] = 1.0;
        let (cell, b) = localize(&m, &fov());
        assert_eq!(cell, (3, 10));
        assert_eq!(b, grid_cell_to_bearing((3, 10), (14, 14), &fov()).unwrap());
    }

    #[test]
    fn softmax_preserves_argmax() {
        let m = Tensor::from_fn(&[14, 14], |k| ((k * 37) % 101) as f64 / 7.0);
        let e = ErrorMap::from_raw(m.clone());
        assert_eq!(e.normalized.argmax(), m.argmax());
        assert!((e.normalized.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn energy_examples() {
        assert_eq!(compute_energy(0.0, &Bearing::CENTER, &Bearing::CENTER), 0.0);
        let e = compute_energy(0.3, &Bearing::new(0.1, 0.0), &Bearing::CENTER);
        assert!((e - 0.31).abs() < 1e-12);
        let mut last = 0.3;
        for k in 1..20 {
            let e = compute_energy(0.3, &Bearing::new(0.05 * k as f64, 0.0), &Bearing::CENTER);
            assert!(e > last);
            last = e;
        }
    }

    fn blob_frame(step: usize) -> Tensor {
        Tensor::from_fn(&[1, 32, 32], |k| {
            let (r, c) = ((k / 32) as f64, (k % 32) as f64);
            let cx = 8.0 + step as f64;
            if (r - 16.0).powi(2) + (c - cx).powi(2) < 16.0 { 0.9 } else { 0.2 }
        })
    }

    fn small() -> Perception {
        let cfg = PerceptionConfig {
            hidden_dim: 8,
            attn_dim: 4,
            ..PerceptionConfig::default()
        };
        Perception::new(cfg, 32, fov(), 3)
    }

    #[test]
    fn first_frame_contract() {
        let mut p = small();
        let out = p.perceive_step(&blob_frame(0)).unwrap();
        assert_eq!(out.loss_global, 0.0);
        assert_eq!(out.action_cell, (1, 1));
        assert_eq!(out.action_bearing, Bearing::CENTER);
        assert!(out.lr_eff.is_none());
        let second = p.perceive_step(&blob_frame(1)).unwrap();
        assert!(second.loss_global > 0.0);
        assert!(second.lr_eff.is_some());
    }

    #[test]
    fn frozen_keeps_parameters() {
        let mut p = small();
        p.set_frozen(true);
        let before = p.params().clone();
        for s in 0..5 {
            p.perceive_step(&blob_frame(s)).unwrap();
        }
        assert_eq!(&before, p.params());

        let mut q = small();
        for s in 0..5 {
            q.perceive_step(&blob_frame(s)).unwrap();
        }
        assert_ne!(&before, q.params());
    }

    #[test]
    fn static_scene_is_stationary_when_frozen() {
        let p = small();
        let mut params = p.params().clone();
        params.get_mut("head.w").unwrap().data_mut().fill(0.0);
        let mut q = Perception::with_params(p.config().clone(), 4, fov(), params);
        q.set_frozen(true);
        let frame = blob_frame(3);
        q.perceive_step(&frame).unwrap();
        let first = q.perceive_step(&frame).unwrap().error_map.raw;
        for _ in 0..4 {
            assert_eq!(q.perceive_step(&frame).unwrap().error_map.raw, first);
        }
    }

    #[test]
    fn reset_repeats_outputs() {
        let mut p = small();
        p.set_frozen(true);
        let run = |p: &mut Perception| {
            p.reset();
            (0..4)
                .map(|s| p.perceive_step(&blob_frame(s)).unwrap().error_map.raw)
                .collect::<Vec<_>>()
        };
        let a = run(&mut p);
        let b = run(&mut p);
        assert_eq!(a, b);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut p = small();
        for s in 0..3 {
            p.perceive_step(&blob_frame(s)).unwrap();
        }
        let mut buf = Vec::new();
        p.save_params(&mut buf).unwrap();
        let mut q = small();
        q.load_params(&buf[..]).unwrap();
        assert_eq!(p.params(), q.params());
        let mut bad = Perception::new(PerceptionConfig::default(), 32, fov(), 1);
        assert!(bad.load_params(&buf[..]).is_err());
    }
}
