//! Graph builders for the encoder, the attentive recurrent predictor and the
//! two training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, ParameterSet, Result, Tensor, TensorError, Var};

pub const CHANNELS: [usize; 2] = [8, 16];
/// Total downsampling from image to feature grid (two stride-2 convs, 2x pool).
pub const GRID_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub clip: f64,
    pub adaptive_lr: bool,
    /// Drop the sigmoid motion gate from the global loss.
    pub disable_motion_gate: bool,
    /// Train on the global loss only.
    pub disable_attn_loss: bool,
    /// Use the observed frame-to-frame difference as the first factor of the
    /// global error instead of the prediction residual.
    pub literal_eq2: bool,
    /// Compute outputs without ever updating parameters.
    pub frozen: bool,
    /// Scale of the residual head's initial weights.
    pub head_init: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            attn_dim: 16,
            layers: 3,
            lr: 1e-4,
            clip: 5.0,
            adaptive_lr: true,
            disable_motion_gate: false,
            disable_attn_loss: false,
            literal_eq2: false,
            frozen: false,
            head_init: 1e-3,
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        if scale == 0.0 {
            0.0
        } else {
            rng.random_range(-scale..scale)
        }
    })
}

fn lstm_w(l: usize) -> String {
    format!("lstm{l}.w")
}

fn lstm_b(l: usize) -> String {
    format!("lstm{l}.b")
}

/// Randomly initialized parameters for a `grid x grid` feature map.
pub fn init_params(cfg: &PerceptionConfig, grid: usize, rng: &mut impl Rng) -> ParameterSet {
    let [c1, c2] = CHANNELS;
    let (h, a) = (cfg.hidden_dim, cfg.attn_dim);
    let cells = grid * grid;
    let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut p = ParameterSet::new();
    let mut put = |name: &str, t: Tensor| p.insert(name, t).expect("fresh names");
    put("enc.conv1.w", uniform(rng, &[c1, 1, 3, 3], glorot(9, 9 * c1)));
    put("enc.conv1.b", Tensor::zeros(&[c1]));
    put("enc.conv2.w", uniform(rng, &[c2, c1, 3, 3], glorot(9 * c1, 9 * c2)));
    put("enc.conv2.b", Tensor::zeros(&[c2]));
    put("attn.w1", uniform(rng, &[a, c2], glorot(c2, a)));
    put("attn.w2", uniform(rng, &[a, h], glorot(h, a)));
    put("attn.v", uniform(rng, &[1, a], glorot(a, 1)));
    for l in 0..cfg.layers {
        let input = if l == 0 { c2 } else { h };
        put(&lstm_w(l), uniform(rng, &[4 * h, input + h], glorot(input + h, h)));
        // forget gate biased open
        let mut b = Tensor::zeros(&[4 * h]);
        b.data_mut()[h..2 * h].fill(1.0);
        put(&lstm_b(l), b);
    }
    put("head.w", uniform(rng, &[c2 * cells, h], cfg.head_init));
    put("head.b", Tensor::zeros(&[c2 * cells]));
    p
}

/// `frame: [1, H, W]` to a `[C, H/8, W/8]` feature grid.
pub fn encode(g: &mut Graph, params: &ParameterSet, frame: &Tensor) -> Result<Var> {
    if frame.shape().len() != 3 || frame.shape()[0] != 1 {
        return Err(TensorError::Rank {
            op: "encode",
            expected: 3,
            shape: frame.shape().to_vec(),
        });
    }
    let x = g.constant(frame.clone());
    let mut h = x;
    for layer in ["enc.conv1", "enc.conv2"] {
        let w = g.param(params, &format!("{layer}.w"))?;
        let b = g.param(params, &format!("{layer}.b"))?;
        let y = g.conv2d(h, w, 2)?;
        let y = g.channel_bias(y, b)?;
        h = g.sigmoid(y);
    }
    g.avg_pool(h, 2)
}

/// Recurrent state of the gated stack, one `(h, c)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl LstmState {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        Self {
            h: vec![Tensor::zeros(&[hidden]); layers],
            c: vec![Tensor::zeros(&[hidden]); layers],
        }
    }
}

pub struct Prediction {
    /// Predicted next feature grid, `[C, G, G]`.
    pub f_hat: Var,
    /// Attention over cells, `[G, G]`.
    pub alpha: Var,
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl Prediction {
    pub fn state(&self, g: &Graph) -> LstmState {
        LstmState {
            h: self.h.iter().map(|&v| g.value(v).clone()).collect(),
            c: self.c.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

pub fn predict_next(
    g: &mut Graph,
    params: &ParameterSet,
    f_t: Var,
    state: &LstmState,
    cfg: &PerceptionConfig,
) -> Result<Prediction> {
    let shape = g.value(f_t).shape().to_vec();
    let (c, gh, gw) = (shape[0], shape[1], shape[2]);
    let hd = cfg.hidden_dim;
    let feats = g.reshape(f_t, &[c, gh * gw])?;

    // additive attention conditioned on the top layer's previous hidden state
    let top_prev = g.constant(state.h[cfg.layers - 1].clone());
    let w1 = g.param(params, "attn.w1")?;
    let w2 = g.param(params, "attn.w2")?;
    let v = g.param(params, "attn.v")?;
    let proj = g.matmul(w1, feats)?;
    let query = g.matvec(w2, top_prev)?;
    let pre = g.add_column(proj, query)?;
    let act = g.tanh(pre);
    let scores = g.matmul(v, act)?;
    let scores = g.reshape(scores, &[gh, gw])?;
    let alpha = g.softmax2d(scores)?;
    let alpha_col = g.reshape(alpha, &[gh * gw, 1])?;
    let context = g.matmul(feats, alpha_col)?;
    let mut input = g.reshape(context, &[c])?;

    let mut hs = Vec::with_capacity(cfg.layers);
    let mut cs = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let h_prev = g.constant(state.h[l].clone());
        let c_prev = g.constant(state.c[l].clone());
        let w = g.param(params, &lstm_w(l))?;
        let b = g.param(params, &lstm_b(l))?;
        let xh = g.concat(&[input, h_prev]);
        let z = g.matvec(w, xh)?;
        let z = g.add(z, b)?;
        let zi = g.slice(z, 0, hd)?;
        let zf = g.slice(z, hd, hd)?;
        let zg = g.slice(z, 2 * hd, hd)?;
        let zo = g.slice(z, 3 * hd, hd)?;
        let (i, f, gg, o) = (g.sigmoid(zi), g.sigmoid(zf), g.tanh(zg), g.sigmoid(zo));
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, gg)?;
        let c_new = g.add(keep, write)?;
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        hs.push(h_new);
        cs.push(c_new);
        input = h_new;
    }

    let hw = g.param(params, "head.w")?;
    let hb = g.param(params, "head.b")?;
    let r = g.matvec(hw, input)?;
    let r = g.add(r, hb)?;
    let r = g.reshape(r, &[c, gh, gw])?;
    let f_hat = g.add(f_t, r)?;
    Ok(Prediction {
        f_hat,
        alpha,
        h: hs,
        c: cs,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossFlags {
    pub disable_motion_gate: bool,
    pub literal_eq2: bool,
}

/// Per-cell gated prediction error `e: [G, G]` and its mean.
pub fn loss_global(
    g: &mut Graph,
    f_hat: Var,
    f_next: Var,
    f_t: Var,
    flags: LossFlags,
) -> Result<(Var, Var)> {
    let residual = if flags.literal_eq2 {
        g.sub(f_next, f_t)?
    } else {
        g.sub(f_hat, f_next)?
    };
    let err = g.channel_norm(residual)?;
    let e = if flags.disable_motion_gate {
        err
    } else {
        let diff = g.sub(f_next, f_t)?;
        let m = g.channel_mean(diff)?;
        let gate = g.sigmoid(m);
        g.mul(err, gate)?
    };
    let loss = g.mean(e);
    Ok((loss, e))
}

/// Attention consistency: `|a - p| + |a*f - p*f|` with `p` the previous
/// normalized error map, broadcast over channels.
pub fn loss_attn(g: &mut Graph, alpha: Var, prev_err: &Tensor, f_t: Var) -> Result<Var> {
    let p = g.constant(prev_err.clone());
    let d = g.sub(alpha, p)?;
    let n1 = g.norm(d);
    let weighted = g.map_mul(d, f_t)?;
    let n2 = g.norm(weighted);
    g.add(n1, n2)
}
