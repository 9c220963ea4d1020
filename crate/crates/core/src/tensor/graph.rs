use std::collections::HashMap;

use super::{conv_out_dim, sigmoid, ParameterSet, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Exp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Norm(Var),
    ChannelNorm(Var),
    ChannelMean(Var),
    MapMul { map: Var, x: Var },
    MatMul(Var, Var),
    MatVec(Var, Var),
    AddColumn(Var, Var),
    Conv2d { input: Var, kernel: Var, stride: usize },
    ChannelBias(Var, Var),
    AvgPool(Var, usize),
    Softmax(Var),
    Reshape(Var),
    Slice { x: Var, start: usize },
    Concat(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward pass. Nodes are appended in evaluation order, so the
/// recording order is already a topological order of the graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Output shape of a binary elementwise op; a single-element operand broadcasts.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn binary(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let ai = |k: usize| if a.len() == 1 { a.data[0] } else { a.data[k] };
    let bi = |k: usize| if b.len() == 1 { b.data[0] } else { b.data[k] };
    Tensor {
        data: (0..n).map(|k| f(ai(k), bi(k))).collect(),
        shape,
    }
}

/// Reduce an output-shaped gradient back onto an operand that may have been broadcast.
fn reduce_to(operand: &Tensor, grad: Tensor) -> Tensor {
    if operand.len() == grad.len() {
        Tensor {
            shape: operand.shape.clone(),
            data: grad.data,
        }
    } else {
        Tensor {
            shape: operand.shape.clone(),
            data: vec![grad.data.iter().sum()],
        }
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize) -> Tensor {
    let (cin, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (cout, k) = (kernel.shape[0], kernel.shape[2]);
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    let pad = (k - 1) / 2;
    let rows = clamp_table(oh, k, stride, pad, h);
    let cols = clamp_table(ow, k, stride, pad, w);
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..cin {
            let src = &input.data[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = kernel.data[((o * cin + c) * k + ky) * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let row = &src[rows[oy * k + ky] * w..];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d += wgt * row[cols[ox * k + kx]];
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![cout, oh, ow],
        data: out,
    }
}

/// Source index for every (output position, kernel tap), with edge replication.
fn clamp_table(out: usize, k: usize, stride: usize, pad: usize, n: usize) -> Vec<usize> {
    let mut t = Vec::with_capacity(out * k);
    for o in 0..out {
        for kk in 0..k {
            let idx = (o * stride + kk) as isize - pad as isize;
            t.push(idx.clamp(0, n as isize - 1) as usize);
        }
    }
    t
}

fn conv2d_backward(input: &Tensor, kernel: &Tensor, stride: usize, g: &Tensor) -> (Tensor, Tensor) {
    let (cin, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (cout, k) = (kernel.shape[0], kernel.shape[2]);
    let (oh, ow) = (g.shape[1], g.shape[2]);
    let pad = (k - 1) / 2;
    let rows = clamp_table(oh, k, stride, pad, h);
    let cols = clamp_table(ow, k, stride, pad, w);
    let mut dinput = vec![0.0; input.len()];
    let mut dkernel = vec![0.0; kernel.len()];
    for o in 0..cout {
        let gplane = &g.data[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..cin {
            let src = &input.data[c * h * w..(c + 1) * h * w];
            let dsrc = &mut dinput[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let kidx = ((o * cin + c) * k + ky) * k + kx;
                    let wgt = kernel.data[kidx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let r = rows[oy * k + ky] * w;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for (ox, &gv) in grow.iter().enumerate() {
                            let idx = r + cols[ox * k + kx];
                            acc += gv * src[idx];
                            dsrc[idx] += gv * wgt;
                        }
                    }
                    dkernel[kidx] += acc;
                }
            }
        }
    }
    (
        Tensor {
            shape: input.shape.clone(),
            data: dinput,
        },
        Tensor {
            shape: kernel.shape.clone(),
            data: dkernel,
        },
    )
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated requests reuse one node.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Param(name.to_string()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| TensorError::Invalid(format!("{op:?} needs two operands")))
        };
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseOp::Exp => Ok(self.exp(a)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape("add", ta, tb)?;
        let out = binary(ta, tb, shape, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape("sub", ta, tb)?;
        let out = binary(ta, tb, shape, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape("mul", ta, tb)?;
        let out = binary(ta, tb, shape, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Euclidean norm over all elements.
    pub fn norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.data.iter().map(|x| x * x).sum::<f64>().sqrt());
        self.push(out, Op::Norm(a))
    }

    /// `[C,H,W] -> [H,W]`, Euclidean norm across channels at each cell.
    pub fn channel_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        check_rank("channel_norm", t, 3)?;
        let (c, hw) = (t.shape[0], t.shape[1] * t.shape[2]);
        let mut out = vec![0.0; hw];
        for ch in 0..c {
            for (o, x) in out.iter_mut().zip(&t.data[ch * hw..(ch + 1) * hw]) {
                *o += x * x;
            }
        }
        for o in &mut out {
            *o = o.sqrt();
        }
        let shape = vec![t.shape[1], t.shape[2]];
        Ok(self.push(Tensor { shape, data: out }, Op::ChannelNorm(a)))
    }

    /// `[C,H,W] -> [H,W]`, mean across channels.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        check_rank("channel_mean", t, 3)?;
        let (c, hw) = (t.shape[0], t.shape[1] * t.shape[2]);
        let mut out = vec![0.0; hw];
        for ch in 0..c {
            for (o, x) in out.iter_mut().zip(&t.data[ch * hw..(ch + 1) * hw]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= c as f64;
        }
        let shape = vec![t.shape[1], t.shape[2]];
        Ok(self.push(Tensor { shape, data: out }, Op::ChannelMean(a)))
    }

    /// Spatial map `[H,W]` times every channel of `x: [C,H,W]`.
    pub fn map_mul(&mut self, map: Var, x: Var) -> Result<Var> {
        let (m, t) = (self.value(map), self.value(x));
        check_rank("map_mul", m, 2)?;
        check_rank("map_mul", t, 3)?;
        if m.shape[..] != t.shape[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "map_mul",
                lhs: m.shape.clone(),
                rhs: t.shape.clone(),
            });
        }
        let hw = m.len();
        let data = t
            .data
            .iter()
            .enumerate()
            .map(|(k, v)| v * m.data[k % hw])
            .collect();
        let out = Tensor {
            shape: t.shape.clone(),
            data,
        };
        Ok(self.push(out, Op::MapMul { map, x }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_rank("matmul", ta, 2)?;
        check_rank("matmul", tb, 2)?;
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        if tb.shape[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let dst = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (d, bv) in dst.iter_mut().zip(&tb.data[p * n..(p + 1) * n]) {
                    *d += av * bv;
                }
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.value(a), self.value(x));
        check_rank("matvec", ta, 2)?;
        let (m, n) = (ta.shape[0], ta.shape[1]);
        if tx.len() != n || tx.shape.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: ta.shape.clone(),
                rhs: tx.shape.clone(),
            });
        }
        let data = (0..m)
            .map(|i| {
                ta.data[i * n..(i + 1) * n]
                    .iter()
                    .zip(&tx.data)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let t = Tensor {
            shape: vec![m],
            data,
        };
        Ok(self.push(t, Op::MatVec(a, x)))
    }

    /// `x: [M,N] + b: [M]` with `b` added to every column.
    pub fn add_column(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        check_rank("add_column", tx, 2)?;
        if tb.shape != [tx.shape[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_column",
                lhs: tx.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let n = tx.shape[1];
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(k, v)| v + tb.data[k / n])
            .collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::AddColumn(x, b)))
    }

    /// Same-size convolution (cross-correlation) with edge-replicated borders.
    /// Output spatial size is `ceil(H/stride) x ceil(W/stride)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        check_rank("conv2d", ti, 3)?;
        check_rank("conv2d", tk, 4)?;
        let k = tk.shape[2];
        if tk.shape[3] != k {
            return Err(TensorError::Invalid(format!(
                "conv2d kernel must be square, got {:?}",
                tk.shape
            )));
        }
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        if tk.shape[1] != ti.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: ti.shape.clone(),
                rhs: tk.shape.clone(),
            });
        }
        if ti.shape[1] < k || ti.shape[2] < k {
            return Err(TensorError::KernelTooLarge {
                input: ti.shape.clone(),
                kernel: k,
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid("conv2d stride must be >= 1".into()));
        }
        let out = conv2d_forward(ti, tk, stride);
        Ok(self.push(out, Op::Conv2d { input, kernel, stride }))
    }

    /// `x: [C,H,W] + b: [C]` per channel.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        check_rank("channel_bias", tx, 3)?;
        if tb.shape != [tx.shape[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_bias",
                lhs: tx.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let hw = tx.shape[1] * tx.shape[2];
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(k, v)| v + tb.data[k / hw])
            .collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::ChannelBias(x, b)))
    }

    /// Non-overlapping `factor x factor` average pooling.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        check_rank("avg_pool", t, 3)?;
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::Invalid(format!(
                "avg_pool factor {factor} does not divide {h}x{w}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * oh + y / factor) * ow + xx / factor] +=
                        t.data[(ch * h + y) * w + xx] * norm;
                }
            }
        }
        let t = Tensor {
            shape: vec![c, oh, ow],
            data: out,
        };
        Ok(self.push(t, Op::AvgPool(x, factor)))
    }

    /// Softmax over every element, max-subtracted.
    pub fn softmax(&mut self, e: Var) -> Var {
        let out = super::softmax(self.value(e));
        self.push(out, Op::Softmax(e))
    }

    /// Softmax of a rank-2 map.
    pub fn softmax2d(&mut self, e: Var) -> Result<Var> {
        check_rank("softmax2d", self.value(e), 2)?;
        Ok(self.softmax(e))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Contiguous flat slice `[start, start+len)` returned as a rank-1 tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.len() {
            return Err(TensorError::SliceRange {
                start,
                end: start + len,
                len: t.len(),
            });
        }
        let out = Tensor {
            shape: vec![len],
            data: t.data[start..start + len].to_vec(),
        };
        Ok(self.push(out, Op::Slice { x, start }))
    }

    /// Flat concatenation into a rank-1 tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data.iter().copied())
            .collect();
        let out = Tensor {
            shape: vec![data.len()],
            data,
        };
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Reverse pass from a scalar `loss`. Gradients of parameter leaves are
    /// added into `params`; forward values are left untouched.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor {
            shape: lt.shape.clone(),
            data: vec![1.0],
        });

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => params.accumulate_grad(name, &g)?,
                Op::Add(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, reduce_to(ta, g.clone()));
                    acc(&mut grads, *b, reduce_to(tb, g));
                }
                Op::Sub(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, reduce_to(ta, g.clone()));
                    acc(&mut grads, *b, reduce_to(tb, g.map(|x| -x)));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = binary(&g, tb, g.shape.clone(), |gv, bv| gv * bv);
                    let gb = binary(&g, ta, g.shape.clone(), |gv, av| gv * av);
                    acc(&mut grads, *a, reduce_to(ta, ga));
                    acc(&mut grads, *b, reduce_to(tb, gb));
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g.map(|x| x * f)),
                Op::Sigmoid(a) => {
                    let d = binary(&g, y, g.shape.clone(), |gv, s| gv * s * (1.0 - s));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = binary(&g, y, g.shape.clone(), |gv, t| gv * (1.0 - t * t));
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = binary(&g, y, g.shape.clone(), |gv, e| gv * e);
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let ta = self.value(*a);
                    acc(&mut grads, *a, Tensor::filled(&ta.shape, g.item()));
                }
                Op::Mean(a) => {
                    let ta = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        Tensor::filled(&ta.shape, g.item() / ta.len() as f64),
                    );
                }
                Op::Norm(a) => {
                    let ta = self.value(*a);
                    let n = y.item();
                    let d = if n > 0.0 {
                        ta.map(|x| g.item() * x / n)
                    } else {
                        Tensor::zeros(&ta.shape)
                    };
                    acc(&mut grads, *a, d);
                }
                Op::ChannelNorm(a) => {
                    let ta = self.value(*a);
                    let hw = y.len();
                    let data = ta
                        .data
                        .iter()
                        .enumerate()
                        .map(|(k, x)| {
                            let n = y.data[k % hw];
                            if n > 0.0 {
                                g.data[k % hw] * x / n
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(
                        &mut grads,
                        *a,
                        Tensor {
                            shape: ta.shape.clone(),
                            data,
                        },
                    );
                }
                Op::ChannelMean(a) => {
                    let ta = self.value(*a);
                    let (c, hw) = (ta.shape[0], y.len());
                    let data = (0..ta.len()).map(|k| g.data[k % hw] / c as f64).collect();
                    acc(
                        &mut grads,
                        *a,
                        Tensor {
                            shape: ta.shape.clone(),
                            data,
                        },
                    );
                }
                Op::MapMul { map, x } => {
                    let (tm, tx) = (self.value(*map), self.value(*x));
                    let hw = tm.len();
                    let mut dm = vec![0.0; hw];
                    let mut dx = vec![0.0; tx.len()];
                    for k in 0..tx.len() {
                        dm[k % hw] += g.data[k] * tx.data[k];
                        dx[k] = g.data[k] * tm.data[k % hw];
                    }
                    acc(
                        &mut grads,
                        *map,
                        Tensor {
                            shape: tm.shape.clone(),
                            data: dm,
                        },
                    );
                    acc(
                        &mut grads,
                        *x,
                        Tensor {
                            shape: tx.shape.clone(),
                            data: dx,
                        },
                    );
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            let av = ta.data[i * k + p];
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    acc(
                        &mut grads,
                        *a,
                        Tensor {
                            shape: ta.shape.clone(),
                            data: da,
                        },
                    );
                    acc(
                        &mut grads,
                        *b,
                        Tensor {
                            shape: tb.shape.clone(),
                            data: db,
                        },
                    );
                }
                Op::MatVec(a, x) => {
                    let (ta, tx) = (self.value(*a), self.value(*x));
                    let (m, n) = (ta.shape[0], ta.shape[1]);
                    let mut da = vec![0.0; m * n];
                    let mut dx = vec![0.0; n];
                    for i in 0..m {
                        let gi = g.data[i];
                        let arow = &ta.data[i * n..(i + 1) * n];
                        for j in 0..n {
                            da[i * n + j] = gi * tx.data[j];
                            dx[j] += arow[j] * gi;
                        }
                    }
                    acc(
                        &mut grads,
                        *a,
                        Tensor {
                            shape: ta.shape.clone(),
                            data: da,
                        },
                    );
                    acc(
                        &mut grads,
                        *x,
                        Tensor {
                            shape: tx.shape.clone(),
                            data: dx,
                        },
                    );
                }
                Op::AddColumn(x, b) => {
                    let tb = self.value(*b);
                    let n = g.shape[1];
                    let db = (0..tb.len())
                        .map(|i| g.data[i * n..(i + 1) * n].iter().sum())
                        .collect();
                    acc(
                        &mut grads,
                        *b,
                        Tensor {
                            shape: tb.shape.clone(),
                            data: db,
                        },
                    );
                    acc(&mut grads, *x, g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                } => {
                    let (di, dk) =
                        conv2d_backward(self.value(*input), self.value(*kernel), *stride, &g);
                    acc(&mut grads, *input, di);
                    acc(&mut grads, *kernel, dk);
                }
                Op::ChannelBias(x, b) => {
                    let tb = self.value(*b);
                    let hw = g.shape[1] * g.shape[2];
                    let db = (0..tb.len())
                        .map(|c| g.data[c * hw..(c + 1) * hw].iter().sum())
                        .collect();
                    acc(
                        &mut grads,
                        *b,
                        Tensor {
                            shape: tb.shape.clone(),
                            data: db,
                        },
                    );
                    acc(&mut grads, *x, g);
                }
                Op::AvgPool(x, factor) => {
                    let tx = self.value(*x);
                    let (c, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                    let (oh, ow) = (h / factor, w / factor);
                    let norm = 1.0 / (factor * factor) as f64;
                    let mut dx = vec![0.0; tx.len()];
                    for ch in 0..c {
                        for yy in 0..h {
                            for xx in 0..w {
                                dx[(ch * h + yy) * w + xx] =
                                    g.data[(ch * oh + yy / factor) * ow + xx / factor] * norm;
                            }
                        }
                    }
                    acc(
                        &mut grads,
                        *x,
                        Tensor {
                            shape: tx.shape.clone(),
                            data: dx,
                        },
                    );
                }
                Op::Softmax(e) => {
                    let dot: f64 = g.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
                    let d = binary(&g, y, g.shape.clone(), |gv, p| p * (gv - dot));
                    acc(&mut grads, *e, d);
                }
                Op::Reshape(a) => {
                    let ta = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        Tensor {
                            shape: ta.shape.clone(),
                            data: g.data,
                        },
                    );
                }
                Op::Slice { x, start } => {
                    let tx = self.value(*x);
                    let mut d = vec![0.0; tx.len()];
                    d[*start..*start + g.len()].copy_from_slice(&g.data);
                    acc(
                        &mut grads,
                        *x,
                        Tensor {
                            shape: tx.shape.clone(),
                            data: d,
                        },
                    );
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let n = tp.len();
                        acc(
                            &mut grads,
                            p,
                            Tensor {
                                shape: tp.shape.clone(),
                                data: g.data[offset..offset + n].to_vec(),
                            },
                        );
                        offset += n;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::scalar(0.0));
        let s = g.elementwise(ElementwiseOp::Sigmoid, zero, None).unwrap();
        assert_eq!(g.value(s).item(), 0.5);

        let x = g.constant(t(&[3], &[1.5, -2.0, 7.0]));
        let d = g.elementwise(ElementwiseOp::Sub, x, Some(x)).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 0.0, 0.0]);

        let a = g.constant(t(&[2], &[2.0, 3.0]));
        let b = g.constant(t(&[2], &[4.0, 5.0]));
        let m = g.elementwise(ElementwiseOp::Mul, a, Some(b)).unwrap();
        assert_eq!(g.value(m).data(), &[8.0, 15.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn scalar_broadcast() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.constant(Tensor::scalar(10.0));
        let r = g.add(s, a).unwrap();
        assert_eq!(g.value(r).data(), &[11.0, 12.0, 13.0]);
    }

    #[test]
    fn conv_identity_and_zero() {
        let img = Tensor::from_fn(&[1, 5, 6], |k| (k as f64 * 0.37).sin());
        let mut ident = Tensor::zeros(&[1, 1, 3, 3]);
        ident.data_mut()[4] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let k = g.constant(ident);
        let y = g.conv2d(x, k, 1).unwrap();
        assert_eq!(g.value(y), &img);

        let z = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y0 = g.conv2d(x, z, 1).unwrap();
        assert_eq!(g.value(y0).shape(), &[2, 5, 6]);
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_box_on_delta_is_plateau() {
        // 3x3 box of ones over a single 1 at (3,3) of a 7x7 image: by hand the
        // output is 1 on rows 2..=4, cols 2..=4 and 0 elsewhere.
        let mut img = Tensor::zeros(&[1, 7, 7]);
        img.data_mut()[3 * 7 + 3] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(img);
        let k = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, 1).unwrap();
        let out = g.value(y);
        for i in 0..7 {
            for j in 0..7 {
                let inside = (2..=4).contains(&i) && (2..=4).contains(&j);
                assert_eq!(out.at3(0, i, j), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernel_and_shrinks_with_stride() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 9, 9]));
        let k = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert_eq!(g.conv2d(x, k, 1).unwrap_err(), TensorError::EvenKernel(2));
        let k3 = g.constant(Tensor::zeros(&[4, 1, 3, 3]));
        let y = g.conv2d(x, k3, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 5, 5]);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut params = ParameterSet::new();
        let x0 = t(&[4], &[0.5, -1.0, 2.0, 3.0]);
        params.insert("x", x0.clone()).unwrap();

        let mut g = Graph::new();
        let x = g.param(&params, "x").unwrap();
        let s = g.sum(x);
        g.backward(s, &mut params).unwrap();
        assert_eq!(params.grad("x").unwrap().data(), &[1.0; 4]);
        params.zero_grad();

        let mut g = Graph::new();
        let x = g.param(&params, "x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s, &mut params).unwrap();
        let expected: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(params.grad("x").unwrap().data(), &expected[..]);
        assert_eq!(params.get("x").unwrap(), &x0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut params = ParameterSet::new();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            g.backward(x, &mut params),
            Err(TensorError::NonScalarLoss(_))
        ));
    }
}
