use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::{Result, Tensor, TensorError};

const SNAPSHOT_MAGIC: &str = "activis-params v1";

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Tensor,
}

/// Named trainable tensors, each with a gradient accumulator of the same shape.
/// Iteration order is the lexicographic order of names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    slots: BTreeMap<String, Slot>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.slots.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.slots.insert(name.to_string(), Slot { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        if slot.grad.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: slot.grad.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        slot.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.data_mut().fill(0.0);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.slots.values().all(|s| s.grad.all_finite())
    }

    pub fn save<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{SNAPSHOT_MAGIC}")?;
        let mut offset = 0usize;
        for (name, slot) in &self.slots {
            let dims: Vec<String> = slot.value.shape().iter().map(|d| d.to_string()).collect();
            let len = slot.value.len();
            writeln!(out, "{name} {} {offset} {len}", dims.join(","))?;
            offset += len;
        }
        writeln!(out, "end")?;
        for slot in self.slots.values() {
            for v in slot.value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: BufRead>(mut input: R) -> Result<Self> {
        let bad = |m: String| TensorError::Snapshot(m);
        let mut line = String::new();
        let read_line = |input: &mut R, line: &mut String| -> Result<()> {
            line.clear();
            input
                .read_line(line)
                .map_err(|e| bad(format!("read header: {e}")))?;
            Ok(())
        };
        read_line(&mut input, &mut line)?;
        if line.trim_end() != SNAPSHOT_MAGIC {
            return Err(bad(format!("unsupported header `{}`", line.trim_end())));
        }
        let mut entries = Vec::new();
        loop {
            read_line(&mut input, &mut line)?;
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            if l.is_empty() {
                return Err(bad("unexpected end of header".into()));
            }
            let fields: Vec<&str> = l.split(' ').collect();
            let [name, dims, offset, len] = fields[..] else {
                return Err(bad(format!("malformed entry `{l}`")));
            };
            let shape: Vec<usize> = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dim in `{l}`"))))
                    .collect::<Result<_>>()?
            };
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset `{l}`")))?;
            let len: usize = len.parse().map_err(|_| bad(format!("bad length `{l}`")))?;
            entries.push((name.to_string(), shape, offset, len));
        }
        let mut raw = Vec::new();
        input
            .read_to_end(&mut raw)
            .map_err(|e| bad(format!("read data: {e}")))?;
        if raw.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of f64".into()));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut set = ParameterSet::new();
        for (name, shape, offset, len) in entries {
            let data = values
                .get(offset..offset + len)
                .ok_or_else(|| bad(format!("`{name}` points past the data section")))?
                .to_vec();
            set.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(set)
    }
}

/// Loss-damped learning rate: `lr / (1 + beta * ema(loss))`.
#[derive(Debug, Clone)]
pub struct AdaptiveLr {
    pub beta: f64,
    pub decay: f64,
    ema: Option<f64>,
}

impl AdaptiveLr {
    pub fn new(beta: f64, decay: f64) -> Self {
        Self {
            beta,
            decay,
            ema: None,
        }
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }

    fn observe(&mut self, loss: f64) -> f64 {
        let ema = match self.ema {
            Some(prev) => self.decay * prev + (1.0 - self.decay) * loss,
            None => loss,
        };
        self.ema = Some(ema);
        ema
    }
}

impl Default for AdaptiveLr {
    fn default() -> Self {
        Self::new(0.1, 0.99)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { lr_eff: f64 },
    Skipped,
}

/// Plain SGD with elementwise gradient clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub clip: f64,
    pub adaptive: Option<AdaptiveLr>,
}

impl Sgd {
    pub fn new(lr: f64, clip: f64) -> Self {
        Self {
            lr,
            clip,
            adaptive: None,
        }
    }

    pub fn with_adaptive(mut self, adaptive: AdaptiveLr) -> Self {
        self.adaptive = Some(adaptive);
        self
    }

    /// Applies `p -= lr_eff * clip(grad)` and zeroes the gradients. A step
    /// with any non-finite gradient is skipped entirely.
    pub fn step(&mut self, params: &mut ParameterSet, loss: f64) -> StepOutcome {
        if !params.grads_finite() || !loss.is_finite() {
            log::warn!("non-finite gradient or loss ({loss}); update skipped");
            params.zero_grad();
            return StepOutcome::Skipped;
        }
        let lr_eff = match &mut self.adaptive {
            Some(a) => {
                let ema = a.observe(loss);
                self.lr / (1.0 + a.beta * ema)
            }
            None => self.lr,
        };
        let clip = self.clip;
        for slot in params.slots.values_mut() {
            for (p, g) in slot.value.data_mut().iter_mut().zip(slot.grad.data()) {
                *p -= lr_eff * g.clamp(-clip, clip);
            }
            slot.grad.data_mut().fill(0.0);
        }
        StepOutcome::Applied { lr_eff }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_with_grad(value: f64, grad: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::filled(&[2, 3], value)).unwrap();
        p.accumulate_grad("w", &Tensor::filled(&[2, 3], grad)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = set_with_grad(1.5, 0.0);
        Sgd::new(0.1, f64::INFINITY).step(&mut p, 0.0);
        assert!(p.get("w").unwrap().data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn unit_gradient_moves_by_lr() {
        let mut p = set_with_grad(1.0, 1.0);
        let out = Sgd::new(0.1, f64::INFINITY).step(&mut p, 0.0);
        assert_eq!(out, StepOutcome::Applied { lr_eff: 0.1 });
        assert!(p.get("w").unwrap().data().iter().all(|&v| v == 1.0 - 0.1));
        assert!(p.grad("w").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn clipping_bounds_step() {
        let mut p = set_with_grad(1.0, 100.0);
        Sgd::new(0.1, 1.0).step(&mut p, 0.0);
        assert!(p.get("w").unwrap().data().iter().all(|&v| v == 1.0 - 0.1));
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = set_with_grad(1.0, f64::NAN);
        assert_eq!(Sgd::new(0.1, 5.0).step(&mut p, 0.3), StepOutcome::Skipped);
        assert!(p.get("w").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.grads_finite());
    }

    #[test]
    fn adaptive_rate_damps_with_loss() {
        let mut sgd = Sgd::new(0.1, 5.0).with_adaptive(AdaptiveLr::default());
        let mut p = set_with_grad(0.0, 0.0);
        // first observation seeds the EMA with the loss itself
        let StepOutcome::Applied { lr_eff } = sgd.step(&mut p, 10.0) else {
            panic!()
        };
        assert!((lr_eff - 0.1 / 2.0).abs() < 1e-15);
        let StepOutcome::Applied { lr_eff } = sgd.step(&mut p, 0.0) else {
            panic!()
        };
        let ema = 0.99 * 10.0;
        assert!((lr_eff - 0.1 / (1.0 + 0.1 * ema)).abs() < 1e-15);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut p = ParameterSet::new();
        p.insert("enc.w", Tensor::from_fn(&[2, 1, 3, 3], |k| k as f64 * 0.1 - 0.7))
            .unwrap();
        p.insert("bias", Tensor::from_fn(&[4], |k| -(k as f64))).unwrap();
        p.insert("s", Tensor::scalar(std::f64::consts::PI)).unwrap();
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        let header = String::from_utf8_lossy(&buf[..60]);
        assert!(header.starts_with(SNAPSHOT_MAGIC));
        let q = ParameterSet::load(&buf[..]).unwrap();
        for name in p.names() {
            assert_eq!(p.get(name), q.get(name));
        }
        assert_eq!(q.len(), 3);
    }

    #[test]
    fn snapshot_rejects_bad_header() {
        assert!(ParameterSet::load(&b"something else\nend\n"[..]).is_err());
        assert!(ParameterSet::load(&b"activis-params v1\nw 2 0 2\nend\n"[..]).is_err());
    }
}
