use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParameterSet, Result, Var};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` records a scalar loss on the supplied graph. Up to `samples_per_param`
/// coordinates of every parameter are probed (all of them when the tensor is
/// small enough). Returns the maximum of
/// `|analytic - numeric| / max(1e-8, |numeric|)` over probed coordinates.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParameterSet,
    h: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ParameterSet, &mut Graph) -> Result<Var>,
{
    let mut analytic = params.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let loss = f(&analytic, &mut g)?;
    g.backward(loss, &mut analytic)?;

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(p, &mut g)?;
        Ok(g.value(v).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map(|t| t.len()).unwrap_or(0);
        let coords: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, samples_per_param).into_vec()
        };
        for k in coords {
            let orig = params.get(&name).expect("name from set").data()[k];
            probe.get_mut(&name).expect("present").data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic.grad(&name).expect("present").data()[k];
            let rel = (exact - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::from_fn(&[5], |k| k as f64 * 0.3 - 0.4)).unwrap();
        p.insert("y", Tensor::from_fn(&[5], |k| 1.0 + k as f64)).unwrap();
        let f = |p: &ParameterSet, g: &mut Graph| {
            let x = g.param(p, "x")?;
            let y = g.param(p, "y")?;
            let xy = g.mul(x, y)?;
            let xx = g.mul(x, x)?;
            let s = g.add(xy, xx)?;
            Ok(g.sum(s))
        };
        let err = finite_diff_check(f, &p, 1e-5, 10, 1).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::filled(&[3], 2.0)).unwrap();
        let f = |_: &ParameterSet, g: &mut Graph| Ok(g.constant(Tensor::scalar(4.2)));
        assert_eq!(finite_diff_check(f, &p, 1e-5, 10, 1).unwrap(), 0.0);
    }

    #[test]
    fn every_op_matches_differences() {
        let mut p = ParameterSet::new();
        let init = |shape: &[usize], s: f64| Tensor::from_fn(shape, |k| ((k as f64 + s) * 1.7).sin() * 0.5);
        p.insert("img", init(&[2, 8, 8], 0.1)).unwrap();
        p.insert("k", init(&[3, 2, 3, 3], 0.2)).unwrap();
        p.insert("b", init(&[3], 0.3)).unwrap();
        p.insert("w", init(&[5, 3], 0.4)).unwrap();
        p.insert("col", init(&[5], 0.5)).unwrap();
        p.insert("v", init(&[1, 5], 0.6)).unwrap();
        p.insert("m", init(&[4, 6], 0.7)).unwrap();
        let f = |p: &ParameterSet, g: &mut Graph| {
            let img = g.param(p, "img")?;
            let k = g.param(p, "k")?;
            let b = g.param(p, "b")?;
            let c = g.conv2d(img, k, 2)?; // [3,4,4]
            let c = g.channel_bias(c, b)?;
            let c = g.sigmoid(c);
            let pooled = g.avg_pool(c, 2)?; // [3,2,2]
            let flat = g.reshape(pooled, &[3, 4])?;
            let w = g.param(p, "w")?;
            let z = g.matmul(w, flat)?; // [5,4]
            let col = g.param(p, "col")?;
            let z = g.add_column(z, col)?;
            let z = g.tanh(z);
            let v = g.param(p, "v")?;
            let s = g.matmul(v, z)?; // [1,4]
            let s = g.reshape(s, &[2, 2])?;
            let a = g.softmax2d(s)?;
            let mapped = g.map_mul(a, pooled)?;
            let cn = g.channel_norm(mapped)?;
            let cm = g.channel_mean(pooled)?;
            let gate = g.exp(cm);
            let e = g.mul(cn, gate)?;
            Ok(g.mean(e))
        };
        let err = finite_diff_check(f, &p, 1e-5, 20, 3).unwrap();
        assert!(err < 1e-5, "{err}");

        let f2 = |p: &ParameterSet, g: &mut Graph| {
            let m = g.param(p, "m")?;
            let x = g.param(p, "col")?;
            let x6 = g.concat(&[x, x]);
            let x6 = g.slice(x6, 2, 6)?;
            let y = g.matvec(m, x6)?;
            let s = g.scale(y, 0.7);
            let n = g.norm(s);
            let one = g.constant(Tensor::scalar(1.0));
            let d = g.sub(n, one)?;
            g.mul(d, d)
        };
        let err = finite_diff_check(f2, &p, 1e-5, 30, 4).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
