//! Tracking quality, episode recall/precision, angular error and AUC-Judd.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Bearing, PolarOffset};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("at least one fixation is required")]
    NoFixations,
    #[error("fixation ({0}, {1}) outside a {2}x{3} map")]
    FixationOutOfBounds(usize, usize, usize, usize),
    #[error("invalid metric parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingQualityParams {
    pub rho_max: f64,
    /// Radians.
    pub theta_max: f64,
    pub lambda: f64,
    pub relaxed_distance: bool,
}

impl Default for TrackingQualityParams {
    fn default() -> Self {
        Self {
            rho_max: 250.0,
            theta_max: std::f64::consts::FRAC_PI_2,
            lambda: 1.0,
            relaxed_distance: false,
        }
    }
}

impl TrackingQualityParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.rho_max > 0.0 && self.theta_max > 0.0 && self.lambda > 0.0) {
            return Err(MetricsError::InvalidParams(
                "rho_max, theta_max and lambda must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn relaxed(mut self) -> Self {
        self.relaxed_distance = true;
        self
    }
}

/// Unclamped score; the target counts as lost when this is `<= -1`.
pub fn tracking_quality_raw(cur: &PolarOffset, ideal: &PolarOffset, p: &TrackingQualityParams) -> f64 {
    let d_rho = (cur.rho - ideal.rho).abs() / p.rho_max;
    let rho_term = if p.relaxed_distance {
        if d_rho <= 1.0 { 0.0 } else { 1.0 }
    } else {
        d_rho
    };
    let d_theta = crate::geometry::angular_distance(cur.theta, ideal.theta) / p.theta_max;
    1.0 - p.lambda * rho_term - p.lambda * d_theta
}

/// Tracking quality clamped to `[-1, 1]`.
pub fn tracking_quality(cur: &PolarOffset, ideal: &PolarOffset, p: &TrackingQualityParams) -> f64 {
    tracking_quality_raw(cur, ideal, p).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub gamma: f64,
    pub gamma_relaxed: f64,
    pub lost: bool,
    pub aae_deg: f64,
    pub camera_bearing: Bearing,
    pub action_bearing: Bearing,
    /// AUC-Judd of this step's saliency map, when the target was visible.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub recall: f64,
    pub precision: f64,
    pub precision_relaxed: f64,
    pub steps_survived: usize,
    pub aae_mean: f64,
    pub auc_judd: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 { 0.0 } else { s / n as f64 }
}

/// `records` must already be cut at termination.
pub fn episode_metrics(records: &[StepRecord], max_steps: usize) -> EpisodeMetrics {
    if records.is_empty() || max_steps == 0 {
        return EpisodeMetrics::default();
    }
    let aucs: Vec<f64> = records.iter().filter_map(|r| r.auc).collect();
    EpisodeMetrics {
        recall: (records.len() as f64 / max_steps as f64).min(1.0),
        precision: mean(records.iter().map(|r| r.gamma)),
        precision_relaxed: mean(records.iter().map(|r| r.gamma_relaxed)),
        steps_survived: records.len(),
        aae_mean: mean(records.iter().map(|r| r.aae_deg)),
        auc_judd: mean(aucs.into_iter()),
    }
}

/// Mean wrap-aware angular distance in degrees.
pub fn average_angular_error(pred: &[Bearing], gt: &[Bearing]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
    }
    Ok(mean(pred.iter().zip(gt).map(|(p, g)| p.distance(g).to_degrees())))
}

/// AUC-Judd of `saliency: [H, W]` against fixation pixels (duplicates ignored).
pub fn auc_judd(saliency: &Tensor, fixations: &[(usize, usize)]) -> Result<f64, MetricsError> {
    let (h, w) = (saliency.shape()[0], saliency.shape()[1]);
    if fixations.is_empty() {
        return Err(MetricsError::NoFixations);
    }
    if let Some(&(i, j)) = fixations.iter().find(|&&(i, j)| i >= h || j >= w) {
        return Err(MetricsError::FixationOutOfBounds(i, j, h, w));
    }
    let data = saliency.data();
    if data.iter().all(|&v| v == data[0]) {
        return Ok(0.5);
    }
    let mut fix_idx: Vec<usize> = fixations.iter().map(|&(i, j)| i * w + j).collect();
    fix_idx.sort_unstable();
    fix_idx.dedup();
    let mut is_fix = vec![false; data.len()];
    for &k in &fix_idx {
        is_fix[k] = true;
    }
    let mut others: Vec<f64> = data
        .iter()
        .zip(&is_fix)
        .filter(|(_, f)| !**f)
        .map(|(v, _)| *v)
        .collect();
    others.sort_by(|a, b| b.total_cmp(a));
    let mut thresholds: Vec<f64> = fix_idx.iter().map(|&k| data[k]).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));

    let n_fix = thresholds.len() as f64;
    let n_other = others.len().max(1) as f64;
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    for (k, &t) in thresholds.iter().enumerate() {
        // fixations are sorted descending, so all earlier ones are >= t too
        let tp = thresholds[k..].iter().take_while(|&&v| v >= t).count() + k;
        let fp = others.partition_point(|&v| v >= t);
        tpr.push(tp as f64 / n_fix);
        fpr.push(fp as f64 / n_other);
    }
    tpr.push(1.0);
    fpr.push(1.0);
    Ok(trapezoid(&fpr, &tpr))
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0)
        .sum()
}

/// Nearest-neighbour upsampling of `[h, w]` to `[h*f, w*f]`.
pub fn upsample_nearest(map: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (oh, ow) = (h * factor, w * factor);
    Tensor::from_fn(&[oh, ow], |k| map.at2(k / ow / factor, (k % ow) / factor))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean: m, std }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub recall: MeanStd,
    pub precision: MeanStd,
    pub precision_relaxed: MeanStd,
    pub aae_deg: MeanStd,
    pub auc_judd: MeanStd,
    pub steps: MeanStd,
}

pub fn aggregate(episodes: &[EpisodeMetrics]) -> Summary {
    let col = |f: fn(&EpisodeMetrics) -> f64| -> MeanStd {
        MeanStd::of(&episodes.iter().map(f).collect::<Vec<_>>())
    };
    Summary {
        episodes: episodes.len(),
        recall: col(|e| e.recall),
        precision: col(|e| e.precision),
        precision_relaxed: col(|e| e.precision_relaxed),
        aae_deg: col(|e| e.aae_mean),
        auc_judd: col(|e| e.auc_judd),
        steps: col(|e| e.steps_survived as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Angle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn off(rho: f64, theta_deg: f64) -> PolarOffset {
        PolarOffset::new(rho, Angle::from_degrees(theta_deg))
    }

    #[test]
    fn quality_examples() {
        let p = TrackingQualityParams::default();
        assert_eq!(tracking_quality(&off(250.0, 0.0), &off(250.0, 0.0), &p), 1.0);
        let g = tracking_quality(&off(375.0, 45.0), &off(250.0, 0.0), &p);
        assert!(g.abs() < 1e-12, "{g}");
        assert_eq!(tracking_quality(&off(750.0, 90.0), &off(250.0, 0.0), &p), -1.0);
        assert!(tracking_quality_raw(&off(750.0, 90.0), &off(250.0, 0.0), &p) <= -1.0);
        let r = p.relaxed();
        assert_eq!(tracking_quality(&off(450.0, 0.0), &off(250.0, 0.0), &r), 1.0);
        assert_eq!(tracking_quality(&off(550.0, 0.0), &off(250.0, 0.0), &r), 0.0);
    }

    fn record(gamma: f64) -> StepRecord {
        StepRecord {
            step: 0,
            gamma,
            gamma_relaxed: gamma,
            lost: gamma <= -1.0,
            aae_deg: 0.0,
            camera_bearing: Bearing::CENTER,
            action_bearing: Bearing::CENTER,
            auc: None,
        }
    }

    #[test]
    fn episode_examples() {
        let full = vec![record(1.0); 500];
        let m = episode_metrics(&full, 500);
        assert_eq!((m.recall, m.precision, m.steps_survived), (1.0, 1.0, 500));
        let half = vec![record(0.5); 250];
        let m = episode_metrics(&half, 500);
        assert_eq!((m.recall, m.precision), (0.5, 0.5));
        assert_eq!(episode_metrics(&[], 500), EpisodeMetrics::default());
    }

    #[test]
    fn aae_examples() {
        let a = vec![Bearing::from_degrees(3.0, -2.0); 4];
        assert_eq!(average_angular_error(&a, &a).unwrap(), 0.0);
        let b = vec![Bearing::from_degrees(13.0, -2.0); 4];
        assert!((average_angular_error(&a, &b).unwrap() - 10.0).abs() < 1e-9);
        assert!(average_angular_error(&a, &b[..3]).is_err());
    }

    #[test]
    fn auc_examples() {
        let mut m = Tensor::from_fn(&[8, 8], |k| k as f64 / 100.0);
        m.data_mut()[0] = 5.0;
        assert_eq!(auc_judd(&m, &[(0, 0)]).unwrap(), 1.0);
        assert_eq!(auc_judd(&Tensor::filled(&[8, 8], 0.3), &[(1, 2), (3, 3)]).unwrap(), 0.5);
        assert!(auc_judd(&m, &[]).is_err());
        assert!(auc_judd(&m, &[(8, 0)]).is_err());
    }

    /// Direct ROC enumeration with naive loops.
    fn brute_force_auc(map: &Tensor, fix: &[(usize, usize)]) -> f64 {
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let mut fixset: Vec<(usize, usize)> = fix.to_vec();
        fixset.sort();
        fixset.dedup();
        let mut pts = vec![(0.0, 0.0)];
        let mut ts: Vec<f64> = fixset.iter().map(|&(i, j)| map.at2(i, j)).collect();
        ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for t in ts {
            let mut tp = 0.0;
            for &(i, j) in &fixset {
                if map.at2(i, j) >= t {
                    tp += 1.0;
                }
            }
            let (mut fp, mut neg) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    if !fixset.contains(&(i, j)) {
                        neg += 1.0;
                        if map.at2(i, j) >= t {
                            fp += 1.0;
                        }
                    }
                }
            }
            pts.push((fp / neg, tp / fixset.len() as f64));
        }
        pts.push((1.0, 1.0));
        let mut area = 0.0;
        for k in 1..pts.len() {
            area += (pts[k].0 - pts[k - 1].0) * (pts[k].1 + pts[k - 1].1) / 2.0;
        }
        area
    }

    #[test]
    fn auc_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            // coarse values to provoke ties
            let map = Tensor::from_fn(&[8, 8], |_| (rng.random_range(0..12) as f64) / 3.0);
            let n = rng.random_range(1..=5);
            let fix: Vec<(usize, usize)> = (0..n).map(|_| (rng.random_range(0..8), rng.random_range(0..8))).collect();
            let a = auc_judd(&map, &fix).unwrap();
            let b = brute_force_auc(&map, &fix);
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn upsample_nearest_blocks() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = upsample_nearest(&m, 3);
        assert_eq!(u.shape(), &[6, 6]);
        assert_eq!(u.at2(2, 2), 1.0);
        assert_eq!(u.at2(2, 3), 2.0);
        assert_eq!(u.at2(5, 0), 3.0);
        assert_eq!(u.at2(5, 5), 4.0);
    }

    #[test]
    fn aggregate_single_and_constant() {
        let e = EpisodeMetrics { recall: 0.7, precision: 0.4, precision_relaxed: 0.6, steps_survived: 350, aae_mean: 3.0, auc_judd: 0.8 };
        let s = aggregate(&[e]);
        assert_eq!(s.recall.mean, 0.7);
        assert_eq!(s.recall.std, 0.0);
        let s = aggregate(&vec![e; 100]);
        assert_eq!(s.episodes, 100);
        assert!((s.recall.mean - 0.7).abs() < 1e-12 && s.recall.std < 1e-12);
    }

    proptest! {
        #[test]
        fn quality_bounded_and_monotone(dr in 0.0f64..1000.0, dt in 0.0f64..180.0, extra in 0.0f64..50.0) {
            let p = TrackingQualityParams::default();
            let ideal = off(250.0, 0.0);
            let g = tracking_quality(&off(250.0 + dr, dt), &ideal, &p);
            prop_assert!((-1.0..=1.0).contains(&g));
            prop_assert!(tracking_quality(&off(250.0 + dr + extra, dt), &ideal, &p) <= g);
            prop_assert!(tracking_quality(&off(250.0 + dr, (dt + extra).min(180.0)), &ideal, &p) <= g);
        }

        #[test]
        fn auc_invariant_under_monotone_rescale(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = Tensor::from_fn(&[8, 8], |_| rng.random_range(0.0..1.0));
            let fix = [(rng.random_range(0..8), rng.random_range(0..8)), (rng.random_range(0..8), rng.random_range(0..8))];
            let a = auc_judd(&map, &fix).unwrap();
            let b = auc_judd(&map.map(|v| (3.0 * v).exp() - 7.0), &fix).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn aae_symmetric_and_wrap_invariant(a in -3.0f64..3.0, b in -1.0f64..1.0, c in -3.0f64..3.0, d in -1.0f64..1.0) {
            let p = [Bearing::new(a, b)];
            let g = [Bearing::new(c, d)];
            let x = average_angular_error(&p, &g).unwrap();
            prop_assert!((x - average_angular_error(&g, &p).unwrap()).abs() < 1e-9);
            let tau = std::f64::consts::TAU;
            let p2 = [Bearing::new(a + tau, b)];
            let g2 = [Bearing::new(c - tau, d)];
            prop_assert!((x - average_angular_error(&p2, &g2).unwrap()).abs() < 1e-9);
        }
    }
}
