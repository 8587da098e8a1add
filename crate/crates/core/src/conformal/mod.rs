//! Trajectory-level conformal calibration: causal triangular smoothing, a
//! max statistic, order-statistic thresholds averaged over random half
//! splits, and the strict-exceedance classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::scorers::ScorerKind;
use crate::trajkit::Label;

pub const DEFAULT_WINDOW: usize = 50;
pub const DEFAULT_PERMUTATIONS: usize = 32;

/// Per-timestep scores of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub values: Vec<f64>,
    pub kind: ScorerKind,
    pub traj_id: String,
    pub label: Label,
}

impl ScoreSeries {
    /// Max of the smoothed series.
    pub fn statistic(&self, window: usize) -> Result<f64> {
        traj_statistic(&smooth(&self.values, window))
    }
}

/// Causal weighted average with weights `1..=w` rising toward the present;
/// the first `w - 1` outputs use the available prefix, renormalized.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|t| {
            let n = w.min(t + 1);
            let start = t + 1 - n;
            let num: f64 = values[start..=t]
                .iter()
                .enumerate()
                .map(|(i, v)| (i + 1) as f64 * v)
                .sum();
            num / (n * (n + 1) / 2) as f64
        })
        .collect()
}

pub fn traj_statistic(smoothed: &[f64]) -> Result<f64> {
    smoothed
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::InsufficientData("empty score series".into()))
}

/// The `ceil((n + 1)(1 - alpha))`-th smallest statistic, or `+inf` when that
/// rank exceeds `n`.
pub fn fit_threshold(stats: &[f64], alpha: f64) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::InsufficientData("no calibration statistics".into()));
    }
    check_alpha(alpha)?;
    let n = stats.len();
    let k = ((n + 1) as f64 * (1.0 - alpha) - 1e-9).ceil().max(1.0) as usize;
    if k > n {
        return Ok(f64::INFINITY);
    }
    let mut sorted = stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Calibrated decision rule together with the settings that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalThreshold {
    pub alpha: f64,
    /// Written as `null` when infinite (too few calibration trajectories for
    /// the requested quantile).
    #[serde(with = "inf_as_null")]
    pub threshold: f64,
    pub window: usize,
    pub permutations: usize,
    pub seed: u64,
    pub n_calib: usize,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl ConformalThreshold {
    /// `true` (anomalous) iff `stat` strictly exceeds the threshold.
    pub fn classify(&self, stat: f64) -> bool {
        classify(stat, self.threshold)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn classify(stat: f64, threshold: f64) -> bool {
    stat > threshold
}

/// Random half of `0..n` for permutation `p` of the jackknife with `seed`.
pub fn half_split(n: usize, seed: u64, p: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    let rest = idx.split_off(n / 2);
    (idx, rest)
}

/// Mean of `permutations` thresholds, each fit on a random half of the
/// nominal statistics.
pub fn jackknife_calibrate(
    stats: &[f64],
    alpha: f64,
    permutations: usize,
    window: usize,
    seed: u64,
) -> Result<ConformalThreshold> {
    if stats.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "jackknife calibration needs at least 2 statistics, got {}",
            stats.len()
        )));
    }
    if permutations == 0 {
        return Err(Error::Config("permutations must be positive".into()));
    }
    check_alpha(alpha)?;
    let fits = par::map_range(permutations, |p| {
        let (half, _) = half_split(stats.len(), seed, p);
        let sub: Vec<f64> = half.iter().map(|&i| stats[i]).collect();
        fit_threshold(&sub, alpha)
    });
    let mut sum = 0.0;
    for f in fits {
        sum += f?;
    }
    Ok(ConformalThreshold {
        alpha,
        threshold: sum / permutations as f64,
        window,
        permutations,
        seed,
        n_calib: stats.len(),
    })
}

/// Calibrates from nominal score series; any failure series is rejected.
pub fn calibrate_series(
    series: &[ScoreSeries],
    alpha: f64,
    permutations: usize,
    window: usize,
    seed: u64,
) -> Result<ConformalThreshold> {
    if let Some(s) = series.iter().find(|s| s.label != Label::Nominal) {
        return Err(Error::Label(format!(
            "calibration series {} is not nominal; thresholds are fit on nominal data only",
            s.traj_id
        )));
    }
    let stats = series
        .iter()
        .map(|s| s.statistic(window))
        .collect::<Result<Vec<_>>>()?;
    jackknife_calibrate(&stats, alpha, permutations, window, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn naive_smooth(x: &[f64], w: usize) -> Vec<f64> {
        let mut out = vec![];
        for t in 0..x.len() {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 1..=w {
                if t + i >= w {
                    let j = t + i - w;
                    let k = if t + 1 >= w { i } else { i - (w - t - 1) };
                    num += k as f64 * x[j];
                    den += k as f64;
                }
            }
            out.push(num / den);
        }
        out
    }

    #[test]
    fn constant_series_is_preserved() {
        let s = smooth(&[2.5; 80], 50);
        assert!(s.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn impulse_at_newest_position() {
        let mut x = vec![0.0; 50];
        x[49] = 1.0;
        let s = smooth(&x, 50);
        assert!((s[49] - 50.0 / 1275.0).abs() < 1e-12);
        assert!((s[49] - 0.039216).abs() < 1e-6);
    }

    #[test]
    fn impulse_response_matches_weights() {
        let mut x = vec![0.0; 120];
        x[60] = 1.0;
        let s = smooth(&x, 50);
        for lag in 0..50 {
            let want = (50 - lag) as f64 / 1275.0;
            assert!((s[60 + lag] - want).abs() < 1e-9);
        }
        assert_eq!(s[110], 0.0);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [1, 7, 49, 50, 51, 200] {
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
            for w in [1, 5, 50] {
                let a = smooth(&x, w);
                let b = naive_smooth(&x, w);
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn statistic_is_max() {
        assert_eq!(traj_statistic(&[1.0, 5.0, 3.0]).unwrap(), 5.0);
        assert_eq!(traj_statistic(&[2.0; 4]).unwrap(), 2.0);
        assert!(traj_statistic(&[]).is_err());
    }

    #[test]
    fn order_statistic_threshold() {
        let stats: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(fit_threshold(&stats, 0.15).unwrap(), 86.0);
        assert_eq!(fit_threshold(&[4.2], 0.5).unwrap(), 4.2);
        assert_eq!(fit_threshold(&[1.0, 2.0], 0.1).unwrap(), f64::INFINITY);
        assert!(fit_threshold(&[], 0.1).is_err());
        assert!(fit_threshold(&[1.0], 0.0).is_err());
    }

    #[test]
    fn monte_carlo_false_alarm_rate() {
        let alpha = 0.15;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (trials, n) = (1000, 200);
        let mut alarms = 0;
        for _ in 0..trials {
            let cal: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let thr = fit_threshold(&cal, alpha).unwrap();
            alarms += classify(rng.random::<f64>(), thr) as usize;
        }
        let rate = alarms as f64 / trials as f64;
        assert!(rate <= alpha + 0.04 && rate >= alpha - 0.04, "false alarm rate {rate}");
    }

    #[test]
    fn jackknife_cases() {
        let c = jackknife_calibrate(&[3.0; 10], 0.2, 32, 50, 1).unwrap();
        assert_eq!(c.threshold, 3.0);
        let stats: Vec<f64> = (0..40).map(|i| (i * 7 % 40) as f64).collect();
        let one = jackknife_calibrate(&stats, 0.15, 1, 50, 9).unwrap();
        let (half, _) = half_split(40, 9, 0);
        let sub: Vec<f64> = half.iter().map(|&i| stats[i]).collect();
        assert_eq!(one.threshold, fit_threshold(&sub, 0.15).unwrap());
        let a = jackknife_calibrate(&stats, 0.15, 32, 50, 5).unwrap();
        let b = jackknife_calibrate(&stats, 0.15, 32, 50, 5).unwrap();
        assert_eq!(a, b);
        assert!(jackknife_calibrate(&[1.0], 0.1, 32, 50, 0).is_err());
    }

    #[test]
    fn calibration_rejects_failures() {
        let s = |label| ScoreSeries { values: vec![1.0, 2.0], kind: ScorerKind::Random, traj_id: "x".into(), label };
        assert!(calibrate_series(&[s(Label::Nominal), s(Label::Failure)], 0.1, 4, 50, 0).is_err());
        assert!(calibrate_series(&[s(Label::Nominal), s(Label::Nominal)], 0.5, 4, 50, 0).is_ok());
    }

    #[test]
    fn tie_goes_to_nominal() {
        assert!(!classify(1.0, 1.0));
        assert!(classify(1.0 + 1e-12, 1.0));
    }

    #[test]
    fn threshold_json_round_trip() {
        let c = ConformalThreshold { alpha: 0.15, threshold: 0.25, window: 50, permutations: 32, seed: 7, n_calib: 64 };
        let j = c.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&j).unwrap();
        for k in ["alpha", "threshold", "window", "permutations", "seed", "n_calib"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(ConformalThreshold::from_json(&j).unwrap(), c);
        let inf = ConformalThreshold { threshold: f64::INFINITY, ..c };
        let j = inf.to_json().unwrap();
        assert!(j.contains("\"threshold\": null"));
        assert_eq!(ConformalThreshold::from_json(&j).unwrap(), inf);
    }

    proptest! {
        #[test]
        fn smoothing_weights_are_a_convex_combination(x in prop::collection::vec(-10.0f64..10.0, 1..120), w in 1usize..60) {
            let s = smooth(&x, w);
            prop_assert_eq!(s.len(), x.len());
            for t in 0..x.len() {
                let lo = x[t.saturating_sub(w - 1)..=t].iter().cloned().fold(f64::MAX, f64::min);
                let hi = x[t.saturating_sub(w - 1)..=t].iter().cloned().fold(f64::MIN, f64::max);
                prop_assert!(s[t] >= lo - 1e-9 && s[t] <= hi + 1e-9);
            }
        }

        #[test]
        fn classify_is_monotone(a in -5.0f64..5.0, b in -5.0f64..5.0, thr in -5.0f64..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(classify(lo, thr) <= classify(hi, thr));
        }

        #[test]
        fn statistic_ignores_order(mut x in prop::collection::vec(-10.0f64..10.0, 1..50)) {
            let a = traj_statistic(&x).unwrap();
            x.reverse();
            prop_assert_eq!(a, traj_statistic(&x).unwrap());
        }
    }
}
