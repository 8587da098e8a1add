//! Fold-based classification accuracy and ranking metrics over trajectory
//! statistics.

use serde::{Deserialize, Serialize};

use crate::conformal::{classify, fit_threshold, half_split};
use crate::error::{Error, Result};
use crate::par;
use crate::scorers::ScorerKind;
use crate::trajkit::Mode;

/// `(n_nom * acc_nom + n_fail * acc_fail) / (n_nom + n_fail)`.
pub fn weighted_total(acc_nom: f64, acc_fail: f64, n_nom: usize, n_fail: usize) -> f64 {
    (n_nom as f64 * acc_nom + n_fail as f64 * acc_fail) / (n_nom + n_fail) as f64
}

/// Rounds to one decimal, halves away from zero. Absorbs binary
/// representation error so that 87.85 rounds to 87.9.
pub fn round1(x: f64) -> f64 {
    let y = x * 10.0;
    (y + y.signum() * 1e-9 * y.abs().max(1.0)).round() / 10.0
}

/// Accuracy of one scorer on one fold, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub fold: usize,
    pub threshold: f64,
    pub n_nominal: usize,
    pub n_failure: usize,
    pub acc_nominal: f64,
    pub acc_failure: f64,
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub kind: ScorerKind,
    pub alpha: f64,
    pub folds: Vec<Fold>,
    /// Mann-Whitney AUC of failure versus nominal statistics, per failure mode.
    pub auc_by_mode: Vec<(Mode, f64)>,
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl FoldReport {
    fn column(&self, f: impl Fn(&Fold) -> f64) -> (f64, f64) {
        mean_std(&self.folds.iter().map(f).collect::<Vec<_>>())
    }

    pub fn nominal(&self) -> (f64, f64) {
        self.column(|f| f.acc_nominal)
    }

    pub fn failure(&self) -> (f64, f64) {
        self.column(|f| f.acc_failure)
    }

    pub fn weighted(&self) -> (f64, f64) {
        self.column(|f| f.weighted)
    }

    pub fn mean_threshold(&self) -> f64 {
        self.column(|f| f.threshold).0
    }

    pub fn mean_auc(&self) -> f64 {
        self.auc_by_mode.iter().map(|(_, a)| a).sum::<f64>() / self.auc_by_mode.len().max(1) as f64
    }
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn roc_auc(negatives: &[f64], positives: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = negatives
        .iter()
        .map(|&v| (v, false))
        .chain(positives.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks over ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Per fold, fits the threshold on a random half of the nominal statistics
/// and classifies the other half together with every failure statistic.
pub fn evaluate_stats(
    kind: ScorerKind,
    nominal: &[f64],
    failures: &[(Mode, f64)],
    alpha: f64,
    folds: usize,
    seed: u64,
) -> Result<FoldReport> {
    if nominal.len() < 2 || failures.is_empty() {
        return Err(Error::Label(format!(
            "evaluation needs at least 2 nominal and 1 failure trajectory, got {} and {}",
            nominal.len(),
            failures.len()
        )));
    }
    if folds == 0 {
        return Err(Error::Config("folds must be positive".into()));
    }
    let results = par::map_range(folds, |f| -> Result<Fold> {
        let (fit, held) = half_split(nominal.len(), seed, f);
        let calib: Vec<f64> = fit.iter().map(|&i| nominal[i]).collect();
        let threshold = fit_threshold(&calib, alpha)?;
        let ok_nom = held.iter().filter(|&&i| !classify(nominal[i], threshold)).count();
        let ok_fail = failures.iter().filter(|(_, s)| classify(*s, threshold)).count();
        let acc_nominal = 100.0 * ok_nom as f64 / held.len() as f64;
        let acc_failure = 100.0 * ok_fail as f64 / failures.len() as f64;
        Ok(Fold {
            fold: f,
            threshold,
            n_nominal: held.len(),
            n_failure: failures.len(),
            acc_nominal,
            acc_failure,
            weighted: weighted_total(acc_nominal, acc_failure, held.len(), failures.len()),
        })
    });
    let mut modes: Vec<Mode> = failures.iter().map(|(m, _)| *m).collect();
    modes.sort();
    modes.dedup();
    let auc_by_mode = modes
        .into_iter()
        .map(|m| {
            let pos: Vec<f64> = failures.iter().filter(|(k, _)| *k == m).map(|(_, s)| *s).collect();
            (m, roc_auc(nominal, &pos))
        })
        .collect();
    Ok(FoldReport { kind, alpha, folds: results.into_iter().collect::<Result<_>>()?, auc_by_mode })
}

/// Expected weighted accuracy of a score carrying no information: nominal
/// trajectories pass with probability `1 - alpha`, failures are caught with
/// probability `alpha`.
pub fn chance_weighted(alpha: f64, n_nom: usize, n_fail: usize) -> f64 {
    weighted_total(100.0 * (1.0 - alpha), 100.0 * alpha, n_nom, n_fail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weighted_total_matches_published_rows() {
        let a = weighted_total(87.9, 95.1, 7, 9);
        assert!((a - 91.95).abs() < 1e-9);
        assert_eq!(format!("{:.1}", round1(a)), "92.0");
        let b = weighted_total(88.3, 87.5, 7, 9);
        assert!((b - 87.85).abs() < 1e-9);
        assert_eq!(format!("{:.1}", round1(b)), "87.9");
    }

    #[test]
    fn separable_scores_are_perfect() {
        let nominal = vec![0.0; 20];
        let failures: Vec<(Mode, f64)> = Mode::FAILURES.iter().map(|&m| (m, 1.0)).collect();
        let r = evaluate_stats(ScorerKind::Random, &nominal, &failures, 0.15, 8, 0).unwrap();
        assert_eq!(r.nominal().0, 100.0);
        assert_eq!(r.failure().0, 100.0);
        assert_eq!(r.weighted().0, 100.0);
        assert_eq!(r.mean_auc(), 1.0);
    }

    #[test]
    fn folds_use_disjoint_halves() {
        let nominal: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let r = evaluate_stats(ScorerKind::Sparc, &nominal, &[(Mode::ZeroFriction, 100.0)], 0.15, 4, 3).unwrap();
        for f in &r.folds {
            assert_eq!(f.n_nominal, 5);
            assert_eq!(f.n_failure, 1);
        }
        assert!(evaluate_stats(ScorerKind::Sparc, &nominal, &[], 0.15, 4, 3).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
        assert_eq!(roc_auc(&[2.0, 3.0], &[0.0, 1.0]), 0.0);
        assert_eq!(roc_auc(&[1.0, 1.0], &[1.0]), 0.5);
    }

    #[test]
    fn std_uses_sample_convention() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(neg in proptest::collection::vec(0u8..6, 1..20), pos in proptest::collection::vec(0u8..6, 1..20)) {
            let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
            let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
            let mut s = 0.0;
            for p in &pos {
                for n in &neg {
                    s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
                }
            }
            let want = s / (pos.len() * neg.len()) as f64;
            prop_assert!((roc_auc(&neg, &pos) - want).abs() < 1e-12);
        }

        #[test]
        fn weighted_total_lies_between_class_accuracies(a in 0.0f64..100.0, b in 0.0f64..100.0, n in 1usize..50, m in 1usize..50) {
            let w = weighted_total(a, b, n, m);
            prop_assert!(w >= a.min(b) - 1e-9 && w <= a.max(b) + 1e-9);
        }
    }
}
