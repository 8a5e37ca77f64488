//! Confidence-threshold abstention and selective metrics.
//!
//! A sample is retained when its maximum class probability is at least the
//! threshold `τ`; coverage is the retained fraction. Metrics computed on the
//! retained subset are `None` when nothing is retained.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax, Matrix};

/// Default number of threshold steps on `[0, 1]`.
pub const DEFAULT_GRID_STEP: f64 = 0.01;

/// Default target coverage of the operating point.
pub const DEFAULT_TARGET_COVERAGE: f64 = 0.70;

/// Coverage distances closer than this count as ties.
const COVERAGE_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AbstainDecision {
    pub predictions: Vec<usize>,
    pub p_max: Vec<f64>,
    pub retained: Vec<bool>,
    pub threshold: f64,
}

impl AbstainDecision {
    pub fn n_retained(&self) -> usize {
        self.retained.iter().filter(|r| **r).count()
    }

    pub fn coverage(&self) -> f64 {
        if self.retained.is_empty() {
            0.0
        } else {
            self.n_retained() as f64 / self.retained.len() as f64
        }
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(Error::Usage(format!("threshold must lie in [0, 1], got {threshold}")))
    }
}

/// Predict when `p_max ≥ τ`, abstain otherwise.
pub fn decide(probs: &Matrix, threshold: f64) -> Result<AbstainDecision> {
    check_threshold(threshold)?;
    let predictions: Vec<usize> = probs.row_iter().map(argmax).collect();
    let p_max: Vec<f64> = probs.row_iter().zip(&predictions).map(|(row, &k)| row[k]).collect();
    let retained = p_max.iter().map(|&p| p >= threshold).collect();
    Ok(AbstainDecision {
        predictions,
        p_max,
        retained,
        threshold,
    })
}

fn check_lengths(preds: &[usize], labels: &[usize], mask: &[bool]) {
    assert!(
        preds.len() == labels.len() && labels.len() == mask.len(),
        "predictions, labels and mask must have equal length"
    );
}

fn retained<'a>(
    preds: &'a [usize],
    labels: &'a [usize],
    mask: &'a [bool],
) -> impl Iterator<Item = (usize, usize)> + 'a {
    preds
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((&p, &l), _)| (p, l))
}

/// Fraction of retained samples predicted correctly.
pub fn accuracy(preds: &[usize], labels: &[usize], mask: &[bool]) -> Option<f64> {
    check_lengths(preds, labels, mask);
    let (n, correct) =
        retained(preds, labels, mask).fold((0usize, 0usize), |(n, c), (p, l)| (n + 1, c + usize::from(p == l)));
    (n > 0).then(|| correct as f64 / n as f64)
}

/// How macro-F1 treats classes with neither true nor predicted retained samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClassPolicy {
    /// Leave the class out of the mean.
    #[default]
    Exclude,
    /// Score the class 0 and keep it in the mean over all `K` classes.
    Zero,
}

/// Mean per-class F1 (`2TP / (2TP + FP + FN)`) over the retained samples.
pub fn macro_f1(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
    mask: &[bool],
    policy: AbsentClassPolicy,
) -> Option<f64> {
    check_lengths(preds, labels, mask);
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    let mut n = 0;
    for (p, l) in retained(preds, labels, mask) {
        n += 1;
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for k in 0..n_classes {
        let denom = 2 * tp[k] + fp[k] + fn_[k];
        if denom == 0 {
            if policy == AbsentClassPolicy::Zero {
                counted += 1;
            }
            continue;
        }
        total += 2.0 * tp[k] as f64 / denom as f64;
        counted += 1;
    }
    Some(total / counted as f64)
}

/// Quadratic weighted kappa on the retained samples.
///
/// Weights are `(i − j)² / (K − 1)²`; the `(K − 1)²` factor cancels between
/// numerator and denominator, so both are accumulated as exact integers.
/// When the expected disagreement is zero the result is 1 for a diagonal
/// confusion matrix and `None` otherwise.
pub fn qwk(preds: &[usize], labels: &[usize], n_classes: usize, mask: &[bool]) -> Option<f64> {
    check_lengths(preds, labels, mask);
    let mut confusion = vec![0u64; n_classes * n_classes];
    let mut n = 0u64;
    for (p, l) in retained(preds, labels, mask) {
        confusion[l * n_classes + p] += 1;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let row_tot: Vec<u64> = (0..n_classes)
        .map(|i| (0..n_classes).map(|j| confusion[i * n_classes + j]).sum())
        .collect();
    let col_tot: Vec<u64> = (0..n_classes)
        .map(|j| (0..n_classes).map(|i| confusion[i * n_classes + j]).sum())
        .collect();

    let mut observed: u128 = 0;
    let mut expected_scaled: u128 = 0; // n · Σ w E
    for i in 0..n_classes {
        for j in 0..n_classes {
            let w = (i.abs_diff(j) * i.abs_diff(j)) as u128;
            observed += w * confusion[i * n_classes + j] as u128;
            expected_scaled += w * row_tot[i] as u128 * col_tot[j] as u128;
        }
    }
    if expected_scaled == 0 {
        return (observed == 0).then_some(1.0);
    }
    Some(1.0 - (n as f64 * observed as f64) / expected_scaled as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCoveragePoint {
    pub threshold: f64,
    pub coverage: f64,
    pub n_retained: usize,
    pub sel_accuracy: Option<f64>,
    pub sel_macro_f1: Option<f64>,
    pub sel_qwk: Option<f64>,
}

/// Thresholds `0, step, 2·step, …` up to and including 1.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Usage(format!("grid step must lie in (0, 1], got {step}")));
    }
    let per_unit = 1.0 / step;
    let whole = per_unit.round();
    if (per_unit - whole).abs() < 1e-9 {
        // exact divisions keep values like 0.51 identical to their literals
        let n = whole as usize;
        return Ok((0..=n).map(|i| i as f64 / n as f64).collect());
    }
    let mut grid: Vec<f64> = (0..).map(|i| i as f64 * step).take_while(|t| *t <= 1.0).collect();
    if *grid.last().expect("0 is always present") < 1.0 {
        grid.push(1.0);
    }
    Ok(grid)
}

/// Selective metrics at every threshold of an ascending grid on `[0, 1]`.
pub fn threshold_sweep(
    probs: &Matrix,
    labels: &[usize],
    n_classes: usize,
    grid: &[f64],
    policy: AbsentClassPolicy,
) -> Result<Vec<RiskCoveragePoint>> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Usage("threshold grid must be sorted ascending".into()));
    }
    if labels.len() != probs.rows() {
        return Err(Error::Dimension(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    grid.iter()
        .map(|&tau| {
            let d = decide(probs, tau)?;
            Ok(RiskCoveragePoint {
                threshold: tau,
                coverage: d.coverage(),
                n_retained: d.n_retained(),
                sel_accuracy: accuracy(&d.predictions, labels, &d.retained),
                sel_macro_f1: macro_f1(&d.predictions, labels, n_classes, &d.retained, policy),
                sel_qwk: qwk(&d.predictions, labels, n_classes, &d.retained),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub point: RiskCoveragePoint,
    pub target_coverage: f64,
}

/// The curve point whose coverage is nearest `target`.
///
/// Ties prefer the higher coverage, then the lower threshold.
pub fn select_operating_point(curve: &[RiskCoveragePoint], target: f64) -> Result<OperatingPoint> {
    crate::protocol::validate_coverage(target)?;
    let best = curve
        .iter()
        .min_by(|a, b| {
            let da = (a.coverage - target).abs();
            let db = (b.coverage - target).abs();
            if (da - db).abs() > COVERAGE_TIE_EPS {
                return da.total_cmp(&db);
            }
            b.coverage
                .total_cmp(&a.coverage)
                .then(a.threshold.total_cmp(&b.threshold))
        })
        .ok_or_else(|| Error::Usage("cannot select an operating point on an empty curve".into()))?;
    Ok(OperatingPoint {
        point: best.clone(),
        target_coverage: target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAcceptance {
    pub class: usize,
    pub n_total: usize,
    pub n_retained: usize,
    /// `None` when the class has no samples.
    pub acceptance_rate: Option<f64>,
    /// Recall of the class within the retained set; `None` when none retained.
    pub retained_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseAcceptance {
    pub classes: Vec<ClassAcceptance>,
}

impl ClasswiseAcceptance {
    pub fn n_retained(&self) -> usize {
        self.classes.iter().map(|c| c.n_retained).sum()
    }
}

/// Per-class totals, acceptance rates and retained-set recall.
pub fn classwise_acceptance(labels: &[usize], decision: &AbstainDecision, n_classes: usize) -> ClasswiseAcceptance {
    assert_eq!(labels.len(), decision.retained.len());
    let mut total = vec![0usize; n_classes];
    let mut kept = vec![0usize; n_classes];
    let mut hit = vec![0usize; n_classes];
    for ((&l, &r), &p) in labels.iter().zip(&decision.retained).zip(&decision.predictions) {
        total[l] += 1;
        if r {
            kept[l] += 1;
            if p == l {
                hit[l] += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    ClasswiseAcceptance {
        classes: (0..n_classes)
            .map(|k| ClassAcceptance {
                class: k,
                n_total: total[k],
                n_retained: kept[k],
                acceptance_rate: ratio(kept[k], total[k]),
                retained_recall: ratio(hit[k], kept[k]),
            })
            .collect(),
    }
}

/// A checkpoint's identity and its operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub checkpoint_id: String,
    pub pretrain_epoch: u64,
    pub operating_point: OperatingPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCheckpoint {
    /// 1-based.
    pub rank: usize,
    pub score: CheckpointScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub ranked: Vec<RankedCheckpoint>,
    /// Checkpoints left out, with the reason.
    pub excluded: Vec<(String, String)>,
}

/// Orders checkpoints by selective macro-F1 at their operating points.
///
/// Ties go to the higher selective accuracy, then the earlier pretraining
/// epoch, then the checkpoint id. Checkpoints whose selective macro-F1 is
/// undefined are excluded and reported.
pub fn rank_checkpoints(scores: Vec<CheckpointScore>) -> Ranking {
    let (mut usable, unusable): (Vec<_>, Vec<_>) = scores
        .into_iter()
        .partition(|s| s.operating_point.point.sel_macro_f1.is_some());
    let key = |s: &CheckpointScore| {
        let p = &s.operating_point.point;
        (
            p.sel_macro_f1.unwrap_or(f64::NEG_INFINITY),
            p.sel_accuracy.unwrap_or(f64::NEG_INFINITY),
        )
    };
    usable.sort_by(|a, b| {
        let (fa, aa) = key(a);
        let (fb, ab) = key(b);
        fb.total_cmp(&fa)
            .then(ab.total_cmp(&aa))
            .then(a.pretrain_epoch.cmp(&b.pretrain_epoch))
            .then_with(|| a.checkpoint_id.cmp(&b.checkpoint_id))
    });
    Ranking {
        ranked: usable
            .into_iter()
            .enumerate()
            .map(|(i, score)| RankedCheckpoint { rank: i + 1, score })
            .collect(),
        excluded: unusable
            .into_iter()
            .map(|s| {
                let reason = format!(
                    "selective macro-F1 undefined at threshold {} (no retained samples)",
                    s.operating_point.point.threshold
                );
                (s.checkpoint_id, reason)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    const EXCLUDE: AbsentClassPolicy = AbsentClassPolicy::Exclude;

    fn binary_probs(p_max: &[f64]) -> Matrix {
        let rows: Vec<[f64; 2]> = p_max.iter().map(|&p| [p, 1.0 - p]).collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn decide_examples() {
        let probs = binary_probs(&[0.9, 0.6, 0.8, 0.5]);
        let d = decide(&probs, 0.7).unwrap();
        assert_eq!(d.retained, vec![true, false, true, false]);
        assert_eq!(d.coverage(), 0.5);

        assert_eq!(decide(&probs, 0.0).unwrap().coverage(), 1.0);

        let with_certain = binary_probs(&[1.0, 0.99]);
        assert_eq!(decide(&with_certain, 1.0).unwrap().retained, vec![true, false]);
        assert!(decide(&with_certain, 1.0 + 1e-9).is_err());
    }

    #[test]
    fn decide_breaks_ties_low() {
        let probs = Matrix::from_rows(&[[0.4, 0.4, 0.2]]).unwrap();
        assert_eq!(decide(&probs, 0.0).unwrap().predictions, vec![0]);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1], &[0, 1], &[true, true]), Some(1.0));
        assert_eq!(accuracy(&[0, 1], &[0, 0], &[true, true]), Some(0.5));
        assert_eq!(accuracy(&[0, 1, 2], &[0, 0, 2], &[true, false, true]), Some(1.0));
        assert_eq!(accuracy(&[0], &[0], &[false]), None);
    }

    #[test]
    fn macro_f1_examples() {
        let all = [true; 3];
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3, &all, EXCLUDE), Some(1.0));
        let v = macro_f1(&[0, 1, 1], &[0, 1, 2], 3, &all, EXCLUDE).unwrap();
        assert!((v - 5.0 / 9.0).abs() < 1e-12);
        assert_eq!(
            macro_f1(&[0, 0, 1], &[0, 0, 2], 3, &[true, true, false], EXCLUDE),
            Some(1.0)
        );
        assert_eq!(macro_f1(&[0], &[0], 3, &[false], EXCLUDE), None);
    }

    #[test]
    fn macro_f1_zero_policy_counts_absent_classes() {
        let v = macro_f1(&[0, 0], &[0, 0], 4, &[true, true], AbsentClassPolicy::Zero).unwrap();
        assert_eq!(v, 0.25);
    }

    #[test]
    fn qwk_examples() {
        let all = [true; 3];
        assert_eq!(qwk(&[0, 1, 2], &[0, 1, 2], 3, &all), Some(1.0));
        // O = diag(1,1) + (2→1); Σw·O = 1/4, Σw·E = 3/4 (counts), κ = 2/3
        let v = qwk(&[0, 1, 1], &[0, 1, 2], 3, &all).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        let v = qwk(&[2, 1, 0], &[0, 1, 2], 3, &all).unwrap();
        assert!(v < 0.0);
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn qwk_degenerate_cases() {
        assert_eq!(qwk(&[1, 1], &[1, 1], 3, &[true, true]), Some(1.0));
        assert_eq!(qwk(&[1], &[1], 3, &[false]), None);
    }

    #[test]
    fn grid_construction() {
        let g = threshold_grid(0.01).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!((g[0], g[51], g[100]), (0.0, 0.51, 1.0));
        assert_eq!(threshold_grid(1.0).unwrap(), vec![0.0, 1.0]);
        let g = threshold_grid(0.3).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!(threshold_grid(0.0).is_err());
        assert!(threshold_grid(1.5).is_err());
    }

    #[test]
    fn sweep_examples() {
        let probs = binary_probs(&[0.9, 0.6, 0.8, 0.5]);
        let labels = [0, 1, 0, 0];
        let curve = threshold_sweep(&probs, &labels, 2, &[0.0], EXCLUDE).unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!(curve[0].coverage, 1.0);
        let all = [true; 4];
        let preds = [0, 0, 0, 0];
        assert_eq!(curve[0].sel_accuracy, accuracy(&preds, &labels, &all));
        assert_eq!(curve[0].sel_macro_f1, macro_f1(&preds, &labels, 2, &all, EXCLUDE));

        let grid = threshold_grid(0.01).unwrap();
        let curve = threshold_sweep(&probs, &labels, 2, &grid, EXCLUDE).unwrap();
        let mut coverages: Vec<f64> = curve.iter().map(|p| p.coverage).collect();
        coverages.dedup();
        assert_eq!(coverages, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        let empty = curve.last().unwrap();
        assert_eq!(
            (empty.sel_accuracy, empty.sel_macro_f1, empty.sel_qwk),
            (None, None, None)
        );

        assert!(threshold_sweep(&probs, &labels, 2, &[0.5, 0.1], EXCLUDE).is_err());
    }

    #[test]
    fn operating_point_examples() {
        let probs = binary_probs(&[0.9, 0.8, 0.6, 0.5]);
        let labels = [0, 0, 0, 1];
        let grid = threshold_grid(0.01).unwrap();
        let curve = threshold_sweep(&probs, &labels, 2, &grid, EXCLUDE).unwrap();
        let op = select_operating_point(&curve, 0.70).unwrap();
        assert_eq!(op.point.coverage, 0.75);
        assert_eq!(op.point.threshold, 0.51);

        let op = select_operating_point(&curve, 1.0).unwrap();
        assert_eq!(op.point.threshold, 0.0);

        let point = |threshold, coverage| RiskCoveragePoint {
            threshold,
            coverage,
            n_retained: 0,
            sel_accuracy: None,
            sel_macro_f1: None,
            sel_qwk: None,
        };
        let tied = [point(0.2, 0.8), point(0.4, 0.6)];
        assert_eq!(select_operating_point(&tied, 0.7).unwrap().point.coverage, 0.8);

        assert!(select_operating_point(&[], 0.7).is_err());
    }

    #[test]
    fn classwise_examples() {
        let d = AbstainDecision {
            predictions: vec![0, 0, 1],
            p_max: vec![0.9, 0.4, 0.8],
            retained: vec![true, false, true],
            threshold: 0.5,
        };
        let c = classwise_acceptance(&[0, 0, 1], &d, 2);
        assert_eq!(c.classes[0].acceptance_rate, Some(0.5));
        assert_eq!(c.classes[1].acceptance_rate, Some(1.0));
        assert_eq!(c.n_retained(), d.n_retained());

        let all = AbstainDecision {
            retained: vec![true; 3],
            ..d.clone()
        };
        let c = classwise_acceptance(&[0, 0, 1], &all, 2);
        assert!(c.classes.iter().all(|k| k.acceptance_rate == Some(1.0)));

        let drop_two = AbstainDecision {
            predictions: vec![0, 2, 2],
            p_max: vec![0.9, 0.4, 0.3],
            retained: vec![true, false, false],
            threshold: 0.5,
        };
        let c = classwise_acceptance(&[0, 2, 2], &drop_two, 3);
        assert_eq!(c.classes[2].acceptance_rate, Some(0.0));
        assert_eq!(c.classes[1].acceptance_rate, None);
    }

    fn score(id: &str, epoch: u64, f1: Option<f64>, acc: Option<f64>) -> CheckpointScore {
        CheckpointScore {
            checkpoint_id: id.into(),
            pretrain_epoch: epoch,
            operating_point: OperatingPoint {
                point: RiskCoveragePoint {
                    threshold: 0.5,
                    coverage: 0.7,
                    n_retained: 7,
                    sel_accuracy: acc,
                    sel_macro_f1: f1,
                    sel_qwk: None,
                },
                target_coverage: 0.7,
            },
        }
    }

    #[test]
    fn ranking_orders_and_breaks_ties() {
        let r = rank_checkpoints(vec![score("a", 10, Some(0.5), Some(0.9))]);
        assert_eq!(r.ranked.len(), 1);
        assert_eq!(r.ranked[0].rank, 1);

        let r = rank_checkpoints(vec![
            score("late", 40, Some(0.8), Some(0.9)),
            score("early", 20, Some(0.8), Some(0.9)),
        ]);
        assert_eq!(r.ranked[0].score.checkpoint_id, "early");

        let r = rank_checkpoints(vec![
            score("x", 10, Some(0.8), Some(0.85)),
            score("y", 20, Some(0.8), Some(0.95)),
            score("z", 30, None, None),
        ]);
        assert_eq!(r.ranked[0].score.checkpoint_id, "y");
        assert_eq!(r.excluded.len(), 1);
        assert_eq!(r.excluded[0].0, "z");
    }

    /// Independent recomputation on the retained subset.
    fn brute_accuracy(preds: &[usize], labels: &[usize], mask: &[bool]) -> Option<f64> {
        let mut sub = Vec::new();
        for i in 0..preds.len() {
            if mask[i] {
                sub.push(preds[i] == labels[i]);
            }
        }
        if sub.is_empty() {
            None
        } else {
            Some(sub.iter().filter(|b| **b).count() as f64 / sub.len() as f64)
        }
    }

    #[test]
    fn selective_accuracy_matches_brute_force() {
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let n = 1 + rng.below(64);
            let k = 2 + rng.below(5);
            let logits = Matrix::random_normal(n, k, 2.0, &mut rng);
            let probs = crate::calibration::softmax_probs(&logits, 1.0).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let tau = rng.uniform();
            let d = decide(&probs, tau).unwrap();
            assert_eq!(
                accuracy(&d.predictions, &labels, &d.retained),
                brute_accuracy(&d.predictions, &labels, &d.retained)
            );
        }
    }

    #[test]
    fn coverage_is_non_increasing() {
        let mut rng = Rng::new(5);
        let grid = threshold_grid(DEFAULT_GRID_STEP).unwrap();
        for _ in 0..20 {
            let logits = Matrix::random_normal(40, 4, 2.0, &mut rng);
            let probs = crate::calibration::softmax_probs(&logits, 1.0).unwrap();
            let labels: Vec<usize> = (0..40).map(|_| rng.below(4)).collect();
            let curve = threshold_sweep(&probs, &labels, 4, &grid, EXCLUDE).unwrap();
            assert!(curve.windows(2).all(|w| w[0].coverage >= w[1].coverage));
        }
    }
}
