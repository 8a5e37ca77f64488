//! Per-checkpoint evaluation: calibrate on one split, sweep thresholds on
//! another, pick the operating point, and rank checkpoints.
//!
//! Every checkpoint of a run goes through the same [`EvaluationProtocol`]
//! value, so grids, search bounds and class policies are identical.

use serde::{Deserialize, Serialize};

use crate::calibration::{ece, fit_temperature, softmax_probs, LogitsSet, TemperatureFit, TemperatureSearch};
use crate::error::{Error, Result};
use crate::ingest::LoadedCheckpoint;
use crate::parallel;
use crate::selective::{
    accuracy, classwise_acceptance, decide, macro_f1, qwk, rank_checkpoints, select_operating_point, threshold_grid,
    threshold_sweep, AbsentClassPolicy, CheckpointScore, ClasswiseAcceptance, OperatingPoint, Ranking,
    RiskCoveragePoint, DEFAULT_GRID_STEP, DEFAULT_TARGET_COVERAGE,
};

/// Default number of ECE bins.
pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationProtocol {
    pub search: TemperatureSearch,
    pub grid_step: f64,
    pub target_coverage: f64,
    pub f1_policy: AbsentClassPolicy,
    pub ece_bins: usize,
}

impl Default for EvaluationProtocol {
    fn default() -> Self {
        Self {
            search: TemperatureSearch::default(),
            grid_step: DEFAULT_GRID_STEP,
            target_coverage: DEFAULT_TARGET_COVERAGE,
            f1_policy: AbsentClassPolicy::default(),
            ece_bins: DEFAULT_ECE_BINS,
        }
    }
}

impl EvaluationProtocol {
    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        threshold_grid(self.grid_step)?;
        validate_coverage(self.target_coverage)?;
        if self.ece_bins == 0 {
            return Err(Error::Usage("ece_bins must be at least 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        threshold_grid(self.grid_step)
    }
}

/// Target coverage must lie in `(0, 1]`.
pub fn validate_coverage(target: f64) -> Result<()> {
    if target > 0.0 && target <= 1.0 {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "target coverage must lie in (0, 1], got {target}"
        )))
    }
}

/// Everything measured for one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEvaluation {
    pub checkpoint_id: String,
    pub pretrain_epoch: u64,
    pub calibration: TemperatureFit,
    pub n_calibration: usize,
    pub n_evaluation: usize,
    pub curve: Vec<RiskCoveragePoint>,
    pub operating_point: OperatingPoint,
    pub classwise: ClasswiseAcceptance,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub qwk: Option<f64>,
    pub ece_before: f64,
    pub ece_after: f64,
}

impl CheckpointEvaluation {
    pub fn score(&self) -> CheckpointScore {
        CheckpointScore {
            checkpoint_id: self.checkpoint_id.clone(),
            pretrain_epoch: self.pretrain_epoch,
            operating_point: self.operating_point.clone(),
        }
    }
}

/// Fits a temperature on `cal`, then evaluates `eval` with and without abstention.
pub fn evaluate_checkpoint(
    checkpoint_id: &str,
    pretrain_epoch: u64,
    cal: &LogitsSet,
    eval: &LogitsSet,
    protocol: &EvaluationProtocol,
) -> Result<CheckpointEvaluation> {
    protocol.validate()?;
    if cal.n_classes() != eval.n_classes() {
        return Err(Error::Dimension(format!(
            "checkpoint {checkpoint_id}: calibration has {} classes, evaluation has {}",
            cal.n_classes(),
            eval.n_classes()
        )));
    }
    let k = eval.n_classes();
    let fit = fit_temperature(cal, &protocol.search)?;

    let raw = softmax_probs(eval.logits(), 1.0)?;
    let probs = softmax_probs(eval.logits(), fit.temperature)?;
    let labels = eval.labels();

    let grid = protocol.grid()?;
    let curve = threshold_sweep(&probs, labels, k, &grid, protocol.f1_policy)?;
    let operating_point = select_operating_point(&curve, protocol.target_coverage)?;
    let decision = decide(&probs, operating_point.point.threshold)?;
    let classwise = classwise_acceptance(labels, &decision, k);

    let preds = eval.predictions();
    let all = vec![true; eval.len()];
    Ok(CheckpointEvaluation {
        checkpoint_id: checkpoint_id.to_owned(),
        pretrain_epoch,
        calibration: fit,
        n_calibration: cal.len(),
        n_evaluation: eval.len(),
        curve,
        operating_point,
        classwise,
        accuracy: accuracy(&preds, labels, &all),
        macro_f1: macro_f1(&preds, labels, k, &all, protocol.f1_policy),
        qwk: qwk(&preds, labels, k, &all),
        ece_before: ece(&raw, labels, protocol.ece_bins)?,
        ece_after: ece(&probs, labels, protocol.ece_bins)?,
    })
}

/// Evaluates every loaded manifest checkpoint on up to `jobs` threads, in manifest order.
pub fn evaluate_manifest(
    checkpoints: &[LoadedCheckpoint],
    protocol: &EvaluationProtocol,
    jobs: Option<usize>,
) -> Result<Vec<CheckpointEvaluation>> {
    parallel::try_map(checkpoints, jobs, |c| {
        evaluate_checkpoint(&c.entry.id, c.entry.pretrain_epoch, &c.cal, &c.eval, protocol)
    })
}

/// Ranks evaluated checkpoints by selective macro-F1 at their operating points.
pub fn rank_evaluations(evaluations: &[CheckpointEvaluation]) -> Ranking {
    rank_checkpoints(evaluations.iter().map(CheckpointEvaluation::score).collect())
}
