//! Browser demo over `selpred-core`.
//!
//! Three operations are exported to JavaScript: a confidence-threshold
//! explorer, a temperature-scaling fit with before/after ECE, and a SiCoVa
//! loss breakdown. Each export takes strings and numbers and returns JSON;
//! the work happens in plain functions that the native tests call directly.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use selpred_core::calibration::{ece, fit_temperature, nll, softmax_probs, LogitsSet, TemperatureSearch};
use selpred_core::ingest::{labels_to_string, logits_to_string, parse_labels, parse_logits};
use selpred_core::losses::{sicova_loss, triplet_loss, LossBreakdown, SicovaWeights};
use selpred_core::protocol::DEFAULT_ECE_BINS;
use selpred_core::report::{risk_coverage_svg, PlotMetric, PlotSpec, Series};
use selpred_core::selective::{
    classwise_acceptance, decide, select_operating_point, threshold_grid, threshold_sweep, AbsentClassPolicy,
    ClasswiseAcceptance, OperatingPoint, RiskCoveragePoint,
};
use selpred_core::{Error, Matrix, Result, Rng};

pub fn load_set(logits_csv: &str, labels_csv: &str) -> Result<LogitsSet> {
    let logits = parse_logits(logits_csv, "logits")?;
    let labels = parse_labels(labels_csv, logits.cols(), "labels")?;
    LogitsSet::new(logits, labels)
}

#[derive(Debug, Serialize)]
pub struct ExampleData {
    pub logits_csv: String,
    pub labels_csv: String,
}

/// Random logits where the true class gets a `signal` boost, so larger
/// signals give sharper, more often correct predictions.
pub fn example_data(seed: u64, n: usize, k: usize, signal: f64) -> Result<ExampleData> {
    if n == 0 || k < 2 {
        return Err(Error::Usage(format!("need n >= 1 and k >= 2, got n={n}, k={k}")));
    }
    let mut rng = Rng::new(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let mut logits = Matrix::random_normal(n, k, 1.0, &mut rng);
    for (i, &l) in labels.iter().enumerate() {
        // a skewed per-row boost leaves some rows confidently wrong
        logits[(i, l)] += signal * rng.uniform() * 2.0;
    }
    Ok(ExampleData {
        logits_csv: logits_to_string(&logits),
        labels_csv: labels_to_string(&labels),
    })
}

#[derive(Debug, Serialize)]
pub struct ThresholdView {
    pub temperature: f64,
    pub curve: Vec<RiskCoveragePoint>,
    pub operating_point: OperatingPoint,
    pub classwise: ClasswiseAcceptance,
    pub svg: String,
}

/// Sweeps thresholds over temperature-scaled probabilities and marks the
/// point nearest `target_coverage`.
pub fn explore(
    logits_csv: &str,
    labels_csv: &str,
    temperature: f64,
    target_coverage: f64,
    grid_step: f64,
    plot_accuracy: bool,
) -> Result<ThresholdView> {
    let set = load_set(logits_csv, labels_csv)?;
    let probs = softmax_probs(set.logits(), temperature)?;
    let grid = threshold_grid(grid_step)?;
    let curve = threshold_sweep(&probs, set.labels(), set.n_classes(), &grid, AbsentClassPolicy::Exclude)?;
    let operating_point = select_operating_point(&curve, target_coverage)?;
    let decision = decide(&probs, operating_point.point.threshold)?;
    let classwise = classwise_acceptance(set.labels(), &decision, set.n_classes());
    let spec = PlotSpec {
        width: 640,
        height: 400,
        metric: if plot_accuracy {
            PlotMetric::SelAccuracy
        } else {
            PlotMetric::SelMacroF1
        },
        title: format!("risk-coverage at T = {temperature:.3}"),
    };
    let series = Series {
        label: "input".into(),
        curve: curve.clone(),
        operating_point: operating_point.point.clone(),
    };
    let svg = risk_coverage_svg(&[series], &spec)?;
    Ok(ThresholdView {
        temperature,
        curve,
        operating_point,
        classwise,
        svg,
    })
}

#[derive(Debug, Serialize)]
pub struct CalibrationView {
    pub temperature: f64,
    pub clamped: bool,
    pub nll_before: f64,
    pub nll_after: f64,
    pub ece_before: f64,
    pub ece_after: f64,
}

pub fn calibrate(logits_csv: &str, labels_csv: &str) -> Result<CalibrationView> {
    let set = load_set(logits_csv, labels_csv)?;
    let fit = fit_temperature(&set, &TemperatureSearch::default())?;
    let before = softmax_probs(set.logits(), 1.0)?;
    let after = softmax_probs(set.logits(), fit.temperature)?;
    Ok(CalibrationView {
        temperature: fit.temperature,
        clamped: fit.clamped,
        nll_before: nll(&set, 1.0)?,
        nll_after: fit.nll_at_t,
        ece_before: ece(&before, set.labels(), DEFAULT_ECE_BINS)?,
        ece_after: ece(&after, set.labels(), DEFAULT_ECE_BINS)?,
    })
}

#[derive(Debug, Serialize)]
pub struct LossView {
    pub sicova: LossBreakdown,
    pub intra: f64,
    pub triplet: f64,
}

/// Loss terms for a random embedding pair where the second view is the
/// first plus noise of scale `view_noise`.
pub fn loss_breakdown(seed: u64, n: usize, d: usize, view_noise: f64, weights: &SicovaWeights) -> Result<LossView> {
    if n < 2 || d == 0 {
        return Err(Error::Usage(format!("need n >= 2 and d >= 1, got n={n}, d={d}")));
    }
    let mut rng = Rng::new(seed);
    let z = Matrix::random_normal(n, d, 1.0, &mut rng);
    let noise = Matrix::random_normal(n, d, view_noise, &mut rng);
    let zp = Matrix::new(
        n,
        d,
        z.as_slice().iter().zip(noise.as_slice()).map(|(a, b)| a + b).collect(),
    )?;
    let sicova = sicova_loss(&z, &zp, weights)?;
    Ok(LossView {
        intra: sicova.intra(),
        sicova,
        triplet: triplet_loss(&z, &zp, 1.0)?,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = exampleData)]
pub fn example_data_js(seed: u32, n: u32, k: u32, signal: f64) -> std::result::Result<String, JsError> {
    to_js(example_data(seed.into(), n as usize, k as usize, signal))
}

#[wasm_bindgen(js_name = exploreThresholds)]
pub fn explore_js(
    logits_csv: &str,
    labels_csv: &str,
    temperature: f64,
    target_coverage: f64,
    grid_step: f64,
    plot_accuracy: bool,
) -> std::result::Result<String, JsError> {
    to_js(explore(
        logits_csv,
        labels_csv,
        temperature,
        target_coverage,
        grid_step,
        plot_accuracy,
    ))
}

#[wasm_bindgen(js_name = calibrate)]
pub fn calibrate_js(logits_csv: &str, labels_csv: &str) -> std::result::Result<String, JsError> {
    to_js(calibrate(logits_csv, labels_csv))
}

#[wasm_bindgen(js_name = lossBreakdown)]
#[allow(clippy::too_many_arguments)]
pub fn loss_breakdown_js(
    seed: u32,
    n: u32,
    d: u32,
    view_noise: f64,
    lambda_intra: f64,
    lambda_inv: f64,
    lambda_corr: f64,
) -> std::result::Result<String, JsError> {
    let weights = SicovaWeights {
        lambda_intra,
        lambda_inv,
        lambda_corr,
        ..SicovaWeights::default()
    };
    to_js(
        weights
            .validate()
            .and_then(|_| loss_breakdown(seed.into(), n as usize, d as usize, view_noise, &weights)),
    )
}
