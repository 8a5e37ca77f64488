//! Temperature scaling and calibration error.
//!
//! A single temperature `T` divides every logit before the softmax. It is
//! fitted by minimising the mean negative log-likelihood on a calibration
//! split with a golden-section search over `log T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax, Matrix};

/// `N×K` logits with integer labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsSet {
    logits: Matrix,
    labels: Vec<usize>,
}

impl LogitsSet {
    pub fn new(logits: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != logits.rows() {
            return Err(Error::Validation(format!(
                "{} logit rows but {} labels",
                logits.rows(),
                labels.len()
            )));
        }
        if logits.cols() < 2 {
            return Err(Error::Validation("logits need at least two classes".into()));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= logits.cols()) {
            return Err(Error::Validation(format!(
                "label {l} at row {i} is outside [0, {})",
                logits.cols()
            )));
        }
        logits.check_finite("logits")?;
        Ok(Self { logits, labels })
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.logits.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Argmax prediction per row.
    pub fn predictions(&self) -> Vec<usize> {
        self.logits.row_iter().map(argmax).collect()
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "temperature must be positive and finite, got {t}"
        )))
    }
}

/// Row-wise softmax of `logits / T` with max subtraction.
pub fn softmax_probs(logits: &Matrix, temperature: f64) -> Result<Matrix> {
    check_temperature(temperature)?;
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// Mean negative log-probability of the true class under `softmax(logits / T)`.
///
/// Per-row terms are summed in sorted order so the result does not depend on
/// row order.
pub fn nll(ls: &LogitsSet, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if ls.is_empty() {
        return Err(Error::Usage("NLL of an empty logits set".into()));
    }
    let mut terms: Vec<f64> = ls
        .logits
        .row_iter()
        .zip(&ls.labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = row.iter().map(|v| ((v - max) / temperature).exp()).sum::<f64>().ln();
            lse - (row[y] - max) / temperature
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Bounds and tolerance for the temperature search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemperatureSearch {
    pub t_min: f64,
    pub t_max: f64,
    /// Stop when the bracket on `log T` is narrower than this.
    pub tol: f64,
}

impl Default for TemperatureSearch {
    fn default() -> Self {
        Self {
            t_min: 0.05,
            t_max: 10.0,
            tol: 1e-4,
        }
    }
}

impl TemperatureSearch {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max.is_finite()) {
            return Err(Error::Usage(format!(
                "temperature bounds need 0 < t_min < t_max, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::Usage("temperature tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll_at_t: f64,
    /// The optimum sits on a search bound.
    pub clamped: bool,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Fits the temperature minimising [`nll`] on `ls`.
///
/// A flat objective (for example all-uniform logits) returns `T = 1`
/// (clamped into the bounds) without the clamp flag.
pub fn fit_temperature(ls: &LogitsSet, search: &TemperatureSearch) -> Result<TemperatureFit> {
    search.validate()?;
    if ls.is_empty() {
        return Err(Error::Usage("cannot fit a temperature on an empty set".into()));
    }
    let objective = |log_t: f64| nll(ls, log_t.exp());
    let (lo, hi) = (search.t_min.ln(), search.t_max.ln());

    let probes = (0..=4)
        .map(|k| objective(lo + (hi - lo) * k as f64 / 4.0))
        .collect::<Result<Vec<_>>>()?;
    let (pmin, pmax) = probes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if pmax - pmin <= 1e-12 * (1.0 + pmin.abs()) {
        let temperature = 1.0_f64.clamp(search.t_min, search.t_max);
        return Ok(TemperatureFit {
            temperature,
            nll_at_t: nll(ls, temperature)?,
            clamped: false,
        });
    }

    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (objective(c)?, objective(d)?);
    while b - a > search.tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = objective(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = objective(d)?;
        }
    }
    let interior = (0.5 * (a + b)).exp();

    // The interior estimate is only tol-accurate; exact bounds and T = 1 are
    // also candidates so that an optimum on a bound (or at 1) is reported as such.
    let mut candidates = vec![interior];
    if (search.t_min..=search.t_max).contains(&1.0) {
        candidates.push(1.0);
    }
    candidates.extend([search.t_min, search.t_max]);

    let mut best = TemperatureFit {
        temperature: interior,
        nll_at_t: nll(ls, interior)?,
        clamped: false,
    };
    for &t in &candidates[1..] {
        let v = nll(ls, t)?;
        if v < best.nll_at_t {
            best = TemperatureFit {
                temperature: t,
                nll_at_t: v,
                clamped: t == search.t_min || t == search.t_max,
            };
        }
    }
    Ok(best)
}

/// Expected calibration error over `n_bins` equal-width confidence bins.
///
/// Confidence is the row maximum; each bin contributes
/// `|accuracy − mean confidence|` weighted by its share of samples.
pub fn ece(probs: &Matrix, labels: &[usize], n_bins: usize) -> Result<f64> {
    if n_bins == 0 {
        return Err(Error::Usage("ECE needs at least one bin".into()));
    }
    if labels.len() != probs.rows() {
        return Err(Error::Dimension(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (row, &y) in probs.row_iter().zip(labels) {
        let pred = argmax(row);
        let p = row[pred];
        let bin = ((p * n_bins as f64) as usize).min(n_bins - 1);
        conf_sum[bin] += p;
        count[bin] += 1;
        if pred == y {
            correct[bin] += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (correct[b] as f64 / c - conf_sum[b] / c).abs()
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn closed_form_set() -> LogitsSet {
        let logits = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]).unwrap();
        LogitsSet::new(logits, vec![0, 0, 1]).unwrap()
    }

    fn random_set(rng: &mut Rng, n: usize, k: usize, scale: f64) -> LogitsSet {
        let logits = Matrix::random_normal(n, k, scale, rng);
        let labels = (0..n).map(|_| rng.below(k)).collect();
        LogitsSet::new(logits, labels).unwrap()
    }

    #[test]
    fn logits_set_validation() {
        let logits = Matrix::zeros(2, 3);
        assert!(LogitsSet::new(logits.clone(), vec![0]).is_err());
        assert!(LogitsSet::new(logits.clone(), vec![0, 3]).is_err());
        assert!(LogitsSet::new(Matrix::zeros(2, 1), vec![0, 0]).is_err());
        assert!(LogitsSet::new(logits, vec![2, 0]).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_probs(&Matrix::zeros(1, 4), 0.3).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let mut rng = Rng::new(7);
        let logits = Matrix::random_normal(20, 5, 3.0, &mut rng);
        let p = softmax_probs(&logits, 1e6).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 0.2).abs() < 1e-5));

        let p = softmax_probs(&Matrix::from_rows(&[[2.0, 0.0]]).unwrap(), 1.0).unwrap();
        let sigma = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((p[(0, 0)] - sigma).abs() < 1e-15);
        assert!((p[(0, 0)] - 0.8808).abs() < 1e-4);
        assert!((p[(0, 1)] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(8);
        let logits = Matrix::random_normal(50, 6, 20.0, &mut rng);
        for t in [0.05, 1.0, 7.5] {
            let p = softmax_probs(&logits, t).unwrap();
            for row in p.row_iter() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        assert!(matches!(softmax_probs(&Matrix::zeros(1, 2), 0.0), Err(Error::Usage(_))));
        assert!(nll(&closed_form_set(), -1.0).is_err());
    }

    #[test]
    fn nll_examples() {
        let t = 1.0 / std::f64::consts::LN_2;
        let expected = -(2.0 * (2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln()) / 3.0;
        assert!((nll(&closed_form_set(), t).unwrap() - expected).abs() < 1e-14);

        let uniform = LogitsSet::new(Matrix::zeros(4, 5), vec![0, 1, 2, 4]).unwrap();
        assert!((nll(&uniform, 2.0).unwrap() - 5f64.ln()).abs() < 1e-14);

        let sharp = LogitsSet::new(Matrix::from_rows(&[[500.0, 0.0]]).unwrap(), vec![0]).unwrap();
        assert!(nll(&sharp, 1.0).unwrap() < 1e-200);
    }

    #[test]
    fn fit_closed_form() {
        let fit = fit_temperature(&closed_form_set(), &TemperatureSearch::default()).unwrap();
        assert!((fit.temperature - 1.0 / std::f64::consts::LN_2).abs() < 1e-3);
        assert!(!fit.clamped);
    }

    #[test]
    fn fit_separable_clamps_at_lower_bound() {
        let logits = Matrix::from_rows(&[[2.0, 0.0, -1.0], [0.0, 3.0, 1.0], [0.0, 0.5, 1.5]]).unwrap();
        let ls = LogitsSet::new(logits, vec![0, 1, 2]).unwrap();
        let search = TemperatureSearch::default();
        let fit = fit_temperature(&ls, &search).unwrap();
        assert_eq!(fit.temperature, search.t_min);
        assert!(fit.clamped);
    }

    #[test]
    fn fit_flat_objective_returns_one() {
        let ls = LogitsSet::new(Matrix::zeros(6, 3), vec![0, 1, 2, 0, 1, 2]).unwrap();
        let fit = fit_temperature(&ls, &TemperatureSearch::default()).unwrap();
        assert_eq!(fit.temperature, 1.0);
        assert!(!fit.clamped);
    }

    #[test]
    fn fit_rejects_bad_search() {
        let bad = TemperatureSearch {
            t_min: 2.0,
            t_max: 1.0,
            tol: 1e-4,
        };
        assert!(matches!(
            fit_temperature(&closed_form_set(), &bad),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn fit_never_worse_than_identity() {
        let mut rng = Rng::new(31);
        for _ in 0..30 {
            let ls = random_set(&mut rng, 40, 4, 2.0);
            let fit = fit_temperature(&ls, &TemperatureSearch::default()).unwrap();
            assert!(fit.nll_at_t <= nll(&ls, 1.0).unwrap() + 1e-12);
        }
    }

    #[test]
    fn fit_matches_dense_grid_scan() {
        let search = TemperatureSearch::default();
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            // labels correlated with the logits so correctness is mixed
            let n = 60;
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..n {
                let y = rng.below(3);
                let mut row = [rng.normal(), rng.normal(), rng.normal()];
                row[y] += 1.5;
                rows.push(row);
                labels.push(y);
            }
            let ls = LogitsSet::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
            let fit = fit_temperature(&ls, &search).unwrap();

            // coarse 1000-point scan, then 1000 points across the best cell
            let scan = |lo: f64, hi: f64| {
                (0..1000)
                    .map(|i| lo + (hi - lo) * i as f64 / 999.0)
                    .map(|t| (t, nll(&ls, t).unwrap()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
            };
            let step = (search.t_max - search.t_min) / 999.0;
            let coarse = scan(search.t_min, search.t_max);
            let grid_best = scan((coarse.0 - step).max(search.t_min), (coarse.0 + step).min(search.t_max));
            assert!(
                (fit.temperature - grid_best.0).abs() < 1e-3,
                "golden {} grid {}",
                fit.temperature,
                grid_best.0
            );
            assert!(fit.nll_at_t <= grid_best.1 + 1e-7);
        }
    }

    #[test]
    fn fit_is_row_order_invariant() {
        let mut rng = Rng::new(13);
        let ls = random_set(&mut rng, 50, 4, 2.5);
        let mut order: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut order);
        let shuffled = LogitsSet::new(
            ls.logits().select_rows(&order),
            order.iter().map(|&i| ls.labels()[i]).collect(),
        )
        .unwrap();
        let a = fit_temperature(&ls, &TemperatureSearch::default()).unwrap();
        let b = fit_temperature(&shuffled, &TemperatureSearch::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ece_examples() {
        let probs = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(ece(&probs, &[0, 1], 15).unwrap(), 0.0);

        let probs = Matrix::from_rows(&vec![[0.8, 0.2]; 100]).unwrap();
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 80)).collect();
        assert!(ece(&probs, &labels, 15).unwrap().abs() < 1e-12);

        let probs = Matrix::from_rows(&[[0.9, 0.1]; 10]).unwrap();
        assert!((ece(&probs, &[1; 10], 15).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn ece_stays_in_unit_interval() {
        let mut rng = Rng::new(14);
        for _ in 0..20 {
            let ls = random_set(&mut rng, 30, 4, 3.0);
            let e = ece(&softmax_probs(ls.logits(), 1.0).unwrap(), ls.labels(), 15).unwrap();
            assert!((0.0..=1.0).contains(&e));
        }
    }
}
