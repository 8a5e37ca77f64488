//! Self-supervised objectives on paired view embeddings.
//!
//! Both objectives take two `N×D` embedding batches `z` (view 1) and `zp`
//! (view 2) whose `i`-th rows come from the same input.
//!
//! SiCoVa combines intra-view variance/covariance regularisation with an
//! inter-view invariance (MSE) term and a cross-correlation alignment term.
//! The cross-correlation uses column standardisation, so `R` is the Pearson
//! cross-correlation matrix and `R_ii = 1` for identical views.
//!
//! The batch-all triplet loss treats `z_i` as anchor, `zp_i` as positive and
//! every `zp_k` (`k ≠ i`) as a negative.
//!
//! Every loss has a hand-derived gradient (see [`loss_gradient`]) checked
//! against central finite differences by [`finite_diff_check`]. At hinge kinks
//! and at zero-length distance vectors the subgradient 0 is used.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{center_columns, column_mean_var, matmul_bt, matmul_t, Matrix, Rng};

pub(crate) mod extended;

use extended::DdMatrix;

/// Weights and constants of the SiCoVa objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SicovaWeights {
    pub lambda_intra: f64,
    pub lambda_inv: f64,
    pub lambda_corr: f64,
    /// Target minimum per-dimension standard deviation.
    pub gamma: f64,
    /// Added to the variance inside the square root of the variance hinge.
    pub eps_var: f64,
    /// Columns with a std below this are zeroed before cross-correlation.
    pub eps_norm: f64,
}

impl Default for SicovaWeights {
    fn default() -> Self {
        Self {
            lambda_intra: 25.0,
            lambda_inv: 25.0,
            lambda_corr: 1.0,
            gamma: 1.0,
            eps_var: 1e-4,
            eps_norm: 1e-6,
        }
    }
}

impl SicovaWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_intra, self.lambda_inv, self.lambda_corr];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Usage("SiCoVa weights must be finite and non-negative".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Usage("gamma must be positive".into()));
        }
        if !(self.eps_var > 0.0 && self.eps_norm > 0.0) {
            return Err(Error::Usage("eps_var and eps_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletParams {
    pub margin: f64,
    /// Average the loss with its view-swapped counterpart (anchors from both views).
    pub symmetric: bool,
}

impl Default for TripletParams {
    fn default() -> Self {
        Self {
            margin: 1.0,
            symmetric: false,
        }
    }
}

impl TripletParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Usage("triplet margin must be positive".into()));
        }
        Ok(())
    }
}

/// Unweighted SiCoVa components and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub var_z: f64,
    pub var_zp: f64,
    pub cov_z: f64,
    pub cov_zp: f64,
    pub inv: f64,
    pub corr: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn intra(&self) -> f64 {
        self.var_z + self.var_zp + self.cov_z + self.cov_zp
    }
}

/// Gradients of a scalar loss with respect to both views.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub d_z: Matrix,
    pub d_zp: Matrix,
}

impl GradPair {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            d_z: Matrix::zeros(rows, cols),
            d_zp: Matrix::zeros(rows, cols),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossId {
    Sicova,
    Triplet,
}

impl FromStr for LossId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sicova" => Ok(LossId::Sicova),
            "triplet" => Ok(LossId::Triplet),
            other => Err(Error::Usage(format!(
                "unknown loss '{other}' (expected 'sicova' or 'triplet')"
            ))),
        }
    }
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossId::Sicova => "sicova",
            LossId::Triplet => "triplet",
        })
    }
}

/// A loss together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    Sicova(SicovaWeights),
    Triplet(TripletParams),
}

impl LossSpec {
    pub fn id(&self) -> LossId {
        match self {
            LossSpec::Sicova(_) => LossId::Sicova,
            LossSpec::Triplet(_) => LossId::Triplet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossSpec::Sicova(w) => w.validate(),
            LossSpec::Triplet(p) => p.validate(),
        }
    }

    pub fn value(&self, z: &Matrix, zp: &Matrix) -> Result<f64> {
        match self {
            LossSpec::Sicova(w) => Ok(sicova_loss(z, zp, w)?.total),
            LossSpec::Triplet(p) => triplet_loss_with(z, zp, p),
        }
    }

    pub fn gradient(&self, z: &Matrix, zp: &Matrix) -> Result<GradPair> {
        loss_gradient(self, z, zp)
    }
}

fn check_pair(z: &Matrix, zp: &Matrix, op: &'static str, min_rows: usize) -> Result<()> {
    z.check_same_shape(zp, op)?;
    if z.rows() < min_rows {
        return Err(Error::InsufficientSamples {
            op,
            needed: min_rows,
            got: z.rows(),
        });
    }
    z.check_finite(op)?;
    zp.check_finite(op)
}

// ---------------------------------------------------------------------------
// Intra-view terms
// ---------------------------------------------------------------------------

/// Mean over dimensions of `max(0, γ − sqrt(var_j + eps_var))`.
pub fn variance_loss(z: &Matrix, gamma: f64, eps_var: f64) -> Result<f64> {
    if z.rows() < 1 {
        return Err(Error::InsufficientSamples {
            op: "variance_loss",
            needed: 1,
            got: 0,
        });
    }
    z.check_finite("variance_loss")?;
    let (_, vars) = column_mean_var(z)?;
    let d = vars.len() as f64;
    Ok(vars
        .iter()
        .map(|v| (gamma - (v + eps_var).sqrt()).max(0.0))
        .sum::<f64>()
        / d)
}

fn variance_grad(z: &Matrix, gamma: f64, eps_var: f64) -> Result<Matrix> {
    let (means, vars) = column_mean_var(z)?;
    let (n, d) = (z.rows() as f64, z.cols() as f64);
    let mut g = Matrix::zeros(z.rows(), z.cols());
    for (j, (mu, var)) in means.iter().zip(&vars).enumerate() {
        let s = (var + eps_var).sqrt();
        if gamma - s <= 0.0 {
            continue;
        }
        let coef = -1.0 / (d * n * s);
        for i in 0..z.rows() {
            g[(i, j)] = coef * (z[(i, j)] - mu);
        }
    }
    Ok(g)
}

fn covariance(z: &Matrix) -> Result<(Matrix, Matrix)> {
    let centered = center_columns(z)?;
    let cov = matmul_t(&centered, &centered, true)?.scaled(1.0 / z.rows() as f64);
    Ok((centered, cov))
}

/// `(1/D) Σ_{i≠j} C_ij²` with `C` the population covariance of `z`.
pub fn covariance_loss(z: &Matrix) -> Result<f64> {
    if z.rows() < 2 {
        return Err(Error::InsufficientSamples {
            op: "covariance_loss",
            needed: 2,
            got: z.rows(),
        });
    }
    z.check_finite("covariance_loss")?;
    let (_, cov) = covariance(z)?;
    let d = z.cols();
    let mut acc = 0.0;
    for a in 0..d {
        for b in 0..d {
            if a != b {
                acc += cov[(a, b)] * cov[(a, b)];
            }
        }
    }
    Ok(acc / d as f64)
}

fn covariance_grad(z: &Matrix) -> Result<Matrix> {
    let (centered, mut cov) = covariance(z)?;
    let d = z.cols();
    for a in 0..d {
        cov[(a, a)] = 0.0;
    }
    // dL/dZ = 4/(N·D) · Zc · C_offdiag, already column-centred.
    let g = matmul_t(&centered, &cov, false)?;
    center_columns(&g.scaled(4.0 / (z.rows() as f64 * d as f64)))
}

/// The four unweighted intra-view components `(var_z, var_zp, cov_z, cov_zp)`.
pub fn intra_loss(z: &Matrix, zp: &Matrix, w: &SicovaWeights) -> Result<(f64, f64, f64, f64)> {
    check_pair(z, zp, "intra_loss", 2)?;
    Ok((
        variance_loss(z, w.gamma, w.eps_var)?,
        variance_loss(zp, w.gamma, w.eps_var)?,
        covariance_loss(z)?,
        covariance_loss(zp)?,
    ))
}

// ---------------------------------------------------------------------------
// Inter-view terms
// ---------------------------------------------------------------------------

/// Mean squared Euclidean distance between paired rows.
pub fn invariance_loss(z: &Matrix, zp: &Matrix) -> Result<f64> {
    check_pair(z, zp, "invariance_loss", 1)?;
    let sq: f64 = z
        .as_slice()
        .iter()
        .zip(zp.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / z.rows() as f64)
}

/// Column standardisation: centred columns divided by their population std;
/// columns with std below `eps_norm` become zero. Returns the standardised
/// matrix and the std of each column (`None` for zeroed columns).
fn standardize(z: &Matrix, eps_norm: f64) -> Result<(Matrix, Vec<Option<f64>>)> {
    let (means, vars) = column_mean_var(z)?;
    let stds: Vec<Option<f64>> = vars.iter().map(|v| Some(v.sqrt()).filter(|s| *s >= eps_norm)).collect();
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        for (j, (mu, s)) in means.iter().zip(&stds).enumerate() {
            if let Some(s) = s {
                out[(i, j)] = (z[(i, j)] - mu) / s;
            }
        }
    }
    Ok((out, stds))
}

/// Backward pass of [`standardize`] given the upstream gradient w.r.t. its output.
fn standardize_backward(normed: &Matrix, stds: &[Option<f64>], upstream: &Matrix) -> Matrix {
    let n = normed.rows() as f64;
    let mut g = Matrix::zeros(normed.rows(), normed.cols());
    for (j, s) in stds.iter().enumerate() {
        let Some(s) = s else { continue };
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for i in 0..normed.rows() {
            mean_g += upstream[(i, j)];
            mean_gx += upstream[(i, j)] * normed[(i, j)];
        }
        mean_g /= n;
        mean_gx /= n;
        for i in 0..normed.rows() {
            g[(i, j)] = (upstream[(i, j)] - mean_g - normed[(i, j)] * mean_gx) / s;
        }
    }
    g
}

/// `R = (1/N) Z̃ᵀ Z̃′` over column-standardised views.
pub fn cross_correlation(z: &Matrix, zp: &Matrix, eps_norm: f64) -> Result<Matrix> {
    check_pair(z, zp, "cross_correlation", 2)?;
    let (zn, _) = standardize(z, eps_norm)?;
    let (zpn, _) = standardize(zp, eps_norm)?;
    Ok(matmul_t(&zn, &zpn, true)?.scaled(1.0 / z.rows() as f64))
}

fn correlation_from_r(r: &Matrix) -> f64 {
    let d = r.rows();
    let mut acc = 0.0;
    for a in 0..d {
        for b in 0..d {
            let v = r[(a, b)];
            acc += if a == b { (1.0 - v) * (1.0 - v) } else { v * v };
        }
    }
    acc
}

/// `Σ_i (1 − R_ii)² + Σ_{i≠j} R_ij²`.
pub fn correlation_loss(z: &Matrix, zp: &Matrix, eps_norm: f64) -> Result<f64> {
    Ok(correlation_from_r(&cross_correlation(z, zp, eps_norm)?))
}

fn correlation_grad(z: &Matrix, zp: &Matrix, eps_norm: f64) -> Result<GradPair> {
    let n = z.rows() as f64;
    let (zn, z_std) = standardize(z, eps_norm)?;
    let (zpn, zp_std) = standardize(zp, eps_norm)?;
    let mut g = matmul_t(&zn, &zpn, true)?.scaled(1.0 / n);
    let d = g.rows();
    for a in 0..d {
        for b in 0..d {
            let r = g[(a, b)];
            g[(a, b)] = if a == b { -2.0 * (1.0 - r) } else { 2.0 * r };
        }
    }
    // dL/dZ̃ = (1/N) Z̃′ Gᵀ,  dL/dZ̃′ = (1/N) Z̃ G
    let up_z = matmul_bt(&zpn, &g)?.scaled(1.0 / n);
    let up_zp = matmul_t(&zn, &g, false)?.scaled(1.0 / n);
    Ok(GradPair {
        d_z: standardize_backward(&zn, &z_std, &up_z),
        d_zp: standardize_backward(&zpn, &zp_std, &up_zp),
    })
}

/// Full SiCoVa breakdown.
pub fn sicova_loss(z: &Matrix, zp: &Matrix, w: &SicovaWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let (var_z, var_zp, cov_z, cov_zp) = intra_loss(z, zp, w)?;
    let inv = invariance_loss(z, zp)?;
    let corr = correlation_loss(z, zp, w.eps_norm)?;
    let intra = var_z + var_zp + cov_z + cov_zp;
    Ok(LossBreakdown {
        var_z,
        var_zp,
        cov_z,
        cov_zp,
        inv,
        corr,
        total: w.lambda_intra * intra + w.lambda_inv * inv + w.lambda_corr * corr,
    })
}

fn sicova_grad(z: &Matrix, zp: &Matrix, w: &SicovaWeights) -> Result<GradPair> {
    w.validate()?;
    check_pair(z, zp, "sicova_loss", 2)?;
    let intra_z = variance_grad(z, w.gamma, w.eps_var)?.add_scaled(&covariance_grad(z)?, 1.0)?;
    let intra_zp = variance_grad(zp, w.gamma, w.eps_var)?.add_scaled(&covariance_grad(zp)?, 1.0)?;
    let inv = z.sub(zp)?.scaled(2.0 / z.rows() as f64);
    let corr = correlation_grad(z, zp, w.eps_norm)?;

    let d_z = intra_z
        .scaled(w.lambda_intra)
        .add_scaled(&inv, w.lambda_inv)?
        .add_scaled(&corr.d_z, w.lambda_corr)?;
    let d_zp = intra_zp
        .scaled(w.lambda_intra)
        .add_scaled(&inv, -w.lambda_inv)?
        .add_scaled(&corr.d_zp, w.lambda_corr)?;
    Ok(GradPair { d_z, d_zp })
}

// ---------------------------------------------------------------------------
// Triplet
// ---------------------------------------------------------------------------

fn pairwise_distances(a: &Matrix, b: &Matrix) -> Matrix {
    let mut d = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ar = a.row(i);
        for k in 0..b.rows() {
            d[(i, k)] = ar
                .iter()
                .zip(b.row(k))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    }
    d
}

/// Batch-all triplet loss with anchors from `z` only.
pub fn triplet_loss(z: &Matrix, zp: &Matrix, margin: f64) -> Result<f64> {
    triplet_loss_with(
        z,
        zp,
        &TripletParams {
            margin,
            symmetric: false,
        },
    )
}

pub fn triplet_loss_with(z: &Matrix, zp: &Matrix, p: &TripletParams) -> Result<f64> {
    p.validate()?;
    check_pair(z, zp, "triplet_loss", 2)?;
    let one_way = |a: &Matrix, b: &Matrix| {
        let n = a.rows();
        let dist = pairwise_distances(a, b);
        let mut acc = 0.0;
        for i in 0..n {
            for k in (0..n).filter(|&k| k != i) {
                acc += (dist[(i, i)] - dist[(i, k)] + p.margin).max(0.0);
            }
        }
        acc / (n * (n - 1)) as f64
    };
    if p.symmetric {
        Ok(0.5 * (one_way(z, zp) + one_way(zp, z)))
    } else {
        Ok(one_way(z, zp))
    }
}

fn triplet_grad_one_way(a: &Matrix, b: &Matrix, margin: f64) -> GradPair {
    let (n, d) = a.shape();
    let dist = pairwise_distances(a, b);
    let scale = 1.0 / (n * (n - 1)) as f64;
    let mut g = GradPair::zeros(n, d);

    // unit vector (a_i − b_k)/‖·‖, zero at the norm kink
    let unit = |i: usize, k: usize, j: usize| {
        let len = dist[(i, k)];
        if len > 0.0 {
            (a[(i, j)] - b[(k, j)]) / len
        } else {
            0.0
        }
    };

    for i in 0..n {
        for k in (0..n).filter(|&k| k != i) {
            if dist[(i, i)] - dist[(i, k)] + margin <= 0.0 {
                continue;
            }
            for j in 0..d {
                let u_pos = unit(i, i, j);
                let u_neg = unit(i, k, j);
                g.d_z[(i, j)] += scale * (u_pos - u_neg);
                g.d_zp[(i, j)] -= scale * u_pos;
                g.d_zp[(k, j)] += scale * u_neg;
            }
        }
    }
    g
}

fn triplet_grad(z: &Matrix, zp: &Matrix, p: &TripletParams) -> Result<GradPair> {
    p.validate()?;
    check_pair(z, zp, "triplet_loss", 2)?;
    let forward = triplet_grad_one_way(z, zp, p.margin);
    if !p.symmetric {
        return Ok(forward);
    }
    let swapped = triplet_grad_one_way(zp, z, p.margin);
    Ok(GradPair {
        d_z: forward.d_z.add_scaled(&swapped.d_zp, 1.0)?.scaled(0.5),
        d_zp: forward.d_zp.add_scaled(&swapped.d_z, 1.0)?.scaled(0.5),
    })
}

// ---------------------------------------------------------------------------
// Gradients and checking
// ---------------------------------------------------------------------------

/// Analytic partial derivatives of the scalar loss w.r.t. `z` and `zp`.
pub fn loss_gradient(spec: &LossSpec, z: &Matrix, zp: &Matrix) -> Result<GradPair> {
    match spec {
        LossSpec::Sicova(w) => sicova_grad(z, zp, w),
        LossSpec::Triplet(p) => triplet_grad(z, zp, p),
    }
}

/// Magnitude of the deterministic jitter applied to triplet inputs before a
/// finite-difference check, to move points off exact hinge and norm kinks.
pub const KINK_PERTURBATION: f64 = 1e-3;

const KINK_STREAM_SEED: u64 = 0x6b69_6e6b;

fn jitter(m: &Matrix, rng: &mut Rng) -> Matrix {
    m.map(|v| v + KINK_PERTURBATION * (2.0 * rng.uniform() - 1.0))
}

/// Maximum relative error between the analytic gradient and central
/// differences with step `h`, over every entry of both views.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, 1e-8)`.
/// Loss values inside the difference quotient are evaluated in double-double
/// arithmetic, so the f64 rounding of the loss (≈ `ulp(f)/h`) does not limit
/// the comparison on small entries. For the triplet loss both inputs are
/// first shifted by a fixed, seeded uniform jitter of magnitude
/// [`KINK_PERTURBATION`].
pub fn finite_diff_check(spec: &LossSpec, z: &Matrix, zp: &Matrix, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Usage(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let (z, zp) = match spec {
        LossSpec::Triplet(_) => {
            let mut rng = Rng::new(KINK_STREAM_SEED);
            (jitter(z, &mut rng), jitter(zp, &mut rng))
        }
        LossSpec::Sicova(_) => (z.clone(), zp.clone()),
    };
    // validates shapes, parameters and finiteness for the extended path too
    let analytic = loss_gradient(spec, &z, &zp)?;

    let wide = [DdMatrix::from_matrix(&z), DdMatrix::from_matrix(&zp)];
    let mut worst: f64 = 0.0;
    for (which, grad) in [&analytic.d_z, &analytic.d_zp].into_iter().enumerate() {
        for (idx, &exact) in grad.as_slice().iter().enumerate() {
            let eval = |delta: f64| {
                let mut views = wide.clone();
                views[which] = views[which].perturbed(idx, delta);
                extended::value(spec, &views[0], &views[1])
            };
            let numeric = f64::from((eval(h) - eval(-h)) / (2.0 * h));
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Seeded paired embeddings: `z ~ N(0, 1)`, `zp = z + 0.5·N(0, 1)`.
pub fn random_embedding_pair(n: usize, d: usize, rng: &mut Rng) -> (Matrix, Matrix) {
    let z = Matrix::random_normal(n, d, 1.0, rng);
    let noise = Matrix::random_normal(n, d, 0.5, rng);
    let zp = z.add_scaled(&noise, 1.0).expect("same shape");
    (z, zp)
}
