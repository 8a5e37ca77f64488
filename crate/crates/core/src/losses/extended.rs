//! Double-double forward evaluation of the losses, used only by the
//! finite-difference checker.
//!
//! A central difference divides `f(x+h) − f(x−h)` by `2h`; when `f` is
//! rounded to f64 the quotient carries an absolute error near `ulp(f)/h`,
//! which swamps small gradient entries. Evaluating `f` in ~106-bit arithmetic
//! removes that floor. This path is written independently of the f64 one.

use twofloat::TwoFloat;

use super::{LossSpec, SicovaWeights, TripletParams};
use crate::numeric::Matrix;

type Dd = TwoFloat;

fn dd(v: f64) -> Dd {
    Dd::from(v)
}

fn sqrt(v: Dd) -> Dd {
    if v.hi() <= 0.0 {
        dd(0.0)
    } else {
        v.sqrt()
    }
}

/// Row-major matrix of double-double values.
#[derive(Clone)]
pub(super) struct DdMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Dd>,
}

impl DdMatrix {
    pub(super) fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().iter().map(|&v| dd(v)).collect(),
        }
    }

    /// Copy with `delta` added exactly to the entry at flat index `idx`.
    pub(super) fn perturbed(&self, idx: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.data[idx] += delta;
        out
    }

    fn at(&self, i: usize, j: usize) -> Dd {
        self.data[i * self.cols + j]
    }
}

fn moments(z: &DdMatrix) -> (Vec<Dd>, Vec<Dd>) {
    let n = z.rows as f64;
    let means: Vec<Dd> = (0..z.cols)
        .map(|j| (0..z.rows).fold(dd(0.0), |acc, i| acc + z.at(i, j)) / n)
        .collect();
    let vars = (0..z.cols)
        .map(|j| {
            (0..z.rows).fold(dd(0.0), |acc, i| {
                let d = z.at(i, j) - means[j];
                acc + d * d
            }) / n
        })
        .collect();
    (means, vars)
}

fn variance(z: &DdMatrix, gamma: f64, eps_var: f64) -> Dd {
    let (_, vars) = moments(z);
    let total = vars.into_iter().fold(dd(0.0), |acc, v| {
        let hinge = dd(gamma) - sqrt(v + eps_var);
        if hinge.hi() > 0.0 {
            acc + hinge
        } else {
            acc
        }
    });
    total / z.cols as f64
}

fn covariance(z: &DdMatrix) -> Dd {
    let (means, _) = moments(z);
    let n = z.rows as f64;
    let mut acc = dd(0.0);
    for a in 0..z.cols {
        for b in (0..z.cols).filter(|&b| b != a) {
            let c = (0..z.rows).fold(dd(0.0), |s, i| s + (z.at(i, a) - means[a]) * (z.at(i, b) - means[b])) / n;
            acc += c * c;
        }
    }
    acc / z.cols as f64
}

fn invariance(z: &DdMatrix, zp: &DdMatrix) -> Dd {
    let sq = z
        .data
        .iter()
        .zip(&zp.data)
        .fold(dd(0.0), |acc, (&a, &b)| acc + (a - b) * (a - b));
    sq / z.rows as f64
}

fn standardized(z: &DdMatrix, eps_norm: f64) -> DdMatrix {
    let (means, vars) = moments(z);
    let mut out = DdMatrix {
        rows: z.rows,
        cols: z.cols,
        data: vec![dd(0.0); z.data.len()],
    };
    for j in 0..z.cols {
        let s = sqrt(vars[j]);
        if s.hi() < eps_norm {
            continue;
        }
        for i in 0..z.rows {
            out.data[i * z.cols + j] = (z.at(i, j) - means[j]) / s;
        }
    }
    out
}

fn correlation(z: &DdMatrix, zp: &DdMatrix, eps_norm: f64) -> Dd {
    let zn = standardized(z, eps_norm);
    let zpn = standardized(zp, eps_norm);
    let n = z.rows as f64;
    let mut acc = dd(0.0);
    for a in 0..z.cols {
        for b in 0..z.cols {
            let r = (0..z.rows).fold(dd(0.0), |s, i| s + zn.at(i, a) * zpn.at(i, b)) / n;
            acc += if a == b { (dd(1.0) - r) * (dd(1.0) - r) } else { r * r };
        }
    }
    acc
}

fn sicova(z: &DdMatrix, zp: &DdMatrix, w: &SicovaWeights) -> Dd {
    let intra = variance(z, w.gamma, w.eps_var) + variance(zp, w.gamma, w.eps_var) + covariance(z) + covariance(zp);
    intra * w.lambda_intra + invariance(z, zp) * w.lambda_inv + correlation(z, zp, w.eps_norm) * w.lambda_corr
}

fn distance(a: &DdMatrix, i: usize, b: &DdMatrix, k: usize) -> Dd {
    let sq = (0..a.cols).fold(dd(0.0), |acc, j| {
        let d = a.at(i, j) - b.at(k, j);
        acc + d * d
    });
    sqrt(sq)
}

fn triplet_one_way(a: &DdMatrix, b: &DdMatrix, margin: f64) -> Dd {
    let n = a.rows;
    let mut acc = dd(0.0);
    for i in 0..n {
        let pos = distance(a, i, b, i);
        for k in (0..n).filter(|&k| k != i) {
            let hinge = pos - distance(a, i, b, k) + margin;
            if hinge.hi() > 0.0 {
                acc += hinge;
            }
        }
    }
    acc / (n * (n - 1)) as f64
}

fn triplet(z: &DdMatrix, zp: &DdMatrix, p: &TripletParams) -> Dd {
    if p.symmetric {
        (triplet_one_way(z, zp, p.margin) + triplet_one_way(zp, z, p.margin)) * 0.5
    } else {
        triplet_one_way(z, zp, p.margin)
    }
}

/// Loss value in double-double precision. Inputs must already be validated.
pub(super) fn value(spec: &LossSpec, z: &DdMatrix, zp: &DdMatrix) -> Dd {
    match spec {
        LossSpec::Sicova(w) => sicova(z, zp, w),
        LossSpec::Triplet(p) => triplet(z, zp, p),
    }
}

/// Loss of the linear encoding `Z = V1·W`, `Z' = V2·W` with `delta` added to
/// the flat entry `idx` of `W`, all in double-double precision.
pub(crate) fn encoder_value(spec: &LossSpec, v1: &Matrix, v2: &Matrix, w: &Matrix, idx: usize, delta: f64) -> Dd {
    let w = DdMatrix::from_matrix(w).perturbed(idx, delta);
    let encode = |v: &Matrix| {
        let mut data = Vec::with_capacity(v.rows() * w.cols);
        for i in 0..v.rows() {
            for j in 0..w.cols {
                data.push((0..w.rows).fold(dd(0.0), |acc, r| acc + w.at(r, j) * v[(i, r)]));
            }
        }
        DdMatrix {
            rows: v.rows(),
            cols: w.cols,
            data,
        }
    };
    value(spec, &encode(v1), &encode(v2))
}
