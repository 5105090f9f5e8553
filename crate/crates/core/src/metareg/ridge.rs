use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value floor below which an unpenalized system counts
/// as singular.
const RANK_TOL: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub alpha: f64,
}

impl RidgeModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coefficients).map(|(x, c)| x * c).sum::<f64>()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|r| self.intercept + (0..x.ncols()).map(|c| x[(r, c)] * self.coefficients[c]).sum::<f64>())
            .collect()
    }
}

/// Solves `(XᵀX + αI)β = Xᵀy`. With `intercept`, X and y are centered first
/// so the intercept is not penalized. `α = 0` is ordinary least squares.
pub fn fit_ridge(x: &DMatrix<f64>, y: &[f64], alpha: f64, intercept: bool) -> Result<RidgeModel> {
    let (n, p) = x.shape();
    if n != y.len() || n == 0 {
        return Err(Error::Dimension(format!("{n} rows for {} targets", y.len())));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Argument(format!("ridge alpha {alpha} must be non-negative")));
    }
    let (x_mean, y_mean) = if intercept {
        let xm: Vec<f64> = (0..p).map(|c| x.column(c).sum() / n as f64).collect();
        (xm, y.iter().sum::<f64>() / n as f64)
    } else {
        (vec![0.0; p], 0.0)
    };
    let xc = DMatrix::from_fn(n, p, |r, c| x[(r, c)] - x_mean[c]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));

    let gram = xc.transpose() * &xc + DMatrix::identity(p, p) * alpha;
    let rhs = xc.transpose() * yc;
    if alpha == 0.0 {
        let sv = gram.clone().singular_values();
        let max = sv.max();
        if p > 0 && !(sv.min() > RANK_TOL * max.max(f64::MIN_POSITIVE)) {
            return Err(Error::Numerical(
                "normal equations are singular at alpha = 0; use alpha > 0".into(),
            ));
        }
    }
    let beta = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("normal equations are not positive definite; use alpha > 0".into()))?
        .solve(&rhs);
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = y_mean - coefficients.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    Ok(RidgeModel {
        coefficients,
        intercept,
        alpha,
    })
}

/// Greedy column subset, left to right, keeping a column only if it is not
/// (numerically) in the span of the centered columns kept so far.
pub fn independent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let (n, p) = x.shape();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for c in 0..p {
        let mean = x.column(c).sum() / n as f64;
        let mut v = DVector::from_iterator(n, x.column(c).iter().map(|a| a - mean));
        let scale = v.norm();
        if scale == 0.0 {
            continue;
        }
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let rest = v.norm();
        if rest > 1e-6 * scale {
            basis.push(v / rest);
            keep.push(c);
        }
    }
    keep
}
