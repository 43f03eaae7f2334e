use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::metrics::mse;
use crate::error::{Error, Result};

/// Validation grid for the penalty.
pub const RIDGE_ALPHAS: [f64; 12] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 500.0, 1000.0];

/// Multi-output linear model `y = x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// `[d, o]` row-major.
    pub weights: Vec<f64>,
    pub intercept: Vec<f64>,
    pub alpha: f64,
    pub inputs: usize,
    pub outputs: usize,
}

impl RidgeModel {
    pub fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.intercept.clone();
        for (xi, wrow) in x.iter().zip(self.weights.chunks(self.outputs)) {
            for (o, w) in out.iter_mut().zip(wrow) {
                *o += xi * w;
            }
        }
        out
    }

    /// Predictions for `n` rows of `x`, flattened `[n, o]`.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        x.chunks(self.inputs).flat_map(|r| self.predict_row(r)).collect()
    }
}

fn shape_check(x: &[f64], y: &[f64], d: usize, o: usize) -> Result<usize> {
    if d == 0 || o == 0 || x.len() % d != 0 || y.len() % o != 0 || x.len() / d != y.len() / o {
        return Err(Error::Dimension(format!(
            "ridge: {} inputs of width {d} and {} targets of width {o}",
            x.len(),
            y.len()
        )));
    }
    Ok(x.len() / d)
}

/// Solves `(Xc'Xc + alpha I) W = Xc'yc` on centred data (`intercept` true) or
/// raw data, then checks the normal-equation residual.
pub fn ridge_fit(x: &[f64], y: &[f64], d: usize, o: usize, alpha: f64, intercept: bool) -> Result<RidgeModel> {
    let n = shape_check(x, y, d, o)?;
    if n == 0 {
        return Err(Error::Dataset("ridge fit on zero rows".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Parameter(format!("ridge penalty must be positive, got {alpha}")));
    }
    let xm = DMatrix::from_row_slice(n, d, x);
    let ym = DMatrix::from_row_slice(n, o, y);
    let (x_mean, y_mean) = if intercept {
        (xm.row_mean(), ym.row_mean())
    } else {
        (DMatrix::zeros(1, d).row(0).into_owned(), DMatrix::zeros(1, o).row(0).into_owned())
    };
    let mut xc = xm;
    let mut yc = ym;
    for mut r in xc.row_iter_mut() {
        r -= &x_mean;
    }
    for mut r in yc.row_iter_mut() {
        r -= &y_mean;
    }
    let mut a = xc.transpose() * &xc;
    for i in 0..d {
        a[(i, i)] += alpha;
    }
    let rhs = xc.transpose() * &yc;
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric { op: "ridge_fit", detail: "normal matrix not positive definite".into() })?;
    let mut w = chol.solve(&rhs);
    // one refinement step against round-off
    let r = &rhs - &a * &w;
    w += chol.solve(&r);
    let resid = (&a * &w - &rhs).amax();
    if !(resid <= 1e-8) {
        return Err(Error::Numeric { op: "ridge_fit", detail: format!("normal-equation residual {resid:e}") });
    }
    let b = &y_mean - &x_mean * &w;
    let mut weights = Vec::with_capacity(d * o);
    for i in 0..d {
        weights.extend(w.row(i).iter());
    }
    Ok(RidgeModel { weights, intercept: b.iter().copied().collect(), alpha, inputs: d, outputs: o })
}

/// Validation MSE for each penalty in `grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeSelection {
    pub model: RidgeModel,
    pub val_mse: Vec<(f64, f64)>,
}

/// Picks the penalty with the lowest validation MSE (first on ties), then
/// refits on training and validation rows together.
#[allow(clippy::too_many_arguments)]
pub fn ridge_select(
    x_train: &[f64],
    y_train: &[f64],
    x_val: &[f64],
    y_val: &[f64],
    d: usize,
    o: usize,
    grid: &[f64],
) -> Result<RidgeSelection> {
    if grid.is_empty() {
        return Err(Error::Config("empty ridge penalty grid".into()));
    }
    shape_check(x_val, y_val, d, o)?;
    let mut scores = Vec::with_capacity(grid.len());
    let mut best = (f64::INFINITY, grid[0]);
    for &a in grid {
        let m = ridge_fit(x_train, y_train, d, o, a, true)?;
        let s = mse(&m.predict(x_val), y_val);
        scores.push((a, s));
        if s < best.0 {
            best = (s, a);
        }
    }
    let x_all: Vec<f64> = x_train.iter().chain(x_val).copied().collect();
    let y_all: Vec<f64> = y_train.iter().chain(y_val).copied().collect();
    let model = ridge_fit(&x_all, &y_all, d, o, best.1, true)?;
    Ok(RidgeSelection { model, val_mse: scores })
}
