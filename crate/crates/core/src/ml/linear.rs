//! Ridge and lasso regression with an unpenalized intercept.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MaError, Result};

pub const LASSO_GAP_TOL: f64 = 1e-8;
const LASSO_MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub alpha: f64,
    /// Training feature means, used for attributions.
    pub feature_means: Vec<f64>,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
}

struct Centered {
    x: DMatrix<f64>,
    y: DVector<f64>,
    x_mean: Vec<f64>,
    y_mean: f64,
}

fn center(x: &[Vec<f64>], y: &[f64]) -> Result<Centered> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(MaError::InvalidInput(format!(
            "linear model needs at least 2 rows with matching targets, got {n} rows and {} targets",
            y.len()
        )));
    }
    let p = x[0].len();
    if x.iter().any(|r| r.len() != p) {
        return Err(MaError::InvalidInput("ragged feature matrix".into()));
    }
    if x.iter().all(|r| r == &x[0]) {
        return Err(MaError::InvalidInput("degenerate design: all rows are identical".into()));
    }
    let x_mean: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    Ok(Centered {
        x: DMatrix::from_fn(n, p, |i, j| x[i][j] - x_mean[j]),
        y: DVector::from_iterator(n, y.iter().map(|v| v - y_mean)),
        x_mean,
        y_mean,
    })
}

fn finish(coef: Vec<f64>, c: Centered, alpha: f64) -> LinearModel {
    let intercept = c.y_mean - coef.iter().zip(&c.x_mean).map(|(b, m)| b * m).sum::<f64>();
    LinearModel {
        coef,
        intercept,
        alpha,
        feature_means: c.x_mean,
    }
}

/// Minimizes `||y - Xb - b0||^2 + alpha ||b||^2`.
pub fn fit_ridge(x: &[Vec<f64>], y: &[f64], alpha: f64) -> Result<LinearModel> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(MaError::InvalidInput(format!("ridge alpha must be >= 0, got {alpha}")));
    }
    let c = center(x, y)?;
    let p = c.x.ncols();
    let mut gram = c.x.transpose() * &c.x;
    for j in 0..p {
        gram[(j, j)] += alpha;
    }
    let rhs = c.x.transpose() * &c.y;
    let coef = match gram.clone().cholesky() {
        Some(ch) if alpha > 0.0 => ch.solve(&rhs),
        _ => {
            // Minimum-norm least squares for rank-deficient designs.
            let svd = c.x.clone().svd(true, true);
            let tol = f64::EPSILON * (c.x.nrows().max(p) as f64) * svd.singular_values.max();
            let mut s = svd.singular_values.clone();
            for v in s.iter_mut() {
                *v = if *v > tol { *v / (*v * *v + alpha) } else { 0.0 };
            }
            let u = svd.u.as_ref().ok_or_else(|| MaError::Domain("SVD failed".into()))?;
            let vt = svd.v_t.as_ref().ok_or_else(|| MaError::Domain("SVD failed".into()))?;
            vt.transpose() * DMatrix::from_diagonal(&s) * (u.transpose() * &c.y)
        }
    };
    Ok(finish(coef.iter().copied().collect(), c, alpha))
}

/// Smallest `alpha` at which the lasso solution is identically zero.
pub fn lasso_alpha_max(x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    let c = center(x, y)?;
    let n = c.x.nrows() as f64;
    Ok((c.x.transpose() * &c.y).amax() / n)
}

/// Minimizes `(1 / 2n) ||y - Xb - b0||^2 + alpha ||b||_1` by cyclic coordinate
/// descent until the duality gap drops below `1e-8 * ||y - mean(y)||^2`.
pub fn fit_lasso(x: &[Vec<f64>], y: &[f64], alpha: f64) -> Result<LinearModel> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(MaError::InvalidInput(format!("lasso alpha must be > 0, got {alpha}")));
    }
    let c = center(x, y)?;
    let (n, p) = c.x.shape();
    let a = alpha * n as f64;
    let col_sq: Vec<f64> = (0..p).map(|j| c.x.column(j).norm_squared()).collect();
    let mut w = vec![0.0; p];
    let mut r = c.y.clone();
    let tol = LASSO_GAP_TOL * c.y.norm_squared();
    let mut converged = false;
    for _ in 0..LASSO_MAX_SWEEPS {
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = c.x.column(j);
            let old = w[j];
            let rho = col.dot(&r) + old * col_sq[j];
            let shrunk = rho.abs() - a;
            // Guard against rounding when alpha sits exactly at alpha_max.
            let new = if shrunk <= 4.0 * f64::EPSILON * a {
                0.0
            } else {
                rho.signum() * shrunk / col_sq[j]
            };
            if new != old {
                r.axpy(old - new, &col, 1.0);
                w[j] = new;
            }
        }
        if duality_gap(&c, &r, &w, a) <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("lasso did not reach the duality-gap tolerance (alpha = {alpha})");
    }
    Ok(finish(w, c, alpha))
}

fn duality_gap(c: &Centered, r: &DVector<f64>, w: &[f64], a: f64) -> f64 {
    let xtr = c.x.transpose() * r;
    let dual_norm = xtr.amax();
    let r_norm2 = r.norm_squared();
    let (scale, mut gap) = if dual_norm > a {
        let s = a / dual_norm;
        (s, 0.5 * r_norm2 * (1.0 + s * s))
    } else {
        (1.0, r_norm2)
    };
    gap += a * w.iter().map(|v| v.abs()).sum::<f64>() - scale * r.dot(&c.y);
    gap
}
