//! Real branches of the Lambert W function, the inverse of `w -> w e^w`.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{MaError, Result};

/// `-1/e`, the common endpoint of both real branches.
pub const BRANCH_POINT: f64 = -1.0 / E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `W0` on `[-1/e, inf)`, values `>= -1`.
    Principal,
    /// `W-1` on `[-1/e, 0)`, values `<= -1`.
    MinusOne,
}

/// Evaluates `W(x)` on `branch` by Halley iteration from a series or
/// asymptotic starting guess.
pub fn lambert_w(branch: Branch, x: f64) -> Result<f64> {
    if x.is_nan() || x < BRANCH_POINT {
        return Err(MaError::Domain(format!("W({x}) is not real")));
    }
    if branch == Branch::MinusOne && x >= 0.0 {
        return Err(MaError::Domain(format!("W-1({x}) requires -1/e <= x < 0")));
    }
    if x == BRANCH_POINT {
        return Ok(-1.0);
    }
    if branch == Branch::Principal {
        if x == 0.0 {
            return Ok(0.0);
        }
        if x == f64::INFINITY {
            return Ok(f64::INFINITY);
        }
    }

    let mut w = initial_guess(branch, x);
    for _ in 0..100 {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if f == 0.0 || wp1 == 0.0 {
            break;
        }
        let dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        if !dw.is_finite() {
            break;
        }
        w -= dw;
        if dw.abs() <= 4.0 * f64::EPSILON * (1.0 + w.abs()) {
            break;
        }
    }
    Ok(match branch {
        Branch::Principal => w.max(-1.0),
        Branch::MinusOne => w.min(-1.0),
    })
}

fn initial_guess(branch: Branch, x: f64) -> f64 {
    // Series in p = sqrt(2(ex + 1)) about the branch point.
    if x < -0.25 {
        let p = (2.0 * (E * x + 1.0)).max(0.0).sqrt();
        let p = if branch == Branch::Principal { p } else { -p };
        return -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p;
    }
    match branch {
        Branch::Principal if x < 3.0 => x.ln_1p(),
        Branch::Principal => {
            let l1 = x.ln();
            let l2 = l1.ln();
            l1 - l2 + l2 / l1
        }
        Branch::MinusOne => {
            let l1 = (-x).ln();
            let l2 = (-l1).ln();
            l1 - l2 + l2 / l1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual(w: f64, x: f64) -> f64 {
        (w * w.exp() - x).abs()
    }

    #[test]
    fn special_values() {
        assert_eq!(lambert_w(Branch::Principal, 0.0).unwrap(), 0.0);
        assert_eq!(lambert_w(Branch::Principal, BRANCH_POINT).unwrap(), -1.0);
        assert_eq!(lambert_w(Branch::MinusOne, BRANCH_POINT).unwrap(), -1.0);
        let omega = lambert_w(Branch::Principal, 1.0).unwrap();
        assert!((omega - 0.567_143_290_409_783_8).abs() < 1e-15);
        assert!(residual(omega, 1.0) < 1e-12);
        assert!((lambert_w(Branch::Principal, E).unwrap() - 1.0).abs() < 1e-15);
        let w = lambert_w(Branch::MinusOne, -2.0 * (-2.0f64).exp()).unwrap();
        assert!((w + 2.0).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        assert!(lambert_w(Branch::Principal, -0.5).is_err());
        assert!(lambert_w(Branch::MinusOne, 0.0).is_err());
        assert!(lambert_w(Branch::MinusOne, 0.1).is_err());
        assert!(lambert_w(Branch::Principal, f64::NAN).is_err());
    }

    #[test]
    fn residuals_across_domains() {
        for i in 0..=1000 {
            let x = BRANCH_POINT + (10.0 - BRANCH_POINT) * i as f64 / 1000.0;
            let w = lambert_w(Branch::Principal, x).unwrap();
            assert!(w >= -1.0);
            assert!(residual(w, x) < 1e-12, "W0({x}) = {w}");
        }
        for i in 0..1000 {
            let x = BRANCH_POINT * (1.0 - i as f64 / 1000.0);
            let w = lambert_w(Branch::MinusOne, x).unwrap();
            assert!(w <= -1.0);
            assert!(residual(w, x) < 1e-12, "W-1({x}) = {w}");
        }
    }

    #[test]
    fn near_branch_point() {
        let x = -1.0 / E + 1e-9;
        let w0 = lambert_w(Branch::Principal, x).unwrap();
        let wm1 = lambert_w(Branch::MinusOne, x).unwrap();
        assert!(w0 > -1.0 && wm1 < -1.0);
        assert!(residual(w0, x) < 1e-15 && residual(wm1, x) < 1e-15);
    }

    #[test]
    fn large_and_tiny_arguments() {
        let w = lambert_w(Branch::Principal, 1e10).unwrap();
        assert!(((w * w.exp()) / 1e10 - 1.0).abs() < 1e-14);
        let w = lambert_w(Branch::MinusOne, -1e-300).unwrap();
        assert!(((w * w.exp()) / -1e-300 - 1.0).abs() < 1e-12, "{w}");
        let w = lambert_w(Branch::Principal, 1e-300).unwrap();
        assert!((w - 1e-300).abs() < 1e-310);
    }
}
