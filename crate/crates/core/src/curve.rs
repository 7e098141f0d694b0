//! The five-parameter trajectory model
//! `f(t) = A * exp(-lambda * x) * ln(x) + K` with `x = gamma * t + t0`.

use serde::{Deserialize, Serialize};

use crate::error::{MaError, Result};

pub const N_PARAMS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    /// Amplitude, in ratio units.
    #[serde(rename = "A")]
    pub amplitude: f64,
    /// Decay rate per unit of `x`.
    pub lambda: f64,
    /// Time scaling per step.
    pub gamma: f64,
    /// Offset of `x` at `t = 0`.
    pub t0: f64,
    /// Asymptotic baseline, in ratio units.
    #[serde(rename = "K")]
    pub baseline: f64,
}

impl FitParams {
    pub fn new(amplitude: f64, lambda: f64, gamma: f64, t0: f64, baseline: f64) -> Self {
        Self {
            amplitude,
            lambda,
            gamma,
            t0,
            baseline,
        }
    }

    pub fn to_array(self) -> [f64; N_PARAMS] {
        [self.amplitude, self.lambda, self.gamma, self.t0, self.baseline]
    }

    pub fn from_slice(p: &[f64]) -> Self {
        Self::new(p[0], p[1], p[2], p[3], p[4])
    }

    /// `lambda >= 0`, `gamma > 0`, `t0 > 0`, all finite.
    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(MaError::InvalidInput(format!("non-finite parameters {self:?}")));
        }
        if self.lambda < 0.0 {
            return Err(MaError::InvalidInput(format!("lambda {} < 0", self.lambda)));
        }
        if self.gamma <= 0.0 {
            return Err(MaError::InvalidInput(format!("gamma {} <= 0", self.gamma)));
        }
        if self.t0 <= 0.0 {
            return Err(MaError::InvalidInput(format!("t0 {} <= 0", self.t0)));
        }
        Ok(())
    }

    /// The model's internal time `x_t`.
    pub fn x_at(&self, t: f64) -> f64 {
        self.gamma * t + self.t0
    }

    /// Value as `t -> infinity` when `lambda > 0`.
    pub fn steady_state(&self) -> f64 {
        self.baseline
    }
}

fn domain_x(p: &FitParams, t: f64) -> Result<f64> {
    let x = p.x_at(t);
    if !(x > 0.0) || !x.is_finite() {
        return Err(MaError::Domain(format!(
            "x_t = gamma*t + t0 = {x} is not positive at t = {t}"
        )));
    }
    Ok(x)
}

pub fn eval_model(p: &FitParams, t: f64) -> Result<f64> {
    let x = domain_x(p, t)?;
    Ok(p.amplitude * (-p.lambda * x).exp() * x.ln() + p.baseline)
}

/// Partials in the order (A, lambda, gamma, t0, K).
pub fn eval_jacobian(p: &FitParams, t: f64) -> Result<[f64; N_PARAMS]> {
    let x = domain_x(p, t)?;
    let decay = (-p.lambda * x).exp();
    let ln_x = x.ln();
    let shape = decay * (1.0 / x - p.lambda * ln_x);
    Ok([
        decay * ln_x,
        -p.amplitude * x * decay * ln_x,
        p.amplitude * t * shape,
        p.amplitude * shape,
        1.0,
    ])
}

/// Model evaluated at every `t`, failing on the first domain violation.
pub fn eval_many(p: &FitParams, ts: &[f64]) -> Result<Vec<f64>> {
    ts.iter().map(|&t| eval_model(p, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    #[test]
    fn unit_x_gives_baseline() {
        let p = FitParams::new(3.0, 0.7, 2.0, 1.0, 4.5);
        assert_eq!(eval_model(&p, 0.0).unwrap(), 4.5);
        let j = eval_jacobian(&p, 0.0).unwrap();
        assert_eq!(j[0], 0.0);
        assert!((j[3] - 3.0 * (-0.7f64).exp()).abs() < 1e-15);
        assert_eq!(j[4], 1.0);
    }

    #[test]
    fn pure_log() {
        let p = FitParams::new(1.0, 0.0, 1.0, 1.0, 0.0);
        assert!((eval_model(&p, E - 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_amplitude_is_constant() {
        let p = FitParams::new(0.0, 0.3, 0.01, 0.2, 7.0);
        for t in [0.0, 1.0, 100.0, 1e5] {
            assert_eq!(eval_model(&p, t).unwrap(), 7.0);
        }
    }

    #[test]
    fn domain_errors() {
        let p = FitParams::new(1.0, 0.0, 1.0, -2.0, 0.0);
        assert!(matches!(eval_model(&p, 1.0), Err(MaError::Domain(_))));
        assert!(matches!(eval_jacobian(&p, 2.0), Err(MaError::Domain(_))));
        assert!(eval_model(&p, 3.0).is_ok());
    }

    #[test]
    fn validate_bounds() {
        assert!(FitParams::new(1.0, 0.0, 1.0, 0.1, 0.0).validate().is_ok());
        assert!(FitParams::new(1.0, -0.1, 1.0, 0.1, 0.0).validate().is_err());
        assert!(FitParams::new(1.0, 0.1, 0.0, 0.1, 0.0).validate().is_err());
        assert!(FitParams::new(1.0, 0.1, 1.0, 0.0, 0.0).validate().is_err());
    }

    #[test]
    fn serde_names() {
        let p = FitParams::new(1.0, 2.0, 3.0, 4.0, 5.0);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"A":1.0,"lambda":2.0,"gamma":3.0,"t0":4.0,"K":5.0}"#);
    }

    fn central_difference(p: &FitParams, t: f64, i: usize) -> f64 {
        let base = p.to_array();
        let h = 1e-6 * base[i].abs().max(1e-3);
        let mut plus = base;
        let mut minus = base;
        plus[i] += h;
        minus[i] -= h;
        let fp = eval_model(&FitParams::from_slice(&plus), t).unwrap();
        let fm = eval_model(&FitParams::from_slice(&minus), t).unwrap();
        (fp - fm) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn jacobian_matches_finite_differences(
            a in 0.2f64..5.0,
            lambda in 0.01f64..3.0,
            gamma in 0.5f64..20.0,
            t0 in 0.05f64..1.0,
            k in -1.0f64..1.0,
            t in 0.0f64..1.0,
        ) {
            let p = FitParams::new(a, lambda, gamma, t0, k);
            let j = eval_jacobian(&p, t).unwrap();
            for i in 0..N_PARAMS {
                let fd = central_difference(&p, t, i);
                let scale = fd.abs().max(j[i].abs()).max(1e-3);
                prop_assert!((fd - j[i]).abs() / scale < 1e-6,
                    "partial {i}: analytic {} vs fd {}", j[i], fd);
            }
        }
    }
}
