//! Peak timing and magnitude of a fitted trajectory.
//!
//! Three routes are offered and cross-checked:
//!
//! * `paper_w0` / `paper_wm1`: `t = (exp(W(-lambda)) - t0) / gamma` on either
//!   real branch. This form only has a real solution for `lambda <= 1/e`.
//! * `corrected`: the stationary point obtained by differentiating the model
//!   directly, `f'(t) = A gamma e^{-lambda x} (1/x - lambda ln x)`, whose
//!   unique root is `x* = exp(W0(1/lambda))`.
//! * `numeric`: dense grid search plus golden-section refinement, used as
//!   the arbiter between the analytic forms.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::curve::{eval_model, FitParams};
use crate::error::{MaError, Result};
use crate::lambert::{lambert_w, Branch};

/// Last checkpoint step of the reference training runs.
pub const DEFAULT_HORIZON: f64 = 143_000.0;
const NUMERIC_GRID: usize = 10_000;
const GOLDEN_REL_WIDTH: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakMode {
    PaperW0,
    PaperWm1,
    Corrected,
    Numeric,
}

impl PeakMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::PaperW0 => "paper_w0",
            Self::PaperWm1 => "paper_wm1",
            Self::Corrected => "corrected",
            Self::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub mode: PeakMode,
    pub exists: bool,
    pub t_peak: Option<f64>,
    pub peak_value: Option<f64>,
    pub within_training: bool,
}

impl PeakReport {
    fn absent(mode: PeakMode) -> Self {
        Self {
            mode,
            exists: false,
            t_peak: None,
            peak_value: None,
            within_training: false,
        }
    }

    fn at(mode: PeakMode, p: &FitParams, t_peak: f64, horizon: f64) -> Result<Self> {
        Ok(Self {
            mode,
            exists: true,
            t_peak: Some(t_peak),
            peak_value: Some(eval_model(p, t_peak)?),
            within_training: (0.0..=horizon).contains(&t_peak),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeLabel {
    EarlyPeak,
    LogIncrease,
}

fn check_params(p: &FitParams) -> Result<()> {
    if p.to_array().iter().any(|v| !v.is_finite()) {
        return Err(MaError::InvalidInput(format!("non-finite parameters {p:?}")));
    }
    if p.lambda < 0.0 {
        return Err(MaError::InvalidInput(format!("lambda {} < 0", p.lambda)));
    }
    if p.gamma <= 0.0 {
        return Err(MaError::InvalidInput(format!("gamma {} <= 0", p.gamma)));
    }
    Ok(())
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(MaError::InvalidInput(format!("horizon {horizon} must be positive")));
    }
    Ok(())
}

/// Peak location from the published closed form, on both real branches.
///
/// Neither branch exists when `lambda > 1/e`; the lower branch also needs
/// `lambda > 0`.
pub fn peak_paper_mode(p: &FitParams, horizon: f64) -> Result<(PeakReport, PeakReport)> {
    check_params(p)?;
    check_horizon(horizon)?;
    if p.lambda > 1.0 / E {
        return Ok((
            PeakReport::absent(PeakMode::PaperW0),
            PeakReport::absent(PeakMode::PaperWm1),
        ));
    }
    let branch = |mode, branch| -> Result<PeakReport> {
        match lambert_w(branch, -p.lambda) {
            Ok(w) => PeakReport::at(mode, p, (w.exp() - p.t0) / p.gamma, horizon),
            Err(MaError::Domain(_)) => Ok(PeakReport::absent(mode)),
            Err(e) => Err(e),
        }
    };
    Ok((
        branch(PeakMode::PaperW0, Branch::Principal)?,
        branch(PeakMode::PaperWm1, Branch::MinusOne)?,
    ))
}

/// Maximum of the model from its exact derivative.
///
/// Exists only for `lambda > 0` and `A > 0`, and only when the stationary
/// point lies at `t >= 0`.
pub fn peak_corrected(p: &FitParams, horizon: f64) -> Result<PeakReport> {
    check_params(p)?;
    check_horizon(horizon)?;
    if p.lambda == 0.0 || p.amplitude <= 0.0 {
        return Ok(PeakReport::absent(PeakMode::Corrected));
    }
    let x_star = lambert_w(Branch::Principal, 1.0 / p.lambda)?.exp();
    let t_peak = (x_star - p.t0) / p.gamma;
    if !(t_peak >= 0.0) || !t_peak.is_finite() {
        return Ok(PeakReport::absent(PeakMode::Corrected));
    }
    PeakReport::at(PeakMode::Corrected, p, t_peak, horizon)
}

fn numeric_grid(t_max: f64) -> Vec<f64> {
    if t_max <= 1.0 {
        return (0..NUMERIC_GRID)
            .map(|i| t_max * i as f64 / (NUMERIC_GRID - 1) as f64)
            .collect();
    }
    // Linear on [0, 1], log-spaced on [1, t_max].
    let n_lin = NUMERIC_GRID / 10;
    let n_log = NUMERIC_GRID - n_lin;
    let mut grid: Vec<f64> = (0..n_lin).map(|i| i as f64 / n_lin as f64).collect();
    let log_max = t_max.ln();
    grid.extend((0..n_log).map(|i| (log_max * i as f64 / (n_log - 1) as f64).exp()));
    *grid.last_mut().expect("nonempty") = t_max;
    grid
}

fn golden_section_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..500 {
        if (b - a) <= GOLDEN_REL_WIDTH * a.abs().max(b.abs()).max(f64::MIN_POSITIVE) {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Numerical argmax of the model on `[0, t_max]`. A maximum at either end
/// of the interval is not a peak.
pub fn peak_numeric(p: &FitParams, t_max: f64, horizon: f64) -> Result<PeakReport> {
    check_horizon(horizon)?;
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(MaError::InvalidInput(format!("t_max {t_max} must be positive")));
    }
    let grid = numeric_grid(t_max);
    let values = grid.iter().map(|&t| eval_model(p, t)).collect::<Result<Vec<_>>>()?;
    let (best, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    if best == 0 || best == grid.len() - 1 {
        return Ok(PeakReport::absent(PeakMode::Numeric));
    }
    let f = |t: f64| eval_model(p, t).unwrap_or(f64::NEG_INFINITY);
    let t_peak = golden_section_max(f, grid[best - 1], grid[best + 1]);
    PeakReport::at(PeakMode::Numeric, p, t_peak, horizon)
}

/// End of the interval the numerical oracle searches.
///
/// A stationary point solves `lambda * x * ln(x) = 1`, and for `x >= 1 + 1/lambda`
/// the left side is already at least 1, so any peak lies before
/// `t = (1 + 1/lambda) / gamma`; the bracket is four times that. The bound
/// depends only on the parameters, never on the horizon. Without decay
/// there is no stationary point and `10 * horizon` is searched.
pub fn numeric_search_end(p: &FitParams, horizon: f64) -> f64 {
    if p.lambda > 0.0 && p.gamma > 0.0 {
        let end = 4.0 * (1.0 + 1.0 / p.lambda) / p.gamma;
        if end.is_finite() {
            return end;
        }
    }
    10.0 * horizon
}

/// `EarlyPeak` when the numerical maximum is an interior point before `horizon`.
pub fn classify_regime(p: &FitParams, horizon: f64) -> Result<RegimeLabel> {
    check_params(p)?;
    let numeric = peak_numeric(p, numeric_search_end(p, horizon), horizon)?;
    Ok(regime_of(&numeric, horizon))
}

fn regime_of(numeric: &PeakReport, horizon: f64) -> RegimeLabel {
    match numeric.t_peak {
        Some(t) if numeric.exists && t < horizon => RegimeLabel::EarlyPeak,
        _ => RegimeLabel::LogIncrease,
    }
}

/// All peak reports for one parameter set plus, for each analytic mode,
/// whether it agrees with the numerical oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub paper_w0: PeakReport,
    pub paper_wm1: PeakReport,
    pub corrected: PeakReport,
    pub numeric: PeakReport,
    pub regime: RegimeLabel,
    /// Analytic modes whose existence and location match `numeric`.
    pub matching_modes: Vec<PeakMode>,
}

impl ModeComparison {
    pub fn reports(&self) -> [&PeakReport; 4] {
        [&self.paper_w0, &self.paper_wm1, &self.corrected, &self.numeric]
    }

    pub fn modes_disagree(&self) -> bool {
        self.matching_modes.len() < 3
    }
}

/// Relative tolerance used when deciding whether an analytic mode matches
/// the numerical argmax.
pub const MATCH_REL_TOL: f64 = 5e-4;

fn agrees(a: &PeakReport, b: &PeakReport, scale: f64) -> bool {
    match (a.exists, b.exists) {
        (false, false) => true,
        (true, true) => {
            let (ta, tb) = (a.t_peak.unwrap_or(f64::NAN), b.t_peak.unwrap_or(f64::NAN));
            (ta - tb).abs() <= MATCH_REL_TOL * tb.abs().max(scale)
        }
        _ => false,
    }
}

/// Runs every mode. The numeric oracle searches `[0, numeric_search_end]`,
/// so only `within_training` and the regime depend on the horizon.
pub fn compare_modes(p: &FitParams, horizon: f64) -> Result<ModeComparison> {
    let (paper_w0, paper_wm1) = peak_paper_mode(p, horizon)?;
    let corrected = peak_corrected(p, horizon)?;
    let numeric = peak_numeric(p, numeric_search_end(p, horizon), horizon)?;
    let regime = regime_of(&numeric, horizon);
    // absolute floor for peaks at t ~ 0: a millionth of one unit of x
    let scale = 1e-6 / p.gamma;
    let matching_modes = [&paper_w0, &paper_wm1, &corrected]
        .into_iter()
        .filter(|r| agrees(r, &numeric, scale))
        .map(|r| r.mode)
        .collect();
    Ok(ModeComparison {
        paper_w0,
        paper_wm1,
        corrected,
        numeric,
        regime,
        matching_modes,
    })
}

/// Peak step over a `gamma x lambda` grid at fixed `t0` (rows follow
/// `gammas`). `None` where the chosen mode has no real peak.
pub fn peak_surface(
    mode: PeakMode,
    gammas: &[f64],
    lambdas: &[f64],
    t0: f64,
    horizon: f64,
) -> Result<Vec<Vec<Option<f64>>>> {
    gammas
        .iter()
        .map(|&gamma| {
            lambdas
                .iter()
                .map(|&lambda| {
                    let p = FitParams::new(1.0, lambda, gamma, t0, 0.0);
                    let report = match mode {
                        PeakMode::PaperW0 => peak_paper_mode(&p, horizon)?.0,
                        PeakMode::PaperWm1 => peak_paper_mode(&p, horizon)?.1,
                        PeakMode::Corrected => peak_corrected(&p, horizon)?,
                        PeakMode::Numeric => peak_numeric(&p, numeric_search_end(&p, horizon), horizon)?,
                    };
                    Ok(report.t_peak)
                })
                .collect()
        })
        .collect()
}
