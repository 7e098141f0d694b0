//! Trajectory fitting: the five-parameter model with multistart, two
//! three-parameter step-function rivals, and AIC-based comparison.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::curve::{eval_jacobian, eval_model, FitParams, N_PARAMS};
use crate::error::{MaError, Result};
use crate::solver::{solve_trf, Bounds, LeastSquaresProblem, SolverOptions, SolverReport};
use crate::trajectory::{denormalize_params, normalize, LayerTrajectory, NormalizedPoint, MIN_FIT_POINTS};

/// Goodness of fit on one series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Goodness {
    /// `None` when the series is constant (zero total sum of squares).
    pub r_squared: Option<f64>,
    pub aic: f64,
    pub sse: f64,
}

/// `R^2 = 1 - SSE/SST` and least-squares `AIC = n ln(SSE/n) + 2k`.
pub fn goodness(observed: &[f64], fitted: &[f64], n_params: usize) -> Result<Goodness> {
    if observed.len() != fitted.len() {
        return Err(MaError::InvalidInput(format!(
            "length mismatch: {} observed vs {} fitted",
            observed.len(),
            fitted.len()
        )));
    }
    let n = observed.len();
    if n < 2 {
        return Err(MaError::InvalidInput("goodness needs at least 2 points".into()));
    }
    let mean = observed.iter().sum::<f64>() / n as f64;
    let sst: f64 = observed.iter().map(|y| (y - mean).powi(2)).sum();
    let sse: f64 = observed.iter().zip(fitted).map(|(y, f)| (y - f).powi(2)).sum();
    let r_squared = (sst > 0.0).then(|| 1.0 - sse / sst);
    let aic = n as f64 * (sse / n as f64).ln() + 2.0 * n_params as f64;
    Ok(Goodness { r_squared, aic, sse })
}

/// Small-sample corrected AIC.
pub fn aicc(aic: f64, n_points: usize, n_params: usize) -> f64 {
    let (n, k) = (n_points as f64, n_params as f64);
    if n - k - 1.0 <= 0.0 {
        return f64::INFINITY;
    }
    aic + 2.0 * k * (k + 1.0) / (n - k - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: FitParams,
    pub sse: f64,
    pub r_squared: Option<f64>,
    pub aic: f64,
    pub n_points: usize,
    pub n_params: usize,
    pub converged: bool,
    pub n_starts_tried: usize,
}

/// Residuals `f(t_i) - r_i` of the five-parameter model.
pub struct CurveProblem<'a> {
    pub t: &'a [f64],
    pub r: &'a [f64],
}

impl LeastSquaresProblem for CurveProblem<'_> {
    fn n_params(&self) -> usize {
        N_PARAMS
    }

    fn n_residuals(&self) -> usize {
        self.t.len()
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let p = FitParams::from_slice(x);
        for (i, (&t, &r)) in self.t.iter().zip(self.r).enumerate() {
            out[i] = eval_model(&p, t)? - r;
        }
        Ok(())
    }

    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        let p = FitParams::from_slice(x);
        for (i, &t) in self.t.iter().enumerate() {
            for (j, v) in eval_jacobian(&p, t)?.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(())
    }
}

/// Box used when fitting normalized data: `A, K in [-100, 100]`,
/// `lambda in [0, 50]`, `gamma in [1e-9, 1e4]`, `t0 in [1e-9, 10]`.
pub fn normalized_bounds() -> Bounds {
    Bounds::new(
        vec![-100.0, 0.0, 1e-9, 1e-9, -100.0],
        vec![100.0, 50.0, 1e4, 10.0, 100.0],
    )
    .expect("static bounds are ordered")
}

fn split_points(series: &[NormalizedPoint]) -> (Vec<f64>, Vec<f64>) {
    series.iter().map(|p| (p.t, p.r)).unzip()
}

fn solve_curve(t: &[f64], r: &[f64], init: &FitParams, bounds: &Bounds) -> Result<SolverReport> {
    if t.len() < N_PARAMS + 1 {
        return Err(MaError::InvalidInput(format!(
            "need at least {} points, got {}",
            N_PARAMS + 1,
            t.len()
        )));
    }
    let problem = CurveProblem { t, r };
    solve_trf(&problem, &init.to_array(), bounds, &SolverOptions::default())
}

/// Single bounded least-squares fit of the model from `init`. Goodness is
/// computed in the space of `series`.
pub fn fit_bounded_nlls(series: &[NormalizedPoint], init: &FitParams, bounds: &Bounds) -> Result<FitResult> {
    let (t, r) = split_points(series);
    let report = solve_curve(&t, &r, init, bounds)?;
    let params = FitParams::from_slice(&report.x);
    let fitted = t.iter().map(|&ti| eval_model(&params, ti)).collect::<Result<Vec<_>>>()?;
    let g = goodness(&r, &fitted, N_PARAMS)?;
    Ok(FitResult {
        params,
        sse: g.sse,
        r_squared: g.r_squared,
        aic: g.aic,
        n_points: t.len(),
        n_params: N_PARAMS,
        converged: report.converged(),
        n_starts_tried: 1,
    })
}

/// Starting points for normalized data whose last value is `last` (the
/// maximum is 1 by construction).
pub fn start_grid(last: f64) -> Vec<FitParams> {
    let rise = 1.0 - last;
    let mut amplitudes = vec![rise, 2.0 * rise, 1.0];
    amplitudes.dedup_by(|a, b| a == b);
    let bounds = normalized_bounds();
    let mut starts = Vec::with_capacity(81);
    for &a in &amplitudes {
        for lambda in [0.01, 0.5, 2.0] {
            for gamma in [1.0, 5.0, 20.0] {
                for t0 in [1e-3, 0.05, 0.3] {
                    let p = FitParams::new(a, lambda, gamma, t0, last);
                    if bounds.contains(&p.to_array()) && !starts.contains(&p) {
                        starts.push(p);
                    }
                }
            }
        }
    }
    starts
}

/// Outcome of one multistart run, in normalized space.
#[derive(Debug, Clone)]
pub struct StartOutcome {
    pub init: FitParams,
    pub outcome: std::result::Result<(FitParams, f64, bool), String>,
}

/// Normalizes the trajectory, fits from every grid start, and returns the
/// best-SSE solution mapped back to raw steps and ratios.
pub fn multistart_fit(traj: &LayerTrajectory) -> Result<FitResult> {
    multistart_fit_detailed(traj).map(|(r, _)| r)
}

pub fn multistart_fit_detailed(traj: &LayerTrajectory) -> Result<(FitResult, Vec<StartOutcome>)> {
    check_fit_input(traj)?;
    let (series, info) = normalize(traj)?;
    let (t, r) = split_points(&series);
    let last = *r.last().expect("nonempty");
    let bounds = normalized_bounds();

    let mut outcomes = Vec::new();
    let mut best: Option<(FitParams, f64, bool)> = None;
    for init in start_grid(last) {
        let outcome = solve_curve(&t, &r, &init, &bounds)
            .map(|rep| (FitParams::from_slice(&rep.x), rep.sse, rep.converged()))
            .map_err(|e| e.to_string());
        if let Ok((p, sse, conv)) = &outcome {
            if sse.is_finite() && best.as_ref().is_none_or(|b| *sse < b.1) {
                best = Some((*p, *sse, *conv));
            }
        }
        outcomes.push(StartOutcome { init, outcome });
    }

    let Some((norm_params, _, converged)) = best else {
        let diagnostics = outcomes
            .iter()
            .map(|o| format!("{:?}: {}", o.init, o.outcome.as_ref().err().cloned().unwrap_or_default()))
            .collect();
        return Err(MaError::AllStartsFailed(diagnostics));
    };

    let params = denormalize_params(&norm_params, &info)?;
    let steps = traj.steps();
    let ratios = traj.ratios();
    let fitted = steps.iter().map(|&s| eval_model(&params, s)).collect::<Result<Vec<_>>>()?;
    let g = goodness(&ratios, &fitted, N_PARAMS)?;
    let result = FitResult {
        params,
        sse: g.sse,
        r_squared: g.r_squared,
        aic: g.aic,
        n_points: traj.len(),
        n_params: N_PARAMS,
        converged,
        n_starts_tried: outcomes.len(),
    };
    Ok((result, outcomes))
}

fn check_fit_input(traj: &LayerTrajectory) -> Result<()> {
    if traj.len() < MIN_FIT_POINTS {
        return Err(MaError::InvalidInput(format!(
            "trajectory for {} layer {} has {} points, fitting needs {MIN_FIT_POINTS}",
            traj.model_id,
            traj.layer,
            traj.len()
        )));
    }
    if let Some(p) = traj.points.iter().find(|p| !(p.ratio > 0.0)) {
        return Err(MaError::InvalidInput(format!(
            "non-positive ratio {} at step {}",
            p.ratio, p.step
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RivalKind {
    /// `a + b * min(t, tau)`
    StepLinear,
    /// `a + b * min(t, tau)^2`
    StepQuadratic,
}

impl RivalKind {
    pub const N_PARAMS: usize = 3;

    fn degree(self) -> i32 {
        match self {
            Self::StepLinear => 1,
            Self::StepQuadratic => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::StepLinear => "step_linear",
            Self::StepQuadratic => "step_quadratic",
        }
    }

    pub fn eval(self, a: f64, b: f64, tau: f64, t: f64) -> f64 {
        a + b * t.min(tau).powi(self.degree())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RivalFit {
    pub kind: RivalKind,
    pub a: f64,
    pub b: f64,
    pub tau: f64,
    pub sse: f64,
    pub r_squared: Option<f64>,
    pub aic: f64,
    pub n_points: usize,
    pub n_params: usize,
    pub converged: bool,
}

struct RivalProblem<'a> {
    kind: RivalKind,
    t: &'a [f64],
    r: &'a [f64],
}

impl LeastSquaresProblem for RivalProblem<'_> {
    fn n_params(&self) -> usize {
        RivalKind::N_PARAMS
    }

    fn n_residuals(&self) -> usize {
        self.t.len()
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        for (i, (&t, &r)) in self.t.iter().zip(self.r).enumerate() {
            out[i] = self.kind.eval(x[0], x[1], x[2], t) - r;
        }
        Ok(())
    }

    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        let deg = self.kind.degree();
        for (i, &t) in self.t.iter().enumerate() {
            let m = t.min(x[2]);
            out[(i, 0)] = 1.0;
            out[(i, 1)] = m.powi(deg);
            out[(i, 2)] = if x[2] < t { x[1] * deg as f64 * x[2].powi(deg - 1) } else { 0.0 };
        }
        Ok(())
    }
}

/// Ordinary least squares for `r = a + b g` with the sum of squared errors.
fn simple_regression(g: &[f64], r: &[f64]) -> (f64, f64, f64) {
    let n = g.len() as f64;
    let mg = g.iter().sum::<f64>() / n;
    let mr = r.iter().sum::<f64>() / n;
    let sgg: f64 = g.iter().map(|x| (x - mg).powi(2)).sum();
    let sgr: f64 = g.iter().zip(r).map(|(x, y)| (x - mg) * (y - mr)).sum();
    let b = if sgg > 0.0 { sgr / sgg } else { 0.0 };
    let a = mr - b * mg;
    let sse = g.iter().zip(r).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    (a, b, sse)
}

/// Fits a step-function rival: grid search of `tau` over observed steps
/// with closed-form `(a, b)`, then bounded refinement of all three
/// parameters with `tau` confined between neighbouring steps.
pub fn fit_rival(traj: &LayerTrajectory, kind: RivalKind) -> Result<RivalFit> {
    check_fit_input(traj)?;
    let (series, info) = normalize(traj)?;
    let (t, r) = split_points(&series);
    let deg = kind.degree();

    let mut best: Option<(usize, f64, f64, f64)> = None;
    for (i, &tau) in t.iter().enumerate() {
        let g: Vec<f64> = t.iter().map(|&ti| ti.min(tau).powi(deg)).collect();
        let (a, b, sse) = simple_regression(&g, &r);
        if best.is_none_or(|bst| sse < bst.3) {
            best = Some((i, a, b, sse));
        }
    }
    let (idx, a0, b0, _) = best.expect("at least one step");

    let tau_lo = if idx > 0 { t[idx - 1] } else { t[0] };
    let tau_hi = if idx + 1 < t.len() { t[idx + 1] } else { t[idx] + 1.0 };
    let coef_limit = 1e6_f64.max(4.0 * a0.abs()).max(4.0 * b0.abs());
    let bounds = Bounds::new(
        vec![-coef_limit, -coef_limit, tau_lo],
        vec![coef_limit, coef_limit, tau_hi.max(tau_lo + 1e-12)],
    )?;
    let problem = RivalProblem { kind, t: &t, r: &r };
    let report = solve_trf(&problem, &[a0, b0, t[idx]], &bounds, &SolverOptions::default())?;

    let (a_n, b_n, tau_n) = (report.x[0], report.x[1], report.x[2]);
    let a = a_n * info.r_scale;
    let b = b_n * info.r_scale / info.t_scale.powi(deg);
    let tau = tau_n * info.t_scale;

    let steps = traj.steps();
    let ratios = traj.ratios();
    let fitted: Vec<f64> = steps.iter().map(|&s| kind.eval(a, b, tau, s)).collect();
    let g = goodness(&ratios, &fitted, RivalKind::N_PARAMS)?;
    Ok(RivalFit {
        kind,
        a,
        b,
        tau,
        sse: g.sse,
        r_squared: g.r_squared,
        aic: g.aic,
        n_points: traj.len(),
        n_params: RivalKind::N_PARAMS,
        converged: report.converged(),
    })
}

/// What [`compare_aic`] needs to know about a fitted hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredModel {
    pub label: String,
    pub aic: f64,
    pub sse: f64,
    pub n_params: usize,
    pub n_points: usize,
}

impl From<&FitResult> for ScoredModel {
    fn from(r: &FitResult) -> Self {
        Self {
            label: "log_modulated".into(),
            aic: r.aic,
            sse: r.sse,
            n_params: r.n_params,
            n_points: r.n_points,
        }
    }
}

impl From<&RivalFit> for ScoredModel {
    fn from(r: &RivalFit) -> Self {
        Self {
            label: r.kind.name().into(),
            aic: r.aic,
            sse: r.sse,
            n_params: r.n_params,
            n_points: r.n_points,
        }
    }
}

/// Indices of `models` in ascending AIC order; ties go to fewer parameters,
/// then lower SSE.
pub fn compare_aic(models: &[ScoredModel]) -> Result<Vec<usize>> {
    if models.len() < 2 {
        return Err(MaError::InvalidInput("need at least two models to compare".into()));
    }
    let n = models[0].n_points;
    if let Some(m) = models.iter().find(|m| m.n_points != n) {
        return Err(MaError::InvalidInput(format!(
            "model {} was fitted on {} points, expected {n}",
            m.label, m.n_points
        )));
    }
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&models[i], &models[j]);
        a.aic
            .total_cmp(&b.aic)
            .then(a.n_params.cmp(&b.n_params))
            .then(a.sse.partial_cmp(&b.sse).unwrap_or(Ordering::Equal))
    });
    Ok(order)
}
