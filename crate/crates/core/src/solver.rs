//! Bounded nonlinear least squares with a trust-region reflective method.
//!
//! Each iteration rescales the variables with the Coleman-Li vector, solves
//! the trust-region subproblem exactly through an SVD of the augmented
//! Jacobian, and then picks the best of three candidate steps: the
//! (step-back) trust-region step, its reflection off the first bound it
//! hits, and the scaled Cauchy step. Iterates stay strictly inside the box.

use nalgebra::{DMatrix, DVector};

use crate::error::{MaError, Result};

/// A residual vector `r(x)` of length `n_residuals` with Jacobian
/// `J[i][j] = d r_i / d x_j`.
pub trait LeastSquaresProblem {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, x: &[f64], out: &mut [f64]) -> Result<()>;
    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(MaError::InvalidInput("bound lengths differ".into()));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] < upper[i])) {
            return Err(MaError::InvalidInput(format!(
                "bound {i}: lower {} is not below upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Stop when the scaled gradient infinity-norm drops below this.
    pub gtol: f64,
    /// Stop when `|dx| < xtol * (xtol + |x|)`.
    pub xtol: f64,
    /// Stop when the relative cost reduction drops below this. Zero disables
    /// the test.
    pub ftol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            gtol: 1e-10,
            xtol: 1e-12,
            ftol: 0.0,
            max_iter: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    Cost,
    Step,
    MaxIterations,
    MaxEvaluations,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(self, Self::Gradient | Self::Cost | Self::Step)
    }
}

#[derive(Debug, Clone)]
pub struct SolverReport {
    pub x: Vec<f64>,
    pub sse: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// SSE of every accepted iterate, starting with the initial point.
    pub sse_history: Vec<f64>,
}

impl SolverReport {
    pub fn converged(&self) -> bool {
        self.termination.converged()
    }
}

struct Evaluator<'a, P: LeastSquaresProblem> {
    problem: &'a P,
    buf: Vec<f64>,
}

impl<'a, P: LeastSquaresProblem> Evaluator<'a, P> {
    fn residuals(&mut self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.problem.residuals(x.as_slice(), &mut self.buf).ok()?;
        if self.buf.iter().all(|v| v.is_finite()) {
            Some(DVector::from_column_slice(&self.buf))
        } else {
            None
        }
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.problem.n_residuals(), self.problem.n_params());
        self.problem.jacobian(x.as_slice(), &mut j)?;
        if j.iter().any(|v| !v.is_finite()) {
            return Err(MaError::Domain("non-finite Jacobian".into()));
        }
        Ok(j)
    }
}

/// Minimizes `sum r_i(x)^2` over the box `bounds` starting from `x0`.
pub fn solve_trf<P: LeastSquaresProblem>(
    problem: &P,
    x0: &[f64],
    bounds: &Bounds,
    opts: &SolverOptions,
) -> Result<SolverReport> {
    let n = problem.n_params();
    let m = problem.n_residuals();
    if x0.len() != n || bounds.lower.len() != n {
        return Err(MaError::InvalidInput(format!(
            "expected {n} parameters, got x0 of {} and bounds of {}",
            x0.len(),
            bounds.lower.len()
        )));
    }
    if !bounds.contains(x0) {
        return Err(MaError::InvalidInput(format!(
            "initial point {x0:?} outside bounds"
        )));
    }
    let lb = DVector::from_column_slice(&bounds.lower);
    let ub = DVector::from_column_slice(&bounds.upper);
    let mut eval = Evaluator {
        problem,
        buf: vec![0.0; m],
    };

    let mut x = make_strictly_feasible(&DVector::from_column_slice(x0), &lb, &ub, 1e-10);
    let mut f = eval
        .residuals(&x)
        .ok_or_else(|| MaError::Domain("residuals not finite at the initial point".into()))?;
    let mut jac = eval.jacobian(&x)?;
    let mut cost = 0.5 * f.norm_squared();
    let mut g = jac.tr_mul(&f);
    let mut evaluations = 1;
    let max_evaluations = opts.max_iter.saturating_mul(10).max(100);

    let (v0, _) = cl_scaling(&x, &g, &lb, &ub);
    let mut delta = x.zip_map(&v0, |xi, vi| xi / vi.sqrt()).norm();
    if delta == 0.0 || !delta.is_finite() {
        delta = 1.0;
    }
    let mut alpha = 0.0;
    let mut termination = None;
    let mut iterations = 0;
    let mut sse_history = vec![2.0 * cost];

    loop {
        let (v, dv) = cl_scaling(&x, &g, &lb, &ub);
        let g_norm = g.zip_map(&v, |gi, vi| (gi * vi).abs()).max();
        if g_norm < opts.gtol {
            termination = Some(Termination::Gradient);
        }
        if termination.is_some() {
            break;
        }
        if iterations >= opts.max_iter {
            termination = Some(Termination::MaxIterations);
            break;
        }
        if evaluations >= max_evaluations {
            termination = Some(Termination::MaxEvaluations);
            break;
        }

        let d = v.map(f64::sqrt);
        let diag_h = g.component_mul(&dv);
        let g_h = d.component_mul(&g);
        let mut j_h = jac.clone();
        for (j, mut col) in j_h.column_iter_mut().enumerate() {
            col *= d[j];
        }

        let mut augmented = DMatrix::zeros(m + n, n);
        augmented.rows_mut(0, m).copy_from(&j_h);
        for j in 0..n {
            augmented[(m + j, j)] = diag_h[j].max(0.0).sqrt();
        }
        let mut f_aug = DVector::zeros(m + n);
        f_aug.rows_mut(0, m).copy_from(&f);
        let svd = augmented.svd(true, true);
        let u = svd.u.as_ref().expect("U requested");
        let v_t = svd.v_t.as_ref().expect("V^T requested");
        let uf = u.tr_mul(&f_aug);
        let s = svd.singular_values.clone();
        let v_mat = v_t.transpose();

        let theta = (1.0 - g_norm).max(0.995);
        let mut actual_reduction = -1.0;
        let mut accepted = None;

        while actual_reduction <= 0.0 && evaluations < max_evaluations {
            let (p_h, alpha_new) = solve_subproblem(&uf, &s, &v_mat, delta, alpha);
            alpha = alpha_new;
            let p = d.component_mul(&p_h);
            let (step, step_h, predicted) =
                select_step(&x, &j_h, &diag_h, &g_h, p, p_h, &d, delta, &lb, &ub, theta);

            let x_new = make_strictly_feasible(&(&x + &step), &lb, &ub, 0.0);
            evaluations += 1;
            let step_h_norm = step_h.norm();
            let Some(f_new) = eval.residuals(&x_new) else {
                delta = 0.25 * step_h_norm;
                continue;
            };
            let cost_new = 0.5 * f_new.norm_squared();
            actual_reduction = cost - cost_new;
            let (delta_new, ratio) = update_radius(
                delta,
                actual_reduction,
                predicted,
                step_h_norm,
                step_h_norm > 0.95 * delta,
            );
            let step_norm = step.norm();
            termination = check_termination(
                actual_reduction,
                cost,
                step_norm,
                x.norm(),
                ratio,
                opts.ftol,
                opts.xtol,
            );
            if actual_reduction > 0.0 {
                accepted = Some((x_new, f_new, cost_new));
            }
            if termination.is_some() {
                break;
            }
            alpha *= delta / delta_new;
            delta = delta_new;
        }

        if let Some((x_new, f_new, cost_new)) = accepted {
            x = x_new;
            f = f_new;
            cost = cost_new;
            jac = eval.jacobian(&x)?;
            g = jac.tr_mul(&f);
            sse_history.push(2.0 * cost);
        }
        iterations += 1;
    }

    Ok(SolverReport {
        x: x.as_slice().to_vec(),
        sse: 2.0 * cost,
        iterations,
        evaluations,
        termination: termination.unwrap_or(Termination::MaxIterations),
        sse_history,
    })
}

/// Coleman-Li scaling vector and its diagonal derivative.
fn cl_scaling(
    x: &DVector<f64>,
    g: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = x.len();
    let mut v = DVector::from_element(n, 1.0);
    let mut dv = DVector::zeros(n);
    for i in 0..n {
        if g[i] < 0.0 && ub[i].is_finite() {
            v[i] = ub[i] - x[i];
            dv[i] = -1.0;
        } else if g[i] > 0.0 && lb[i].is_finite() {
            v[i] = x[i] - lb[i];
            dv[i] = 1.0;
        }
    }
    (v, dv)
}

fn make_strictly_feasible(
    x: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    rstep: f64,
) -> DVector<f64> {
    let mut out = x.clone();
    for i in 0..x.len() {
        let (lo, hi) = (lb[i], ub[i]);
        if rstep == 0.0 {
            if x[i] <= lo {
                out[i] = lo.next_up();
            } else if x[i] >= hi {
                out[i] = hi.next_down();
            }
        } else {
            let lower_dist = x[i] - lo;
            let upper_dist = hi - x[i];
            let lower_thr = rstep * lo.abs().max(1.0);
            let upper_thr = rstep * hi.abs().max(1.0);
            if lo.is_finite() && lower_dist <= lower_thr.min(upper_dist) {
                out[i] = lo + lower_thr;
            } else if hi.is_finite() && upper_dist <= upper_thr.min(lower_dist) {
                out[i] = hi - upper_thr;
            }
        }
        if out[i] < lo || out[i] > hi {
            out[i] = 0.5 * (lo + hi);
        }
    }
    out
}

/// Solves `min |J p + f|` subject to `|p| <= delta` given the SVD of `J`,
/// returning the step and the Levenberg-Marquardt parameter used.
fn solve_subproblem(
    uf: &DVector<f64>,
    s: &DVector<f64>,
    v: &DMatrix<f64>,
    delta: f64,
    initial_alpha: f64,
) -> (DVector<f64>, f64) {
    let n = s.len();
    let suf = s.component_mul(uf);
    let s_max = s.max();
    let s_min = s.min();
    let threshold = f64::EPSILON * n.max(1) as f64 * s_max;
    let full_rank = s_min > threshold;

    if full_rank {
        let p = -(v * uf.zip_map(s, |a, b| a / b));
        if p.norm() <= delta {
            return (p, 0.0);
        }
    }

    let phi_and_derivative = |alpha: f64| {
        let denom = s.map(|si| si * si + alpha);
        let p_norm = suf.zip_map(&denom, |a, b| a / b).norm();
        let phi = p_norm - delta;
        let phi_prime = -suf
            .zip_map(&denom, |a, b| a * a / (b * b * b))
            .sum()
            / p_norm;
        (phi, phi_prime)
    };

    let mut alpha_upper = suf.norm() / delta;
    let mut alpha_lower = if full_rank {
        let (phi, phi_prime) = phi_and_derivative(0.0);
        -phi / phi_prime
    } else {
        0.0
    };
    let mut alpha = if !full_rank && initial_alpha == 0.0 {
        (0.001 * alpha_upper).max((alpha_lower * alpha_upper).sqrt())
    } else {
        initial_alpha
    };

    for _ in 0..10 {
        if alpha < alpha_lower || alpha > alpha_upper {
            alpha = (0.001 * alpha_upper).max((alpha_lower * alpha_upper).sqrt());
        }
        let (phi, phi_prime) = phi_and_derivative(alpha);
        if phi < 0.0 {
            alpha_upper = alpha;
        }
        let ratio = phi / phi_prime;
        alpha_lower = alpha_lower.max(alpha - ratio);
        alpha -= (phi + delta) * ratio / delta;
        if phi.abs() < 0.01 * delta {
            break;
        }
    }

    let mut p = -(v * suf.zip_map(s, |a, b| a / (b * b + alpha)));
    let norm = p.norm();
    if norm > 0.0 {
        p *= delta / norm;
    }
    (p, alpha)
}

/// Largest `t` with `x + t*s` inside the box and the sign pattern of the
/// bounds reached at that `t`.
fn step_size_to_bound(
    x: &DVector<f64>,
    s: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
) -> (f64, Vec<i8>) {
    let steps: Vec<f64> = (0..x.len())
        .map(|i| {
            if s[i] != 0.0 {
                ((lb[i] - x[i]) / s[i]).max((ub[i] - x[i]) / s[i])
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let min_step = steps.iter().copied().fold(f64::INFINITY, f64::min);
    let hits = steps
        .iter()
        .zip(s.iter())
        .map(|(&st, &si)| if st == min_step { si.signum() as i8 } else { 0 })
        .collect();
    (min_step, hits)
}

/// Positive root `t` of `|x + t*s| = delta`.
fn intersect_trust_region(x: &DVector<f64>, s: &DVector<f64>, delta: f64) -> f64 {
    let a = s.dot(s);
    let b = x.dot(s);
    let c = x.dot(x) - delta * delta;
    let disc = (b * b - a * c).max(0.0).sqrt();
    let q = -(b + disc.copysign(b));
    let t1 = q / a;
    let t2 = c / q;
    t1.max(t2)
}

/// Coefficients of `q(t) = a t^2 + b t + c` for the model along `s` from `s0`.
fn quadratic_1d(
    j: &DMatrix<f64>,
    g: &DVector<f64>,
    s: &DVector<f64>,
    diag: &DVector<f64>,
    s0: Option<&DVector<f64>>,
) -> (f64, f64, f64) {
    let js = j * s;
    let a = 0.5 * (js.dot(&js) + s.dot(&diag.component_mul(s)));
    let mut b = g.dot(s);
    let mut c = 0.0;
    if let Some(s0) = s0 {
        let u = j * s0;
        b += u.dot(&js) + s0.dot(&diag.component_mul(s));
        c = 0.5 * u.dot(&u) + g.dot(s0) + 0.5 * s0.dot(&diag.component_mul(s0));
    }
    (a, b, c)
}

fn minimize_quadratic_1d(a: f64, b: f64, c: f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut candidates = vec![lo, hi];
    if a != 0.0 {
        let extremum = -0.5 * b / a;
        if lo < extremum && extremum < hi {
            candidates.push(extremum);
        }
    }
    candidates
        .into_iter()
        .map(|t| (t, t * (a * t + b) + c))
        .fold((lo, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn evaluate_quadratic(
    j: &DMatrix<f64>,
    g: &DVector<f64>,
    s: &DVector<f64>,
    diag: &DVector<f64>,
) -> f64 {
    let js = j * s;
    0.5 * (js.dot(&js) + s.dot(&diag.component_mul(s))) + g.dot(s)
}

#[allow(clippy::too_many_arguments)]
fn select_step(
    x: &DVector<f64>,
    j_h: &DMatrix<f64>,
    diag_h: &DVector<f64>,
    g_h: &DVector<f64>,
    mut p: DVector<f64>,
    mut p_h: DVector<f64>,
    d: &DVector<f64>,
    delta: f64,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    theta: f64,
) -> (DVector<f64>, DVector<f64>, f64) {
    let trial = x + &p;
    if (0..x.len()).all(|i| lb[i] <= trial[i] && trial[i] <= ub[i]) {
        let value = evaluate_quadratic(j_h, g_h, &p_h, diag_h);
        return (p, p_h, -value);
    }

    // Reflect off the first bound hit by the full step.
    let (p_stride, hits) = step_size_to_bound(x, &p, lb, ub);
    let mut r_h = p_h.clone();
    for (i, &h) in hits.iter().enumerate() {
        if h != 0 {
            r_h[i] = -r_h[i];
        }
    }
    let r = d.component_mul(&r_h);
    p *= p_stride;
    p_h *= p_stride;
    let x_on_bound = x + &p;

    let to_tr = intersect_trust_region(&p_h, &r_h, delta);
    let (to_bound, _) = step_size_to_bound(&x_on_bound, &r, lb, ub);
    let r_stride = to_bound.min(to_tr);
    let (r_lo, r_hi) = if r_stride > 0.0 {
        let lo = (1.0 - theta) * p_stride / r_stride;
        let hi = if r_stride == to_bound { theta * to_bound } else { to_tr };
        (lo, hi)
    } else {
        (0.0, -1.0)
    };

    let (r_step_h, r_value) = if r_lo <= r_hi {
        let (a, b, c) = quadratic_1d(j_h, g_h, &r_h, diag_h, Some(&p_h));
        let (t, value) = minimize_quadratic_1d(a, b, c, r_lo, r_hi);
        (&p_h + r_h * t, value)
    } else {
        (p_h.clone(), f64::INFINITY)
    };
    let r_step = d.component_mul(&r_step_h);

    // Step back from the bound.
    p *= theta;
    p_h *= theta;
    let p_value = evaluate_quadratic(j_h, g_h, &p_h, diag_h);

    // Scaled Cauchy step.
    let mut ag_h = -g_h;
    let mut ag = d.component_mul(&ag_h);
    let ag_norm = ag_h.norm();
    let to_tr = if ag_norm > 0.0 { delta / ag_norm } else { 0.0 };
    let (to_bound, _) = step_size_to_bound(x, &ag, lb, ub);
    let ag_limit = if to_bound < to_tr { theta * to_bound } else { to_tr };
    let (a, b, _) = quadratic_1d(j_h, g_h, &ag_h, diag_h, None);
    let (ag_stride, ag_value) = minimize_quadratic_1d(a, b, 0.0, 0.0, ag_limit);
    ag_h *= ag_stride;
    ag *= ag_stride;

    if p_value < r_value && p_value < ag_value {
        (p, p_h, -p_value)
    } else if r_value < p_value && r_value < ag_value {
        (r_step, r_step_h, -r_value)
    } else {
        (ag, ag_h, -ag_value)
    }
}

fn update_radius(
    delta: f64,
    actual: f64,
    predicted: f64,
    step_norm: f64,
    bound_hit: bool,
) -> (f64, f64) {
    let ratio = if predicted > 0.0 {
        actual / predicted
    } else if predicted == actual {
        1.0
    } else {
        0.0
    };
    let delta = if ratio < 0.25 {
        0.25 * step_norm
    } else if ratio > 0.75 && bound_hit {
        2.0 * delta
    } else {
        delta
    };
    (delta, ratio)
}

fn check_termination(
    d_cost: f64,
    cost: f64,
    step_norm: f64,
    x_norm: f64,
    ratio: f64,
    ftol: f64,
    xtol: f64,
) -> Option<Termination> {
    if d_cost < ftol * cost && ratio > 0.25 {
        Some(Termination::Cost)
    } else if step_norm < xtol * (xtol + x_norm) {
        Some(Termination::Step)
    } else {
        None
    }
}
