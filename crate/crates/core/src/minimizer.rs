//! Limited-memory quasi-Newton conjugate gradient minimisation in the style
//! of Shanno and Phua's CONMIN.
//!
//! Search directions are memoryless BFGS updates built from two pairs: the
//! `(s, y)` pair saved at the last Beale restart and the most recent pair,
//! scaled by `s'y / y'y` of the restart pair. A restart is taken when Powell's
//! orthogonality test `|g_k' g_{k-1}| >= 0.2 |g_k|^2` fails or after
//! `dimension` iterations. Steps come from a strong-Wolfe line search with
//! safeguarded cubic interpolation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::real::{dot, norm, Real};

/// Cost and gradient of a smooth function. The gradient is written into
/// `gradient`; the cost is returned.
pub trait Objective<T> {
    fn evaluate(&mut self, x: &[T], gradient: &mut [T]) -> T;
}

impl<T, F> Objective<T> for F
where
    F: FnMut(&[T], &mut [T]) -> T,
{
    fn evaluate(&mut self, x: &[T], gradient: &mut [T]) -> T {
        self(x, gradient)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bounds<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Real> Bounds<T> {
    pub fn uniform(dimension: usize, lower: T, upper: T) -> Self {
        Self { lower: vec![lower; dimension], upper: vec![upper; dimension] }
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.iter().zip(&self.lower).zip(&self.upper).all(|((&v, &lo), &hi)| v >= lo && v <= hi)
    }

    fn clamp(&self, x: &mut [T]) {
        for ((v, &lo), &hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.max(lo).min(hi);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchParams<T> {
    /// Sufficient-decrease constant.
    pub c1: T,
    /// Curvature constant.
    pub c2: T,
    pub max_evaluations: usize,
    /// Try one interpolated step after the first acceptable trial and keep
    /// it when it is lower.
    pub refine: bool,
}

impl<T: Real> Default for LineSearchParams<T> {
    fn default() -> Self {
        Self { c1: T::lit(1e-4), c2: T::lit(0.9), max_evaluations: 30, refine: true }
    }
}

#[derive(Clone, Debug)]
pub struct MinimizeProblem<T> {
    pub dimension: usize,
    pub max_iterations: usize,
    /// Stop once `|g| <= target * |g_0|`.
    pub gradient_norm_reduction_target: T,
    /// Stop when an accepted step lowers the cost by less than
    /// `cost_tolerance * max(|J|, 1)`. Zero disables the test.
    pub cost_tolerance: T,
    pub bounds: Option<Bounds<T>>,
    pub line_search: LineSearchParams<T>,
}

impl<T: Real> MinimizeProblem<T> {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            max_iterations: 200,
            gradient_norm_reduction_target: T::lit(1e-2),
            cost_tolerance: T::zero(),
            bounds: None,
            line_search: LineSearchParams::default(),
        }
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn with_gradient_target(mut self, target: T) -> Self {
        self.gradient_norm_reduction_target = target;
        self
    }

    pub fn with_bounds(mut self, bounds: Bounds<T>) -> Self {
        self.bounds = Some(bounds);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MinimizeStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationRecord<T> {
    pub iteration: usize,
    pub cost: T,
    pub grad_norm: T,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MinimizeReport<T> {
    pub iterations_used: usize,
    pub cost_initial: T,
    pub cost_final: T,
    pub grad_norm_initial: T,
    pub grad_norm_final: T,
    pub status: MinimizeStatus,
    pub evaluations: usize,
    /// Accepted iterates, starting with the initial point.
    pub history: Vec<IterationRecord<T>>,
}

impl<T: Real> MinimizeReport<T> {
    /// First iteration whose cost is at most `fraction * cost_initial`.
    pub fn iterations_to_cost_fraction(&self, fraction: T) -> Option<usize> {
        let target = fraction * self.cost_initial;
        self.history.iter().find(|r| r.cost <= target).map(|r| r.iteration)
    }

    pub fn gradient_reduction(&self) -> T {
        if self.grad_norm_initial == T::zero() {
            T::zero()
        } else {
            self.grad_norm_final / self.grad_norm_initial
        }
    }
}

struct Point<T> {
    x: Vec<T>,
    f: T,
    g: Vec<T>,
}

struct Evaluator<'a, T, O> {
    objective: &'a mut O,
    bounds: Option<&'a Bounds<T>>,
    count: usize,
}

impl<T: Real, O: Objective<T>> Evaluator<'_, T, O> {
    fn eval(&mut self, mut x: Vec<T>) -> Result<Point<T>> {
        if let Some(b) = self.bounds {
            b.clamp(&mut x);
        }
        let mut g = vec![T::zero(); x.len()];
        let f = self.objective.evaluate(&x, &mut g);
        self.count += 1;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("objective returned cost {f} or a non-finite gradient")));
        }
        Ok(Point { x, f, g })
    }
}

fn projected_gradient<T: Real>(x: &[T], g: &[T], bounds: Option<&Bounds<T>>) -> Vec<T> {
    let mut pg = g.to_vec();
    if let Some(b) = bounds {
        for i in 0..x.len() {
            if (x[i] <= b.lower[i] && g[i] > T::zero()) || (x[i] >= b.upper[i] && g[i] < T::zero()) {
                pg[i] = T::zero();
            }
        }
    }
    pg
}

/// Zeroes direction components pushing through an active bound and returns
/// the largest feasible step.
fn restrict_direction<T: Real>(x: &[T], d: &mut [T], bounds: Option<&Bounds<T>>) -> T {
    let Some(b) = bounds else {
        return T::infinity();
    };
    let mut alpha_max = T::infinity();
    for i in 0..x.len() {
        if (x[i] <= b.lower[i] && d[i] < T::zero()) || (x[i] >= b.upper[i] && d[i] > T::zero()) {
            d[i] = T::zero();
        } else if d[i] < T::zero() {
            alpha_max = alpha_max.min((b.lower[i] - x[i]) / d[i]);
        } else if d[i] > T::zero() {
            alpha_max = alpha_max.min((b.upper[i] - x[i]) / d[i]);
        }
    }
    alpha_max
}

/// Minimiser of the cubic through (a, fa, da) and (b, fb, db), or the
/// midpoint when the cubic has no real minimiser.
fn cubic_minimizer<T: Real>(a: T, fa: T, da: T, b: T, fb: T, db: T) -> T {
    let three = T::lit(3.0);
    let d1 = da + db - three * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let mid = (a + b) / T::lit(2.0);
    if disc < T::zero() {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = db - da + T::lit(2.0) * d2;
    let alpha = b - (b - a) * (db + d2 - d1) / denom;
    if alpha.is_finite() {
        alpha
    } else {
        mid
    }
}

struct Trial<T> {
    alpha: T,
    point: Point<T>,
    slope: T,
}

enum LineSearchOutcome<T> {
    Accepted(Trial<T>),
    Failed,
}

fn line_search<T: Real, O: Objective<T>>(
    ev: &mut Evaluator<'_, T, O>,
    params: &LineSearchParams<T>,
    start: &Point<T>,
    d: &[T],
    alpha_init: T,
    alpha_max: T,
) -> Result<LineSearchOutcome<T>> {
    let f0 = start.f;
    let slope0 = dot(&start.g, d);
    let (c1, c2) = (params.c1, params.c2);
    // Within rounding of f0 the cost cannot resolve the decrease; a step that
    // does not raise the cost is then judged by the curvature test alone.
    let noise = T::lit(4.0) * T::epsilon() * f0.abs();
    let armijo = |alpha: T, f: T| f <= f0 + c1 * alpha * slope0 || (f <= f0 && -c1 * alpha * slope0 <= noise);
    let curvature = |slope: T| slope.abs() <= -c2 * slope0;
    let mut evals = 0usize;
    let trial_at = |ev: &mut Evaluator<'_, T, O>, alpha: T| -> Result<Trial<T>> {
        let x: Vec<T> = start.x.iter().zip(d).map(|(&xi, &di)| xi + alpha * di).collect();
        let point = ev.eval(x)?;
        let slope = dot(&point.g, d);
        Ok(Trial { alpha, point, slope })
    };

    // One extra interpolated trial after an acceptable step, kept if lower.
    let refine = |ev: &mut Evaluator<'_, T, O>, (ra, rf, rs): (T, T, T), t: Trial<T>, alpha_max: T| {
        if params.refine {
            let a = cubic_minimizer(ra, rf, rs, t.alpha, t.point.f, t.slope);
            let far = ra + T::lit(100.0) * (t.alpha - ra).abs();
            if a > T::zero() && a <= alpha_max && a < far && (a - t.alpha).abs() > T::lit(1e-3) * t.alpha {
                let r = trial_at(ev, a)?;
                if armijo(a, r.point.f) && curvature(r.slope) && r.point.f < t.point.f {
                    return Ok(LineSearchOutcome::Accepted(r));
                }
            }
        }
        Ok(LineSearchOutcome::Accepted(t))
    };

    // Bracketing phase.
    let mut prev_alpha = T::zero();
    let mut prev_f = f0;
    let mut prev_slope = slope0;
    let mut prev_trial: Option<Trial<T>> = None;
    let mut alpha = alpha_init.min(alpha_max);
    let (mut lo, mut hi): (Option<Trial<T>>, (T, T, T));
    loop {
        let t = trial_at(ev, alpha)?;
        evals += 1;
        if !armijo(alpha, t.point.f) || (prev_trial.is_some() && t.point.f >= prev_f) {
            lo = prev_trial;
            hi = (t.alpha, t.point.f, t.slope);
            break;
        }
        if curvature(t.slope) {
            return refine(ev, (prev_alpha, prev_f, prev_slope), t, alpha_max);
        }
        if t.slope >= T::zero() {
            hi = (prev_alpha, prev_f, prev_slope);
            lo = Some(t);
            break;
        }
        if alpha >= alpha_max || evals >= params.max_evaluations {
            // Blocked by a bound (or out of budget) with sufficient decrease.
            return Ok(LineSearchOutcome::Accepted(t));
        }
        prev_alpha = alpha;
        prev_f = t.point.f;
        prev_slope = t.slope;
        prev_trial = Some(t);
        alpha = (alpha * T::lit(4.0)).min(alpha_max);
    }

    // Zoom phase between lo (sufficient decrease, lowest cost) and hi.
    loop {
        let (lo_alpha, lo_f, lo_slope) = match &lo {
            Some(t) => (t.alpha, t.point.f, t.slope),
            None => (T::zero(), f0, slope0),
        };
        let (hi_alpha, hi_f, hi_slope) = hi;
        let width = (hi_alpha - lo_alpha).abs();
        if evals >= params.max_evaluations || width <= T::epsilon() * hi_alpha.abs().max(lo_alpha.abs()) {
            return Ok(match lo {
                Some(t) if t.point.f < f0 => LineSearchOutcome::Accepted(t),
                _ => LineSearchOutcome::Failed,
            });
        }
        let (a, b) = (lo_alpha.min(hi_alpha), lo_alpha.max(hi_alpha));
        let margin = T::lit(0.1) * (b - a);
        let alpha = cubic_minimizer(lo_alpha, lo_f, lo_slope, hi_alpha, hi_f, hi_slope)
            .max(a + margin)
            .min(b - margin);
        let t = trial_at(ev, alpha)?;
        evals += 1;
        if !armijo(alpha, t.point.f) || t.point.f >= lo_f {
            hi = (t.alpha, t.point.f, t.slope);
        } else {
            if curvature(t.slope) {
                return refine(ev, (lo_alpha, lo_f, lo_slope), t, alpha_max);
            }
            if t.slope * (hi_alpha - lo_alpha) >= T::zero() {
                hi = (lo_alpha, lo_f, lo_slope);
            }
            lo = Some(t);
        }
    }
}

struct Pair<T> {
    s: Vec<T>,
    y: Vec<T>,
    rho: T,
}

impl<T: Real> Pair<T> {
    fn new(s: Vec<T>, y: Vec<T>) -> Option<Self> {
        let sy = dot(&s, &y);
        (sy > T::epsilon() * norm(&s) * norm(&y) && sy > T::zero()).then(|| Pair { rho: T::one() / sy, s, y })
    }
}

/// `-H g` where H is the BFGS update of `gamma I` by `pairs` (oldest first).
fn quasi_newton_direction<T: Real>(pairs: &[&Pair<T>], gamma: T, g: &[T]) -> Vec<T> {
    let mut q = g.to_vec();
    let mut coeffs = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        q.iter_mut().zip(&p.y).for_each(|(qi, &yi)| *qi -= a * yi);
        coeffs.push(a);
    }
    let mut r: Vec<T> = q.iter().map(|&v| gamma * v).collect();
    for (p, a) in pairs.iter().zip(coeffs.into_iter().rev()) {
        let beta = p.rho * dot(&p.y, &r);
        r.iter_mut().zip(&p.s).for_each(|(ri, &si)| *ri += (a - beta) * si);
    }
    r.iter().map(|&v| -v).collect()
}

/// Minimises `objective` from `x0`.
pub fn conmin_cg<T: Real, O: Objective<T>>(
    problem: &MinimizeProblem<T>,
    objective: &mut O,
    x0: &[T],
) -> Result<(Vec<T>, MinimizeReport<T>)> {
    let n = problem.dimension;
    if n == 0 || x0.len() != n {
        return Err(Error::ShapeMismatch(format!("dimension {n}, start point of length {}", x0.len())));
    }
    let bounds = problem.bounds.as_ref();
    if let Some(b) = bounds {
        if b.lower.len() != n || b.upper.len() != n {
            return Err(Error::ShapeMismatch("bounds length differs from dimension".into()));
        }
        if !b.contains(x0) {
            return Err(Error::InvalidParameter("start point outside bounds".into()));
        }
    }
    let mut ev = Evaluator { objective, bounds, count: 0 };
    let mut current = ev.eval(x0.to_vec())?;
    let gn0 = norm(&projected_gradient(&current.x, &current.g, bounds));
    let mut history = vec![IterationRecord { iteration: 0, cost: current.f, grad_norm: gn0 }];
    let target = problem.gradient_norm_reduction_target * gn0;

    let mut status = MinimizeStatus::MaxIterations;
    let mut iterations = 0;
    let mut restart: Option<Pair<T>> = None;
    let mut since_restart = 0usize;
    let mut d: Vec<T> = current.g.iter().map(|&v| -v).collect();

    if gn0 == T::zero() {
        status = MinimizeStatus::Converged;
    } else {
        for iter in 1..=problem.max_iterations {
            let mut alpha_max = restrict_direction(&current.x, &mut d, bounds);
            if dot(&d, &current.g) >= T::zero() {
                restart = None;
                d = projected_gradient(&current.x, &current.g, bounds).iter().map(|&v| -v).collect();
                alpha_max = restrict_direction(&current.x, &mut d, bounds);
            }
            let alpha_init = if restart.is_some() { T::one() } else { T::one().min(T::one() / norm(&d)) };
            let trial = match line_search(&mut ev, &problem.line_search, &current, &d, alpha_init, alpha_max)? {
                LineSearchOutcome::Accepted(t) => t,
                LineSearchOutcome::Failed => {
                    status = MinimizeStatus::LineSearchFailure;
                    break;
                }
            };
            iterations = iter;
            let next = trial.point;
            let s: Vec<T> = next.x.iter().zip(&current.x).map(|(&a, &b)| a - b).collect();
            let y: Vec<T> = next.g.iter().zip(&current.g).map(|(&a, &b)| a - b).collect();
            let decrease = current.f - next.f;
            let powell = dot(&next.g, &current.g).abs() >= T::lit(0.2) * dot(&next.g, &next.g);
            let scale = current.f.abs().max(T::one());
            current = next;
            let gn = norm(&projected_gradient(&current.x, &current.g, bounds));
            history.push(IterationRecord { iteration: iter, cost: current.f, grad_norm: gn });
            if gn <= target {
                status = MinimizeStatus::Converged;
                break;
            }
            if problem.cost_tolerance > T::zero() && decrease <= problem.cost_tolerance * scale {
                status = MinimizeStatus::Converged;
                break;
            }

            let Some(pair) = Pair::new(s, y) else {
                restart = None;
                d = current.g.iter().map(|&v| -v).collect();
                continue;
            };
            match &restart {
                Some(r) if !powell && since_restart < n => {
                    let gamma = dot(&r.s, &r.y) / dot(&r.y, &r.y);
                    d = quasi_newton_direction(&[r, &pair], gamma, &current.g);
                    since_restart += 1;
                }
                _ => {
                    let gamma = dot(&pair.s, &pair.y) / dot(&pair.y, &pair.y);
                    d = quasi_newton_direction(&[&pair], gamma, &current.g);
                    restart = Some(pair);
                    since_restart = 0;
                }
            }
        }
    }

    let report = MinimizeReport {
        iterations_used: iterations,
        cost_initial: history[0].cost,
        cost_final: current.f,
        grad_norm_initial: gn0,
        grad_norm_final: history.last().map_or(gn0, |r| r.grad_norm),
        status,
        evaluations: ev.count,
        history,
    };
    Ok((current.x, report))
}

/// Largest component-wise relative difference between the analytic gradient
/// and central differences with step `epsilon`. Components are compared
/// relative to `max(|g_i|, |fd_i|, 1e-6 max_j |g_j|)`.
pub fn gradient_check<T: Real, O: Objective<T>>(objective: &mut O, x0: &[T], epsilon: T) -> Result<T> {
    let n = x0.len();
    let mut g = vec![T::zero(); n];
    let f = objective.evaluate(x0, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective at base point".into()));
    }
    let gmax = g.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let floor = T::lit(1e-6) * gmax;
    let mut scratch = vec![T::zero(); n];
    let mut worst = T::zero();
    let mut x = x0.to_vec();
    for i in 0..n {
        x[i] = x0[i] + epsilon;
        let fp = objective.evaluate(&x, &mut scratch);
        x[i] = x0[i] - epsilon;
        let fm = objective.evaluate(&x, &mut scratch);
        x[i] = x0[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective near component {i}")));
        }
        let fd = (fp - fm) / (T::lit(2.0) * epsilon);
        let denom = g[i].abs().max(fd.abs()).max(floor);
        if denom > T::zero() {
            worst = worst.max((fd - g[i]).abs() / denom);
        }
    }
    Ok(worst)
}

/// Delimited `iter,cost,grad_norm` trace of a report.
pub fn trace_table<T: Real>(report: &MinimizeReport<T>) -> String {
    let mut out = String::from("iter,cost,grad_norm\n");
    for r in &report.history {
        out.push_str(&format!("{},{:e},{:e}\n", r.iteration, r.cost, r.grad_norm));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let p = MinimizeProblem::new(3);
        let mut f = |x: &[f64], g: &mut [f64]| {
            g.copy_from_slice(x);
            0.5 * dot(x, x)
        };
        let (x, r) = conmin_cg(&p, &mut f, &[0.0; 3]).unwrap();
        assert_eq!(x, vec![0.0; 3]);
        assert_eq!(r.iterations_used, 0);
        assert_eq!(r.status, MinimizeStatus::Converged);
    }

    #[test]
    fn solves_rosenbrock() {
        let p = MinimizeProblem::new(2).with_gradient_target(1e-8).with_max_iterations(500);
        let (x, r) = conmin_cg(&p, &mut rosenbrock, &[-1.2, 1.0]).unwrap();
        assert_eq!(r.status, MinimizeStatus::Converged, "{r:?}");
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "{x:?}");
    }

    #[test]
    fn non_finite_cost_is_an_error() {
        let p = MinimizeProblem::new(1);
        let mut f = |_: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            f64::NAN
        };
        assert!(matches!(conmin_cg(&p, &mut f, &[1.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = MinimizeProblem::new(2);
        let mut f = |x: &[f64], g: &mut [f64]| {
            g.copy_from_slice(x);
            0.0
        };
        assert!(conmin_cg(&p, &mut f, &[1.0]).is_err());
    }

    #[test]
    fn respects_box_constraints() {
        // Unconstrained minimum at (3, -3); box is [0, 1]^2.
        let bounds = Bounds::uniform(2, 0.0, 1.0);
        let p = MinimizeProblem::new(2).with_bounds(bounds.clone()).with_gradient_target(1e-10);
        let mut seen_outside = false;
        let mut f = |x: &[f64], g: &mut [f64]| {
            seen_outside |= !bounds.contains(x);
            g[0] = x[0] - 3.0;
            g[1] = x[1] + 3.0;
            0.5 * ((x[0] - 3.0).powi(2) + (x[1] + 3.0).powi(2))
        };
        let (x, _) = conmin_cg(&p, &mut f, &[0.5, 0.5]).unwrap();
        assert!(!seen_outside);
        assert!((x[0] - 1.0).abs() < 1e-12 && x[1].abs() < 1e-12, "{x:?}");
    }

    #[test]
    fn cubic_minimizer_of_quadratic_is_exact() {
        // f(a) = (a - 2)^2
        let f = |a: f64| (a - 2.0).powi(2);
        let df = |a: f64| 2.0 * (a - 2.0);
        let m = cubic_minimizer(0.0, f(0.0), df(0.0), 5.0, f(5.0), df(5.0));
        assert!((m - 2.0).abs() < 1e-12);
    }

    #[test]
    fn trace_has_header_and_rows() {
        let p = MinimizeProblem::new(2).with_gradient_target(1e-6);
        let (_, r) = conmin_cg(&p, &mut rosenbrock, &[0.0, 0.0]).unwrap();
        let t = trace_table(&r);
        assert!(t.starts_with("iter,cost,grad_norm\n"));
        assert_eq!(t.lines().count(), r.history.len() + 1);
    }
}
