//! Dense quasi-Newton optimization with a strong Wolfe line search.
//!
//! The search spaces here are small (a full lattice design plus its
//! decision threshold is at most a few hundred coordinates), so the
//! inverse Hessian approximation is kept as an explicit dense matrix and
//! updated with the standard rank-two formula. Objective evaluations
//! return value and gradient together, because the gradient comes from a
//! reverse sweep whose cost is a small multiple of the forward pass; a
//! line search that alternates value-only and gradient-only probes would
//! save little and complicate the bookkeeping.
//!
//! Non-finite objective values are treated as "too far": the line search
//! shrinks away from them, so an optimizer driving a simulation toward
//! blowup backs off instead of crashing.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptError {
    #[error("objective is not finite at the starting point (f = {0})")]
    BadStart(f64),
}

/// A differentiable objective. Mutable access lets implementations cache
/// per-evaluation byproducts (sample energies, warnings) for the caller.
pub trait Objective {
    /// Value and gradient at `x`.
    fn eval(&mut self, x: &DVector<f64>) -> (f64, DVector<f64>);
}

impl<F: FnMut(&DVector<f64>) -> (f64, DVector<f64>)> Objective for F {
    fn eval(&mut self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        self(x)
    }
}

/// Line search parameters. The defaults are the classic sufficient
/// decrease / curvature pair for quasi-Newton methods.
#[derive(Debug, Clone)]
pub struct WolfeConfig {
    /// Sufficient-decrease slope fraction.
    pub c1: f64,
    /// Curvature slope fraction.
    pub c2: f64,
    /// First trial step length.
    pub initial_step: f64,
    /// Bracketing expansions before giving up.
    pub max_expansions: usize,
    /// Bisection refinements inside a bracket before giving up.
    pub max_zoom: usize,
}

impl Default for WolfeConfig {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            c2: 0.9,
            initial_step: 1.0,
            max_expansions: 20,
            max_zoom: 40,
        }
    }
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    /// A point satisfying both Wolfe conditions was installed.
    Accepted { f: f64, step: f64 },
    /// The gradient is below tolerance, or the remaining descent is
    /// smaller than the objective's floating-point resolution, so no
    /// further decrease can be certified. Iterate unchanged.
    Converged,
    /// No acceptable step was found; iterate unchanged.
    LineSearchFailed,
}

/// BFGS state: current iterate, its value and gradient, and the inverse
/// Hessian approximation. The approximation is never reset between steps;
/// if the caller mutates the objective (for example by applying an oracle
/// correction), [`Bfgs::refresh`] re-evaluates value and gradient at the
/// current iterate while keeping the accumulated curvature.
#[derive(Debug, Clone)]
pub struct Bfgs {
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
    h: DMatrix<f64>,
    /// Rescale `h` from the first observed curvature pair, a standard
    /// way to pick the initial metric without a second derivative.
    pending_scale: bool,
}

impl Bfgs {
    pub fn new(obj: &mut dyn Objective, x0: DVector<f64>) -> Result<Self, OptError> {
        let n = x0.len();
        let (f, g) = obj.eval(&x0);
        if !f.is_finite() {
            return Err(OptError::BadStart(f));
        }
        Ok(Self {
            x: x0,
            f,
            g,
            h: DMatrix::identity(n, n),
            pending_scale: true,
        })
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn f(&self) -> f64 {
        self.f
    }

    pub fn g(&self) -> &DVector<f64> {
        &self.g
    }

    /// Re-evaluate the objective at the current iterate after the caller
    /// changed it. The curvature memory is kept: the objective is assumed
    /// to have moved only slightly.
    pub fn refresh(&mut self, obj: &mut dyn Objective) {
        let (f, g) = obj.eval(&self.x);
        self.f = f;
        self.g = g;
    }

    /// One quasi-Newton step: direction from the inverse Hessian
    /// approximation, strong Wolfe line search along it, rank-two update
    /// from the observed curvature. The update is skipped when the
    /// curvature `s . y` is not safely positive, which preserves positive
    /// definiteness.
    pub fn step(
        &mut self,
        obj: &mut dyn Objective,
        wolfe: &WolfeConfig,
        grad_tol: f64,
    ) -> StepOutcome {
        if self.g.amax() <= grad_tol {
            return StepOutcome::Converged;
        }
        let mut p = &self.h * &self.g;
        p.neg_mut();
        let mut d0 = self.g.dot(&p);
        if !(d0 < 0.0) {
            // The approximation lost definiteness to rounding; fall back
            // to steepest descent for this step.
            p = -self.g.clone();
            d0 = self.g.dot(&p);
            if !(d0 < 0.0) {
                return StepOutcome::Converged;
            }
        }
        // A unit step can decrease the value by at most ~|d0|; once that
        // falls below one ulp of f, sufficient decrease is uncertifiable.
        if d0.abs() <= f64::EPSILON * (1.0 + self.f.abs()) {
            return StepOutcome::Converged;
        }

        let Some((t, f_new, g_new)) = strong_wolfe(obj, &self.x, self.f, d0, &p, wolfe) else {
            return StepOutcome::LineSearchFailed;
        };

        let s = t * &p;
        let y = &g_new - &self.g;
        let sy = s.dot(&y);
        let curvature_floor = 1e-10 * s.norm() * y.norm();
        if sy > curvature_floor {
            if self.pending_scale {
                let yy = y.dot(&y);
                if yy > 0.0 {
                    self.h.fill_with_identity();
                    self.h *= sy / yy;
                }
                self.pending_scale = false;
            }
            let rho = 1.0 / sy;
            let hy = &self.h * &y;
            let yhy = y.dot(&hy);
            // H <- (I - rho s y')(H)(I - rho y s') + rho s s'
            self.h.ger(-rho, &s, &hy, 1.0);
            self.h.ger(-rho, &hy, &s, 1.0);
            self.h.ger(rho * (1.0 + rho * yhy), &s, &s, 1.0);
        }

        self.x += &s;
        self.f = f_new;
        self.g = g_new;
        StepOutcome::Accepted { f: f_new, step: t }
    }
}

/// Strong Wolfe line search along `p` from `x`: bracket by doubling, then
/// bisect. Returns the accepted step with the objective value and
/// gradient at the new point. Non-finite trial values are treated as
/// overshoot.
fn strong_wolfe(
    obj: &mut dyn Objective,
    x: &DVector<f64>,
    f0: f64,
    d0: f64,
    p: &DVector<f64>,
    cfg: &WolfeConfig,
) -> Option<(f64, f64, DVector<f64>)> {
    let eval = |obj: &mut dyn Objective, t: f64| {
        let xt = x + t * p;
        let (f, g) = obj.eval(&xt);
        let d = if f.is_finite() { g.dot(p) } else { f64::NAN };
        (f, g, d)
    };
    let armijo = |t: f64, f: f64| f.is_finite() && f <= f0 + cfg.c1 * t * d0;

    let mut t_prev = 0.0;
    let mut f_prev = f0;
    let mut t = cfg.initial_step;
    let mut bracket = None;
    for i in 0..cfg.max_expansions {
        let (f, g, d) = eval(obj, t);
        if !armijo(t, f) || (i > 0 && f >= f_prev) {
            bracket = Some((t_prev, f_prev, t, f));
            break;
        }
        if d.abs() <= -cfg.c2 * d0 {
            return Some((t, f, g));
        }
        if d >= 0.0 {
            bracket = Some((t, f, t_prev, f_prev));
            break;
        }
        t_prev = t;
        f_prev = f;
        t *= 2.0;
    }
    // `lo` always satisfies the sufficient-decrease condition; `hi` does
    // not (or lies past a turn of the slope).
    let (mut lo, mut f_lo, mut hi, mut _f_hi) = bracket?;
    for _ in 0..cfg.max_zoom {
        let tm = 0.5 * (lo + hi);
        let (f, g, d) = eval(obj, tm);
        if !armijo(tm, f) || f >= f_lo {
            hi = tm;
        } else {
            if d.abs() <= -cfg.c2 * d0 {
                return Some((tm, f, g));
            }
            if d * (hi - lo) >= 0.0 {
                hi = lo;
            }
            lo = tm;
            f_lo = f;
        }
        if (hi - lo).abs() <= 1e-14 * lo.abs().max(1.0) {
            break;
        }
    }
    // The bracket collapsed without meeting the curvature condition.
    // Accept the best sufficient-decrease point if there is one.
    if lo > 0.0 && f_lo < f0 {
        let (f, g, _) = eval(obj, lo);
        if armijo(lo, f) {
            return Some((lo, f, g));
        }
    }
    None
}

/// One steepest-descent step with Armijo backtracking: halve the step
/// until the sufficient-decrease condition holds. Returns the new point,
/// value, gradient and accepted step, or `None` when even the smallest
/// trial fails. `t0` is the first trial step; callers typically reuse the
/// last accepted step doubled.
pub fn backtracking_step(
    obj: &mut dyn Objective,
    x: &DVector<f64>,
    f: f64,
    g: &DVector<f64>,
    t0: f64,
    max_halvings: usize,
) -> Option<(DVector<f64>, f64, DVector<f64>, f64)> {
    let d0 = -g.dot(g);
    if !(d0 < 0.0) {
        return None;
    }
    let mut t = t0;
    for _ in 0..max_halvings {
        let xt = x - t * g;
        let (ft, gt) = obj.eval(&xt);
        if ft.is_finite() && ft <= f + 1e-4 * t * d0 {
            return Some((xt, ft, gt, t));
        }
        t *= 0.5;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f = x'Ax/2 - b'x with A symmetric positive definite.
    fn quadratic(a: DMatrix<f64>, b: DVector<f64>) -> impl FnMut(&DVector<f64>) -> (f64, DVector<f64>) {
        move |x: &DVector<f64>| {
            let ax = &a * x;
            let f = 0.5 * x.dot(&ax) - b.dot(x);
            (f, ax - &b)
        }
    }

    #[test]
    fn quadratic_converges_to_exact_minimum() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let b = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let solution = a.clone().lu().solve(&b).unwrap();
        let mut obj = quadratic(a, b);
        let mut bfgs = Bfgs::new(&mut obj, DVector::zeros(3)).unwrap();
        let wolfe = WolfeConfig::default();
        let mut last_f = bfgs.f();
        for _ in 0..50 {
            match bfgs.step(&mut obj, &wolfe, 1e-12) {
                StepOutcome::Accepted { f, .. } => {
                    assert!(f <= last_f, "accepted step increased the objective");
                    last_f = f;
                }
                StepOutcome::Converged => break,
                StepOutcome::LineSearchFailed => panic!("line search failed on a quadratic"),
            }
        }
        assert!((bfgs.x() - &solution).amax() < 1e-7, "x = {:?}", bfgs.x());
    }

    #[test]
    fn rosenbrock_valley() {
        let mut obj = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_row_slice(&[
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            (f, g)
        };
        let mut bfgs = Bfgs::new(&mut obj, DVector::from_row_slice(&[-1.2, 1.0])).unwrap();
        let wolfe = WolfeConfig::default();
        let mut iters = 0;
        for _ in 0..200 {
            iters += 1;
            if matches!(bfgs.step(&mut obj, &wolfe, 1e-10), StepOutcome::Converged) {
                break;
            }
        }
        assert!((bfgs.x()[0] - 1.0).abs() < 1e-6 && (bfgs.x()[1] - 1.0).abs() < 1e-6);
        assert!(iters < 120, "took {iters} iterations");
    }

    /// The quasi-Newton metric should reach the exact inverse Hessian on
    /// a quadratic, giving superlinear tail convergence; check it beats
    /// plain gradient descent on iteration count by a wide margin.
    #[test]
    fn curvature_memory_accelerates() {
        // Badly conditioned diagonal quadratic.
        let a = DMatrix::from_diagonal(&DVector::from_row_slice(&[100.0, 1.0, 0.01]));
        let b = DVector::zeros(3);
        let mut obj = quadratic(a, b);
        let x0 = DVector::from_row_slice(&[1.0, 1.0, 1.0]);
        let mut bfgs = Bfgs::new(&mut obj, x0).unwrap();
        let wolfe = WolfeConfig::default();
        let mut iters = 0;
        loop {
            iters += 1;
            if matches!(bfgs.step(&mut obj, &wolfe, 1e-10), StepOutcome::Converged) {
                break;
            }
            assert!(iters < 60);
        }
        assert!(iters <= 30, "conditioning not handled, {iters} iterations");
    }

    #[test]
    fn refresh_after_objective_change() {
        let shift = std::cell::Cell::new(0.0);
        let mut obj = |x: &DVector<f64>| {
            let d = x[0] - shift.get();
            (d * d, DVector::from_row_slice(&[2.0 * d]))
        };
        let mut bfgs = Bfgs::new(&mut obj, DVector::from_row_slice(&[5.0])).unwrap();
        let wolfe = WolfeConfig::default();
        for _ in 0..20 {
            if matches!(bfgs.step(&mut obj, &wolfe, 1e-12), StepOutcome::Converged) {
                break;
            }
        }
        assert!((bfgs.x()[0]).abs() < 1e-9);
        // Move the minimum; stale cached gradient would report convergence.
        shift.set(2.0);
        bfgs.refresh(&mut obj);
        assert!(bfgs.f() > 1.0);
        for _ in 0..20 {
            if matches!(bfgs.step(&mut obj, &wolfe, 1e-12), StepOutcome::Converged) {
                break;
            }
        }
        assert!((bfgs.x()[0] - 2.0).abs() < 1e-9);
    }

    /// Accepted steps must satisfy both strong Wolfe conditions.
    #[test]
    fn accepted_steps_satisfy_wolfe_conditions() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.4, 0.4, 1.0]);
        let b = DVector::from_row_slice(&[0.3, -1.0]);
        let mut obj = quadratic(a, b);
        let cfg = WolfeConfig::default();
        let mut bfgs = Bfgs::new(&mut obj, DVector::from_row_slice(&[4.0, -3.0])).unwrap();
        for _ in 0..30 {
            let f_before = bfgs.f();
            let g_before = bfgs.g().clone();
            let x_before = bfgs.x().clone();
            match bfgs.step(&mut obj, &cfg, 1e-12) {
                StepOutcome::Accepted { f, step } => {
                    let p = (bfgs.x() - &x_before) / step;
                    let d0 = g_before.dot(&p);
                    assert!(f <= f_before + cfg.c1 * step * d0 + 1e-14);
                    let d1 = bfgs.g().dot(&p);
                    assert!(d1.abs() <= -cfg.c2 * d0 + 1e-14);
                }
                StepOutcome::Converged => return,
                StepOutcome::LineSearchFailed => panic!("line search failed"),
            }
        }
    }

    /// Objective returning infinity past a barrier: the search must back
    /// off rather than step into the barrier.
    #[test]
    fn line_search_avoids_non_finite_region() {
        let mut obj = |x: &DVector<f64>| {
            let t = x[0];
            if t >= 1.0 {
                (f64::INFINITY, DVector::from_row_slice(&[f64::NAN]))
            } else {
                // Minimum at 0.9, barrier at 1.0.
                let d = t - 0.9;
                (d * d, DVector::from_row_slice(&[2.0 * d]))
            }
        };
        let mut bfgs = Bfgs::new(&mut obj, DVector::from_row_slice(&[0.0])).unwrap();
        let wolfe = WolfeConfig {
            initial_step: 50.0,
            ..WolfeConfig::default()
        };
        for _ in 0..30 {
            if matches!(bfgs.step(&mut obj, &wolfe, 1e-12), StepOutcome::Converged) {
                break;
            }
        }
        assert!((bfgs.x()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
            let b = DVector::from_row_slice(&[1.0, 2.0]);
            let mut obj = quadratic(a, b);
            let mut bfgs = Bfgs::new(&mut obj, DVector::zeros(2)).unwrap();
            let wolfe = WolfeConfig::default();
            let mut trace = Vec::new();
            for _ in 0..10 {
                match bfgs.step(&mut obj, &wolfe, 0.0) {
                    StepOutcome::Accepted { f, step } => trace.push((f, step)),
                    _ => break,
                }
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bad_start_rejected() {
        let mut obj = |_: &DVector<f64>| (f64::NAN, DVector::zeros(1));
        assert!(matches!(
            Bfgs::new(&mut obj, DVector::zeros(1)),
            Err(OptError::BadStart(_))
        ));
    }

    #[test]
    fn backtracking_decreases_objective() {
        let a = DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 1.0]));
        let b = DVector::zeros(2);
        let mut obj = quadratic(a.clone(), b);
        let mut x = DVector::from_row_slice(&[1.0, 1.0]);
        let (mut f, mut g) = (0.5 * x.dot(&(&a * &x)), &a * &x);
        let mut t0 = 1.0;
        for _ in 0..100 {
            let Some((xn, fn_, gn, t)) = backtracking_step(&mut obj, &x, f, &g, t0, 40) else {
                break;
            };
            assert!(fn_ < f);
            x = xn;
            f = fn_;
            g = gn;
            t0 = 2.0 * t;
        }
        assert!(f < 1e-10, "f = {f}");
    }
}
