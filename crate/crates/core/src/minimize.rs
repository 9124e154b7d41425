//! Gradient descent with backtracking for the forward argmin, and a
//! matrix-free conjugate gradient solver for the adjoint systems.

use crate::scalar::{axpy, dot, norm2, norm_inf, Real};

/// A differentiable objective over a flat parameter vector.
pub trait Objective<T> {
    type Error;

    fn value_and_gradient(&mut self, x: &[T]) -> Result<(T, Vec<T>), Self::Error>;
}

impl<T, E, F> Objective<T> for F
where
    F: FnMut(&[T]) -> Result<(T, Vec<T>), E>,
{
    type Error = E;

    fn value_and_gradient(&mut self, x: &[T]) -> Result<(T, Vec<T>), E> {
        self(x)
    }
}

/// How the first trial step of each line search is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialStep {
    /// Twice the previously accepted step.
    #[default]
    Doubling,
    /// Barzilai-Borwein estimate `sᵀs / sᵀy` from the last two iterates,
    /// falling back to doubling when the curvature estimate is not positive.
    BarzilaiBorwein,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeOptions<T> {
    /// Stop once `‖∇g‖∞` is at or below this.
    pub tol_grad_inf: T,
    pub max_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: T,
    pub shrink: T,
    pub min_step: T,
    pub max_step: T,
    pub initial_step: InitialStep,
    /// Caps the largest coordinate change of a trial step.
    pub max_displacement: Option<T>,
    /// Absolute rounding level of the objective value, added to the relative
    /// band `64 ε (|f| + |f_trial|)`. Needed when `f` is the small remainder
    /// of much larger cancelling terms.
    pub value_noise: T,
    /// Keep every accepted objective value in the report.
    pub record_trace: bool,
}

impl<T: Real> Default for MinimizeOptions<T> {
    fn default() -> Self {
        Self {
            tol_grad_inf: T::lit(1e-6),
            max_iters: 2000,
            armijo_c: T::lit(1e-4),
            shrink: T::lit(0.5),
            min_step: T::lit(1e-12),
            max_step: T::one(),
            initial_step: InitialStep::Doubling,
            max_displacement: None,
            value_noise: T::zero(),
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport<T> {
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_inf_norm: T,
    pub final_objective: T,
    pub line_search_failures: usize,
    /// Accepted steps whose decrease was certified from directional
    /// derivatives because it fell below the rounding level of the objective.
    pub rounding_limited_steps: usize,
    /// Objective after each accepted iterate, starting with the initial point.
    pub trace: Vec<T>,
}

/// Minimizes `objective` by steepest descent with a backtracking Armijo
/// line search, starting at `x_init`.
///
/// Each trial step starts at twice the previously accepted one, clamped to
/// `[min_step, max_step]`, and halves until sufficient decrease holds.
/// Close to the minimum the decrease a step can achieve drops below the
/// floating-point resolution of the objective value; there the Armijo test
/// is evaluated on the trapezoid estimate `α/2 (φ'(0) + φ'(α))` of the
/// change along the search line instead.
pub fn minimize<T: Real, O: Objective<T>>(
    objective: &mut O,
    x_init: &[T],
    options: &MinimizeOptions<T>,
) -> Result<(Vec<T>, SolveReport<T>), O::Error> {
    let mut x = x_init.to_vec();
    let (mut f, mut g) = objective.value_and_gradient(&x)?;
    let mut report = SolveReport {
        converged: false,
        iterations: 0,
        final_gradient_inf_norm: norm_inf(&g),
        final_objective: f,
        line_search_failures: 0,
        rounding_limited_steps: 0,
        trace: Vec::new(),
    };
    if options.record_trace {
        report.trace.push(f);
    }
    let rounding = T::epsilon() * T::lit(64.0);
    let mut step = options.max_step;
    let mut trial = vec![T::zero(); x.len()];

    while report.iterations < options.max_iters {
        let g_inf = norm_inf(&g);
        report.final_gradient_inf_norm = g_inf;
        if g_inf <= options.tol_grad_inf {
            report.converged = true;
            break;
        }
        let slope = -dot(&g, &g);
        let mut alpha = match options.max_displacement {
            Some(d) => step.min(d / g_inf),
            None => step,
        };
        let accepted = loop {
            trial.copy_from_slice(&x);
            axpy(-alpha, &g, &mut trial);
            if trial == x {
                break None;
            }
            let (ft, gt) = objective.value_and_gradient(&trial)?;
            let required = options.armijo_c * alpha * slope;
            if ft.is_finite() {
                if ft - f <= required {
                    break Some((ft, gt, false));
                }
                let noise = rounding * (f.abs() + ft.abs()) + options.value_noise;
                if (ft - f).abs() <= noise {
                    let estimate = alpha * T::lit(0.5) * (slope - dot(&gt, &g));
                    if estimate <= required {
                        break Some((ft, gt, true));
                    }
                }
            }
            alpha = alpha * options.shrink;
            if alpha < options.min_step * T::lit(1e-8) {
                break None;
            }
        };
        match accepted {
            Some((ft, gt, rounding_limited)) => {
                let doubled = alpha * T::lit(2.0);
                let next = match options.initial_step {
                    InitialStep::Doubling => doubled,
                    InitialStep::BarzilaiBorwein => {
                        // s = -alpha g, y = gt - g
                        let sy = -alpha * (dot(&gt, &g) + slope);
                        let ss = alpha * alpha * -slope;
                        if sy > T::zero() { ss / sy } else { doubled }
                    }
                };
                std::mem::swap(&mut x, &mut trial);
                f = ft;
                g = gt;
                report.iterations += 1;
                if rounding_limited {
                    report.rounding_limited_steps += 1;
                }
                if options.record_trace {
                    report.trace.push(f);
                }
                step = next.max(options.min_step).min(options.max_step);
            }
            None => {
                report.line_search_failures += 1;
                break;
            }
        }
    }
    report.final_gradient_inf_norm = norm_inf(&g);
    report.converged = report.final_gradient_inf_norm <= options.tol_grad_inf;
    report.final_objective = f;
    Ok((x, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions<T> {
    pub tol_rel: T,
    /// Defaults to ten times the system size when `None`.
    pub max_iters: Option<usize>,
}

impl<T: Real> Default for CgOptions<T> {
    fn default() -> Self {
        Self {
            tol_rel: T::lit(1e-10),
            max_iters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgReport<T> {
    pub iterations: usize,
    pub final_relative_residual: T,
    /// Non-positive curvature was met and could not be cured by the shift.
    pub breakdown: bool,
    /// The diagonal shift was applied after a first breakdown.
    pub regularized: bool,
}

impl<T: Real> CgReport<T> {
    pub fn success(&self, tol_rel: T) -> bool {
        !self.breakdown && self.final_relative_residual <= tol_rel
    }
}

enum CgOutcome<T> {
    Done { z: Vec<T>, iterations: usize, rel: T },
    Breakdown { z: Vec<T>, iterations: usize, rel: T },
}

fn cg_core<T: Real, E>(
    apply: &mut dyn FnMut(&[T]) -> Result<Vec<T>, E>,
    b: &[T],
    shift: T,
    tol_rel: T,
    max_iters: usize,
) -> Result<CgOutcome<T>, E> {
    let b_norm = norm2(b);
    let mut z = vec![T::zero(); b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    while iterations < max_iters {
        let rel = rr.sqrt() / b_norm;
        if rel <= tol_rel {
            return Ok(CgOutcome::Done { z, iterations, rel });
        }
        let mut hp = apply(&p)?;
        if shift != T::zero() {
            axpy(shift, &p, &mut hp);
        }
        let curvature = dot(&p, &hp);
        if !(curvature > T::zero()) {
            return Ok(CgOutcome::Breakdown { z, iterations, rel });
        }
        let alpha = rr / curvature;
        axpy(alpha, &p, &mut z);
        axpy(-alpha, &hp, &mut r);
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for (pi, &ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_next;
        iterations += 1;
    }
    let rel = rr.sqrt() / b_norm;
    Ok(CgOutcome::Done { z, iterations, rel })
}

/// Solves `H z = b` for a symmetric positive definite operator given only
/// through products `v -> H v`.
///
/// If a direction of non-positive curvature shows up, the solve is retried
/// once on `H + δI` with `δ = 1e-8 · (bᵀHb / bᵀb)`; a second breakdown is
/// reported through [`CgReport::breakdown`].
pub fn cg_solve<T: Real, E>(
    mut apply: impl FnMut(&[T]) -> Result<Vec<T>, E>,
    b: &[T],
    options: &CgOptions<T>,
) -> Result<(Vec<T>, CgReport<T>), E> {
    if b.iter().all(|&v| v == T::zero()) {
        return Ok((
            vec![T::zero(); b.len()],
            CgReport {
                iterations: 0,
                final_relative_residual: T::zero(),
                breakdown: false,
                regularized: false,
            },
        ));
    }
    let max_iters = options.max_iters.unwrap_or(10 * b.len().max(1));
    match cg_core(&mut apply, b, T::zero(), options.tol_rel, max_iters)? {
        CgOutcome::Done { z, iterations, rel } => Ok((
            z,
            CgReport {
                iterations,
                final_relative_residual: rel,
                breakdown: false,
                regularized: false,
            },
        )),
        CgOutcome::Breakdown { iterations: first, .. } => {
            let hb = apply(b)?;
            let scale = (dot(b, &hb) / dot(b, b)).abs().max(T::min_positive_value());
            let shift = T::lit(1e-8) * scale;
            let (z, iterations, rel, breakdown) =
                match cg_core(&mut apply, b, shift, options.tol_rel, max_iters)? {
                    CgOutcome::Done { z, iterations, rel } => (z, iterations, rel, false),
                    CgOutcome::Breakdown { z, iterations, rel } => (z, iterations, rel, true),
                };
            Ok((
                z,
                CgReport {
                    iterations: first + iterations,
                    final_relative_residual: rel,
                    breakdown,
                    regularized: true,
                },
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::direct_solve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::convert::Infallible;

    fn quadratic_1d(x: &[f64]) -> Result<(f64, Vec<f64>), Infallible> {
        Ok(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]))
    }

    #[test]
    fn convex_1d() {
        let opts = MinimizeOptions { tol_grad_inf: 1e-8, record_trace: true, ..Default::default() };
        let (x, rep) = minimize(&mut quadratic_1d, &[0.0], &opts).unwrap();
        assert!(rep.converged);
        assert!((x[0] - 3.0).abs() < 1e-6);
        assert!(rep.final_gradient_inf_norm <= 1e-8);
        assert!(rep.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn barzilai_borwein_beats_doubling_on_ill_conditioned_quadratic() {
        let mut obj = |x: &[f64]| -> Result<(f64, Vec<f64>), Infallible> {
            let f = 0.5 * (x[0] * x[0] + 1e-3 * x[1] * x[1]);
            Ok((f, vec![x[0], 1e-3 * x[1]]))
        };
        let run = |rule, obj: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>), Infallible>| {
            let opts = MinimizeOptions {
                tol_grad_inf: 1e-10,
                max_iters: 100_000,
                max_step: 1e4,
                initial_step: rule,
                record_trace: true,
                ..Default::default()
            };
            minimize(&mut |x: &[f64]| obj(x), &[1.0, 1.0], &opts).unwrap().1
        };
        let bb = run(InitialStep::BarzilaiBorwein, &mut obj);
        let doubling = run(InitialStep::Doubling, &mut obj);
        assert!(bb.converged && doubling.converged);
        assert!(bb.iterations < doubling.iterations, "{} vs {}", bb.iterations, doubling.iterations);
        assert!(bb.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn already_optimal_start() {
        let (x, rep) = minimize(&mut quadratic_1d, &[3.0], &MinimizeOptions::default()).unwrap();
        assert_eq!(x, vec![3.0]);
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn reaches_tolerances_below_value_resolution() {
        // large constant offset: f changes are invisible long before ∇f is small
        let mut obj = |x: &[f64]| -> Result<(f64, Vec<f64>), Infallible> {
            let (p, q) = (x[0] - 1.0, x[1] + 2.0);
            let f = 1e6 + 0.65 * p * p + 0.4 * p * q + 1.55 * q * q;
            Ok((f, vec![1.3 * p + 0.4 * q, 0.4 * p + 3.1 * q]))
        };
        let opts = MinimizeOptions { tol_grad_inf: 1e-12, ..Default::default() };
        let (x, rep) = minimize(&mut obj, &[5.0, 5.0], &opts).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!(rep.rounding_limited_steps > 0, "{rep:?}");
        assert!((x[0] - 1.0).abs() < 1e-11 && (x[1] + 2.0).abs() < 1e-11);
    }

    #[test]
    fn iteration_budget_reports_non_convergence() {
        let opts = MinimizeOptions { max_iters: 1, tol_grad_inf: 1e-14, ..Default::default() };
        let mut obj = |x: &[f64]| -> Result<(f64, Vec<f64>), Infallible> {
            Ok((x[0].powi(4) + x[1].powi(2) * 10.0, vec![4.0 * x[0].powi(3), 20.0 * x[1]]))
        };
        let (_, rep) = minimize(&mut obj, &[1.0, 1.0], &opts).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 1);
    }

    #[test]
    fn line_search_failure_is_reported_not_panicked() {
        // gradient that points uphill: no step can decrease the value
        let mut obj = |x: &[f64]| -> Result<(f64, Vec<f64>), Infallible> { Ok((x[0], vec![-1.0])) };
        let (_, rep) = minimize(&mut obj, &[0.0], &MinimizeOptions::default()).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.line_search_failures, 1);
    }

    #[test]
    fn nonconvex_descent_is_monotone() {
        for rule in [InitialStep::Doubling, InitialStep::BarzilaiBorwein] {
            let mut obj = |x: &[f64]| -> Result<(f64, Vec<f64>), Infallible> {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 5.0 * (b - a * a).powi(2);
                let ga = -2.0 * (1.0 - a) - 20.0 * a * (b - a * a);
                let gb = 10.0 * (b - a * a);
                Ok((f, vec![ga, gb]))
            };
            let opts = MinimizeOptions { tol_grad_inf: 1e-8, max_iters: 50_000, record_trace: true, initial_step: rule, ..Default::default() };
            let (x, rep) = minimize(&mut obj, &[-1.0, 2.0], &opts).unwrap();
            assert!(rep.converged);
            assert!((x[0] - 1.0).abs() < 1e-6);
            let value_limited = rep.rounding_limited_steps;
            let increases = rep.trace.windows(2).filter(|w| w[1] > w[0]).count();
            assert!(increases <= value_limited);
            for w in rep.trace.windows(2) {
                assert!(w[1] <= w[0] + 64.0 * f64::EPSILON * (w[0].abs() + w[1].abs()));
            }
        }
    }

    fn dense_apply(a: &[Vec<f64>]) -> impl FnMut(&[f64]) -> Result<Vec<f64>, Infallible> + '_ {
        move |v: &[f64]| Ok(a.iter().map(|row| dot(row, v)).collect())
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).map(|k| b[k][i] * b[k][j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn diagonal_system() {
        let a = vec![vec![2.0, 0.0], vec![0.0, 4.0]];
        let (z, rep) = cg_solve(dense_apply(&a), &[2.0, 4.0], &CgOptions::default()).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-14 && (z[1] - 1.0).abs() < 1e-14);
        assert!(rep.success(1e-10));
    }

    #[test]
    fn zero_rhs_returns_immediately() {
        let a = vec![vec![2.0, 0.0], vec![0.0, 4.0]];
        let (z, rep) = cg_solve(dense_apply(&a), &[0.0, 0.0], &CgOptions::default()).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn matches_direct_solve_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [8, 12, 16] {
            let a = random_spd(n, &mut rng);
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (z, rep) = cg_solve(dense_apply(&a), &b, &CgOptions::default()).unwrap();
            let direct = direct_solve(&a, &b);
            let diff: Vec<f64> = z.iter().zip(&direct).map(|(p, q)| p - q).collect();
            assert!(norm2(&diff) / norm2(&direct) < 1e-8);
            assert!(rep.success(1e-10));
        }
    }

    #[test]
    fn converges_within_dimension_on_well_conditioned_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 6;
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 2.0 + i as f64 * 0.1 } else { 0.05 }).collect())
            .collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, rep) = cg_solve(dense_apply(&a), &b, &CgOptions::default()).unwrap();
        assert!(rep.iterations <= n, "{rep:?}");
        assert!(rep.success(1e-10));
    }

    #[test]
    fn indefinite_operator_reports_breakdown() {
        let a = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
        let (_, rep) = cg_solve(dense_apply(&a), &[1.0, 1.0], &CgOptions::default()).unwrap();
        assert!(rep.regularized);
        assert!(rep.breakdown);
        assert!(!rep.success(1e-10));
    }

    #[test]
    fn semidefinite_operator_with_consistent_rhs() {
        let a = vec![vec![2.0, 0.0], vec![0.0, 0.0]];
        let (z, rep) = cg_solve(dense_apply(&a), &[4.0, 0.0], &CgOptions::default()).unwrap();
        assert_eq!(z, vec![2.0, 0.0]);
        assert!(rep.success(1e-10));
    }
}
