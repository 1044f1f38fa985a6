//! Damped least-squares minimization shared by the wavelet-network builder
//! and the pose/deformation fitter.
//!
//! The normal equations are damped multiplicatively,
//! `(J^T J + mu diag(J^T J)) d = -J^T r`, with `mu` doubled on rejected
//! steps and divided by 3 on accepted ones. Parameters can be frozen
//! (excluded from the step) or box-bounded (steps are projected).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Stop when an accepted step reduces the cost by less than this
    /// fraction of the current cost.
    pub cost_rel_tol: f64,
    /// Stop when the gradient infinity norm falls below this.
    pub grad_inf_tol: f64,
    pub mu_init: f64,
    pub mu_max: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iterations: 100,
            cost_rel_tol: 1e-8,
            grad_inf_tol: 1e-8,
            mu_init: 1e-3,
            mu_max: 1e8,
        }
    }
}

/// Box bounds and frozen flags for the parameter vector.
#[derive(Debug, Clone)]
pub struct ParamSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub frozen: Vec<bool>,
}

impl ParamSpace {
    /// All parameters free and unbounded.
    pub fn free(n: usize) -> ParamSpace {
        ParamSpace {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            frozen: vec![false; n],
        }
    }

    pub fn clamp(&self, p: &mut DVector<f64>) {
        for i in 0..p.len() {
            p[i] = p[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: DVector<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub converged: bool,
    /// Damping exceeded `mu_max` while the system stayed singular or
    /// every trial step failed.
    pub aborted: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
}

/// Central-difference Jacobian, one column per parameter.
///
/// Falls back to a one-sided difference when stepping would leave the
/// bounds; frozen parameters get a zero column.
pub fn numeric_jacobian<R>(
    residual_fn: R,
    params: &DVector<f64>,
    h: f64,
    space: &ParamSpace,
) -> Result<DMatrix<f64>>
where
    R: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    assert!(h > 0.0, "step must be positive");
    let r0 = residual_fn(params)?;
    let m = r0.len();
    let n = params.len();
    let columns: Vec<Result<DVector<f64>>> = (0..n)
        .into_par_iter()
        .map(|j| {
            if space.frozen[j] {
                return Ok(DVector::zeros(m));
            }
            let up_ok = params[j] + h <= space.upper[j];
            let down_ok = params[j] - h >= space.lower[j];
            let mut p = params.clone();
            match (up_ok, down_ok) {
                (true, true) => {
                    p[j] = params[j] + h;
                    let rp = residual_fn(&p)?;
                    p[j] = params[j] - h;
                    let rm = residual_fn(&p)?;
                    Ok((rp - rm) / (2.0 * h))
                }
                (true, false) => {
                    p[j] = params[j] + h;
                    let rp = residual_fn(&p)?;
                    Ok((rp - &r0) / h)
                }
                (false, true) => {
                    p[j] = params[j] - h;
                    let rm = residual_fn(&p)?;
                    Ok((&r0 - rm) / h)
                }
                (false, false) => Ok(DVector::zeros(m)),
            }
        })
        .collect();
    let mut jac = DMatrix::zeros(m, n);
    for (j, col) in columns.into_iter().enumerate() {
        jac.set_column(j, &col?);
    }
    Ok(jac)
}

/// Runs the damped iteration from `init` until convergence, abort, or the
/// iteration cap. `residual_fn` may fail on a trial point (for example a
/// degenerate projection); such steps are rejected like cost increases.
pub fn minimize<R, J>(
    residual_fn: R,
    jacobian_fn: J,
    init: DVector<f64>,
    space: &ParamSpace,
    config: &LmConfig,
) -> Result<LmOutcome>
where
    R: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    J: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    let n = init.len();
    assert_eq!(space.lower.len(), n);
    assert_eq!(space.upper.len(), n);
    assert_eq!(space.frozen.len(), n);

    let mut params = init;
    space.clamp(&mut params);
    let r = residual_fn(&params)?;
    let mut cost = r.norm_squared();
    let initial_cost = cost;
    let mut trace = vec![cost];
    let mut mu = config.mu_init;
    let mut accepted = 0usize;
    let mut converged = false;
    let mut aborted = false;
    let mut residual = r;

    'outer: while accepted < config.max_iterations {
        let jac = jacobian_fn(&params)?;
        let grad = jac.transpose() * &residual;
        if grad.amax() < config.grad_inf_tol {
            converged = true;
            break;
        }
        let jtj = jac.transpose() * &jac;

        loop {
            let mut damped = jtj.clone();
            for i in 0..n {
                if space.frozen[i] {
                    // Pin the row/column so the step component is exactly 0.
                    for k in 0..n {
                        damped[(i, k)] = 0.0;
                        damped[(k, i)] = 0.0;
                    }
                    damped[(i, i)] = 1.0;
                } else {
                    let d = jtj[(i, i)].max(1e-12);
                    damped[(i, i)] = jtj[(i, i)] + mu * d;
                }
            }
            let mut rhs = -&grad;
            for i in 0..n {
                if space.frozen[i] {
                    rhs[i] = 0.0;
                }
            }

            let step = damped
                .clone()
                .cholesky()
                .map(|ch| ch.solve(&rhs))
                .or_else(|| damped.lu().solve(&rhs));
            let Some(step) = step else {
                mu *= 2.0;
                if mu > config.mu_max {
                    aborted = true;
                    break 'outer;
                }
                continue;
            };

            let mut trial = &params + &step;
            space.clamp(&mut trial);
            let trial_cost = match residual_fn(&trial) {
                Ok(r) => {
                    let c = r.norm_squared();
                    if c < cost {
                        // Accept.
                        let decrease = cost - c;
                        params = trial;
                        residual = r;
                        cost = c;
                        trace.push(cost);
                        accepted += 1;
                        mu = (mu / 3.0).max(1e-12);
                        if decrease < config.cost_rel_tol * cost.max(f64::MIN_POSITIVE) {
                            converged = true;
                            break 'outer;
                        }
                        continue 'outer;
                    }
                    c
                }
                // A trial point can make the warp degenerate or the pose
                // matrix singular; treat it like a cost increase.
                Err(Error::DegenerateProjection { .. }) | Err(Error::SingularMatrix(_)) => {
                    f64::INFINITY
                }
                Err(e) => return Err(e),
            };
            let _ = trial_cost;
            mu *= 2.0;
            if mu > config.mu_max {
                aborted = true;
                break 'outer;
            }
        }
    }

    Ok(LmOutcome {
        params,
        initial_cost,
        final_cost: cost,
        iterations: accepted,
        converged,
        aborted,
        cost_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn numeric_jacobian_exact_for_linear_residuals() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -0.5, 4.0, 3.0, -1.0]);
        let a2 = a.clone();
        let f = move |p: &DVector<f64>| Ok(&a2 * p);
        let p = DVector::from_vec(vec![0.7, -0.3]);
        let jac = numeric_jacobian(f, &p, 1e-4, &ParamSpace::free(2)).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_abs_diff_eq!(jac[(i, j)], a[(i, j)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn numeric_jacobian_quadratic_scalar() {
        let f = |p: &DVector<f64>| Ok(DVector::from_vec(vec![p[0] * p[0]]));
        let p = DVector::from_vec(vec![3.0]);
        let jac = numeric_jacobian(f, &p, 1e-4, &ParamSpace::free(1)).unwrap();
        assert_abs_diff_eq!(jac[(0, 0)], 6.0, epsilon = 1e-6);
    }

    #[test]
    fn numeric_jacobian_one_sided_at_bound() {
        let f = |p: &DVector<f64>| Ok(DVector::from_vec(vec![p[0] * p[0]]));
        let space = ParamSpace {
            lower: vec![3.0],
            upper: vec![10.0],
            frozen: vec![false],
        };
        let p = DVector::from_vec(vec![3.0]);
        let jac = numeric_jacobian(f, &p, 1e-4, &space).unwrap();
        // Forward difference of p^2 at 3: 6 + h.
        assert_abs_diff_eq!(jac[(0, 0)], 6.0, epsilon = 1e-3);
    }

    fn solve_bowl(init: Vec<f64>, target: Vec<f64>) -> LmOutcome {
        let t = DVector::from_vec(target);
        let t2 = t.clone();
        let f = move |p: &DVector<f64>| Ok(p - &t);
        let fj = f.clone();
        let n = t2.len();
        minimize(
            f,
            move |p: &DVector<f64>| numeric_jacobian(&fj, p, 1e-6, &ParamSpace::free(n)),
            DVector::from_vec(init),
            &ParamSpace::free(n),
            &LmConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn quadratic_bowl_converges_fast() {
        let out = solve_bowl(vec![10.0, -4.0], vec![1.0, 2.0]);
        assert!(out.converged);
        assert!(out.iterations <= 3, "took {} iterations", out.iterations);
        assert_abs_diff_eq!(out.params[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out.params[1], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn starting_at_optimum_takes_no_steps() {
        let out = solve_bowl(vec![1.0, 2.0], vec![1.0, 2.0]);
        assert!(out.converged);
        assert!(out.iterations <= 1);
        assert!((out.final_cost - out.initial_cost).abs() < 1e-12);
    }

    #[test]
    fn accepted_costs_are_monotone() {
        // Rosenbrock in residual form.
        let f = |p: &DVector<f64>| {
            Ok(DVector::from_vec(vec![
                10.0 * (p[1] - p[0] * p[0]),
                1.0 - p[0],
            ]))
        };
        let out = minimize(
            f,
            |p: &DVector<f64>| numeric_jacobian(f, p, 1e-6, &ParamSpace::free(2)),
            DVector::from_vec(vec![-1.2, 1.0]),
            &ParamSpace::free(2),
            &LmConfig {
                max_iterations: 200,
                ..LmConfig::default()
            },
        )
        .unwrap();
        for w in out.cost_trace.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(out.final_cost < 1e-10);
    }

    #[test]
    fn bounds_are_respected() {
        let f = |p: &DVector<f64>| Ok(DVector::from_vec(vec![p[0] + 5.0]));
        let space = ParamSpace {
            lower: vec![-1.0],
            upper: vec![1.0],
            frozen: vec![false],
        };
        let out = minimize(
            f,
            |p: &DVector<f64>| numeric_jacobian(f, p, 1e-6, &space),
            DVector::from_vec(vec![0.0]),
            &space,
            &LmConfig::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(out.params[0], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let f = |p: &DVector<f64>| Ok(DVector::from_vec(vec![p[0] - 3.0, p[1] - 4.0]));
        let space = ParamSpace {
            lower: vec![f64::NEG_INFINITY; 2],
            upper: vec![f64::INFINITY; 2],
            frozen: vec![false, true],
        };
        let out = minimize(
            f,
            |p: &DVector<f64>| numeric_jacobian(f, p, 1e-6, &space),
            DVector::from_vec(vec![0.0, 0.0]),
            &space,
            &LmConfig::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(out.params[0], 3.0, epsilon = 1e-8);
        assert_eq!(out.params[1], 0.0);
    }
}
