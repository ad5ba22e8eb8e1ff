//! Damped generalized Gauss-Newton driver.
//!
//! Each outer iteration linearizes at `q⁽ˡ⁾`, computes the increment `Δq`,
//! and picks a damping factor `α` with a predictor-corrector line search on
//! the natural level function
//!
//! ```text
//! L(q) = ½ ‖J⁺(q⁽ˡ⁾) F(q)‖²
//! ```
//!
//! whose generalized inverse stays frozen at the current iterate. The
//! nonlinearity estimate
//!
//! ```text
//! w = 2 ‖r(α) + (1 − α) Δq‖ / ‖α Δq‖²,     r(α) = J⁺(q⁽ˡ⁾) F(q⁽ˡ⁾ + α Δq)
//! ```
//!
//! vanishes on affine problems and drives `α = min(1, η / (w ‖Δq‖))`.

use thiserror::Error;

use crate::linalg::Vector;
use crate::shooting::{gauss_newton_increment, AugmentedParams, LinearizedSystem, ShootingError, ShootingProblem};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerOptions {
    /// Stop once the Gauss-Newton increment satisfies `‖Δq‖ ≤ eps_stop`,
    /// which bounds `‖q⁽ˡ⁺¹⁾ − q⁽ˡ⁾‖` by the same amount.
    pub eps_stop: f64,
    pub max_iter: usize,
    /// Damping aggressiveness, in `(0, 2]`.
    pub eta: f64,
    /// Line search gives up below this damping factor.
    pub alpha_min: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            eps_stop: 1e-4,
            max_iter: 50,
            eta: 1.0,
            alpha_min: 1e-4,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.eps_stop > 0.0) {
            return Err(OptimizerError::InvalidOptions("eps_stop must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 2.0) {
            return Err(OptimizerError::InvalidOptions("eta must lie in (0, 2]".into()));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= 1.0) {
            return Err(OptimizerError::InvalidOptions("alpha_min must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("invalid optimizer options: {0}")]
    InvalidOptions(String),
    #[error("{observations} residuals leave no degrees of freedom for {params} parameters")]
    DegreesOfFreedom { observations: usize, params: usize },
    #[error(transparent)]
    Shooting(#[from] ShootingError),
}

/// One accepted Gauss-Newton step.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// Iterate after the step.
    pub q: AugmentedParams,
    pub alpha: f64,
    /// Nonlinearity estimate at the accepted damping.
    pub w: f64,
    /// `L(q⁽ˡ⁾) = ½‖Δq‖²`.
    pub level: f64,
    /// `L(q⁽ˡ⁾ + αΔq)` with the generalized inverse frozen at `q⁽ˡ⁾`.
    pub level_trial: f64,
    pub step_norm: f64,
    /// Noise estimate after the step.
    pub sigma: f64,
    /// Trial points evaluated by the line search.
    pub trials: usize,
}

impl IterationRecord {
    pub fn descends(&self) -> bool {
        self.level_trial <= self.level
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No acceptable damping above `alpha_min`.
    LineSearchFailed,
    /// The starting point could not be integrated.
    BlowUp(String),
    /// The linearized problem lost rank.
    Identifiability(String),
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max_iterations",
            Termination::LineSearchFailed => "line_search_failed",
            Termination::BlowUp(_) => "blow_up",
            Termination::Identifiability(_) => "identifiability",
        }
    }

    pub fn detail(&self) -> Option<&str> {
        match self {
            Termination::BlowUp(s) | Termination::Identifiability(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationReport {
    pub termination: Termination,
    pub iterations: Vec<IterationRecord>,
    pub q: AugmentedParams,
    pub sigma: f64,
}

impl EstimationReport {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    pub fn iteration_count(&self) -> usize {
        self.iterations.len()
    }
}

/// `2‖r + (1 − α)Δq‖ / ‖αΔq‖²`; `Δq` must be nonzero.
pub fn estimate_w(alpha: f64, dq: &Vector, r_trial: &Vector) -> f64 {
    let num = (r_trial + dq * (1.0 - alpha)).norm();
    2.0 * num / (alpha * alpha * dq.norm_squared())
}

/// Predictor `min(1, η / (w ‖Δq‖))`, or 1 without curvature information.
pub fn predict_alpha(w: f64, dq_norm: f64, eta: f64) -> f64 {
    if w > 0.0 && dq_norm > 0.0 {
        (eta / (w * dq_norm)).min(1.0)
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct LineSearchOutcome<T> {
    pub alpha: f64,
    pub w: f64,
    pub level_trial: f64,
    pub trials: usize,
    pub payload: T,
}

/// Predictor-corrector search along `Δq`.
///
/// `trial(α)` returns `r(α)` and any payload the caller wants back for the
/// accepted point, or `None` when the trial point cannot be evaluated; that
/// counts as an infinite level and halves `α`. A failed descent test
/// re-estimates `w` at the failed `α` and takes the new predictor, halving
/// instead if that would not shrink `α`. A single correction never cuts `α`
/// by more than a factor of ten.
pub fn line_search<T>(
    dq: &Vector,
    w_prev: f64,
    opts: &OptimizerOptions,
    mut trial: impl FnMut(f64) -> Option<(Vector, T)>,
) -> Result<LineSearchOutcome<T>, usize> {
    let norm = dq.norm();
    let level0 = 0.5 * norm * norm;
    let mut alpha = predict_alpha(w_prev, norm, opts.eta).max(opts.alpha_min);
    let mut trials = 0;
    loop {
        trials += 1;
        let next = match trial(alpha) {
            None => 0.5 * alpha,
            Some((r, payload)) => {
                let level = 0.5 * r.norm_squared();
                let w = estimate_w(alpha, dq, &r);
                if level <= level0 {
                    return Ok(LineSearchOutcome {
                        alpha,
                        w,
                        level_trial: level,
                        trials,
                        payload,
                    });
                }
                let corrected = predict_alpha(w, norm, opts.eta);
                if corrected.is_finite() && corrected < alpha {
                    corrected.max(0.1 * alpha)
                } else {
                    0.5 * alpha
                }
            }
        };
        if next < opts.alpha_min {
            return Err(trials);
        }
        alpha = next;
    }
}

/// `sqrt(Σ rᵢ² / (Nv − p))`.
pub fn sigma_from_residuals(raw: &Vector, params: usize) -> Result<f64, OptimizerError> {
    if raw.len() <= params {
        return Err(OptimizerError::DegreesOfFreedom {
            observations: raw.len(),
            params,
        });
    }
    Ok((raw.norm_squared() / (raw.len() - params) as f64).sqrt())
}

/// Noise estimate from a fresh integration at `q`.
pub fn estimate_sigma(problem: &ShootingProblem, q: &AugmentedParams) -> Result<f64, OptimizerError> {
    let raw = problem.raw_residuals(q)?;
    sigma_from_residuals(&raw, problem.model.param_dim())
}

/// `r = J⁺(frozen) F(q_trial)` with `F` integrated afresh at `q_trial` on
/// the grids of `frozen`, at its noise scale. Replaying the grids keeps the
/// level function smooth along the search direction and exact at `α = 0`.
pub fn natural_level_residual(
    problem: &ShootingProblem,
    q_trial: &AugmentedParams,
    frozen: &LinearizedSystem,
) -> Result<Vector, ShootingError> {
    let sys = problem.assemble_on(q_trial, frozen.sigma, &frozen.grids)?;
    level_residual(problem, &sys, frozen)
}

fn level_residual(
    problem: &ShootingProblem,
    trial: &LinearizedSystem,
    frozen: &LinearizedSystem,
) -> Result<Vector, ShootingError> {
    let dq = gauss_newton_increment(&frozen.jacobian, &trial.residuals, problem.solve_mode())?;
    Ok(-dq.flatten())
}

/// Runs the damped Gauss-Newton iteration from `q0` with noise guess
/// `sigma0`. Numerical trouble during the run ends up in
/// [`EstimationReport::termination`]; only malformed input is an error.
pub fn estimate(
    problem: &ShootingProblem,
    q0: AugmentedParams,
    sigma0: f64,
    opts: &OptimizerOptions,
) -> Result<EstimationReport, OptimizerError> {
    opts.validate()?;
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(OptimizerError::InvalidOptions(format!("initial sigma must be positive, got {sigma0}")));
    }
    if !q0.is_finite() {
        return Err(OptimizerError::InvalidOptions("initial guess must be finite".into()));
    }
    let np = problem.model.param_dim();
    if problem.obs_rows() <= np {
        return Err(OptimizerError::DegreesOfFreedom {
            observations: problem.obs_rows(),
            params: np,
        });
    }

    let mut q = q0;
    let mut sigma = sigma0;
    let mut iterations = Vec::new();
    let finish = |termination, iterations, q, sigma| EstimationReport {
        termination,
        iterations,
        q,
        sigma,
    };

    let mut sys = match problem.assemble(&q, sigma) {
        Ok(s) => s,
        Err(e @ ShootingError::Segment { .. }) => {
            return Ok(finish(Termination::BlowUp(e.to_string()), iterations, q, sigma))
        }
        Err(e) => return Err(e.into()),
    };
    let mut w_prev = 0.0;

    for iter in 0..opts.max_iter {
        let dq = match problem.increment(&sys) {
            Ok(dq) => dq,
            Err(e @ ShootingError::Identifiability { .. }) | Err(e @ ShootingError::Linalg(_)) => {
                return Ok(finish(Termination::Identifiability(e.to_string()), iterations, q, sigma))
            }
            Err(e) => return Err(e.into()),
        };
        let dq_flat = dq.flatten();
        let step_norm = dq_flat.norm();
        let level = 0.5 * step_norm * step_norm;

        if step_norm == 0.0 {
            iterations.push(IterationRecord {
                iter,
                q: q.clone(),
                alpha: 1.0,
                w: 0.0,
                level,
                level_trial: 0.0,
                step_norm,
                sigma,
                trials: 0,
            });
            return Ok(finish(Termination::Converged, iterations, q, sigma));
        }

        let outcome = line_search(&dq_flat, w_prev, opts, |alpha| {
            let q_trial = q.add_scaled(alpha, &dq);
            let (level_sys, next_sys) = problem.relinearize(&q_trial, sys.sigma, &sys.grids).ok()?;
            let r = level_residual(problem, &level_sys, &sys).ok()?;
            Some((r, (q_trial, next_sys)))
        });
        let Ok(found) = outcome else {
            return Ok(finish(Termination::LineSearchFailed, iterations, q, sigma));
        };

        let (q_next, mut sys_next) = found.payload;
        let sigma_next = match sigma_from_residuals(&sys_next.raw_residual, np) {
            Ok(s) if s > 0.0 && s.is_finite() => s,
            _ => sigma,
        };
        sys_next.rescale_sigma(sigma_next);

        iterations.push(IterationRecord {
            iter,
            q: q_next.clone(),
            alpha: found.alpha,
            w: found.w,
            level,
            level_trial: found.level_trial,
            step_norm,
            sigma: sigma_next,
            trials: found.trials,
        });

        q = q_next;
        sigma = sigma_next;
        sys = sys_next;
        w_prev = found.w;

        // judged on the undamped increment, so a heavily damped step cannot
        // pass for convergence
        if step_norm <= opts.eps_stop {
            return Ok(finish(Termination::Converged, iterations, q, sigma));
        }
    }
    Ok(finish(Termination::MaxIterations, iterations, q, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn w_vanishes_on_linear_residual() {
        let dq = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let alpha = 0.3;
        let r = -&dq * (1.0 - alpha);
        assert!(estimate_w(alpha, &dq, &r).abs() < 1e-15);
    }

    #[test]
    fn w_direct_evaluation() {
        let dq = Vector::from_vec(vec![3.0, 4.0]);
        let r = -&dq * 0.5;
        assert_relative_eq!(estimate_w(1.0, &dq, &r), 1.0 / 5.0, epsilon = 1e-15);
    }

    #[test]
    fn w_is_rotation_invariant() {
        let dq = Vector::from_vec(vec![1.0, 2.0]);
        let r = Vector::from_vec(vec![0.3, -0.1]);
        let (c, s) = (0.6f64, 0.8f64);
        let rot = crate::linalg::Matrix::from_row_slice(2, 2, &[c, -s, s, c]);
        assert_relative_eq!(estimate_w(0.7, &dq, &r), estimate_w(0.7, &(&rot * &dq), &(&rot * &r)), epsilon = 1e-14);
    }

    #[test]
    fn predictor_formula() {
        assert_eq!(predict_alpha(0.0, 3.0, 1.0), 1.0);
        assert_relative_eq!(predict_alpha(2.0, 2.0, 1.0), 0.25);
        assert_eq!(predict_alpha(0.1, 1.0, 1.0), 1.0);
    }

    #[test]
    fn sigma_direct_evaluation() {
        assert_eq!(sigma_from_residuals(&Vector::from_vec(vec![3.0, 4.0]), 1).unwrap(), 5.0);
        assert_eq!(sigma_from_residuals(&Vector::zeros(4), 1).unwrap(), 0.0);
        assert!(matches!(
            sigma_from_residuals(&Vector::zeros(2), 2),
            Err(OptimizerError::DegreesOfFreedom { .. })
        ));
    }

    #[test]
    fn linear_search_takes_full_step() {
        let dq = Vector::from_vec(vec![1.0, 1.0]);
        let mut calls = Vec::new();
        let out = line_search(&dq, 0.0, &OptimizerOptions::default(), |a| {
            calls.push(a);
            Some((-&dq * (1.0 - a), ()))
        })
        .unwrap();
        assert_eq!(out.alpha, 1.0);
        assert_eq!(calls, vec![1.0]);
        assert!(out.w.abs() < 1e-15);
    }

    #[test]
    fn blow_up_halves_alpha() {
        let dq = Vector::from_vec(vec![1.0]);
        let mut calls = Vec::new();
        let out = line_search(&dq, 0.0, &OptimizerOptions::default(), |a| {
            calls.push(a);
            (a < 0.3).then(|| (-&dq * (1.0 - a), ()))
        })
        .unwrap();
        assert_eq!(calls, vec![1.0, 0.5, 0.25]);
        assert_eq!(out.alpha, 0.25);
    }

    #[test]
    fn failed_descent_shrinks_through_w() {
        // r(α) = −(1−α)Δq + κα²Δq: quadratic model with curvature κ
        let dq = Vector::from_vec(vec![2.0]);
        let kappa = 3.0;
        let mut calls = Vec::new();
        let out = line_search(&dq, 0.0, &OptimizerOptions::default(), |a| {
            calls.push(a);
            Some((&dq * (a - 1.0 + kappa * a * a), ()))
        })
        .unwrap();
        assert!(calls.windows(2).all(|w| w[1] < w[0]));
        assert!(calls.len() >= 2);
        assert!(out.level_trial <= 0.5 * dq.norm_squared());
        // w is exact for this model: 2κ / ‖Δq‖
        assert_relative_eq!(out.w, 2.0 * kappa / dq.norm(), epsilon = 1e-12);
    }

    #[test]
    fn never_acceptable_fails() {
        let dq = Vector::from_vec(vec![1.0]);
        let r = line_search(&dq, 0.0, &OptimizerOptions::default(), |_| None::<(Vector, ())>);
        assert!(r.is_err());
    }

    #[test]
    fn options_validation() {
        assert!(OptimizerOptions::default().validate().is_ok());
        assert!(OptimizerOptions { eta: 2.5, ..Default::default() }.validate().is_err());
        assert!(OptimizerOptions { eps_stop: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerOptions { alpha_min: 0.0, ..Default::default() }.validate().is_err());
    }
}
