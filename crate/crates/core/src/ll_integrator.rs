//! Local linearization (LL) integration of one shooting segment.
//!
//! On each step `[tₙ, tₙ + h]` the field is replaced by its first-order
//! expansion in `x` and `t` around `(tₙ, yₙ)`, and the resulting linear ODE
//! is solved exactly. The state increment and both variational propagators
//! come from a single matrix exponential `exp(h C)` of the augmented matrix
//!
//! ```text
//!     [ ∂f/∂x  ∂f/∂p  ∂f/∂t  f ]
//! C = [   0      0      0    0 ]     size (d + p + 2)²
//!     [   0      0      0    1 ]
//!     [   0      0      0    0 ]
//! ```
//!
//! whose first block row `[E₁₁ E₁₂ E₁₃ E₁₄]` gives
//! `yₙ₊₁ = yₙ + E₁₄`, `Yˢₙ₊₁ = E₁₁ Yˢₙ` and `Yᵖₙ₊₁ = E₁₁ Yᵖₙ + E₁₂`.
//!
//! Step sizes are controlled by step doubling; observation times inside the
//! segment are forced onto the grid.

use thiserror::Error;

use crate::linalg::{expm, LinalgError, Matrix, Vector};
use crate::model::OdeModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrationError {
    #[error("model evaluation produced non-finite values at t = {t} (state {state:?})")]
    Evaluation { t: f64, state: Vec<f64> },
    #[error("solution blew up near t = {t} (step size {h:e})")]
    BlowUp { t: f64, h: f64 },
    #[error("step budget of {steps} exhausted at t = {t}")]
    StepBudget { t: f64, steps: usize },
    #[error("invalid integration request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl IntegrationError {
    /// Time at which integration failed, when known.
    pub fn time(&self) -> Option<f64> {
        match self {
            IntegrationError::Evaluation { t, .. }
            | IntegrationError::BlowUp { t, .. }
            | IntegrationError::StepBudget { t, .. } => Some(*t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Largest step; defaults to the segment length.
    pub h_max: Option<f64>,
    /// Smallest step reached by rejection before declaring blow-up;
    /// defaults to `1e-10` times the segment length.
    pub h_min: Option<f64>,
    /// First trial step; defaults to a hundredth of the segment length.
    pub h_init: Option<f64>,
    pub max_steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rel_tol: 1e-3,
            abs_tol: 1e-6,
            h_max: None,
            h_min: None,
            h_init: None,
            max_steps: 100_000,
        }
    }
}

impl IntegratorOptions {
    pub fn with_tolerances(rel_tol: f64, abs_tol: f64) -> Self {
        IntegratorOptions {
            rel_tol,
            abs_tol,
            ..Default::default()
        }
    }

    fn resolve(&self, span: f64) -> Result<(f64, f64, f64), IntegrationError> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(IntegrationError::InvalidRequest(
                "tolerances must be positive".into(),
            ));
        }
        let h_max = self.h_max.unwrap_or(span);
        let h_min = self.h_min.unwrap_or(1e-10 * span);
        if !(h_min > 0.0 && h_min <= h_max) {
            return Err(IntegrationError::InvalidRequest(format!(
                "need 0 < h_min <= h_max, got h_min={h_min}, h_max={h_max}"
            )));
        }
        let h_init = self.h_init.unwrap_or(span / 100.0).clamp(h_min, h_max);
        Ok((h_min, h_max, h_init))
    }
}

/// Node times of an integrated segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub nodes: Vec<f64>,
    /// Step taken from each node; the last step may end on the next node
    /// only up to rounding.
    pub steps: Vec<f64>,
    /// For each requested time (sorted), its index in `nodes`.
    pub required: Vec<usize>,
}

impl SegmentGrid {
    pub fn max_step(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// State and sensitivities at every node of a segment grid.
#[derive(Debug, Clone)]
pub struct SegmentSolution {
    pub grid: SegmentGrid,
    pub states: Vec<Vector>,
    /// `∂y/∂s` at each node; identity at the segment start.
    pub ys: Vec<Matrix>,
    /// `∂y/∂p` at each node; zero at the segment start.
    pub yp: Vec<Matrix>,
}

impl SegmentSolution {
    pub fn end_state(&self) -> &Vector {
        self.states.last().expect("segment has at least one node")
    }
    pub fn end_ys(&self) -> &Matrix {
        self.ys.last().expect("segment has at least one node")
    }
    pub fn end_yp(&self) -> &Matrix {
        self.yp.last().expect("segment has at least one node")
    }

    /// Node index of the `k`-th required time.
    pub fn required_node(&self, k: usize) -> usize {
        self.grid.required[k]
    }
}

/// Result of one LL step.
#[derive(Debug, Clone)]
pub struct LlStep {
    pub y: Vector,
    pub ys: Matrix,
    pub yp: Matrix,
}

/// Assembles `C` at `(t, y, p)` in the block layout described at module level.
pub fn build_augmented_matrix(
    model: &dyn OdeModel,
    t: f64,
    y: &Vector,
    p: &Vector,
) -> Result<Matrix, IntegrationError> {
    let d = model.state_dim();
    let np = model.param_dim();
    let jx = model.df_dx(t, y, p);
    let jp = model.df_dp(t, y, p);
    let ft = model.df_dt(t, y, p);
    let f = model.f(t, y, p);

    let finite = jx.iter().chain(jp.iter()).chain(ft.iter()).chain(f.iter()).all(|v| v.is_finite());
    if !finite {
        return Err(IntegrationError::Evaluation {
            t,
            state: y.iter().copied().collect(),
        });
    }

    let n = d + np + 2;
    let mut c = Matrix::zeros(n, n);
    c.view_mut((0, 0), (d, d)).copy_from(&jx);
    c.view_mut((0, d), (d, np)).copy_from(&jp);
    c.view_mut((0, d + np), (d, 1)).copy_from(&ft);
    c.view_mut((0, d + np + 1), (d, 1)).copy_from(&f);
    c[(d + np, d + np + 1)] = 1.0;
    Ok(c)
}

/// Advances state and sensitivities by one LL step of size `h`.
#[allow(clippy::too_many_arguments)]
pub fn ll_step(
    model: &dyn OdeModel,
    t: f64,
    h: f64,
    y: &Vector,
    ys: &Matrix,
    yp: &Matrix,
    p: &Vector,
) -> Result<LlStep, IntegrationError> {
    if !(h > 0.0) {
        return Err(IntegrationError::InvalidRequest(format!(
            "step size must be positive, got {h}"
        )));
    }
    let d = model.state_dim();
    let np = model.param_dim();
    let c = build_augmented_matrix(model, t, y, p)?;
    let e = expm(&(c * h))?;

    let e11 = e.view((0, 0), (d, d));
    let e12 = e.view((0, d), (d, np));
    let e14 = e.view((0, d + np + 1), (d, 1));

    let step = LlStep {
        y: y + e14,
        ys: e11 * ys,
        yp: e11 * yp + e12,
    };
    let finite = step.y.iter().chain(step.ys.iter()).chain(step.yp.iter()).all(|v| v.is_finite());
    if !finite {
        return Err(IntegrationError::BlowUp { t, h });
    }
    Ok(step)
}

fn check_interval(t_start: f64, t_end: f64) -> Result<(), IntegrationError> {
    if !(t_start.is_finite() && t_end.is_finite() && t_start < t_end) {
        return Err(IntegrationError::InvalidRequest(format!(
            "need t_start < t_end, got [{t_start}, {t_end}]"
        )));
    }
    Ok(())
}

fn sorted_required(required: &[f64], t_start: f64, t_end: f64) -> Result<Vec<f64>, IntegrationError> {
    let mut req = required.to_vec();
    if req.iter().any(|&t| !(t >= t_start && t <= t_end)) {
        return Err(IntegrationError::InvalidRequest(format!(
            "required times must lie in [{t_start}, {t_end}]"
        )));
    }
    req.sort_by(f64::total_cmp);
    req.dedup();
    Ok(req)
}

/// Integrates `[t_start, t_end]` from `s` with adaptive step doubling.
///
/// Each attempt compares one step of size `h` with two steps of size `h/2`
/// using `err = maxᵢ |Δyᵢ| / (abs_tol + rel_tol |yᵢ|)`. Accepted attempts
/// keep the two half-step result, and the proposal becomes
/// `h · min(5, max(0.2, 0.9 err^{-1/2}))`. A proposal overshooting the next
/// required time is truncated to hit it, and such truncated steps leave the
/// proposal untouched.
pub fn integrate_segment(
    model: &dyn OdeModel,
    s: &Vector,
    p: &Vector,
    t_start: f64,
    t_end: f64,
    required_times: &[f64],
    opts: &IntegratorOptions,
) -> Result<SegmentSolution, IntegrationError> {
    check_interval(t_start, t_end)?;
    check_dims(model, s, p)?;
    let req = sorted_required(required_times, t_start, t_end)?;
    let (h_min, h_max, h_init) = opts.resolve(t_end - t_start)?;

    let d = model.state_dim();
    let np = model.param_dim();
    let mut t = t_start;
    let mut y = s.clone();
    let mut ys = Matrix::identity(d, d);
    let mut yp = Matrix::zeros(d, np);

    let mut nodes = vec![t];
    let mut steps = Vec::new();
    let mut states = vec![y.clone()];
    let mut ys_all = vec![ys.clone()];
    let mut yp_all = vec![yp.clone()];
    let mut required_idx = Vec::with_capacity(req.len());

    // Targets are the required times after t_start, then t_end.
    let mut targets: Vec<f64> = req.iter().copied().filter(|&r| r > t_start && r < t_end).collect();
    targets.push(t_end);
    let mut req_cursor = 0;
    while req_cursor < req.len() && req[req_cursor] <= t_start {
        required_idx.push(0);
        req_cursor += 1;
    }

    let mut h_prop = h_init;
    let mut attempts = 0usize;
    for &target in &targets {
        while t < target {
            if attempts >= opts.max_steps {
                return Err(IntegrationError::StepBudget { t, steps: attempts });
            }
            attempts += 1;

            let remaining = target - t;
            let truncated = h_prop >= remaining;
            let h = if truncated { remaining } else { h_prop };

            match doubled_step(model, t, h, &y, &ys, &yp, p, opts) {
                Some((step, err)) if err <= 1.0 => {
                    t = if truncated { target } else { t + h };
                    y = step.y;
                    ys = step.ys;
                    yp = step.yp;
                    nodes.push(t);
                    steps.push(h);
                    states.push(y.clone());
                    ys_all.push(ys.clone());
                    yp_all.push(yp.clone());
                    if !truncated {
                        h_prop = (h * growth_factor(err)).min(h_max);
                    }
                }
                outcome => {
                    let err = outcome.map_or(f64::INFINITY, |(_, e)| e);
                    h_prop = h * growth_factor(err);
                    if h_prop < h_min {
                        return Err(IntegrationError::BlowUp { t, h: h_prop });
                    }
                }
            }
        }
        if target < t_end || req.last() == Some(&t_end) {
            while req_cursor < req.len() && req[req_cursor] <= target {
                required_idx.push(nodes.len() - 1);
                req_cursor += 1;
            }
        }
    }

    Ok(SegmentSolution {
        grid: SegmentGrid {
            t_start,
            t_end,
            nodes,
            steps,
            required: required_idx,
        },
        states,
        ys: ys_all,
        yp: yp_all,
    })
}

fn growth_factor(err: f64) -> f64 {
    if err == 0.0 {
        return 5.0;
    }
    if !err.is_finite() {
        return 0.2;
    }
    (0.9 * err.powf(-0.5)).clamp(0.2, 5.0)
}

/// Two half steps plus the error estimate against one full step. `None`
/// when any of the three steps fails to stay finite.
#[allow(clippy::too_many_arguments)]
fn doubled_step(
    model: &dyn OdeModel,
    t: f64,
    h: f64,
    y: &Vector,
    ys: &Matrix,
    yp: &Matrix,
    p: &Vector,
    opts: &IntegratorOptions,
) -> Option<(LlStep, f64)> {
    let full = ll_step(model, t, h, y, ys, yp, p).ok()?;
    let half = ll_step(model, t, 0.5 * h, y, ys, yp, p).ok()?;
    let two = ll_step(model, t + 0.5 * h, 0.5 * h, &half.y, &half.ys, &half.yp, p).ok()?;
    let err = two
        .y
        .iter()
        .zip(full.y.iter())
        .map(|(a, b)| (a - b).abs() / (opts.abs_tol + opts.rel_tol * a.abs()))
        .fold(0.0, f64::max);
    if !err.is_finite() {
        return None;
    }
    Some((two, err))
}

fn check_dims(model: &dyn OdeModel, s: &Vector, p: &Vector) -> Result<(), IntegrationError> {
    if s.len() != model.state_dim() || p.len() != model.param_dim() {
        return Err(IntegrationError::InvalidRequest(format!(
            "model {} expects {} states and {} parameters, got {} and {}",
            model.name(),
            model.state_dim(),
            model.param_dim(),
            s.len(),
            p.len()
        )));
    }
    if s.iter().chain(p.iter()).any(|v| !v.is_finite()) {
        return Err(IntegrationError::InvalidRequest(
            "initial state and parameters must be finite".into(),
        ));
    }
    Ok(())
}

/// Integrates on a prescribed grid (first node is the initial time) with
/// one LL step per interval and no error control.
pub fn integrate_on_grid(
    model: &dyn OdeModel,
    s: &Vector,
    p: &Vector,
    nodes: &[f64],
) -> Result<SegmentSolution, IntegrationError> {
    check_dims(model, s, p)?;
    if nodes.len() < 2 || nodes.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(IntegrationError::InvalidRequest(
            "grid must hold at least two strictly increasing nodes".into(),
        ));
    }
    let d = model.state_dim();
    let np = model.param_dim();
    let mut states = Vec::with_capacity(nodes.len());
    let mut ys_all = Vec::with_capacity(nodes.len());
    let mut yp_all = Vec::with_capacity(nodes.len());
    states.push(s.clone());
    ys_all.push(Matrix::identity(d, d));
    yp_all.push(Matrix::zeros(d, np));
    for w in nodes.windows(2) {
        let n = states.len() - 1;
        let step = ll_step(model, w[0], w[1] - w[0], &states[n], &ys_all[n], &yp_all[n], p)?;
        states.push(step.y);
        ys_all.push(step.ys);
        yp_all.push(step.yp);
    }
    Ok(SegmentSolution {
        grid: SegmentGrid {
            t_start: nodes[0],
            t_end: *nodes.last().unwrap(),
            nodes: nodes.to_vec(),
            steps: nodes.windows(2).map(|w| w[1] - w[0]).collect(),
            required: (0..nodes.len()).collect(),
        },
        states,
        ys: ys_all,
        yp: yp_all,
    })
}

/// Re-runs an accepted adaptive grid at new `(s, p)` with the same two
/// half steps per interval, so replaying at the original arguments
/// reproduces the adaptive result exactly.
///
/// With `check`, each interval is also covered by one full step and the
/// returned flag reports whether every interval still passes the error
/// test at those tolerances.
pub fn replay_grid(
    model: &dyn OdeModel,
    s: &Vector,
    p: &Vector,
    grid: &SegmentGrid,
    check: Option<&IntegratorOptions>,
) -> Result<(SegmentSolution, bool), IntegrationError> {
    check_dims(model, s, p)?;
    let nodes = &grid.nodes;
    if nodes.len() < 2 || grid.steps.len() + 1 != nodes.len() {
        return Err(IntegrationError::InvalidRequest("malformed grid".into()));
    }
    let d = model.state_dim();
    let np = model.param_dim();
    let mut states = Vec::with_capacity(nodes.len());
    let mut ys_all = Vec::with_capacity(nodes.len());
    let mut yp_all = Vec::with_capacity(nodes.len());
    states.push(s.clone());
    ys_all.push(Matrix::identity(d, d));
    yp_all.push(Matrix::zeros(d, np));
    let mut valid = true;
    for (n, (&t, &h)) in nodes.iter().zip(&grid.steps).enumerate() {
        let (two, err) = match check {
            Some(opts) if valid => match doubled_step(model, t, h, &states[n], &ys_all[n], &yp_all[n], p, opts) {
                Some((two, err)) => (two, err),
                None => return Err(IntegrationError::BlowUp { t, h }),
            },
            _ => {
                let half = ll_step(model, t, 0.5 * h, &states[n], &ys_all[n], &yp_all[n], p)?;
                let two = ll_step(model, t + 0.5 * h, 0.5 * h, &half.y, &half.ys, &half.yp, p)?;
                (two, 0.0)
            }
        };
        valid &= err <= 1.0;
        states.push(two.y);
        ys_all.push(two.ys);
        yp_all.push(two.yp);
    }
    Ok((
        SegmentSolution {
            grid: grid.clone(),
            states,
            ys: ys_all,
            yp: yp_all,
        },
        check.is_some() && valid,
    ))
}

/// Fixed-step LL integration of the state alone over `[t_start, t_end]`,
/// with the last step shortened to land on `t_end`.
pub fn integrate_fixed_step(
    model: &dyn OdeModel,
    x0: &Vector,
    p: &Vector,
    t_start: f64,
    t_end: f64,
    h: f64,
) -> Result<(Vec<f64>, Vec<Vector>), IntegrationError> {
    check_interval(t_start, t_end)?;
    check_dims(model, x0, p)?;
    if !(h > 0.0) {
        return Err(IntegrationError::InvalidRequest(format!("step must be positive, got {h}")));
    }
    let d = model.state_dim();
    let np = model.param_dim();
    let ys = Matrix::identity(d, d);
    let yp = Matrix::zeros(d, np);
    let steps = ((t_end - t_start) / h).ceil() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(t_start);
    states.push(x0.clone());
    for n in 0..steps {
        let t = t_start + n as f64 * h;
        let t_next = if n + 1 == steps { t_end } else { t_start + (n + 1) as f64 * h };
        if t_next <= t {
            break;
        }
        let step = ll_step(model, t, t_next - t, states.last().unwrap(), &ys, &yp, p)?;
        times.push(t_next);
        states.push(step.y);
    }
    Ok((times, states))
}
