//! Multiple-shooting residuals, block Jacobian, condensing and expansion.
//!
//! The decision vector is `q = (p, s₀, …, s_M)` with one initial state per
//! shooting node. Segment `k` integrates `[τ_k, τ_{k+1}]` from `s_k`, and the
//! linearized problem is
//!
//! ```text
//! min ‖F₁ + J₁ Δq‖²   s.t.   c_k + Yˢ_k Δs_k + Yᵖ_k Δp − Δs_{k+1} = 0,
//!                           R₂ + J₂ Δq = 0
//! ```
//!
//! with `F₁ = (g − z) / σ` stacked observation-major and
//! `c_k = y(τ_{k+1}; τ_k, s_k, p) − s_{k+1}`. Condensing eliminates
//! `Δs_M, …, Δs_1` by a backward sweep; the reduced problem in `(Δs₀, Δp)`
//! is solved densely and the remaining shooting increments are recovered by
//! a forward sweep.

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{constrained_lstsq, lstsq, LinalgError, Matrix, Vector};
use crate::ll_integrator::{integrate_segment, replay_grid, IntegrationError, IntegratorOptions, SegmentGrid, SegmentSolution};
use crate::model::OdeModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShootingError {
    #[error("integration of segment {segment} failed: {source}")]
    Segment {
        segment: usize,
        #[source]
        source: IntegrationError,
    },
    #[error("parameters not identifiable along {}", directions.join(", "))]
    Identifiability { directions: Vec<String> },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid shooting configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Shooting nodes and an optional known initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootingConfig {
    pub node_times: Vec<f64>,
    pub fixed_x0: Option<Vector>,
}

impl ShootingConfig {
    pub fn new(node_times: Vec<f64>, fixed_x0: Option<Vector>) -> Result<Self, ShootingError> {
        if node_times.len() < 2 {
            return Err(ShootingError::InvalidConfig("need at least two shooting nodes".into()));
        }
        if node_times.iter().any(|t| !t.is_finite()) || node_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ShootingError::InvalidConfig(
                "shooting nodes must be finite and strictly increasing".into(),
            ));
        }
        Ok(ShootingConfig { node_times, fixed_x0 })
    }

    /// Places `max(m, 1)` segments on `[t0, t_end]`. Interior nodes are the
    /// observation times nearest to an equispaced partition, ties going to
    /// the earlier time. `m = 0` gives the single-segment initial value
    /// problem.
    pub fn from_observation_times(times: &[f64], t0: f64, t_end: f64, m: usize) -> Result<Self, ShootingError> {
        if !(t0 < t_end) {
            return Err(ShootingError::InvalidConfig(format!("empty interval [{t0}, {t_end}]")));
        }
        if times.iter().any(|&t| t < t0 || t > t_end) {
            return Err(ShootingError::InvalidConfig("observation times outside the interval".into()));
        }
        let segments = m.max(1);
        let mut nodes = Vec::with_capacity(segments + 1);
        nodes.push(t0);
        for k in 1..segments {
            let target = t0 + (t_end - t0) * k as f64 / segments as f64;
            let prev = *nodes.last().unwrap();
            let mut best: Option<f64> = None;
            for &t in times.iter().filter(|&&t| t > prev && t < t_end) {
                let better = match best {
                    None => true,
                    Some(b) => (t - target).abs() < (b - target).abs(),
                };
                if better {
                    best = Some(t);
                }
            }
            let node = match best {
                Some(t) => t,
                None if target > prev => target,
                None => {
                    return Err(ShootingError::InvalidConfig(format!(
                        "cannot place {segments} segments on the observation grid"
                    )))
                }
            };
            nodes.push(node);
        }
        nodes.push(t_end);
        ShootingConfig::new(nodes, None)
    }

    pub fn with_fixed_x0(mut self, x0: Vector) -> Self {
        self.fixed_x0 = Some(x0);
        self
    }

    pub fn segments(&self) -> usize {
        self.node_times.len() - 1
    }

    pub fn t0(&self) -> f64 {
        self.node_times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.node_times.last().unwrap()
    }

    /// Index ranges of the (sorted) observation times falling in each
    /// segment: `[τ_k, τ_{k+1})`, with the last segment closed on the right.
    pub fn partition(&self, times: &[f64]) -> Vec<Range<usize>> {
        let m = self.segments();
        let mut ranges = Vec::with_capacity(m);
        let mut start = 0;
        for k in 0..m {
            let right = self.node_times[k + 1];
            let mut end = start;
            while end < times.len() && (times[end] < right || (k + 1 == m && times[end] <= right)) {
                end += 1;
            }
            ranges.push(start..end);
            start = end;
        }
        ranges
    }
}

/// Augmented decision vector `q = (p, s₀, …, s_M)`; also used for increments.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedParams {
    pub p: Vector,
    pub s: Vec<Vector>,
}

impl AugmentedParams {
    pub fn new(p: Vector, s: Vec<Vector>) -> Self {
        AugmentedParams { p, s }
    }

    pub fn zeros(state_dim: usize, param_dim: usize, nodes: usize) -> Self {
        AugmentedParams {
            p: Vector::zeros(param_dim),
            s: vec![Vector::zeros(state_dim); nodes],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.s.first().map_or(0, |v| v.len())
    }

    pub fn len(&self) -> usize {
        self.p.len() + self.s.iter().map(|v| v.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat layout: `p` first, then `s₀, …, s_M`.
    pub fn flatten(&self) -> Vector {
        let mut out = Vector::zeros(self.len());
        out.rows_mut(0, self.p.len()).copy_from(&self.p);
        let mut off = self.p.len();
        for s in &self.s {
            out.rows_mut(off, s.len()).copy_from(s);
            off += s.len();
        }
        out
    }

    pub fn from_flat(flat: &Vector, state_dim: usize, param_dim: usize) -> Result<Self, ShootingError> {
        let rest = flat.len().checked_sub(param_dim).filter(|r| state_dim > 0 && r % state_dim == 0);
        let Some(rest) = rest else {
            return Err(ShootingError::Dimension(format!(
                "flat vector of length {} does not split into {param_dim} parameters and states of size {state_dim}",
                flat.len()
            )));
        };
        let p = flat.rows(0, param_dim).clone_owned();
        let s = (0..rest / state_dim)
            .map(|k| flat.rows(param_dim + k * state_dim, state_dim).clone_owned())
            .collect();
        Ok(AugmentedParams { p, s })
    }

    /// `self + alpha · delta`.
    pub fn add_scaled(&self, alpha: f64, delta: &AugmentedParams) -> AugmentedParams {
        AugmentedParams {
            p: &self.p + &delta.p * alpha,
            s: self.s.iter().zip(&delta.s).map(|(a, b)| a + b * alpha).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> AugmentedParams {
        AugmentedParams {
            p: &self.p * alpha,
            s: self.s.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.p.norm_squared() + self.s.iter().map(|v| v.norm_squared()).sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.s.iter().flat_map(|v| v.iter())).all(|v| v.is_finite())
    }
}

/// Equality constraints `R₂(q) = 0` on the augmented vector.
pub trait EqualityConstraints: Send + Sync {
    fn count(&self) -> usize;
    fn residual(&self, q: &AugmentedParams) -> Vector;
    /// Derivatives with respect to each `s_k` (`count × d`) and to `p`.
    fn jacobian(&self, q: &AugmentedParams) -> (Vec<Matrix>, Matrix);
}

/// `s₀ = x₀` written as a general constraint.
#[derive(Debug, Clone)]
pub struct InitialStateConstraint {
    pub x0: Vector,
}

impl EqualityConstraints for InitialStateConstraint {
    fn count(&self) -> usize {
        self.x0.len()
    }
    fn residual(&self, q: &AugmentedParams) -> Vector {
        &q.s[0] - &self.x0
    }
    fn jacobian(&self, q: &AugmentedParams) -> (Vec<Matrix>, Matrix) {
        let d = self.x0.len();
        let mut js = vec![Matrix::zeros(d, d); q.s.len()];
        js[0] = Matrix::identity(d, d);
        (js, Matrix::zeros(d, q.p.len()))
    }
}

/// How the condensed problem is solved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMode {
    Unconstrained,
    /// `Δs₀ = 0`; the iterate already carries `s₀ = x₀`.
    FixedInitialState,
    /// Condensed `R₂` rows enforced through the KKT system.
    General,
}

/// Residual part of the linearized system.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    /// `(g − z) / σ`, observation-major.
    pub f1: Vector,
    /// Continuity residuals `c₀, …, c_{M−1}`.
    pub c: Vec<Vector>,
    pub r2: Option<Vector>,
}

/// Rows of `∂F₁/∂s_k`; all other rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBlock {
    pub rows: Range<usize>,
    pub block: Matrix,
}

/// Jacobian part of the linearized system.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlocks {
    pub state_dim: usize,
    /// One block per segment `k = 0..M−1`; `s_M` never enters `F₁`.
    pub f1_s: Vec<SegmentBlock>,
    pub f1_p: Matrix,
    /// `∂c_k/∂s_k = Yˢ` at the segment end.
    pub c_s: Vec<Matrix>,
    /// `∂c_k/∂p = Yᵖ` at the segment end.
    pub c_p: Vec<Matrix>,
    /// `∂R₂/∂s_k` for `k = 0..M` and `∂R₂/∂p`.
    pub r2: Option<(Vec<Matrix>, Matrix)>,
}

impl JacobianBlocks {
    pub fn segments(&self) -> usize {
        self.c_s.len()
    }

    pub fn f1_rows(&self) -> usize {
        self.f1_p.nrows()
    }

    pub fn param_dim(&self) -> usize {
        self.f1_p.ncols()
    }

    fn scale_f1(&mut self, factor: f64) {
        for b in &mut self.f1_s {
            b.block *= factor;
        }
        self.f1_p *= factor;
    }
}

#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    pub residuals: Residuals,
    pub jacobian: JacobianBlocks,
    /// Unscaled `g − z`.
    pub raw_residual: Vector,
    pub sigma: f64,
    /// Integration grid of each segment.
    pub grids: Vec<SegmentGrid>,
}

impl LinearizedSystem {
    /// Rescales `F₁` and its derivatives to a new noise level.
    pub fn rescale_sigma(&mut self, sigma: f64) {
        let factor = self.sigma / sigma;
        self.residuals.f1 *= factor;
        self.jacobian.scale_f1(factor);
        self.sigma = sigma;
    }
}

/// Condensed matrices after eliminating `Δs₁, …, Δs_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condensed {
    pub u1: Vector,
    pub p1: Matrix,
    pub s1: Matrix,
    /// `(U₂, P₂, S₂)` when general constraints are present.
    pub r2: Option<(Vector, Matrix, Matrix)>,
}

/// Backward sweep, for `i = M, …, 1`:
///
/// ```text
/// U⁽ⁱ⁻¹⁾ = U⁽ⁱ⁾ + S⁽ⁱ⁾ c_{i−1}
/// P⁽ⁱ⁻¹⁾ = P⁽ⁱ⁾ + S⁽ⁱ⁾ ∂c_{i−1}/∂p
/// S⁽ⁱ⁻¹⁾ = ∂F/∂s_{i−1} + S⁽ⁱ⁾ ∂c_{i−1}/∂s_{i−1}
/// ```
///
/// starting from `U⁽ᴹ⁾ = F`, `P⁽ᴹ⁾ = ∂F/∂p`, `S⁽ᴹ⁾ = ∂F/∂s_M`. The same sweep
/// runs on the `R₂` rows.
pub fn condense(jac: &JacobianBlocks, res: &Residuals) -> Result<Condensed, ShootingError> {
    let m = jac.segments();
    let d = jac.state_dim;
    if res.c.len() != m || jac.c_p.len() != m || jac.f1_s.len() != m {
        return Err(ShootingError::Dimension(format!(
            "expected {m} continuity blocks and segment blocks"
        )));
    }
    if res.f1.len() != jac.f1_rows() {
        return Err(ShootingError::Dimension("residual and Jacobian row counts differ".into()));
    }

    let mut u1 = res.f1.clone();
    let mut p1 = jac.f1_p.clone();
    let mut s1 = Matrix::zeros(jac.f1_rows(), d);
    for i in (1..=m).rev() {
        u1 += &s1 * &res.c[i - 1];
        p1 += &s1 * &jac.c_p[i - 1];
        let mut next = &s1 * &jac.c_s[i - 1];
        let blk = &jac.f1_s[i - 1];
        let mut rows = next.rows_mut(blk.rows.start, blk.rows.len());
        rows += &blk.block;
        s1 = next;
    }

    let r2 = match (&jac.r2, &res.r2) {
        (Some((r2_s, r2_p)), Some(r2)) => {
            if r2_s.len() != m + 1 {
                return Err(ShootingError::Dimension("constraint blocks per node".into()));
            }
            let mut u2 = r2.clone();
            let mut p2 = r2_p.clone();
            let mut s2 = r2_s[m].clone();
            for i in (1..=m).rev() {
                u2 += &s2 * &res.c[i - 1];
                p2 += &s2 * &jac.c_p[i - 1];
                s2 = &r2_s[i - 1] + &s2 * &jac.c_s[i - 1];
            }
            Some((u2, p2, s2))
        }
        (None, None) => None,
        _ => return Err(ShootingError::Dimension("constraint residual without Jacobian".into())),
    };

    Ok(Condensed { u1, p1, s1, r2 })
}

/// Solves the condensed problem for `(Δs₀, Δp)`.
pub fn solve_condensed(cond: &Condensed, mode: SolveMode) -> Result<(Vector, Vector), ShootingError> {
    let d = cond.s1.ncols();
    let np = cond.p1.ncols();
    let rhs = -&cond.u1;
    match mode {
        SolveMode::FixedInitialState => {
            let dp = if np == 0 {
                Vector::zeros(0)
            } else {
                lstsq(&cond.p1, &rhs).map_err(|e| identifiability(e, 0, d))?
            };
            Ok((Vector::zeros(d), dp))
        }
        SolveMode::Unconstrained | SolveMode::General => {
            let x = hstack(&cond.s1, &cond.p1);
            let sol = match (mode, &cond.r2) {
                (SolveMode::General, Some((u2, p2, s2))) => {
                    let a = hstack(s2, p2);
                    constrained_lstsq(&x, &rhs, &a, &(-u2)).map_err(|e| identifiability(e, d, d))?
                }
                (SolveMode::General, None) => {
                    return Err(ShootingError::Dimension("general mode without constraint rows".into()))
                }
                _ => lstsq(&x, &rhs).map_err(|e| identifiability(e, d, d))?,
            };
            Ok((sol.rows(0, d).clone_owned(), sol.rows(d, np).clone_owned()))
        }
    }
}

fn hstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Maps deficient columns of `[S P]` (first `n_s` columns are `s₀`, the
/// rest `p`) to readable names.
fn identifiability(err: LinalgError, n_s: usize, d: usize) -> ShootingError {
    match err {
        LinalgError::RankDeficient { deficient_columns, .. } => {
            let mut cols = deficient_columns;
            cols.sort_unstable();
            ShootingError::Identifiability {
                directions: cols
                    .into_iter()
                    .map(|c| if c < n_s { format!("s0[{c}]") } else { format!("p[{}]", c - n_s) })
                    .collect(),
            }
        }
        LinalgError::SingularKkt => ShootingError::Identifiability {
            directions: vec![format!("constrained subspace of (s0[0..{d}], p)")],
        },
        other => ShootingError::Linalg(other),
    }
}

/// Forward sweep `Δs_{i+1} = ∂c_i/∂s_i Δs_i + ∂c_i/∂p Δp + c_i`.
pub fn expand(jac: &JacobianBlocks, res: &Residuals, ds0: Vector, dp: Vector) -> AugmentedParams {
    let m = jac.segments();
    let mut s = Vec::with_capacity(m + 1);
    s.push(ds0);
    for i in 0..m {
        let next = &jac.c_s[i] * &s[i] + &jac.c_p[i] * &dp + &res.c[i];
        s.push(next);
    }
    AugmentedParams { p: dp, s }
}

/// Condense, solve and expand.
pub fn gauss_newton_increment(
    jac: &JacobianBlocks,
    res: &Residuals,
    mode: SolveMode,
) -> Result<AugmentedParams, ShootingError> {
    let cond = condense(jac, res)?;
    let (ds0, dp) = solve_condensed(&cond, mode)?;
    Ok(expand(jac, res, ds0, dp))
}

/// A model, its observations and the shooting layout.
#[derive(Clone)]
pub struct ShootingProblem<'a> {
    pub model: &'a dyn OdeModel,
    pub times: &'a [f64],
    pub observations: &'a [Vector],
    pub config: ShootingConfig,
    pub integrator: IntegratorOptions,
    /// Extra equality constraints; switches the solve to the KKT path.
    pub constraints: Option<Arc<dyn EqualityConstraints>>,
    segments: Vec<Range<usize>>,
}

impl<'a> ShootingProblem<'a> {
    pub fn new(
        model: &'a dyn OdeModel,
        times: &'a [f64],
        observations: &'a [Vector],
        config: ShootingConfig,
        integrator: IntegratorOptions,
    ) -> Result<Self, ShootingError> {
        if times.len() != observations.len() {
            return Err(ShootingError::Dimension(format!(
                "{} times but {} observations",
                times.len(),
                observations.len()
            )));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ShootingError::Dimension("observation times must be strictly increasing".into()));
        }
        if let Some(z) = observations.iter().find(|z| z.len() != model.obs_dim()) {
            return Err(ShootingError::Dimension(format!(
                "observation of length {} for a model with {} outputs",
                z.len(),
                model.obs_dim()
            )));
        }
        if times.first().is_some_and(|&t| t < config.t0()) || times.last().is_some_and(|&t| t > config.t_end()) {
            return Err(ShootingError::InvalidConfig("observation times outside the shooting interval".into()));
        }
        if let Some(x0) = &config.fixed_x0 {
            if x0.len() != model.state_dim() {
                return Err(ShootingError::Dimension("fixed initial state has wrong length".into()));
            }
        }
        let segments = config.partition(times);
        Ok(ShootingProblem {
            model,
            times,
            observations,
            config,
            integrator,
            constraints: None,
            segments,
        })
    }

    pub fn with_constraints(mut self, constraints: Arc<dyn EqualityConstraints>) -> Self {
        self.constraints = Some(constraints);
        self
    }

    pub fn segment_ranges(&self) -> &[Range<usize>] {
        &self.segments
    }

    pub fn obs_rows(&self) -> usize {
        self.times.len() * self.model.obs_dim()
    }

    pub fn solve_mode(&self) -> SolveMode {
        if self.constraints.is_some() {
            SolveMode::General
        } else if self.config.fixed_x0.is_some() {
            SolveMode::FixedInitialState
        } else {
            SolveMode::Unconstrained
        }
    }

    /// Starting shooting values from the observation nearest each node;
    /// unobserved components are zero. A fixed initial state overrides `s₀`.
    pub fn initial_values(&self, p0: Vector) -> AugmentedParams {
        let d = self.model.state_dim();
        let observed = self.model.observed_states().unwrap_or_default();
        let s = self
            .config
            .node_times
            .iter()
            .enumerate()
            .map(|(k, &tau)| {
                if k == 0 {
                    if let Some(x0) = &self.config.fixed_x0 {
                        return x0.clone();
                    }
                }
                let mut s = Vector::zeros(d);
                if let Some(i) = nearest_index(self.times, tau) {
                    for (j, &state) in observed.iter().enumerate() {
                        s[state] = self.observations[i][j];
                    }
                }
                s
            })
            .collect();
        AugmentedParams { p: p0, s }
    }

    fn check_q(&self, q: &AugmentedParams) -> Result<(), ShootingError> {
        let d = self.model.state_dim();
        if q.p.len() != self.model.param_dim()
            || q.s.len() != self.config.node_times.len()
            || q.s.iter().any(|s| s.len() != d)
        {
            return Err(ShootingError::Dimension(format!(
                "expected {} parameters and {} states of size {d}",
                self.model.param_dim(),
                self.config.node_times.len()
            )));
        }
        Ok(())
    }

    /// Integrates every segment at `q`, in parallel.
    pub fn integrate(&self, q: &AugmentedParams) -> Result<Vec<SegmentSolution>, ShootingError> {
        self.check_q(q)?;
        (0..self.config.segments())
            .into_par_iter()
            .map(|k| self.integrate_one(q, k))
            .collect()
    }

    /// Integrates every segment at `q` on previously accepted grids. With
    /// `check`, the flags report which grids still meet the integrator
    /// tolerances.
    pub fn integrate_on(
        &self,
        q: &AugmentedParams,
        grids: &[SegmentGrid],
        check: bool,
    ) -> Result<Vec<(SegmentSolution, bool)>, ShootingError> {
        self.check_q(q)?;
        if grids.len() != self.config.segments() {
            return Err(ShootingError::Dimension(format!(
                "{} grids for {} segments",
                grids.len(),
                self.config.segments()
            )));
        }
        (0..self.config.segments())
            .into_par_iter()
            .map(|k| {
                replay_grid(self.model, &q.s[k], &q.p, &grids[k], check.then_some(&self.integrator))
                    .map_err(|source| ShootingError::Segment { segment: k, source })
            })
            .collect()
    }

    /// Unscaled observation residuals `g − z` at `q`.
    pub fn raw_residuals(&self, q: &AugmentedParams) -> Result<Vector, ShootingError> {
        let sols = self.integrate(q)?;
        let v = self.model.obs_dim();
        let mut raw = Vector::zeros(self.obs_rows());
        for (k, sol) in sols.iter().enumerate() {
            for (j, i) in self.segments[k].clone().enumerate() {
                let y = &sol.states[sol.required_node(j)];
                let g = self.model.g(self.times[i], y, &q.p);
                let r = g - &self.observations[i];
                check_finite(&r, k, self.times[i], y)?;
                raw.rows_mut(i * v, v).copy_from(&r);
            }
        }
        Ok(raw)
    }

    /// Residuals and Jacobian blocks at `q` with noise scale `sigma`.
    pub fn assemble(&self, q: &AugmentedParams, sigma: f64) -> Result<LinearizedSystem, ShootingError> {
        check_sigma(sigma)?;
        let sols = self.integrate(q)?;
        self.linearize(q, sigma, sols)
    }

    /// As [`assemble`](Self::assemble), replaying the given grids instead of
    /// adapting new ones.
    pub fn assemble_on(&self, q: &AugmentedParams, sigma: f64, grids: &[SegmentGrid]) -> Result<LinearizedSystem, ShootingError> {
        check_sigma(sigma)?;
        let sols = self.integrate_on(q, grids, false)?;
        self.linearize(q, sigma, sols.into_iter().map(|(s, _)| s).collect())
    }

    /// Replays `grids` at `q` and returns that system together with one
    /// fit for the next linearization, in which only the segments whose
    /// grid no longer meets the tolerances are integrated adaptively anew.
    pub fn relinearize(
        &self,
        q: &AugmentedParams,
        sigma: f64,
        grids: &[SegmentGrid],
    ) -> Result<(LinearizedSystem, LinearizedSystem), ShootingError> {
        check_sigma(sigma)?;
        let replayed = self.integrate_on(q, grids, true)?;
        let stale: Vec<usize> = (0..replayed.len()).filter(|&k| !replayed[k].1).collect();
        let mut fresh: Vec<SegmentSolution> = replayed.iter().map(|(s, _)| s.clone()).collect();
        let redone: Vec<SegmentSolution> = stale
            .par_iter()
            .map(|&k| self.integrate_one(q, k))
            .collect::<Result<_, _>>()?;
        for (k, sol) in stale.into_iter().zip(redone) {
            fresh[k] = sol;
        }
        let level = self.linearize(q, sigma, replayed.into_iter().map(|(s, _)| s).collect())?;
        let next = self.linearize(q, sigma, fresh)?;
        Ok((level, next))
    }

    fn integrate_one(&self, q: &AugmentedParams, k: usize) -> Result<SegmentSolution, ShootingError> {
        integrate_segment(
            self.model,
            &q.s[k],
            &q.p,
            self.config.node_times[k],
            self.config.node_times[k + 1],
            &self.times[self.segments[k].clone()],
            &self.integrator,
        )
        .map_err(|source| ShootingError::Segment { segment: k, source })
    }

    fn linearize(&self, q: &AugmentedParams, sigma: f64, sols: Vec<SegmentSolution>) -> Result<LinearizedSystem, ShootingError> {
        let d = self.model.state_dim();
        let np = self.model.param_dim();
        let v = self.model.obs_dim();
        let m = self.config.segments();
        let rows = self.obs_rows();
        let inv = 1.0 / sigma;

        let mut raw = Vector::zeros(rows);
        let mut f1_p = Matrix::zeros(rows, np);
        let mut f1_s = Vec::with_capacity(m);
        let mut c = Vec::with_capacity(m);
        let mut c_s = Vec::with_capacity(m);
        let mut c_p = Vec::with_capacity(m);

        for (k, sol) in sols.iter().enumerate() {
            let range = self.segments[k].clone();
            let mut block = Matrix::zeros(range.len() * v, d);
            for (j, i) in range.clone().enumerate() {
                let node = sol.required_node(j);
                let (t, y) = (self.times[i], &sol.states[node]);
                let r = self.model.g(t, y, &q.p) - &self.observations[i];
                check_finite(&r, k, t, y)?;
                let gx = self.model.dg_dx(t, y, &q.p);
                let gp = self.model.dg_dp(t, y, &q.p);
                raw.rows_mut(i * v, v).copy_from(&r);
                block.rows_mut(j * v, v).copy_from(&(&gx * &sol.ys[node] * inv));
                f1_p.rows_mut(i * v, v).copy_from(&((&gx * &sol.yp[node] + gp) * inv));
            }
            f1_s.push(SegmentBlock {
                rows: range.start * v..range.end * v,
                block,
            });
            c.push(sol.end_state() - &q.s[k + 1]);
            c_s.push(sol.end_ys().clone());
            c_p.push(sol.end_yp().clone());
        }

        let (r2_res, r2_jac) = match &self.constraints {
            Some(cons) => {
                let mut res = cons.residual(q);
                let (mut js, mut jp) = cons.jacobian(q);
                if let Some(x0) = &self.config.fixed_x0 {
                    res = vstack_vec(&(&q.s[0] - x0), &res);
                    let mut js_full = Vec::with_capacity(js.len());
                    for (k, b) in js.iter().enumerate() {
                        let top = if k == 0 { Matrix::identity(d, d) } else { Matrix::zeros(d, d) };
                        js_full.push(vstack(&top, b));
                    }
                    js = js_full;
                    jp = vstack(&Matrix::zeros(d, np), &jp);
                }
                (Some(res), Some((js, jp)))
            }
            None => (None, None),
        };

        Ok(LinearizedSystem {
            residuals: Residuals {
                f1: &raw * inv,
                c,
                r2: r2_res,
            },
            jacobian: JacobianBlocks {
                state_dim: d,
                f1_s,
                f1_p,
                c_s,
                c_p,
                r2: r2_jac,
            },
            raw_residual: raw,
            sigma,
            grids: sols.into_iter().map(|s| s.grid).collect(),
        })
    }

    /// Gauss-Newton increment of an assembled system.
    pub fn increment(&self, sys: &LinearizedSystem) -> Result<AugmentedParams, ShootingError> {
        gauss_newton_increment(&sys.jacobian, &sys.residuals, self.solve_mode())
    }
}

fn check_sigma(sigma: f64) -> Result<(), ShootingError> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(ShootingError::InvalidConfig(format!("noise scale must be positive, got {sigma}")))
    }
}

fn check_finite(r: &Vector, segment: usize, t: f64, y: &Vector) -> Result<(), ShootingError> {
    if r.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(ShootingError::Segment {
        segment,
        source: IntegrationError::Evaluation {
            t,
            state: y.iter().copied().collect(),
        },
    })
}

fn vstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

fn vstack_vec(a: &Vector, b: &Vector) -> Vector {
    let mut out = Vector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Index of the time nearest to `t`, ties toward the earlier one.
pub fn nearest_index(times: &[f64], t: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &ti) in times.iter().enumerate() {
        match best {
            Some(b) if (ti - t).abs() >= (times[b] - t).abs() => {}
            _ => best = Some(i),
        }
    }
    best
}
