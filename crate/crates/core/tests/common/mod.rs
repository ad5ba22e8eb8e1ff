//! Oracles and fixtures shared by the integration tests. The linear
//! algebra oracles avoid the library's own solvers and matrix exponential.
#![allow(dead_code)]

use msll_core::ll_integrator::{integrate_segment, replay_grid, IntegratorOptions};
use msll_core::model::{builtin, LinearModel, OdeModel};
use msll_core::shooting::{JacobianBlocks, Residuals, SegmentBlock, SolveMode};
use msll_core::{Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn random_vector(rng: &mut impl Rng, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// `exp(A)` by scaling, a 40-term Taylor sum, and repeated squaring.
pub fn taylor_expm(a: &Matrix) -> Matrix {
    let n = a.nrows();
    let norm = a.iter().map(|v| v.abs()).sum::<f64>();
    let mut k = 0;
    while norm / f64::powi(2.0, k) > 0.25 {
        k += 1;
    }
    let scaled = a / f64::powi(2.0, k);
    let mut sum = Matrix::identity(n, n);
    let mut term = Matrix::identity(n, n);
    for j in 1..=40 {
        term = &term * &scaled / j as f64;
        sum += &term;
    }
    for _ in 0..k {
        sum = &sum * &sum;
    }
    sum
}

/// Flow of `ẋ = Ax + b` over time `t`, via the exponential of the
/// bordered matrix `[[A, b], [0, 0]]`.
pub fn affine_flow(a: &Matrix, b: &Vector, x0: &Vector, t: f64) -> Vector {
    let d = a.nrows();
    let mut m = Matrix::zeros(d + 1, d + 1);
    m.view_mut((0, 0), (d, d)).copy_from(a);
    m.view_mut((0, d), (d, 1)).copy_from(b);
    let e = taylor_expm(&(m * t));
    e.view((0, 0), (d, d)) * x0 + e.view((0, d), (d, 1))
}

/// A random linearized multiple-shooting system.
pub struct Instance {
    pub jac: JacobianBlocks,
    pub res: Residuals,
    pub mode: SolveMode,
}

/// `d ≤ 3`, `p ≤ 3`, `M ≤ 4`, `N ≤ 10` observations of dimension `v ≤ d`,
/// with enough rows to determine `(s₀, p)`.
pub fn random_instance(rng: &mut impl Rng, mode: SolveMode) -> Instance {
    let d: usize = rng.random_range(1..=3);
    let np = rng.random_range(1..=3);
    let m = rng.random_range(1..=4);
    let mut v = rng.random_range(1..=d);
    let needed = |v: usize| (d + np + 1).div_ceil(v);
    if needed(v) > 10 {
        v = d;
    }
    let n = rng.random_range(needed(v)..=10);

    // Random split of the N observations into M consecutive (possibly
    // empty) groups.
    let mut cuts: Vec<usize> = (0..m - 1).map(|_| rng.random_range(0..=n)).collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(n);

    let f1_s = (0..m)
        .map(|k| {
            let rows = bounds[k] * v..bounds[k + 1] * v;
            SegmentBlock {
                block: random_matrix(rng, rows.len(), d, 1.0),
                rows,
            }
        })
        .collect();
    let k2 = rng.random_range(1..=d);
    let (r2_jac, r2_res) = if mode == SolveMode::General {
        (
            Some((
                (0..=m).map(|_| random_matrix(rng, k2, d, 1.0)).collect(),
                random_matrix(rng, k2, np, 1.0),
            )),
            Some(random_vector(rng, k2, 1.0)),
        )
    } else {
        (None, None)
    };
    let jac = JacobianBlocks {
        state_dim: d,
        f1_s,
        f1_p: random_matrix(rng, n * v, np, 1.0),
        c_s: (0..m).map(|_| random_matrix(rng, d, d, 1.0)).collect(),
        c_p: (0..m).map(|_| random_matrix(rng, d, np, 1.0)).collect(),
        r2: r2_jac,
    };
    let res = Residuals {
        f1: random_vector(rng, n * v, 1.0),
        c: (0..m).map(|_| random_vector(rng, d, 1.0)).collect(),
        r2: r2_res,
    };
    Instance { jac, res, mode }
}

/// Full Jacobian of `F₁` over the flat layout `(p, s₀, …, s_M)`.
pub fn full_f1_jacobian(jac: &JacobianBlocks) -> Matrix {
    let d = jac.state_dim;
    let np = jac.param_dim();
    let m = jac.segments();
    let mut j = Matrix::zeros(jac.f1_rows(), np + (m + 1) * d);
    j.view_mut((0, 0), (jac.f1_rows(), np)).copy_from(&jac.f1_p);
    for (k, blk) in jac.f1_s.iter().enumerate() {
        j.view_mut((blk.rows.start, np + k * d), (blk.rows.len(), d)).copy_from(&blk.block);
    }
    j
}

/// Linear equality rows `AΔq = b` of the full problem: continuity,
/// then `Δs₀ = 0` or the linearized `R₂`.
pub fn full_constraints(jac: &JacobianBlocks, res: &Residuals, mode: SolveMode) -> (Matrix, Vector) {
    let d = jac.state_dim;
    let np = jac.param_dim();
    let m = jac.segments();
    let cols = np + (m + 1) * d;
    let extra = match mode {
        SolveMode::Unconstrained => 0,
        SolveMode::FixedInitialState => d,
        SolveMode::General => jac.r2.as_ref().unwrap().1.nrows(),
    };
    let mut a = Matrix::zeros(m * d + extra, cols);
    let mut b = Vector::zeros(m * d + extra);
    for k in 0..m {
        let r = k * d;
        a.view_mut((r, 0), (d, np)).copy_from(&jac.c_p[k]);
        a.view_mut((r, np + k * d), (d, d)).copy_from(&jac.c_s[k]);
        a.view_mut((r, np + (k + 1) * d), (d, d)).copy_from(&(-Matrix::identity(d, d)));
        b.rows_mut(r, d).copy_from(&(-&res.c[k]));
    }
    let r = m * d;
    match mode {
        SolveMode::Unconstrained => {}
        SolveMode::FixedInitialState => {
            a.view_mut((r, np), (d, d)).copy_from(&Matrix::identity(d, d));
        }
        SolveMode::General => {
            let (r2_s, r2_p) = jac.r2.as_ref().unwrap();
            a.view_mut((r, 0), (extra, np)).copy_from(r2_p);
            for (k, blk) in r2_s.iter().enumerate() {
                a.view_mut((r, np + k * d), (extra, d)).copy_from(blk);
            }
            b.rows_mut(r, extra).copy_from(&(-res.r2.as_ref().unwrap()));
        }
    }
    (a, b)
}

/// `min ‖F₁ + JΔq‖` subject to the linearized constraints, from the
/// bordered normal equations of the uncondensed problem solved by LU.
pub fn direct_increment(inst: &Instance) -> Vector {
    let j = full_f1_jacobian(&inst.jac);
    let (a, b) = full_constraints(&inst.jac, &inst.res, inst.mode);
    let n = j.ncols();
    let k = a.nrows();
    let mut kkt = Matrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&(j.transpose() * &j));
    kkt.view_mut((0, n), (n, k)).copy_from(&a.transpose());
    kkt.view_mut((n, 0), (k, n)).copy_from(&a);
    let mut rhs = Vector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-(j.transpose() * &inst.res.f1)));
    rhs.rows_mut(n, k).copy_from(&b);
    let sol = kkt.lu().solve(&rhs).expect("oracle KKT system is singular");
    sol.rows(0, n).clone_owned()
}

pub fn rel_err(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// A random `(s, p)` near each benchmark's operating point, with the
/// segment length used by its benchmark layout.
pub fn sample(name: &str, rng: &mut impl Rng) -> (Vector, Vector, f64) {
    let u = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    match name {
        "henon_heiles" => (
            Vector::from_fn(4, |_, _| u(rng, -0.4, 0.4)),
            Vector::from_vec(vec![u(rng, 0.7, 1.3), u(rng, 0.7, 1.3), u(rng, -1.3, -0.7)]),
            0.2,
        ),
        "fitzhugh_nagumo" => (
            Vector::from_fn(2, |_, _| u(rng, -2.0, 2.0)),
            Vector::from_vec(vec![u(rng, 0.1, 0.3), u(rng, 0.1, 0.3), u(rng, 2.0, 4.0)]),
            0.4,
        ),
        _ => (
            Vector::from_fn(3, |_, _| u(rng, -3.0, 3.0)),
            Vector::from_vec(vec![u(rng, 0.3, 1.0), u(rng, 0.2, 1.0)]),
            40.0 / 60.0,
        ),
    }
}

/// Endpoint derivatives by central differences of a tightly controlled
/// LL integration replayed on one fixed grid.
pub fn reference_sensitivities(model: &dyn OdeModel, s: &Vector, p: &Vector, span: f64) -> (Matrix, Matrix) {
    let tight = IntegratorOptions::with_tolerances(1e-10, 1e-12);
    let grid = integrate_segment(model, s, p, 0.0, span, &[], &tight).unwrap().grid;
    let end = |s: &Vector, p: &Vector| replay_grid(model, s, p, &grid, None).unwrap().0.end_state().clone();
    let d = s.len();
    let np = p.len();
    let h = 1e-6;
    let ys = Matrix::from_fn(d, d, |_, _| 0.0);
    let mut ys = ys;
    for j in 0..d {
        let (mut up, mut dn) = (s.clone(), s.clone());
        up[j] += h;
        dn[j] -= h;
        ys.set_column(j, &((end(&up, p) - end(&dn, p)) / (2.0 * h)));
    }
    let mut yp = Matrix::zeros(d, np);
    for j in 0..np {
        let (mut up, mut dn) = (p.clone(), p.clone());
        up[j] += h;
        dn[j] -= h;
        yp.set_column(j, &((end(s, &up) - end(s, &dn)) / (2.0 * h)));
    }
    (ys, yp)
}

pub fn rel(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

pub fn worst_sensitivity_error(name: &str, steps_per_segment: f64, seed: u64) -> f64 {
    let model = builtin(name).unwrap();
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (s, p, span) = sample(name, &mut rng);
        let opts = IntegratorOptions {
            h_max: Some(span / steps_per_segment),
            ..Default::default()
        };
        let sol = integrate_segment(model.as_ref(), &s, &p, 0.0, span, &[], &opts).unwrap();
        let (ys, yp) = reference_sensitivities(model.as_ref(), &s, &p, span);
        worst = worst.max(rel(sol.end_ys(), &ys)).max(rel(sol.end_yp(), &yp));
    }
    worst
}

pub struct LinearCase {
    pub model: LinearModel,
    pub times: Vec<f64>,
    pub obs: Vec<Vector>,
}

pub fn linear_case(seed: u64) -> LinearCase {
    let mut rng = rng(seed);
    let a = Matrix::from_row_slice(3, 3, &[-0.3, 1.0, 0.0, -1.0, -0.2, 0.4, 0.1, -0.5, -0.6]);
    let b = random_matrix(&mut rng, 3, 2, 1.0);
    let offset = random_vector(&mut rng, 3, 0.5);
    let h = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let mut times: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..4.0)).collect();
    times.sort_by(f64::total_cmp);
    let obs = times.iter().map(|t| Vector::from_vec(vec![t.sin() + 0.3, (2.0 * t).cos()])).collect();
    LinearCase {
        model: LinearModel::new(a, b, offset, h),
        times,
        obs,
    }
}

/// Least-squares fit of `(x₀, p)` to the data from the exact affine flow,
/// with an SVD solve. Returns the estimate and the residual norm.
pub fn linear_oracle(case: &LinearCase) -> (Vector, Vector, f64) {
    let m = &case.model;
    let (d, np, v) = (m.state_dim(), m.param_dim(), m.obs_dim());
    let mut big = Matrix::zeros(d + np + 1, d + np + 1);
    big.view_mut((0, 0), (d, d)).copy_from(&m.a);
    big.view_mut((0, d), (d, np)).copy_from(&m.b);
    big.view_mut((0, d + np), (d, 1)).copy_from(&m.offset);
    let n = case.times.len();
    let mut x = Matrix::zeros(n * v, d + np);
    let mut y = Vector::zeros(n * v);
    for (i, (&t, z)) in case.times.iter().zip(&case.obs).enumerate() {
        let e = taylor_expm(&(&big * t));
        let basis = &m.h * e.view((0, 0), (d, d + np));
        let drift = &m.h * e.view((0, d + np), (d, 1));
        x.view_mut((i * v, 0), (v, d + np)).copy_from(&basis);
        y.rows_mut(i * v, v).copy_from(&(z - drift));
    }
    let sol = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
    let resid = (&x * &sol - &y).norm();
    (sol.rows(0, d).clone_owned(), sol.rows(d, np).clone_owned(), resid)
}
