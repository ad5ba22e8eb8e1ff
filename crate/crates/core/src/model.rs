//! ODE models `ẋ = f(t, x, p)` observed through `z = g(t, x, p) + ε`.
//!
//! A model supplies the vector field, the observation map and their analytic
//! first derivatives. The local linearization integrator needs `∂f/∂x`,
//! `∂f/∂p` and `∂f/∂t` exactly; the shooting residuals need `∂g/∂x` and
//! `∂g/∂p`.

use crate::linalg::{Matrix, Vector};

/// An ODE system with `d` states, `p` parameters and `v` observed outputs.
///
/// Implementations must be pure: the same arguments always give the same
/// result, and evaluation may happen from several threads at once.
pub trait OdeModel: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    fn f(&self, t: f64, x: &Vector, p: &Vector) -> Vector;
    fn df_dx(&self, t: f64, x: &Vector, p: &Vector) -> Matrix;
    fn df_dp(&self, t: f64, x: &Vector, p: &Vector) -> Matrix;

    /// Explicit time derivative of the field; zero for autonomous systems.
    fn df_dt(&self, _t: f64, _x: &Vector, _p: &Vector) -> Vector {
        Vector::zeros(self.state_dim())
    }

    fn g(&self, t: f64, x: &Vector, p: &Vector) -> Vector;
    fn dg_dx(&self, t: f64, x: &Vector, p: &Vector) -> Matrix;

    fn dg_dp(&self, _t: f64, _x: &Vector, _p: &Vector) -> Matrix {
        Matrix::zeros(self.obs_dim(), self.param_dim())
    }

    /// For coordinate-projection observations, the state index read by each
    /// output. Used to seed shooting values from data.
    fn observed_states(&self) -> Option<Vec<usize>> {
        None
    }
}

/// Henon-Heiles system with parameters `(a, b, c)`, fully observed.
///
/// ```text
/// ẋ₁ = x₃
/// ẋ₂ = x₄
/// ẋ₃ = −a x₁ − 2 x₁ x₂
/// ẋ₄ = −b x₂ − x₁² − c x₂²
/// ```
#[derive(Debug, Clone, Copy, Default)]
pub struct HenonHeiles;

pub fn henon_heiles() -> HenonHeiles {
    HenonHeiles
}

impl OdeModel for HenonHeiles {
    fn name(&self) -> &str {
        "henon_heiles"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn param_dim(&self) -> usize {
        3
    }
    fn obs_dim(&self) -> usize {
        4
    }

    fn f(&self, _t: f64, x: &Vector, p: &Vector) -> Vector {
        let (a, b, c) = (p[0], p[1], p[2]);
        Vector::from_vec(vec![
            x[2],
            x[3],
            -a * x[0] - 2.0 * x[0] * x[1],
            -b * x[1] - x[0] * x[0] - c * x[1] * x[1],
        ])
    }

    fn df_dx(&self, _t: f64, x: &Vector, p: &Vector) -> Matrix {
        let (a, b, c) = (p[0], p[1], p[2]);
        #[rustfmt::skip]
        let m = Matrix::from_row_slice(4, 4, &[
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
            -a - 2.0 * x[1], -2.0 * x[0], 0.0, 0.0,
            -2.0 * x[0], -b - 2.0 * c * x[1], 0.0, 0.0,
        ]);
        m
    }

    fn df_dp(&self, _t: f64, x: &Vector, _p: &Vector) -> Matrix {
        let mut m = Matrix::zeros(4, 3);
        m[(2, 0)] = -x[0];
        m[(3, 1)] = -x[1];
        m[(3, 2)] = -x[1] * x[1];
        m
    }

    fn g(&self, _t: f64, x: &Vector, _p: &Vector) -> Vector {
        x.clone()
    }

    fn dg_dx(&self, _t: f64, _x: &Vector, _p: &Vector) -> Matrix {
        Matrix::identity(4, 4)
    }

    fn observed_states(&self) -> Option<Vec<usize>> {
        Some(vec![0, 1, 2, 3])
    }
}

/// FitzHugh-Nagumo neuron model with parameters `(a, b, c)`; only the
/// voltage `V` is observed.
///
/// ```text
/// V̇ = c (V − V³/3 + R)
/// Ṙ = −(V − a + b R) / c
/// ```
#[derive(Debug, Clone, Copy, Default)]
pub struct FitzHughNagumo;

pub fn fitzhugh_nagumo() -> FitzHughNagumo {
    FitzHughNagumo
}

impl OdeModel for FitzHughNagumo {
    fn name(&self) -> &str {
        "fitzhugh_nagumo"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        3
    }
    fn obs_dim(&self) -> usize {
        1
    }

    fn f(&self, _t: f64, x: &Vector, p: &Vector) -> Vector {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (p[0], p[1], p[2]);
        Vector::from_vec(vec![
            c * (v - v * v * v / 3.0 + r),
            -(v - a + b * r) / c,
        ])
    }

    fn df_dx(&self, _t: f64, x: &Vector, p: &Vector) -> Matrix {
        let v = x[0];
        let (b, c) = (p[1], p[2]);
        Matrix::from_row_slice(2, 2, &[c * (1.0 - v * v), c, -1.0 / c, -b / c])
    }

    fn df_dp(&self, _t: f64, x: &Vector, p: &Vector) -> Matrix {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (p[0], p[1], p[2]);
        #[rustfmt::skip]
        let m = Matrix::from_row_slice(2, 3, &[
            0.0, 0.0, v - v * v * v / 3.0 + r,
            1.0 / c, -r / c, (v - a + b * r) / (c * c),
        ]);
        m
    }

    fn g(&self, _t: f64, x: &Vector, _p: &Vector) -> Vector {
        Vector::from_element(1, x[0])
    }

    fn dg_dx(&self, _t: f64, _x: &Vector, _p: &Vector) -> Matrix {
        Matrix::from_row_slice(1, 2, &[1.0, 0.0])
    }

    fn observed_states(&self) -> Option<Vec<usize>> {
        Some(vec![0])
    }
}

/// Rikitake two-disc dynamo with parameters `(μ, α)`, fully observed.
///
/// ```text
/// ẋ₁ = −μ x₁ + x₂ x₃
/// ẋ₂ = −α x₁ − μ x₂ + x₁ x₃
/// ẋ₃ = 1 − x₁ x₂
/// ```
#[derive(Debug, Clone, Copy, Default)]
pub struct Rikitake;

pub fn rikitake() -> Rikitake {
    Rikitake
}

impl OdeModel for Rikitake {
    fn name(&self) -> &str {
        "rikitake"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn obs_dim(&self) -> usize {
        3
    }

    fn f(&self, _t: f64, x: &Vector, p: &Vector) -> Vector {
        let (mu, alpha) = (p[0], p[1]);
        Vector::from_vec(vec![
            -mu * x[0] + x[1] * x[2],
            -alpha * x[0] - mu * x[1] + x[0] * x[2],
            1.0 - x[0] * x[1],
        ])
    }

    fn df_dx(&self, _t: f64, x: &Vector, p: &Vector) -> Matrix {
        let (mu, alpha) = (p[0], p[1]);
        #[rustfmt::skip]
        let m = Matrix::from_row_slice(3, 3, &[
            -mu, x[2], x[1],
            -alpha + x[2], -mu, x[0],
            -x[1], -x[0], 0.0,
        ]);
        m
    }

    fn df_dp(&self, _t: f64, x: &Vector, _p: &Vector) -> Matrix {
        #[rustfmt::skip]
        let m = Matrix::from_row_slice(3, 2, &[
            -x[0], 0.0,
            -x[1], -x[0],
            0.0, 0.0,
        ]);
        m
    }

    fn g(&self, _t: f64, x: &Vector, _p: &Vector) -> Vector {
        x.clone()
    }

    fn dg_dx(&self, _t: f64, _x: &Vector, _p: &Vector) -> Matrix {
        Matrix::identity(3, 3)
    }

    fn observed_states(&self) -> Option<Vec<usize>> {
        Some(vec![0, 1, 2])
    }
}

/// Affine system `ẋ = A x + B p + b₀` with linear observation `z = H x`.
///
/// Local linearization is exact for this class, which makes it the
/// reference case for integrator and optimizer checks.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: Matrix,
    pub b: Matrix,
    pub offset: Vector,
    pub h: Matrix,
}

impl LinearModel {
    pub fn new(a: Matrix, b: Matrix, offset: Vector, h: Matrix) -> Self {
        assert!(a.is_square(), "state matrix must be square");
        assert_eq!(b.nrows(), a.nrows(), "parameter matrix row count");
        assert_eq!(offset.len(), a.nrows(), "offset length");
        assert_eq!(h.ncols(), a.nrows(), "observation matrix column count");
        LinearModel { a, b, offset, h }
    }
}

impl OdeModel for LinearModel {
    fn name(&self) -> &str {
        "linear"
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn param_dim(&self) -> usize {
        self.b.ncols()
    }
    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn f(&self, _t: f64, x: &Vector, p: &Vector) -> Vector {
        &self.a * x + &self.b * p + &self.offset
    }
    fn df_dx(&self, _t: f64, _x: &Vector, _p: &Vector) -> Matrix {
        self.a.clone()
    }
    fn df_dp(&self, _t: f64, _x: &Vector, _p: &Vector) -> Matrix {
        self.b.clone()
    }
    fn g(&self, _t: f64, x: &Vector, _p: &Vector) -> Vector {
        &self.h * x
    }
    fn dg_dx(&self, _t: f64, _x: &Vector, _p: &Vector) -> Matrix {
        self.h.clone()
    }

    /// Defined when every row of `H` selects a single state.
    fn observed_states(&self) -> Option<Vec<usize>> {
        self.h
            .row_iter()
            .map(|row| {
                let nz: Vec<usize> = (0..row.len()).filter(|&j| row[j] != 0.0).collect();
                (nz.len() == 1 && row[nz[0]] == 1.0).then(|| nz[0])
            })
            .collect()
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN_MODELS: [&str; 3] = ["henon_heiles", "fitzhugh_nagumo", "rikitake"];

/// Looks up one of the built-in benchmark systems by name.
pub fn builtin(name: &str) -> Option<Box<dyn OdeModel>> {
    match name {
        "henon_heiles" | "henon-heiles" => Some(Box::new(HenonHeiles)),
        "fitzhugh_nagumo" | "fitzhugh-nagumo" | "fhn" => Some(Box::new(FitzHughNagumo)),
        "rikitake" => Some(Box::new(Rikitake)),
        _ => None,
    }
}
