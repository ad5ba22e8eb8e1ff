//! Dense linear algebra used by the estimation pipeline.
//!
//! Three primitives are needed:
//!
//! - [`expm`]: matrix exponential by scaling and squaring with a diagonal
//!   Padé approximant (degree 3, 5, 7, 9 or 13 picked from the 1-norm).
//! - [`lstsq`]: linear least squares through a Householder QR factorization
//!   with column pivoting. The normal equations are never formed.
//! - [`constrained_lstsq`]: equality-constrained least squares through the
//!   bordered KKT system `[[XᵀX, Aᵀ], [A, 0]]`.
//!
//! Everything here is a pure function of its inputs.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("input contains non-finite entries")]
    NonFinite,
    #[error("rank deficient system: numerical rank {rank} of {cols} columns")]
    RankDeficient {
        rank: usize,
        cols: usize,
        /// Columns left outside the numerically independent set.
        deficient_columns: Vec<usize>,
    },
    #[error("singular KKT system: constraints are degenerate or the problem is not identifiable on their null space")]
    SingularKkt,
    #[error("singular Padé denominator in matrix exponential")]
    SingularPade,
}

// Padé coefficients b_k for degrees 3, 5, 7, 9 and 13.
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// 1-norm bounds below which each degree reaches unit roundoff without scaling.
const THETA3: f64 = 1.495585217958292e-2;
const THETA5: f64 = 2.539398330063230e-1;
const THETA7: f64 = 9.504178996162932e-1;
const THETA9: f64 = 2.097847961257068e0;
const THETA13: f64 = 5.371920351148152e0;

fn norm1(a: &Matrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn all_finite(a: &Matrix) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Matrix exponential `exp(A)`.
///
/// Scaling and squaring with the diagonal Padé approximant of the lowest
/// degree whose 1-norm threshold covers `A`; above the degree-13 threshold,
/// `A` is scaled by `2^-s` and the result squared `s` times. The output is a
/// deterministic function of the input bits.
pub fn expm(a: &Matrix) -> Result<Matrix, LinalgError> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(LinalgError::NotSquare {
            rows: n,
            cols: a.ncols(),
        });
    }
    if !all_finite(a) {
        return Err(LinalgError::NonFinite);
    }
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }

    let norm = norm1(a);
    let ident = Matrix::identity(n, n);
    let a2 = a * a;

    let (u, v, squarings) = if norm <= THETA3 {
        let (u, v) = pade_low(a, &ident, &[&a2], &PADE3);
        (u, v, 0)
    } else if norm <= THETA5 {
        let a4 = &a2 * &a2;
        let (u, v) = pade_low(a, &ident, &[&a2, &a4], &PADE5);
        (u, v, 0)
    } else if norm <= THETA7 {
        let a4 = &a2 * &a2;
        let a6 = &a2 * &a4;
        let (u, v) = pade_low(a, &ident, &[&a2, &a4, &a6], &PADE7);
        (u, v, 0)
    } else if norm <= THETA9 {
        let a4 = &a2 * &a2;
        let a6 = &a2 * &a4;
        let a8 = &a4 * &a4;
        let (u, v) = pade_low(a, &ident, &[&a2, &a4, &a6, &a8], &PADE9);
        (u, v, 0)
    } else {
        let s = (norm / THETA13).log2().ceil().max(0.0) as i32;
        let scale = 0.5f64.powi(s);
        let a1 = a * scale;
        let a2 = &a2 * (scale * scale);
        let a4 = &a2 * &a2;
        let a6 = &a2 * &a4;
        let (u, v) = pade13(&a1, &ident, &a2, &a4, &a6);
        (u, v, s)
    };

    // exp(A) ≈ (V - U)^{-1} (V + U)
    let numer = &v + &u;
    let denom = &v - &u;
    let lu = denom.lu();
    let mut result = lu.solve(&numer).ok_or(LinalgError::SingularPade)?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

/// Odd/even split of a Padé numerator of degree 3..9 from the even powers.
fn pade_low(a: &Matrix, ident: &Matrix, even: &[&Matrix], b: &[f64]) -> (Matrix, Matrix) {
    let mut odd_sum = ident * b[1];
    let mut even_sum = ident * b[0];
    for (k, pow) in even.iter().enumerate() {
        odd_sum += *pow * b[2 * k + 3];
        even_sum += *pow * b[2 * k + 2];
    }
    (a * odd_sum, even_sum)
}

fn pade13(a: &Matrix, ident: &Matrix, a2: &Matrix, a4: &Matrix, a6: &Matrix) -> (Matrix, Matrix) {
    let b = &PADE13;
    let inner_u = a6 * b[13] + a4 * b[11] + a2 * b[9];
    let u = a * (a6 * &inner_u + a6 * b[7] + a4 * b[5] + a2 * b[3] + ident * b[1]);
    let inner_v = a6 * b[12] + a4 * b[10] + a2 * b[8];
    let v = a6 * &inner_v + a6 * b[6] + a4 * b[4] + a2 * b[2] + ident * b[0];
    (u, v)
}

/// Householder QR factorization with column pivoting, `A P = Q R`.
///
/// Pivoting picks the remaining column of largest 2-norm at each step, so
/// the diagonal of `R` is non-increasing in magnitude and reveals the
/// numerical rank.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    r: Matrix,
    reflectors: Vec<(Vector, f64)>,
    perm: Vec<usize>,
}

impl PivotedQr {
    pub fn new(a: &Matrix) -> Self {
        let (m, n) = a.shape();
        let mut r = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let steps = m.min(n);
        let mut reflectors = Vec::with_capacity(steps);

        for k in 0..steps {
            // Exact remaining column norms; these systems are small.
            let (best, _) = (k..n)
                .map(|j| (j, r.view((k, j), (m - k, 1)).norm_squared()))
                .fold((k, -1.0), |acc, (j, nrm)| if nrm > acc.1 { (j, nrm) } else { acc });
            if best != k {
                r.swap_columns(k, best);
                perm.swap(k, best);
            }

            let x = r.view((k, k), (m - k, 1)).clone_owned();
            let xnorm = x.norm();
            let mut v = Vector::from_column_slice(x.as_slice());
            if xnorm == 0.0 {
                reflectors.push((v, 0.0));
                continue;
            }
            let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
            v[0] -= alpha;
            let vtv = v.norm_squared();
            let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };

            let mut block = r.view_mut((k, k), (m - k, n - k));
            let w = block.tr_mul(&v) * beta;
            block.ger(-1.0, &v, &w, 1.0);
            for i in (k + 1)..m {
                r[(i, k)] = 0.0;
            }
            r[(k, k)] = alpha;
            reflectors.push((v, beta));
        }

        PivotedQr {
            r,
            reflectors,
            perm,
        }
    }

    /// Column permutation: column `j` of `R` corresponds to column `perm()[j]` of `A`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn r_diagonal(&self) -> Vec<f64> {
        (0..self.reflectors.len()).map(|k| self.r[(k, k)]).collect()
    }

    /// Numerical rank with the relative threshold `max(m, n) · ε · |R₀₀|`.
    pub fn rank(&self) -> usize {
        let (m, n) = self.r.shape();
        let diag = self.r_diagonal();
        let Some(first) = diag.first() else {
            return 0;
        };
        let tol = (m.max(n) as f64) * f64::EPSILON * first.abs();
        diag.iter().take_while(|d| d.abs() > tol && d.abs() > 0.0).count()
    }

    /// Applies `Qᵀ` to `b` in place.
    pub fn q_tr_mul(&self, b: &mut Vector) {
        for (k, (v, beta)) in self.reflectors.iter().enumerate() {
            if *beta == 0.0 {
                continue;
            }
            let mut tail = b.rows_mut(k, v.len());
            let dot = tail.dot(v);
            tail.axpy(-beta * dot, v, 1.0);
        }
    }

    /// Least-squares solution of `A x ≈ b`; fails when `A` is rank deficient.
    pub fn solve(&self, b: &Vector) -> Result<Vector, LinalgError> {
        let (m, n) = self.r.shape();
        if b.len() != m {
            return Err(LinalgError::DimensionMismatch(format!(
                "right-hand side has length {}, expected {m}",
                b.len()
            )));
        }
        let rank = self.rank();
        if rank < n {
            return Err(LinalgError::RankDeficient {
                rank,
                cols: n,
                deficient_columns: self.perm[rank..].to_vec(),
            });
        }
        let mut qtb = b.clone();
        self.q_tr_mul(&mut qtb);
        let mut z = Vector::zeros(n);
        for i in (0..n).rev() {
            let mut acc = qtb[i];
            for j in (i + 1)..n {
                acc -= self.r[(i, j)] * z[j];
            }
            z[i] = acc / self.r[(i, i)];
        }
        let mut x = Vector::zeros(n);
        for (j, &col) in self.perm.iter().enumerate() {
            x[col] = z[j];
        }
        Ok(x)
    }
}

/// Minimizes `‖Xβ − y‖₂` through a column-pivoted QR factorization of `X`.
///
/// Columns are scaled to unit norm first, so the rank decision does not
/// depend on the units of the unknowns.
pub fn lstsq(x: &Matrix, y: &Vector) -> Result<Vector, LinalgError> {
    if x.nrows() != y.len() {
        return Err(LinalgError::DimensionMismatch(format!(
            "design has {} rows but response has length {}",
            x.nrows(),
            y.len()
        )));
    }
    if !all_finite(x) || y.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let scale: Vec<f64> = x
        .column_iter()
        .map(|c| {
            let n = c.norm();
            if n > 0.0 && n.is_finite() {
                1.0 / n
            } else {
                1.0
            }
        })
        .collect();
    let mut xs = x.clone();
    for (j, &sj) in scale.iter().enumerate() {
        xs.column_mut(j).scale_mut(sj);
    }
    let mut beta = PivotedQr::new(&xs).solve(y)?;
    for (b, &sj) in beta.iter_mut().zip(&scale) {
        *b *= sj;
    }
    Ok(beta)
}

/// Minimizes `‖Xβ − y‖₂` subject to `Aβ = b`.
///
/// Solves the bordered system
///
/// ```text
/// [ XᵀX  Aᵀ ] [β]   [Xᵀy]
/// [ A    0  ] [λ] = [ b ]
/// ```
///
/// with a pivoted QR factorization and returns the top block `β`. With no
/// constraint rows this is [`lstsq`].
pub fn constrained_lstsq(
    x: &Matrix,
    y: &Vector,
    a: &Matrix,
    b: &Vector,
) -> Result<Vector, LinalgError> {
    let n = x.ncols();
    let k = a.nrows();
    if k == 0 {
        return lstsq(x, y);
    }
    if a.ncols() != n || b.len() != k || x.nrows() != y.len() {
        return Err(LinalgError::DimensionMismatch(format!(
            "X is {}x{}, y has {}, A is {}x{}, b has {}",
            x.nrows(),
            n,
            y.len(),
            k,
            a.ncols(),
            b.len()
        )));
    }
    if !all_finite(x) || !all_finite(a) || y.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }

    let mut kkt = Matrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&x.tr_mul(x));
    kkt.view_mut((0, n), (n, k)).copy_from(&a.transpose());
    kkt.view_mut((n, 0), (k, n)).copy_from(a);
    let mut rhs = Vector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&x.tr_mul(y));
    rhs.rows_mut(n, k).copy_from(b);

    let sol = PivotedQr::new(&kkt).solve(&rhs).map_err(|e| match e {
        LinalgError::RankDeficient { .. } => LinalgError::SingularKkt,
        other => other,
    })?;
    Ok(sol.rows(0, n).clone_owned())
}
