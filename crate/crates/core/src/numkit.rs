//! Dense symmetric linear algebra and the special functions used by the
//! estimators: a cyclic Jacobi eigensolver, inverse square roots of positive
//! definite matrices, half-vectorisation, eigenvalue clipping onto
//! `{Q : Q - eps*I is PSD}`, the standard normal density/CDF and chi-square
//! upper quantiles.

use libm::{erf, erfc};
use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated by [`SymMatrix::new`] before rejecting input.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalue floor used when repairing non-positive-definite matrices.
pub const PD_EPS: f64 = 1e-5;

const MAX_SWEEPS: usize = 100;

/// A dense symmetric `p x p` matrix, `p >= 1`.
///
/// Construction always stores the exact symmetric part `(A + A^T) / 2`, so
/// `get(i, j) == get(j, i)` bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Validates that `m` is square and symmetric to within
    /// [`SYMMETRY_TOL`] relative to its largest entry, then symmetrizes.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        let scale = m.amax();
        let p = m.nrows();
        for j in 0..p {
            for i in (j + 1)..p {
                let gap = (m[(i, j)] - m[(j, i)]).abs();
                if gap > SYMMETRY_TOL * scale {
                    return Err(Error::Domain(format!("matrix is not symmetric: |a[{i},{j}] - a[{j},{i}]| = {gap:e}")));
                }
            }
        }
        Ok(Self::symmetrize_unchecked(m))
    }

    /// `(A + A^T) / 2` for any square `A`, however asymmetric.
    pub fn symmetrize(m: &DMatrix<f64>) -> Result<Self> {
        check_square(m)?;
        Ok(Self::symmetrize_unchecked(m.clone()))
    }

    fn symmetrize_unchecked(mut m: DMatrix<f64>) -> Self {
        let p = m.nrows();
        for j in 0..p {
            for i in (j + 1)..p {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        SymMatrix(m)
    }

    /// Row-major constructor; `values.len()` must be `p * p`.
    pub fn from_row_slice(p: usize, values: &[f64]) -> Result<Self> {
        if p == 0 || values.len() != p * p {
            return Err(Error::Dimension(format!(
                "expected {} entries for a {p}x{p} matrix, got {}",
                p * p,
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(p, p, values))
    }

    pub fn identity(p: usize) -> Self {
        assert!(p >= 1, "dimension must be positive");
        SymMatrix(DMatrix::identity(p, p))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        assert!(!diag.is_empty(), "dimension must be positive");
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scaled(&self, s: f64) -> Self {
        SymMatrix(&self.0 * s)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)]).collect()
    }

    /// Smallest eigenvalue, via [`sym_eig`].
    pub fn min_eigenvalue(&self) -> Result<f64> {
        let eig = sym_eig(self)?;
        Ok(*eig.eigenvalues.last().expect("dim >= 1"))
    }

    /// Cholesky-based inverse; fails unless the matrix is positive definite.
    pub fn inverse_pd(&self) -> Result<SymMatrix> {
        let chol = nalgebra::Cholesky::new(self.0.clone())
            .ok_or_else(|| Error::NotPositiveDefinite { eigenvalue: self.min_eigenvalue().unwrap_or(f64::NAN) })?;
        Ok(Self::symmetrize_unchecked(chol.inverse()))
    }

    /// `x^T A^{-1} x` for positive definite `A`.
    pub fn inverse_quadratic_form(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "vector of length {} against {}x{} matrix",
                x.len(),
                self.dim(),
                self.dim()
            )));
        }
        let chol = nalgebra::Cholesky::new(self.0.clone())
            .ok_or_else(|| Error::NotPositiveDefinite { eigenvalue: self.min_eigenvalue().unwrap_or(f64::NAN) })?;
        let z = chol
            .l()
            .solve_lower_triangular(x)
            .ok_or_else(|| Error::Singular("zero pivot in Cholesky factor".into()))?;
        Ok(z.norm_squared())
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("expected a non-empty square matrix, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

/// Spectral decomposition `A = Q diag(eigenvalues) Q^T`.
#[derive(Debug, Clone)]
pub struct EigDecomp {
    /// Sorted in descending order.
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: DMatrix<f64>,
}

impl EigDecomp {
    /// `Q diag(f(lambda)) Q^T`, symmetrized.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let q = &self.eigenvectors;
        let d = DVector::from_iterator(self.eigenvalues.len(), self.eigenvalues.iter().map(|&l| f(l)));
        let m = q * DMatrix::from_diagonal(&d) * q.transpose();
        SymMatrix::symmetrize_unchecked(m)
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(a: &SymMatrix) -> Result<EigDecomp> {
    let p = a.dim();
    let mut m = a.as_matrix().clone();
    let mut v = DMatrix::<f64>::identity(p, p);
    let total = m.norm();

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let off: f64 =
            (0..p).flat_map(|j| (0..j).map(move |i| (i, j))).map(|(i, j)| m[(i, j)] * m[(i, j)]).sum::<f64>().sqrt();
        if off <= 1e-15 * total || off == 0.0 {
            converged = true;
            break;
        }
        for q in 1..p {
            for r in 0..q {
                let apq = m[(r, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(r, r)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..p {
                    let mkr = m[(k, r)];
                    let mkq = m[(k, q)];
                    m[(k, r)] = c * mkr - s * mkq;
                    m[(k, q)] = s * mkr + c * mkq;
                }
                for k in 0..p {
                    let mrk = m[(r, k)];
                    let mqk = m[(q, k)];
                    m[(r, k)] = c * mrk - s * mqk;
                    m[(q, k)] = s * mrk + c * mqk;
                }
                m[(r, q)] = 0.0;
                m[(q, r)] = 0.0;
                for k in 0..p {
                    let vkr = v[(k, r)];
                    let vkq = v[(k, q)];
                    v[(k, r)] = c * vkr - s * vkq;
                    v[(k, q)] = s * vkr + c * vkq;
                }
            }
        }
    }
    if !converged {
        let diag: Vec<f64> = (0..p).map(|i| m[(i, i)].abs()).collect();
        let hi = diag.iter().cloned().fold(0.0, f64::max);
        let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::EigenNoConvergence {
            sweeps: MAX_SWEEPS,
            condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        });
    }

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let eigenvectors = DMatrix::from_fn(p, p, |row, col| v[(row, order[col])]);
    Ok(EigDecomp { eigenvalues, eigenvectors })
}

/// `A^{-1/2} = Q diag(lambda^{-1/2}) Q^T` for positive definite `A`.
pub fn inv_sqrt_pd(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = positive_spectrum(a)?;
    Ok(eig.map_spectrum(|l| 1.0 / l.sqrt()))
}

/// `A^{1/2} = Q diag(lambda^{1/2}) Q^T` for positive definite `A`.
pub fn sqrt_pd(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = positive_spectrum(a)?;
    Ok(eig.map_spectrum(f64::sqrt))
}

fn positive_spectrum(a: &SymMatrix) -> Result<EigDecomp> {
    let eig = sym_eig(a)?;
    let min = *eig.eigenvalues.last().expect("dim >= 1");
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite { eigenvalue: min });
    }
    Ok(eig)
}

/// Column-major stacking of the lower triangle (diagonal included).
pub fn vech(a: &SymMatrix) -> Vec<f64> {
    vech_lower(a.as_matrix())
}

/// [`vech`] applied to the lower triangle of an arbitrary square matrix.
pub fn vech_lower(m: &DMatrix<f64>) -> Vec<f64> {
    let p = m.nrows();
    let mut out = Vec::with_capacity(p * (p + 1) / 2);
    for j in 0..p {
        for i in j..p {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Dimension `p` such that `p (p + 1) / 2 == len`, if any.
pub fn vech_dim(len: usize) -> Option<usize> {
    let p = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (p..=p + 1).find(|&q| q >= 1 && q * (q + 1) / 2 == len)
}

pub fn vech_inv(v: &[f64], p: usize) -> Result<SymMatrix> {
    if p == 0 || v.len() != p * (p + 1) / 2 {
        return Err(Error::Dimension(format!(
            "vech of a {p}x{p} matrix has {} entries, got {}",
            p * (p + 1) / 2,
            v.len()
        )));
    }
    let mut m = DMatrix::zeros(p, p);
    let mut it = v.iter();
    for j in 0..p {
        for i in j..p {
            let x = *it.next().expect("length checked");
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
    }
    Ok(SymMatrix(m))
}

/// Projection onto `{Q : Q - eps*I is PSD}` in Frobenius norm:
/// `sum_j max(v_j, eps) g_j g_j^T`. Returns `a` untouched when its smallest
/// eigenvalue is already `>= eps`.
pub fn pd_project(a: &SymMatrix, eps: f64) -> Result<SymMatrix> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    let eig = sym_eig(a)?;
    if eig.eigenvalues.iter().all(|&l| l >= eps) {
        return Ok(a.clone());
    }
    Ok(eig.map_spectrum(|l| l.max(eps)))
}

/// Weighted median of `values`: the smallest value whose cumulative weight
/// reaches half the total, averaged with its successor on an exact tie.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> f64 {
    assert_eq!(values.len(), weights.len());
    assert!(!values.is_empty(), "median of an empty set");
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let total: f64 = weights.iter().sum();
    let half = 0.5 * total;
    let mut acc = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        acc += weights[i];
        if acc > half {
            return values[i];
        }
        if acc == half {
            let next = order.get(pos + 1).map_or(values[i], |&j| values[j]);
            return 0.5 * (values[i] + next);
        }
    }
    values[*order.last().expect("non-empty")]
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density and distribution function at `u`.
pub fn std_normal(u: f64) -> (f64, f64) {
    let pdf = INV_SQRT_2PI * (-0.5 * u * u).exp();
    let cdf = 0.5 * erfc(-u / std::f64::consts::SQRT_2);
    (pdf, cdf)
}

/// `P(|Z| <= c)` for standard normal `Z`; accurate for tiny `c`.
pub fn normal_central_mass(c: f64) -> f64 {
    erf(c / std::f64::consts::SQRT_2)
}

/// `P(|Z| > c)` for standard normal `Z`, without cancellation for large `c`.
pub fn normal_tail_mass(c: f64) -> f64 {
    erfc(c / std::f64::consts::SQRT_2)
}

/// Upper-`alpha` quantile of the chi-square distribution with `dof` degrees
/// of freedom: the `t` with `P(X > t) = alpha`.
pub fn chi2_quantile(dof: usize, alpha: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::Domain("chi-square degrees of freedom must be >= 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let k = dof as f64;
    let half = 0.5 * k;
    let upper = |t: f64| gamma_ur(half, 0.5 * t);
    let log_norm = half * std::f64::consts::LN_2 + ln_gamma(half);
    let density = |t: f64| ((half - 1.0) * t.ln() - 0.5 * t - log_norm).exp();

    // Wilson-Hilferty starting point.
    let z = std::f64::consts::SQRT_2 * erfc_inv(2.0 * alpha);
    let h = 2.0 / (9.0 * k);
    let mut t = k * (1.0 - h + z * h.sqrt()).powi(3);
    if !(t > 0.0) || !t.is_finite() {
        t = 1e-3 * k;
    }

    let mut lo = 0.0;
    let mut hi = t.max(1.0);
    while upper(hi) > alpha {
        lo = hi;
        hi *= 2.0;
    }
    if !(t > lo && t < hi) {
        t = 0.5 * (lo + hi);
    }

    for _ in 0..300 {
        let f = upper(t) - alpha;
        if f == 0.0 {
            return Ok(t);
        }
        if f > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let d = density(t);
        let newton = t + f / d;
        let next = if d > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - t).abs() <= 1e-15 * t.max(f64::MIN_POSITIVE) || hi - lo <= 1e-15 * hi {
            return Ok(next);
        }
        t = next;
    }
    Ok(t)
}
