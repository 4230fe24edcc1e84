//! Central-processor aggregation of local estimates.
//!
//! The robust aggregate solves the whitened, Huber-clipped estimating
//! equations
//!
//! ```text
//! G(theta) = sum_k (n_k / N) n_k^{-1/2} psi_c( S^{-1/2} sqrt(n_k) (theta_k - theta) ) = 0
//! ```
//!
//! In whitened coordinates `z = S^{-1/2} theta` the Jacobian of `G` is
//! `-diag(sum_k (n_k / N) 1{|u_kj| <= c})`, so the system separates into `p`
//! monotone scalar equations. Each is solved by Newton's method inside a
//! shrinking bracket, falling back to bisection when every term of a
//! coordinate is clipped (zero slope) or a Newton step leaves the bracket.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::LocalFit;
use crate::numkit::{
    inv_sqrt_pd, normal_central_mass, normal_tail_mass, sqrt_pd, std_normal, weighted_median, SymMatrix,
};

/// The payload a server transmits: possibly contaminated estimate and
/// variance matrix. `sigma_star` need not be symmetric or positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimate {
    pub server_id: u32,
    pub n_k: u64,
    pub theta_star: DVector<f64>,
    pub sigma_star: DMatrix<f64>,
}

impl LocalEstimate {
    pub fn new(server_id: u32, n_k: u64, theta_star: DVector<f64>, sigma_star: DMatrix<f64>) -> Result<Self> {
        let est = LocalEstimate { server_id, n_k, theta_star, sigma_star };
        est.check()?;
        Ok(est)
    }

    pub fn from_fit(fit: &LocalFit) -> Self {
        LocalEstimate {
            server_id: fit.server_id,
            n_k: fit.n_k,
            theta_star: fit.theta_hat.clone(),
            sigma_star: fit.sigma_hat.as_matrix().clone(),
        }
    }

    pub fn p(&self) -> usize {
        self.theta_star.len()
    }

    fn check(&self) -> Result<()> {
        if self.n_k == 0 {
            return Err(Error::Domain(format!("server {}: n_k must be >= 1", self.server_id)));
        }
        let p = self.p();
        if p == 0 || self.sigma_star.nrows() != p || self.sigma_star.ncols() != p {
            return Err(Error::Dimension(format!(
                "server {}: theta has length {p} but sigma is {}x{}",
                self.server_id,
                self.sigma_star.nrows(),
                self.sigma_star.ncols()
            )));
        }
        Ok(())
    }
}

/// Validates a batch of estimates and returns them sorted by server id,
/// together with the common dimension.
pub(crate) fn sorted_estimates(estimates: &[LocalEstimate]) -> Result<(Vec<&LocalEstimate>, usize)> {
    let first = estimates.first().ok_or_else(|| Error::Domain("no local estimates to aggregate".into()))?;
    let p = first.p();
    for est in estimates {
        est.check()?;
        if est.p() != p {
            return Err(Error::Dimension(format!(
                "server {} sent a length-{} estimate, expected {p}",
                est.server_id,
                est.p()
            )));
        }
    }
    let mut sorted: Vec<&LocalEstimate> = estimates.iter().collect();
    sorted.sort_by_key(|e| e.server_id);
    Ok((sorted, p))
}

fn total_size(estimates: &[&LocalEstimate]) -> u64 {
    estimates.iter().map(|e| e.n_k).sum()
}

/// Settings for [`huber_aggregate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberConfig {
    /// Huber tuning constant; `f64::INFINITY` reduces to the weighted average.
    pub c: f64,
    /// Bound on the Euclidean norm of the estimating function at the solution,
    /// relaxed to the rounding floor `16 eps ||z|| sqrt(p)` when the whitened
    /// root `z` is so large that `tol` is below one ulp.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for HuberConfig {
    fn default() -> Self {
        HuberConfig { c: 1.345, tol: 1e-10, max_iter: 200 }
    }
}

impl HuberConfig {
    pub fn with_c(c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::Config(format!("Huber constant c must be positive, got {c}")));
        }
        Ok(HuberConfig { c, ..Default::default() })
    }
}

/// Huber's psi: identity on `[-c, c]`, clipped to `+-c` outside.
pub fn huber_psi(u: f64, c: f64) -> f64 {
    if u < -c {
        -c
    } else if u > c {
        c
    } else {
        u
    }
}

/// Efficiency of the Huber aggregate relative to the weighted average,
/// `b_c^2 / sigma_c^2` with `b_c = 2 Phi(c) - 1` and
/// `sigma_c^2 = b_c - 2 c phi(c) + c^2 (1 - b_c)`.
///
/// Ranges over `(2/pi, 1]`; `tau_c(INFINITY) == 1`.
pub fn tau_c(c: f64) -> f64 {
    assert!(c > 0.0, "Huber constant must be positive, got {c}");
    if c.is_infinite() {
        return 1.0;
    }
    let b = normal_central_mass(c);
    let (phi, _) = std_normal(c);
    // (b - 2 c phi) is the truncated second moment; for tiny c it is O(c^3)
    // and dominated by the clipped tail term.
    let sigma2 = (b - 2.0 * c * phi) + c * c * (1.0 - b);
    if c < 1.0 {
        return b * b / sigma2;
    }
    // tau is within a few ulps of 1 here; form 1 - tau from the tail mass
    // q = 1 - b directly instead of subtracting two numbers near 1.
    let q = normal_tail_mass(c);
    let gap = q * (b + c * c) - 2.0 * c * phi;
    1.0 - gap / sigma2
}

/// `(theta_bar, sigma_bar)` with weights `n_k / N`.
pub fn weighted_average(estimates: &[LocalEstimate]) -> Result<(DVector<f64>, SymMatrix)> {
    let (sorted, p) = sorted_estimates(estimates)?;
    let n_total = total_size(&sorted) as f64;
    let mut theta = DVector::zeros(p);
    let mut sigma = DMatrix::zeros(p, p);
    for est in &sorted {
        let w = est.n_k as f64 / n_total;
        theta.axpy(w, &est.theta_star, 1.0);
        sigma += &est.sigma_star * w;
    }
    Ok((theta, SymMatrix::symmetrize(&sigma)?))
}

/// Output of [`huber_aggregate`].
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationResult {
    pub theta_hat: DVector<f64>,
    /// The variance matrix used for whitening and standard errors.
    pub sigma_used: SymMatrix,
    pub tau: f64,
    /// `sqrt(sigma_jj / (N tau))`.
    pub se: Vec<f64>,
    pub n_total: u64,
    pub iterations: usize,
    /// Norm of the estimating function at `theta_hat`.
    pub residual_norm: f64,
}

/// Left-hand side of the Huber estimating equations at `theta`, given the
/// whitening matrix `whiten = sigma^{-1/2}`.
pub fn huber_estimating_function(
    estimates: &[LocalEstimate],
    whiten: &SymMatrix,
    theta: &DVector<f64>,
    c: f64,
) -> Result<DVector<f64>> {
    let (sorted, p) = sorted_estimates(estimates)?;
    if theta.len() != p || whiten.dim() != p {
        return Err(Error::Dimension("theta / whitening matrix dimension mismatch".into()));
    }
    Ok(estimating_function(&sorted, whiten.as_matrix(), theta, c))
}

fn estimating_function(sorted: &[&LocalEstimate], whiten: &DMatrix<f64>, theta: &DVector<f64>, c: f64) -> DVector<f64> {
    let n_total = total_size(sorted) as f64;
    let mut g = DVector::zeros(theta.len());
    for est in sorted {
        let root_n = (est.n_k as f64).sqrt();
        let u = whiten * (&est.theta_star - theta) * root_n;
        let coef = root_n / n_total;
        for j in 0..g.len() {
            g[j] += coef * huber_psi(u[j], c);
        }
    }
    g
}

/// Solves the Huber-type estimating equations for the aggregate.
///
/// `sigma_hat` must be positive definite; repair it with
/// [`crate::numkit::pd_project`] first if needed.
pub fn huber_aggregate(
    estimates: &[LocalEstimate],
    sigma_hat: &SymMatrix,
    config: &HuberConfig,
) -> Result<AggregationResult> {
    if !(config.c > 0.0) {
        return Err(Error::Config(format!("Huber constant c must be positive, got {}", config.c)));
    }
    let (sorted, p) = sorted_estimates(estimates)?;
    if sigma_hat.dim() != p {
        return Err(Error::Dimension(format!(
            "sigma_hat is {}x{}, estimates have dimension {p}",
            sigma_hat.dim(),
            sigma_hat.dim()
        )));
    }
    let whiten = inv_sqrt_pd(sigma_hat)?;
    let n_total = total_size(&sorted);
    let tau = tau_c(config.c);

    if config.c.is_infinite() {
        let (theta, _) = weighted_average(estimates)?;
        let residual_norm = estimating_function(&sorted, whiten.as_matrix(), &theta, config.c).norm();
        return Ok(AggregationResult {
            se: standard_errors(sigma_hat, n_total, tau)?,
            theta_hat: theta,
            sigma_used: sigma_hat.clone(),
            tau,
            n_total,
            iterations: 0,
            residual_norm,
        });
    }

    let root_n: Vec<f64> = sorted.iter().map(|e| (e.n_k as f64).sqrt()).collect();
    let whitened: Vec<DVector<f64>> = sorted.iter().map(|e| whiten.as_matrix() * &e.theta_star).collect();

    let coord_median = DVector::from_iterator(
        p,
        (0..p).map(|j| {
            let vals: Vec<f64> = sorted.iter().map(|e| e.theta_star[j]).collect();
            weighted_median(&vals, &vec![1.0; vals.len()])
        }),
    );
    let start = whiten.as_matrix() * coord_median;

    let coord_tol = config.tol / (10.0 * (p as f64).sqrt());
    let mut z = DVector::zeros(p);
    let mut iterations = 0;
    for j in 0..p {
        let a: Vec<f64> = whitened.iter().map(|w| w[j]).collect();
        let scalar = ScalarHuber { a: &a, root_n: &root_n, n_total: n_total as f64, c: config.c };
        let (root, iters) = scalar.solve(start[j], coord_tol, config.max_iter)?;
        z[j] = root;
        iterations = iterations.max(iters);
    }

    let floor = 16.0 * f64::EPSILON * z.amax() * (p as f64).sqrt();
    let theta = sqrt_pd(sigma_hat)?.as_matrix() * z;
    let residual_norm = estimating_function(&sorted, whiten.as_matrix(), &theta, config.c).norm();
    if !(residual_norm <= config.tol.max(floor)) {
        return Err(Error::NoConvergence {
            solver: "Huber estimating equations",
            iterations,
            residual: residual_norm,
            best_iterate: theta.iter().copied().collect(),
        });
    }
    Ok(AggregationResult {
        se: standard_errors(sigma_hat, n_total, tau)?,
        theta_hat: theta,
        sigma_used: sigma_hat.clone(),
        tau,
        n_total,
        iterations,
        residual_norm,
    })
}

/// One whitened coordinate: `g(z) = sum_k (sqrt(n_k)/N) psi_c(sqrt(n_k) (a_k - z))`,
/// continuous and non-increasing in `z`.
struct ScalarHuber<'a> {
    a: &'a [f64],
    root_n: &'a [f64],
    n_total: f64,
    c: f64,
}

impl ScalarHuber<'_> {
    /// Value and (negated) slope at `z`.
    fn eval(&self, z: f64) -> (f64, f64) {
        let mut g = 0.0;
        let mut slope = 0.0;
        for (&a, &r) in self.a.iter().zip(self.root_n) {
            let u = r * (a - z);
            g += r / self.n_total * huber_psi(u, self.c);
            if u.abs() <= self.c {
                slope += r * r / self.n_total;
            }
        }
        (g, slope)
    }

    fn solve(&self, start: f64, tol: f64, max_iter: usize) -> Result<(f64, usize)> {
        // g >= 0 at the smallest input and <= 0 at the largest.
        let mut lo = self.a.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = self.a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = start.clamp(lo, hi);
        let mut best = (f64::INFINITY, z);
        let mut prev_abs = f64::INFINITY;
        for iter in 0..max_iter {
            let (g, slope) = self.eval(z);
            if g.abs() < best.0 {
                best = (g.abs(), z);
            }
            if g.abs() <= tol {
                return Ok((z, iter));
            }
            if g > 0.0 {
                lo = z;
            } else {
                hi = z;
            }
            if hi - lo <= 4.0 * f64::EPSILON * lo.abs().max(hi.abs()) {
                return Ok((best.1, iter));
            }
            let newton = if slope > 0.0 { z + g / slope } else { f64::NAN };
            let bisect = 0.5 * (lo + hi);
            // Newton is trusted while it at least halves |g|.
            let contracting = prev_abs.is_infinite() || g.abs() <= 0.5 * prev_abs;
            z = if newton > lo && newton < hi && contracting { newton } else { bisect };
            prev_abs = g.abs();
        }
        Err(Error::NoConvergence {
            solver: "Huber estimating equations",
            iterations: max_iter,
            residual: best.0,
            best_iterate: vec![best.1],
        })
    }
}

/// `SE_j = sqrt(sigma_jj / (N tau))`. Use `tau = 1` with the averaged
/// variance for the weighted-average aggregate.
pub fn standard_errors(sigma: &SymMatrix, n_total: u64, tau: f64) -> Result<Vec<f64>> {
    if n_total == 0 {
        return Err(Error::Domain("N must be >= 1".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Domain(format!("tau must lie in (0, 1], got {tau}")));
    }
    sigma
        .diagonal()
        .into_iter()
        .enumerate()
        .map(|(j, d)| {
            if d > 0.0 && d.is_finite() {
                Ok((d / (n_total as f64 * tau)).sqrt())
            } else {
                Err(Error::Domain(format!("variance diagonal entry {j} is {d}, must be positive")))
            }
        })
        .collect()
}
