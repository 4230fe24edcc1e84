//! Local M-estimation: logistic and linear regression criteria, the local
//! fit each server runs on its shard, and the sandwich variance estimator
//! `U^{-1} V U^{-1}` that servers transmit alongside their estimate.
//!
//! All sums run left to right over the observation slice so results are
//! reproducible bit-for-bit for a given ordering.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numkit::{sym_eig, SymMatrix};

/// One data point `Z = (y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: f64,
    pub x: Vec<f64>,
}

impl Observation {
    pub fn new(y: f64, x: Vec<f64>) -> Self {
        Observation { y, x }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Bernoulli log-likelihood with logit link.
    Logistic,
    /// `m(Z; theta) = -(y - x^T theta)^2`.
    Linear,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "logistic" => Ok(ModelKind::Logistic),
            "linear" => Ok(ModelKind::Linear),
            other => Err(Error::Config(format!("unknown model `{other}` (expected logistic or linear)"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An M-estimation problem of dimension `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub p: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::Domain("parameter dimension must be >= 1".into()));
        }
        Ok(ModelSpec { kind, p })
    }

    pub fn logistic(p: usize) -> Result<Self> {
        Self::new(ModelKind::Logistic, p)
    }

    pub fn linear(p: usize) -> Result<Self> {
        Self::new(ModelKind::Linear, p)
    }

    /// Checks dimensions, finiteness and (for logistic) binary responses.
    pub fn validate(&self, data: &[Observation]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Domain("no observations".into()));
        }
        for (i, obs) in data.iter().enumerate() {
            if obs.x.len() != self.p {
                return Err(Error::Dimension(format!(
                    "observation {i} has {} covariates, model expects {}",
                    obs.x.len(),
                    self.p
                )));
            }
            if !obs.y.is_finite() || obs.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("observation {i} has a non-finite entry")));
            }
            if self.kind == ModelKind::Logistic && obs.y != 0.0 && obs.y != 1.0 {
                return Err(Error::Domain(format!("observation {i}: logistic response must be 0 or 1, got {}", obs.y)));
            }
        }
        Ok(())
    }

    /// Upper bound on `|d2m/deta2|`.
    fn max_curvature(&self) -> f64 {
        match self.kind {
            ModelKind::Logistic => 0.25,
            ModelKind::Linear => 2.0,
        }
    }

    /// Per-observation `(m, dm/deta, d2m/deta2)` at linear predictor `eta`.
    /// Gradient and Hessian of `m` in `theta` are `dm * x` and `d2m * x x^T`.
    fn terms(&self, y: f64, eta: f64) -> (f64, f64, f64) {
        match self.kind {
            ModelKind::Logistic => {
                let (prob, var) = sigmoid_and_variance(eta);
                (y * eta - log1pexp(eta), y - prob, -var)
            }
            ModelKind::Linear => {
                let r = y - eta;
                (-r * r, 2.0 * r, -2.0)
            }
        }
    }
}

fn log1pexp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// `(sigma(eta), sigma(eta) (1 - sigma(eta)))`, branching on the sign of eta.
fn sigmoid_and_variance(eta: f64) -> (f64, f64) {
    let e = (-eta.abs()).exp();
    let denom = 1.0 + e;
    let prob = if eta >= 0.0 { 1.0 / denom } else { e / denom };
    (prob, e / (denom * denom))
}

fn dot(x: &[f64], theta: &DVector<f64>) -> f64 {
    x.iter().zip(theta.iter()).map(|(a, b)| a * b).sum()
}

/// Averaged criterion with its exact gradient and Hessian.
#[derive(Debug, Clone)]
pub struct CriterionEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: SymMatrix,
}

/// `n^{-1} sum m(Z_i; theta)` with analytic first and second derivatives.
pub fn criterion_eval(model: &ModelSpec, data: &[Observation], theta: &DVector<f64>) -> Result<CriterionEval> {
    model.validate(data)?;
    check_theta(model, theta)?;
    Ok(eval_unchecked(model, data, theta))
}

fn check_theta(model: &ModelSpec, theta: &DVector<f64>) -> Result<()> {
    if theta.len() != model.p {
        return Err(Error::Dimension(format!("theta has length {}, model expects {}", theta.len(), model.p)));
    }
    Ok(())
}

fn eval_unchecked(model: &ModelSpec, data: &[Observation], theta: &DVector<f64>) -> CriterionEval {
    let p = model.p;
    let mut value = 0.0;
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);
    for obs in data {
        let (m, dm, d2m) = model.terms(obs.y, dot(&obs.x, theta));
        value += m;
        for j in 0..p {
            grad[j] += dm * obs.x[j];
            for i in j..p {
                hess[(i, j)] += d2m * obs.x[i] * obs.x[j];
            }
        }
    }
    let n = data.len() as f64;
    for j in 0..p {
        for i in j..p {
            hess[(j, i)] = hess[(i, j)];
        }
    }
    CriterionEval { value: value / n, gradient: grad / n, hessian: SymMatrix::new(hess / n).expect("mirrored above") }
}

fn criterion_value(model: &ModelSpec, data: &[Observation], theta: &DVector<f64>) -> f64 {
    let total: f64 = data.iter().map(|obs| model.terms(obs.y, dot(&obs.x, theta)).0).sum();
    total / data.len() as f64
}

/// Newton solver settings for [`fit_local`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Convergence threshold on the Euclidean norm of the averaged gradient.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { tol: 1e-10, max_iter: 100 }
    }
}

/// Result of a local fit on one server's shard.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub server_id: u32,
    pub n_k: u64,
    pub theta_hat: DVector<f64>,
    /// Sandwich variance at `theta_hat`.
    pub sigma_hat: SymMatrix,
    /// False for degenerate shards whose sandwich is not numerically
    /// positive definite (e.g. a linear fit with exactly zero residuals).
    pub sigma_positive_definite: bool,
    pub newton_iters: usize,
    pub grad_norm: f64,
}

/// Relative eigenvalue floor below which a design or Hessian counts as singular.
const RANK_TOL: f64 = 1e-13;

fn is_singular(m: &SymMatrix) -> Result<bool> {
    let eig = sym_eig(m)?;
    let hi = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let lo = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &l| a.min(l.abs()));
    Ok(hi == 0.0 || lo <= RANK_TOL * hi)
}

/// Maximizes the local criterion on `data`: closed-form least squares for
/// the linear model, Newton-Raphson with step halving for logistic.
pub fn fit_local(server_id: u32, model: &ModelSpec, data: &[Observation], opts: &FitOptions) -> Result<LocalFit> {
    model.validate(data)?;
    if data.len() < model.p {
        return Err(Error::Singular(format!("{} observations cannot identify {} parameters", data.len(), model.p)));
    }
    let (theta, iters, grad_norm) = match model.kind {
        ModelKind::Linear => fit_linear(model, data, opts)?,
        ModelKind::Logistic => fit_logistic(model, data, opts)?,
    };
    let sandwich = sandwich_variance(model, data, &theta)?;
    Ok(LocalFit {
        server_id,
        n_k: data.len() as u64,
        theta_hat: theta,
        sigma_hat: sandwich.sigma,
        sigma_positive_definite: sandwich.positive_definite,
        newton_iters: iters,
        grad_norm,
    })
}

fn fit_linear(model: &ModelSpec, data: &[Observation], opts: &FitOptions) -> Result<(DVector<f64>, usize, f64)> {
    let p = model.p;
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for obs in data {
        for j in 0..p {
            xty[j] += obs.x[j] * obs.y;
            for i in 0..p {
                xtx[(i, j)] += obs.x[i] * obs.x[j];
            }
        }
    }
    let gram = SymMatrix::new(xtx)?;
    if is_singular(&gram)? {
        return Err(Error::Singular("design matrix is rank deficient".into()));
    }
    let chol = nalgebra::Cholesky::new(gram.as_matrix().clone())
        .ok_or_else(|| Error::Singular("design matrix is rank deficient".into()))?;
    let mut theta = chol.solve(&xty);

    // Newton refinement on the quadratic criterion mops up rounding error.
    let mut iters = 0;
    loop {
        let eval = eval_unchecked(model, data, &theta);
        let gnorm = eval.gradient.norm();
        if gnorm <= opts.tol {
            return Ok((theta, iters, gnorm));
        }
        if iters >= 3.min(opts.max_iter) {
            return Err(Error::NoConvergence {
                solver: "least-squares refinement",
                iterations: iters,
                residual: gnorm,
                best_iterate: theta.iter().copied().collect(),
            });
        }
        // hessian = -2 X^T X / n
        theta += chol.solve(&eval.gradient) * (data.len() as f64 / 2.0);
        iters += 1;
    }
}

fn fit_logistic(model: &ModelSpec, data: &[Observation], opts: &FitOptions) -> Result<(DVector<f64>, usize, f64)> {
    let ones = data.iter().filter(|o| o.y == 1.0).count();
    if ones == 0 || ones == data.len() {
        return Err(Error::Separation { iterations: 0 });
    }
    let mut theta = DVector::zeros(model.p);
    let mut last_step = f64::INFINITY;
    let mut stalled = 0usize;
    let mut gnorm = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let eval = eval_unchecked(model, data, &theta);
        gnorm = eval.gradient.norm();
        if saturated(model, data, &theta) {
            return Err(Error::Separation { iterations: iter });
        }
        if gnorm <= opts.tol {
            return Ok((theta, iter, gnorm));
        }
        let info = eval.hessian.scaled(-1.0);
        let step = match nalgebra::Cholesky::new(info.as_matrix().clone()) {
            Some(chol) if !is_singular(&info)? => chol.solve(&eval.gradient),
            _ if theta.norm() > 10.0 => return Err(Error::Separation { iterations: iter }),
            _ => return Err(Error::Singular("logistic information matrix is singular".into())),
        };

        let mut t = 1.0;
        let mut candidate = &theta + &step;
        // Close to the optimum the gain is below rounding in the criterion,
        // so allow a rounding-sized decrease before halving.
        let floor = eval.value - 1e-13 * (1.0 + eval.value.abs());
        while criterion_value(model, data, &candidate) < floor && t > 1e-10 {
            t *= 0.5;
            candidate = &theta + &step * t;
        }
        let step_norm = t * step.norm();
        // Newton contracts quadratically near an interior maximum; steps
        // that stay large while theta runs off signal separation.
        if step_norm >= 0.5 * last_step && theta.norm() > 10.0 {
            stalled += 1;
            if stalled >= 5 {
                return Err(Error::Separation { iterations: iter });
            }
        } else {
            stalled = 0;
        }
        last_step = step_norm;
        theta = candidate;
    }
    let eval = eval_unchecked(model, data, &theta);
    gnorm = gnorm.min(eval.gradient.norm());
    if eval.gradient.norm() <= opts.tol {
        return Ok((theta, opts.max_iter, eval.gradient.norm()));
    }
    Err(Error::NoConvergence {
        solver: "logistic Newton-Raphson",
        iterations: opts.max_iter,
        residual: gnorm,
        best_iterate: theta.iter().copied().collect(),
    })
}

/// True when every fitted probability is within 1e-12 of 0 or 1.
fn saturated(model: &ModelSpec, data: &[Observation], theta: &DVector<f64>) -> bool {
    model.kind == ModelKind::Logistic && data.iter().all(|obs| sigmoid_and_variance(dot(&obs.x, theta)).1 < 1e-12)
}

/// Sandwich estimate with a flag for positive definiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    pub sigma: SymMatrix,
    pub positive_definite: bool,
}

/// `U^{-1} V U^{-1}` with `U = -hessian` and `V` the centred outer-product
/// average of per-observation gradients, all evaluated at `theta`.
pub fn sandwich_variance(model: &ModelSpec, data: &[Observation], theta: &DVector<f64>) -> Result<Sandwich> {
    model.validate(data)?;
    check_theta(model, theta)?;
    let (u, v) = sandwich_parts(model, data, theta);
    if is_singular(&u)? {
        return Err(Error::Singular("U = -hessian is singular at the supplied theta".into()));
    }
    let u_inv = u
        .as_matrix()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("U = -hessian is singular at the supplied theta".into()))?;
    finish_sandwich(&u_inv, &v)
}

/// As [`sandwich_variance`], but a singular `U` is inverted with the
/// Moore-Penrose pseudo-inverse instead of failing. Used for payloads
/// evaluated at corrupted parameters, where `U` can vanish numerically.
///
/// Eigenvalues of `U` are treated as zero when they fall below `1e-13` times
/// the largest information the design can carry (the curvature bound of `m`
/// times the top eigenvalue of `X^T X / n`), not times the top eigenvalue of
/// `U` itself: far from the data every eigenvalue of `U` is rounding noise.
pub fn sandwich_variance_pinv(model: &ModelSpec, data: &[Observation], theta: &DVector<f64>) -> Result<Sandwich> {
    model.validate(data)?;
    check_theta(model, theta)?;
    let (u, v) = sandwich_parts(model, data, theta);
    let eig = sym_eig(&u)?;
    let cutoff = RANK_TOL * model.max_curvature() * design_scale(model.p, data)?;
    let u_pinv = eig.map_spectrum(|l| if l.abs() > cutoff { 1.0 / l } else { 0.0 });
    finish_sandwich(u_pinv.as_matrix(), &v)
}

/// Largest eigenvalue of `X^T X / n`.
fn design_scale(p: usize, data: &[Observation]) -> Result<f64> {
    let mut gram = DMatrix::zeros(p, p);
    for obs in data {
        for j in 0..p {
            for i in j..p {
                gram[(i, j)] += obs.x[i] * obs.x[j];
            }
        }
    }
    for j in 0..p {
        for i in j..p {
            gram[(j, i)] = gram[(i, j)];
        }
    }
    let gram = SymMatrix::new(gram / data.len() as f64)?;
    Ok(sym_eig(&gram)?.eigenvalues[0])
}

fn sandwich_parts(model: &ModelSpec, data: &[Observation], theta: &DVector<f64>) -> (SymMatrix, SymMatrix) {
    let p = model.p;
    let n = data.len() as f64;
    let dms: Vec<f64> = data.iter().map(|obs| model.terms(obs.y, dot(&obs.x, theta)).1).collect();

    let mut mean_grad = DVector::zeros(p);
    for (obs, dm) in data.iter().zip(&dms) {
        for j in 0..p {
            mean_grad[j] += dm * obs.x[j];
        }
    }
    mean_grad /= n;

    let mut v = DMatrix::zeros(p, p);
    let mut centred = vec![0.0; p];
    for (obs, dm) in data.iter().zip(&dms) {
        for j in 0..p {
            centred[j] = dm * obs.x[j] - mean_grad[j];
        }
        for j in 0..p {
            for i in j..p {
                v[(i, j)] += centred[i] * centred[j];
            }
        }
    }
    for j in 0..p {
        for i in j..p {
            v[(j, i)] = v[(i, j)];
        }
    }
    let u = eval_unchecked(model, data, theta).hessian.scaled(-1.0);
    (u, SymMatrix::new(v / n).expect("mirrored above"))
}

fn finish_sandwich(u_inv: &DMatrix<f64>, v: &SymMatrix) -> Result<Sandwich> {
    let sigma = SymMatrix::symmetrize(&(u_inv * v.as_matrix() * u_inv))?;
    let positive_definite = sigma.as_matrix().iter().all(|x| x.is_finite()) && sigma.min_eigenvalue()? > 0.0;
    Ok(Sandwich { sigma, positive_definite })
}
