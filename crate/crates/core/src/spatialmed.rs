//! Weighted spatial median and its use for aggregating variance matrices.
//!
//! The spatial median minimises `L(eta) = sum_k w_k ||x_k - eta||_2`. We run
//! Weiszfeld's iteration with the Vardi-Zhang correction for iterates that
//! coincide with a data point, and take a Newton step on `L` instead whenever
//! that step lowers the objective further (it usually does once the iterate is
//! close, turning the linear Weiszfeld rate into a quadratic one).
//!
//! Variance matrices are aggregated on their half-vectorisations with weights
//! `sqrt(n_k)`. Inputs that are asymmetric or not positive definite are first
//! symmetrized and clipped to eigenvalues `>= eps`; because the median lies in
//! the convex hull of the inputs, the result is then positive definite.

use nalgebra::{DMatrix, DVector};

use crate::aggregate::{sorted_estimates, LocalEstimate};
use crate::error::{Error, Result};
use crate::numkit::{pd_project, vech, vech_inv, weighted_median, SymMatrix, PD_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPoint {
    pub value: DVector<f64>,
    pub weight: f64,
}

impl WeightedPoint {
    pub fn new(value: DVector<f64>, weight: f64) -> Self {
        WeightedPoint { value, weight }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMedianResult {
    pub eta: DVector<f64>,
    pub iterations: usize,
    /// `sum_k w_k ||x_k - eta||` at `eta`.
    pub objective: f64,
    /// True when `eta` coincides with an input point.
    pub anchored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialMedianConfig {
    /// Bound on `||sum_k w_k u_k|| / sum_k w_k`, where `u_k` are unit vectors
    /// from the iterate to the non-coincident points.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SpatialMedianConfig {
    fn default() -> Self {
        SpatialMedianConfig { tol: 1e-10, max_iter: 500 }
    }
}

/// Weighted objective `sum_k w_k ||x_k - eta||`.
pub fn spatial_objective(points: &[WeightedPoint], eta: &DVector<f64>) -> f64 {
    points.iter().map(|pt| pt.weight * safe_norm(&(&pt.value - eta))).sum()
}

/// Euclidean norm that does not overflow for entries beyond `1e154`.
fn safe_norm(v: &DVector<f64>) -> f64 {
    let scale = v.amax();
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * (v / scale).norm()
}

fn coincides(x: &DVector<f64>, dist: f64) -> bool {
    dist <= 1e-12 * (1.0 + safe_norm(x))
}

struct Local {
    /// Sum of weighted unit vectors towards non-coincident points.
    pull: DVector<f64>,
    /// Total weight of points coinciding with the iterate.
    anchor_weight: f64,
    weiszfeld: Option<DVector<f64>>,
    hessian: DMatrix<f64>,
}

fn local_terms(points: &[WeightedPoint], y: &DVector<f64>) -> Local {
    let d = y.len();
    let mut pull = DVector::zeros(d);
    let mut anchor_weight = 0.0;
    let mut num = DVector::zeros(d);
    let mut den = 0.0;
    let mut hessian = DMatrix::zeros(d, d);
    for pt in points {
        let diff = &pt.value - y;
        let dist = safe_norm(&diff);
        if coincides(&pt.value, dist) {
            anchor_weight += pt.weight;
            continue;
        }
        let unit = &diff / dist;
        pull.axpy(pt.weight, &unit, 1.0);
        num.axpy(pt.weight / dist, &pt.value, 1.0);
        den += pt.weight / dist;
        let scale = pt.weight / dist;
        hessian += (DMatrix::identity(d, d) - &unit * unit.transpose()) * scale;
    }
    Local { pull, anchor_weight, weiszfeld: (den > 0.0).then(|| num / den), hessian }
}

/// Minimiser of `sum_k w_k ||x_k - eta||_2`.
pub fn spatial_median(points: &[WeightedPoint], config: &SpatialMedianConfig) -> Result<SpatialMedianResult> {
    let first = points.first().ok_or_else(|| Error::Domain("spatial median of an empty set".into()))?;
    let d = first.value.len();
    if d == 0 {
        return Err(Error::Dimension("points must have dimension >= 1".into()));
    }
    for (k, pt) in points.iter().enumerate() {
        if pt.value.len() != d {
            return Err(Error::Dimension(format!("point {k} has dimension {}, expected {d}", pt.value.len())));
        }
        if !(pt.weight > 0.0 && pt.weight.is_finite()) || pt.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("point {k} has a non-finite entry or non-positive weight")));
        }
    }
    let total_weight: f64 = points.iter().map(|pt| pt.weight).sum();
    let weights: Vec<f64> = points.iter().map(|pt| pt.weight).collect();

    let mut y = DVector::from_iterator(
        d,
        (0..d).map(|j| {
            let vals: Vec<f64> = points.iter().map(|pt| pt.value[j]).collect();
            weighted_median(&vals, &weights)
        }),
    );
    let mut best = (f64::INFINITY, y.clone());

    for iter in 0..config.max_iter {
        let local = local_terms(points, &y);
        let r = local.pull.norm();
        if local.anchor_weight > 0.0 && r <= local.anchor_weight {
            return Ok(SpatialMedianResult {
                objective: spatial_objective(points, &y),
                eta: y,
                iterations: iter,
                anchored: true,
            });
        }
        let foc = r / total_weight;
        if local.anchor_weight == 0.0 && foc <= config.tol {
            return Ok(SpatialMedianResult {
                objective: spatial_objective(points, &y),
                eta: y,
                iterations: iter,
                anchored: false,
            });
        }
        if foc < best.0 {
            best = (foc, y.clone());
        }
        // Iterates creep towards a minimizer that sits on a data point
        // without ever reaching it; test the nearest point directly.
        if local.anchor_weight == 0.0 {
            let nearest = points
                .iter()
                .min_by(|a, b| safe_norm(&(&a.value - &y)).total_cmp(&safe_norm(&(&b.value - &y))))
                .expect("non-empty");
            let at = local_terms(points, &nearest.value);
            if at.pull.norm() <= at.anchor_weight {
                return Ok(SpatialMedianResult {
                    objective: spatial_objective(points, &nearest.value),
                    eta: nearest.value.clone(),
                    iterations: iter + 1,
                    anchored: true,
                });
            }
        }

        let Some(t) = local.weiszfeld else {
            break;
        };
        // Vardi-Zhang: step partially away from an occupied data point.
        let candidate = if local.anchor_weight > 0.0 {
            let gamma = (local.anchor_weight / r).min(1.0);
            &t * (1.0 - gamma) + &y * gamma
        } else {
            t
        };
        let mut next = candidate;
        if local.anchor_weight == 0.0 {
            if let Some(chol) = nalgebra::Cholesky::new(local.hessian.clone()) {
                let newton = &y + chol.solve(&local.pull);
                let f_newton = spatial_objective(points, &newton);
                let f_weisz = spatial_objective(points, &next);
                let slack = 1e-14 * f_weisz.abs();
                let take_newton = if f_newton < f_weisz - slack {
                    true
                } else if f_newton > f_weisz + slack {
                    false
                } else {
                    local_terms(points, &newton).pull.norm() < local_terms(points, &next).pull.norm()
                };
                if take_newton && newton.iter().all(|v| v.is_finite()) {
                    next = newton;
                }
            }
            // On long, nearly flat stretches both steps are far too short.
            // L is convex, so keep doubling the step while L falls by more
            // than rounding noise.
            let step = &next - &y;
            let mut f_next = spatial_objective(points, &next);
            let mut scale = 1.0;
            for _ in 0..60 {
                scale *= 2.0;
                let longer = &y + &step * scale;
                let f_longer = spatial_objective(points, &longer);
                if !(f_longer < f_next - 1e-14 * f_next.abs()) {
                    break;
                }
                next = longer;
                f_next = f_longer;
            }
        }
        y = next;
    }
    Err(Error::NoConvergence {
        solver: "spatial median",
        iterations: config.max_iter,
        residual: best.0,
        best_iterate: best.1.iter().copied().collect(),
    })
}

/// Robust variance aggregate plus the ids of servers whose matrices had to
/// be repaired before aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaAggregate {
    pub sigma: SymMatrix,
    pub repaired: Vec<u32>,
    pub median: SpatialMedianResult,
}

/// Symmetrizes and eigen-clips `m` unless it is already symmetric and
/// positive definite. Returns the matrix and whether it changed.
pub fn repair_sigma(m: &DMatrix<f64>, eps: f64) -> Result<(SymMatrix, bool)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("variance matrix has non-finite entries".into()));
    }
    let sym = SymMatrix::symmetrize(m)?;
    let symmetric = sym.as_matrix() == m;
    if symmetric && sym.min_eigenvalue()? > 0.0 {
        return Ok((sym, false));
    }
    Ok((pd_project(&sym, eps)?, true))
}

/// Spatial-median aggregate of the transmitted variance matrices.
pub fn aggregate_sigma(estimates: &[LocalEstimate], eps: f64, config: &SpatialMedianConfig) -> Result<SymMatrix> {
    aggregate_sigma_detailed(estimates, eps, config).map(|agg| agg.sigma)
}

pub fn aggregate_sigma_detailed(
    estimates: &[LocalEstimate],
    eps: f64,
    config: &SpatialMedianConfig,
) -> Result<SigmaAggregate> {
    let (sorted, p) = sorted_estimates(estimates)?;
    let mut repaired = Vec::new();
    let mut points = Vec::with_capacity(sorted.len());
    for est in &sorted {
        let (sym, changed) =
            repair_sigma(&est.sigma_star, eps).map_err(|e| Error::Domain(format!("server {}: {e}", est.server_id)))?;
        if changed {
            repaired.push(est.server_id);
        }
        points.push(WeightedPoint::new(DVector::from_vec(vech(&sym)), (est.n_k as f64).sqrt()));
    }
    let median = spatial_median(&points, config)?;
    let sigma = vech_inv(median.eta.as_slice(), p)?;
    let min_eig = sigma.min_eigenvalue()?;
    if !(min_eig > 0.0) {
        return Err(Error::NotPositiveDefinite { eigenvalue: min_eig });
    }
    Ok(SigmaAggregate { sigma, repaired, median })
}

/// [`aggregate_sigma`] with the default floor `eps = 1e-5` and solver settings.
pub fn aggregate_sigma_default(estimates: &[LocalEstimate]) -> Result<SymMatrix> {
    aggregate_sigma(estimates, PD_EPS, &SpatialMedianConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pt(v: &[f64], w: f64) -> WeightedPoint {
        WeightedPoint::new(DVector::from_column_slice(v), w)
    }

    #[test]
    fn identical_points_anchor() {
        let pts = vec![pt(&[1.0, -2.0], 1.0); 4];
        let r = spatial_median(&pts, &SpatialMedianConfig::default()).unwrap();
        assert_eq!(r.eta.as_slice(), &[1.0, -2.0]);
        assert!(r.anchored);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn one_dimensional_median_matches_grid_oracle() {
        let pts = [pt(&[0.0], 1.0), pt(&[1.0], 1.0), pt(&[10.0], 1.0)];
        let r = spatial_median(&pts, &SpatialMedianConfig::default()).unwrap();
        // piecewise-linear objective on a fine grid
        let grid_best = (0..=100_000)
            .map(|i| -5.0 + i as f64 * 2e-4)
            .map(|e| (spatial_objective(&pts, &DVector::from_element(1, e)), e))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        assert_abs_diff_eq!(grid_best.1, 1.0, epsilon = 2e-4);
        assert_eq!(r.eta[0], 1.0);
        assert!(r.anchored);
    }

    #[test]
    fn equilateral_triangle_gives_centroid() {
        let h = 3f64.sqrt() / 2.0;
        let pts = [pt(&[0.0, 0.0], 1.0), pt(&[1.0, 0.0], 1.0), pt(&[0.5, h], 1.0)];
        let r = spatial_median(&pts, &SpatialMedianConfig::default()).unwrap();
        assert_abs_diff_eq!(r.eta[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(r.eta[1], h / 3.0, epsilon = 1e-9);
        assert!(!r.anchored);
    }

    #[test]
    fn heavy_point_wins() {
        let pts = [pt(&[3.0, 4.0], 10.0), pt(&[-1.0, 0.5], 1.0)];
        let r = spatial_median(&pts, &SpatialMedianConfig::default()).unwrap();
        assert_eq!(r.eta.as_slice(), &[3.0, 4.0]);
        assert!(r.anchored);
    }

    #[test]
    fn two_equal_points_return_midpoint() {
        let pts = [pt(&[0.0, 0.0], 2.0), pt(&[2.0, 4.0], 2.0)];
        let r = spatial_median(&pts, &SpatialMedianConfig::default()).unwrap();
        assert_eq!(r.eta.as_slice(), &[1.0, 2.0]);
        assert!(!r.anchored);
    }

    #[test]
    fn far_outliers_on_a_flat_ridge() {
        // Two remote points outweigh two nearby ones only slightly, so L is
        // almost linear over a path of length ~1e6 towards the minimiser.
        let pts = [
            pt(&[633077.0, -91486.6, -341202.2, 756380.9, 191964.4, 335254.4], 37.88),
            pt(&[876218.2, 0.0, 0.0, 469617.1, 0.0, 1e-5], 39.46),
            pt(&[0.2, 0.0, 0.0, 0.2, 0.0, 0.2], 40.02),
            pt(&[0.2, 0.0, 0.0, 0.2, 0.0, 0.95], 34.18),
        ];
        let r = spatial_median(&pts, &SpatialMedianConfig::default()).unwrap();
        assert!(r.iterations < 100, "{} iterations", r.iterations);
        let pull = local_terms(&pts, &r.eta).pull.norm();
        assert!(pull <= 1e-10 * pts.iter().map(|p| p.weight).sum::<f64>());
    }

    #[test]
    fn anchoring_away_from_a_data_point() {
        // Start (coordinate-wise median) lands on (0,0), which is not optimal.
        let pts = [
            pt(&[0.0, 0.0], 1.0),
            pt(&[4.0, 0.1], 1.0),
            pt(&[4.0, -0.1], 1.0),
            pt(&[-0.1, 4.0], 1.0),
            pt(&[0.1, 4.0], 1.0),
        ];
        let r = spatial_median(&pts, &SpatialMedianConfig::default()).unwrap();
        let f = r.objective;
        for dx in [-1e-4, 1e-4] {
            for dy in [-1e-4, 1e-4] {
                let probe = &r.eta + DVector::from_vec(vec![dx, dy]);
                assert!(spatial_objective(&pts, &probe) >= f - 1e-12);
            }
        }
    }

    #[test]
    fn empty_and_bad_inputs() {
        assert!(matches!(spatial_median(&[], &SpatialMedianConfig::default()), Err(Error::Domain(_))));
        let bad = [pt(&[0.0], 1.0), pt(&[0.0, 1.0], 1.0)];
        assert!(matches!(spatial_median(&bad, &SpatialMedianConfig::default()), Err(Error::Dimension(_))));
        assert!(spatial_median(&[pt(&[0.0], 0.0)], &SpatialMedianConfig::default()).is_err());
    }

    fn sig_est(id: u32, n: u64, m: DMatrix<f64>) -> LocalEstimate {
        let p = m.nrows();
        LocalEstimate::new(id, n, DVector::zeros(p), m).unwrap()
    }

    #[test]
    fn aggregate_sigma_identical() {
        let ests: Vec<_> = (1..=5).map(|k| sig_est(k, 100 * k as u64, DMatrix::identity(2, 2))).collect();
        let s = aggregate_sigma_default(&ests).unwrap();
        assert_eq!(s, SymMatrix::identity(2));
    }

    #[test]
    fn aggregate_sigma_single_server_is_repaired_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let agg = aggregate_sigma_detailed(&[sig_est(4, 50, m)], PD_EPS, &SpatialMedianConfig::default()).unwrap();
        assert_abs_diff_eq!(agg.sigma.as_matrix(), SymMatrix::from_diagonal(&[1.0, 1e-5]).as_matrix(), epsilon = 1e-15);
        assert_eq!(agg.repaired, vec![4]);
    }

    #[test]
    fn aggregate_sigma_shrugs_off_non_pd_outlier() {
        let mut ests: Vec<_> = (1..=9).map(|k| sig_est(k, 100, DMatrix::identity(2, 2))).collect();
        ests.push(sig_est(10, 100, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])));
        let agg = aggregate_sigma_detailed(&ests, PD_EPS, &SpatialMedianConfig::default()).unwrap();
        assert_eq!(agg.repaired, vec![10]);
        assert!((agg.sigma.as_matrix() - DMatrix::<f64>::identity(2, 2)).norm() < 1e-3);
        assert!(agg.sigma.min_eigenvalue().unwrap() > 0.0);
    }

    #[test]
    fn asymmetric_input_is_symmetrized_before_clipping() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        let (s, changed) = repair_sigma(&m, PD_EPS).unwrap();
        assert!(changed);
        assert_eq!(s.get(0, 1), 0.5);
        assert_eq!(s.get(0, 0), 2.0);
        assert!(repair_sigma(&DMatrix::from_element(1, 1, f64::NAN), PD_EPS).is_err());
    }
}
