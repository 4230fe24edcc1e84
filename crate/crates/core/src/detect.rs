//! Two-step screening of transmitted estimates.
//!
//! Step 1 flags server `k` when the Mahalanobis distance of its estimate from
//! the robust aggregate, `d1 = sqrt(n_k (t_k - t)^T S^{-1} (t_k - t))`, exceeds
//! `sqrt(chi2_{p, alpha})`. Step 2 runs only for servers that pass step 1 and
//! repeats the test with the server's own variance matrix (`d2`). A variance
//! matrix that is not positive definite cannot come from an honest sandwich
//! estimate, so it is flagged outright.
//!
//! Thresholds are applied per server; no multiplicity correction across the
//! `K` simultaneous tests is made.

use std::fmt::Write as _;

use nalgebra::DVector;

use crate::aggregate::{sorted_estimates, LocalEstimate};
use crate::error::{Error, Result};
use crate::numkit::{chi2_quantile, SymMatrix};

pub const DEFAULT_ALPHA: f64 = 0.05;

fn check_dims(est: &LocalEstimate, theta_hat: &DVector<f64>) -> Result<()> {
    if est.p() != theta_hat.len() {
        return Err(Error::Dimension(format!(
            "server {} sent a length-{} estimate, aggregate has length {}",
            est.server_id,
            est.p(),
            theta_hat.len()
        )));
    }
    Ok(())
}

/// Distance of `est.theta_star` from `theta_hat` in the metric of `sigma_hat`.
pub fn mahalanobis_d1(est: &LocalEstimate, theta_hat: &DVector<f64>, sigma_hat: &SymMatrix) -> Result<f64> {
    check_dims(est, theta_hat)?;
    let diff = &est.theta_star - theta_hat;
    let q = sigma_hat.inverse_quadratic_form(&diff)?;
    Ok((est.n_k as f64 * q).sqrt())
}

/// As [`mahalanobis_d1`] with the server's own (symmetrized) variance
/// matrix. `Ok(None)` when that matrix is not positive definite.
pub fn mahalanobis_d2(est: &LocalEstimate, theta_hat: &DVector<f64>) -> Result<Option<f64>> {
    check_dims(est, theta_hat)?;
    if est.sigma_star.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    let own = SymMatrix::symmetrize(&est.sigma_star)?;
    let diff = &est.theta_star - theta_hat;
    match own.inverse_quadratic_form(&diff) {
        Ok(q) => Ok(Some((est.n_k as f64 * q).sqrt())),
        Err(Error::NotPositiveDefinite { .. } | Error::Singular(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerRecord {
    pub server_id: u32,
    pub n_k: u64,
    pub d1: Option<f64>,
    /// `None` when step 2 was skipped or the server's matrix is not PD.
    pub d2: Option<f64>,
    pub theta_flagged: bool,
    pub sigma_flagged: bool,
    /// Set when a distance could not be computed for this server.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    /// One record per server, in server-id order.
    pub records: Vec<ServerRecord>,
    pub alpha: f64,
    /// `sqrt(chi2_{p, alpha})`.
    pub threshold: f64,
    pub p: usize,
}

impl DetectionReport {
    pub fn theta_flagged(&self) -> Vec<u32> {
        self.records.iter().filter(|r| r.theta_flagged).map(|r| r.server_id).collect()
    }

    pub fn sigma_flagged(&self) -> Vec<u32> {
        self.records.iter().filter(|r| r.sigma_flagged).map(|r| r.server_id).collect()
    }

    /// `server_id,n_k,d1,d2,theta_flagged,sigma_flagged` with full-precision
    /// distances; absent distances are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("server_id,n_k,d1,d2,theta_flagged,sigma_flagged\n");
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:e}"));
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.server_id,
                r.n_k,
                fmt(r.d1),
                fmt(r.d2),
                r.theta_flagged,
                r.sigma_flagged
            );
        }
        out
    }
}

/// Runs both screening steps for every server.
pub fn detect(
    estimates: &[LocalEstimate],
    theta_hat: &DVector<f64>,
    sigma_hat: &SymMatrix,
    alpha: f64,
) -> Result<DetectionReport> {
    let (sorted, p) = sorted_estimates(estimates)?;
    if theta_hat.len() != p || sigma_hat.dim() != p {
        return Err(Error::Dimension(format!(
            "aggregate has dimension {} / {}, estimates have {p}",
            theta_hat.len(),
            sigma_hat.dim()
        )));
    }
    let threshold = chi2_quantile(p, alpha)?.sqrt();
    // Fail once, up front, rather than once per server.
    sigma_hat.inverse_pd()?;

    let records = sorted
        .iter()
        .map(|est| {
            let mut rec = ServerRecord {
                server_id: est.server_id,
                n_k: est.n_k,
                d1: None,
                d2: None,
                theta_flagged: false,
                sigma_flagged: false,
                error: None,
            };
            match mahalanobis_d1(est, theta_hat, sigma_hat) {
                Ok(d1) => {
                    rec.d1 = Some(d1);
                    rec.theta_flagged = d1 > threshold;
                }
                Err(e) => {
                    rec.error = Some(e.to_string());
                    return rec;
                }
            }
            if !rec.theta_flagged {
                match mahalanobis_d2(est, theta_hat) {
                    Ok(Some(d2)) => {
                        rec.d2 = Some(d2);
                        rec.sigma_flagged = d2 > threshold;
                    }
                    Ok(None) => rec.sigma_flagged = true,
                    Err(e) => rec.error = Some(e.to_string()),
                }
            }
            rec
        })
        .collect();

    Ok(DetectionReport { records, alpha, threshold, p })
}

/// The variance matrix of a server trusted to be uncontaminated, for use as
/// the reference metric in [`detect`] instead of the spatial-median aggregate.
pub fn trusted_server_sigma(estimates: &[LocalEstimate], server_id: u32) -> Result<SymMatrix> {
    let est = estimates
        .iter()
        .find(|e| e.server_id == server_id)
        .ok_or_else(|| Error::Domain(format!("no estimate from server {server_id}")))?;
    let sym = SymMatrix::symmetrize(&est.sigma_star)?;
    sym.inverse_pd()?;
    Ok(sym)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn est(id: u32, n: u64, theta: &[f64], sigma: DMatrix<f64>) -> LocalEstimate {
        LocalEstimate::new(id, n, DVector::from_column_slice(theta), sigma).unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn d1_examples() {
        let i2 = SymMatrix::identity(2);
        let e = est(1, 100, &[2.0, 1.0], DMatrix::identity(2, 2));
        assert_eq!(mahalanobis_d1(&e, &v(&[2.0, 1.0]), &i2).unwrap(), 0.0);

        let e = est(1, 100, &[0.1, 0.0], DMatrix::identity(2, 2));
        assert_abs_diff_eq!(mahalanobis_d1(&e, &v(&[0.0, 0.0]), &i2).unwrap(), 1.0, epsilon = 1e-14);

        // 4 * (1/4 + 1) = 5
        let e = est(1, 4, &[1.0, 1.0], DMatrix::identity(2, 2));
        let d = mahalanobis_d1(&e, &v(&[0.0, 0.0]), &SymMatrix::from_diagonal(&[4.0, 1.0])).unwrap();
        assert_abs_diff_eq!(d, 5f64.sqrt(), epsilon = 1e-14);

        assert!(mahalanobis_d1(&e, &v(&[0.0, 0.0]), &SymMatrix::from_diagonal(&[4.0, -1.0])).is_err());
    }

    #[test]
    fn d2_examples() {
        let e = est(1, 100, &[2.0, 1.0], DMatrix::identity(2, 2) * 3.0);
        assert_eq!(mahalanobis_d2(&e, &v(&[2.0, 1.0])).unwrap(), Some(0.0));

        let e = est(1, 100, &[0.1, 0.0], DMatrix::identity(2, 2));
        assert_abs_diff_eq!(mahalanobis_d2(&e, &v(&[0.0, 0.0])).unwrap().unwrap(), 1.0, epsilon = 1e-14);

        let e = est(1, 100, &[0.1, 0.0], DMatrix::identity(2, 2) * 4.0);
        assert_abs_diff_eq!(mahalanobis_d2(&e, &v(&[0.0, 0.0])).unwrap().unwrap(), 0.5, epsilon = 1e-14);

        let e = est(1, 100, &[0.1, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(mahalanobis_d2(&e, &v(&[0.0, 0.0])).unwrap(), None);
    }

    #[test]
    fn clean_servers_are_not_flagged() {
        let sigma = SymMatrix::from_row_slice(2, &[2.0, 0.3, 0.3, 1.0]).unwrap();
        let ests: Vec<_> = (1..=6).map(|k| est(k, 500, &[2.0, 1.0], sigma.as_matrix().clone())).collect();
        let rep = detect(&ests, &v(&[2.0, 1.0]), &sigma, 0.05).unwrap();
        assert!(rep.theta_flagged().is_empty());
        assert!(rep.sigma_flagged().is_empty());
        assert_abs_diff_eq!(rep.threshold, 5.991_464_547_107_98f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn gating_and_non_pd_sigma() {
        let i2 = DMatrix::identity(2, 2);
        let ests = vec![
            est(3, 100, &[-1e6, -1e6], DMatrix::zeros(2, 2)),
            est(1, 100, &[2.0, 1.0], i2.clone()),
            est(2, 4, &[2.5, 1.0], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])),
        ];
        let rep = detect(&ests, &v(&[2.0, 1.0]), &SymMatrix::identity(2), 0.05).unwrap();
        let ids: Vec<u32> = rep.records.iter().map(|r| r.server_id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        assert_eq!(rep.theta_flagged(), vec![3]);
        assert_eq!(rep.sigma_flagged(), vec![2]);
        // step 2 never runs for a server flagged in step 1
        assert_eq!(rep.records[2].d2, None);
        assert!(!rep.records[2].sigma_flagged);
        let csv = rep.to_csv();
        assert!(csv.starts_with("server_id,n_k,d1,d2,theta_flagged,sigma_flagged\n"));
        // d1 = sqrt(4 * 0.5^2) = 1
        assert!(csv.contains("\n2,4,1e0,NA,false,true\n"), "{csv}");
    }

    #[test]
    fn dimension_errors_are_per_server_or_global() {
        let sigma = SymMatrix::identity(2);
        let ests = vec![est(1, 10, &[0.0, 0.0], DMatrix::identity(2, 2))];
        assert!(detect(&ests, &v(&[0.0]), &sigma, 0.05).is_err());
        assert!(detect(&ests, &v(&[0.0, 0.0]), &sigma, 1.5).is_err());
    }

    #[test]
    fn trusted_server_lookup() {
        let ests =
            vec![est(1, 10, &[0.0, 0.0], DMatrix::identity(2, 2) * 2.0), est(2, 10, &[0.0, 0.0], DMatrix::zeros(2, 2))];
        assert_eq!(trusted_server_sigma(&ests, 1).unwrap(), SymMatrix::identity(2).scaled(2.0));
        assert!(trusted_server_sigma(&ests, 2).is_err());
        assert!(trusted_server_sigma(&ests, 9).is_err());
    }
}
