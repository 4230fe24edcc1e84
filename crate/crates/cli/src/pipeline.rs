//! The two end-to-end workflows: aggregating real shards and summarizing a
//! simulation study.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;

use robagg::aggregate::standard_errors;
use robagg::distsim::{decode_message, encode_message, sig6, StudyConfig, StudyMetrics};
use robagg::models::FitOptions;
use robagg::spatialmed::aggregate_sigma_default;
use robagg::{detect, fit_local, huber_aggregate, weighted_average};
use robagg::{AggregationResult, DetectionReport, HuberConfig, LocalEstimate, ModelKind, ModelSpec};

use crate::error::{CliError, Result};
use crate::ingest::Shard;

/// Aggregate and screening results for a set of shards.
#[derive(Debug, Clone)]
pub struct ShardAnalysis {
    pub model: ModelKind,
    pub covariates: Vec<String>,
    /// Shard paths; server `k` is `paths[k - 1]`.
    pub paths: Vec<PathBuf>,
    pub huber: AggregationResult,
    pub weighted_average: DVector<f64>,
    pub weighted_average_se: Vec<f64>,
    pub detection: DetectionReport,
}

/// Fits every shard locally, passes the estimates through the wire codec,
/// then aggregates and screens them. Server ids follow the order of `shards`,
/// starting at 1.
pub fn fit_aggregate_detect(shards: &[Shard], model: ModelKind, c: f64, alpha: f64) -> Result<ShardAnalysis> {
    let first = shards.first().ok_or_else(|| CliError::Usage("no shards".into()))?;
    let spec = ModelSpec::new(model, first.covariates.len())?;
    let huber_cfg = HuberConfig::with_c(c)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::Usage(format!("alpha must lie strictly between 0 and 1, got {alpha}")));
    }
    let opts = FitOptions::default();
    let received = shards
        .par_iter()
        .enumerate()
        .map(|(i, shard)| {
            let fit = fit_local(i as u32 + 1, &spec, &shard.observations, &opts)
                .map_err(|e| CliError::Usage(format!("{}: local fit failed: {e}", shard.path.display())))?;
            let wire = encode_message(&LocalEstimate::from_fit(&fit));
            Ok(decode_message(&wire).map_err(robagg::Error::from)?)
        })
        .collect::<Result<Vec<LocalEstimate>>>()?;

    let sigma_s = aggregate_sigma_default(&received)?;
    let huber = huber_aggregate(&received, &sigma_s, &huber_cfg)?;
    let (theta_bar, sigma_bar) = weighted_average(&received)?;
    let se_bar = standard_errors(&sigma_bar, huber.n_total, 1.0)?;
    let detection = detect(&received, &huber.theta_hat, &sigma_s, alpha)?;
    Ok(ShardAnalysis {
        model,
        covariates: first.covariates.clone(),
        paths: shards.iter().map(|s| s.path.clone()).collect(),
        huber,
        weighted_average: theta_bar,
        weighted_average_se: se_bar,
        detection,
    })
}

impl ShardAnalysis {
    /// `coefficient,estimator,estimate,se` at full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("coefficient,estimator,estimate,se\n");
        for (j, name) in self.covariates.iter().enumerate() {
            let _ = writeln!(out, "{name},huber,{:e},{:e}", self.huber.theta_hat[j], self.huber.se[j]);
            let _ = writeln!(
                out,
                "{name},weighted_average,{:e},{:e}",
                self.weighted_average[j], self.weighted_average_se[j]
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let n_total = self.huber.n_total;
        let _ = writeln!(
            out,
            "{} model, {} servers, N = {n_total}, tau_c = {}",
            self.model,
            self.paths.len(),
            sig6(self.huber.tau)
        );
        let _ = writeln!(out, "{:<16} {:>12} {:>12} {:>12} {:>12}", "coefficient", "huber", "se", "weighted_avg", "se");
        for (j, name) in self.covariates.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<16} {:>12} {:>12} {:>12} {:>12}",
                name,
                sig6(self.huber.theta_hat[j]),
                sig6(self.huber.se[j]),
                sig6(self.weighted_average[j]),
                sig6(self.weighted_average_se[j])
            );
        }
        out.push('\n');
        out.push_str(&detection_table(&self.detection, |id| self.paths[id as usize - 1].display().to_string()));
        out
    }
}

fn detection_table(report: &DetectionReport, label: impl Fn(u32) -> String) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "detection (alpha = {}, threshold = {}):", report.alpha, sig6(report.threshold));
    let dist = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), sig6);
    for r in &report.records {
        let verdict = match (r.theta_flagged, r.sigma_flagged) {
            (true, _) => "flagged (estimate)",
            (false, true) => "flagged (variance)",
            _ => "ok",
        };
        let _ = writeln!(
            out,
            "  server {:>4}  d1 = {:>12}  d2 = {:>12}  {verdict}  {}",
            r.server_id,
            dist(r.d1),
            dist(r.d2),
            label(r.server_id)
        );
    }
    let flagged: Vec<u32> =
        report.records.iter().filter(|r| r.theta_flagged || r.sigma_flagged).map(|r| r.server_id).collect();
    let _ = writeln!(out, "flagged servers: {}", id_list(&flagged));
    out
}

fn id_list(ids: &[u32]) -> String {
    if ids.is_empty() {
        return "none".into();
    }
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
}

/// How often each server was flagged over the replicates of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct FlagSummary {
    pub server_id: u32,
    pub contaminated: usize,
    pub flagged: usize,
}

pub fn flag_summary(metrics: &StudyMetrics, k: usize) -> Vec<FlagSummary> {
    let mut out: Vec<FlagSummary> =
        (1..=k as u32).map(|server_id| FlagSummary { server_id, contaminated: 0, flagged: 0 }).collect();
    for rec in &metrics.records {
        for &id in &rec.contaminated {
            out[id as usize - 1].contaminated += 1;
        }
        for &id in &rec.flagged {
            out[id as usize - 1].flagged += 1;
        }
    }
    out
}

/// Servers flagged in at least half of the replicates.
pub fn consistently_flagged(metrics: &StudyMetrics, k: usize) -> Vec<u32> {
    let r = metrics.records.len();
    flag_summary(metrics, k).into_iter().filter(|s| r > 0 && 2 * s.flagged >= r).map(|s| s.server_id).collect()
}

/// Metrics table followed by a per-server detection section.
pub fn simulation_report(metrics: &StudyMetrics, config: &StudyConfig) -> String {
    let mut out = format!(
        "{} model, theta0 = {:?}, K = {}, n = {}, c = {}, contamination = {}, seed = {}\n\n",
        config.model, config.theta0, config.k, config.n, config.c, config.contamination.kind, config.base_seed
    );
    out.push_str(&metrics.to_table());
    let r = metrics.records.len();
    let _ = writeln!(out, "\ndetection over {r} replicates (alpha = {}):", config.alpha);
    let _ = writeln!(out, "  {:>9} {:>13} {:>10}", "server_id", "contaminated", "flag_rate");
    for s in flag_summary(metrics, config.k) {
        let _ = writeln!(
            out,
            "  {:>9} {:>13} {:>10}",
            s.server_id,
            s.contaminated,
            format!("{:.3}", s.flagged as f64 / r.max(1) as f64)
        );
    }
    let _ = writeln!(
        out,
        "servers flagged in at least half of the replicates: {}",
        id_list(&consistently_flagged(metrics, config.k))
    );
    out
}

/// One row per (replicate, server):
/// `replicate,server_id,n_k,d1,d2,theta_flagged,sigma_flagged,contaminated`.
pub fn simulation_detection_csv(metrics: &StudyMetrics) -> String {
    let mut out = String::from("replicate,server_id,n_k,d1,d2,theta_flagged,sigma_flagged,contaminated\n");
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:e}"));
    for rec in &metrics.records {
        for s in &rec.detection.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                rec.index + 1,
                s.server_id,
                s.n_k,
                fmt(s.d1),
                fmt(s.d2),
                s.theta_flagged,
                s.sigma_flagged,
                rec.contaminated.contains(&s.server_id)
            );
        }
    }
    out
}

/// Writes every `(path, contents)` pair; stops at the first failure.
pub fn write_artifacts(artifacts: &[(&Path, String)]) -> Result<()> {
    for (path, contents) in artifacts {
        std::fs::write(path, contents).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    }
    Ok(())
}
