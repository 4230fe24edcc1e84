use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::contam::{contaminate, ContaminationSpec};
use super::data::{generate_dataset, partition};
use super::transport::{decode_message, encode_message};
use crate::aggregate::{huber_aggregate, standard_errors, weighted_average, HuberConfig, LocalEstimate};
use crate::detect::{detect, DetectionReport, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::models::{fit_local, FitOptions, LocalFit, ModelKind, ModelSpec};
use crate::spatialmed::aggregate_sigma_default;

/// Critical value for the 95% intervals used in coverage.
pub const Z_95: f64 = 1.96;

/// Largest tolerated share of failed replicates.
pub const MAX_FAILED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub model: ModelKind,
    pub theta0: Vec<f64>,
    /// Number of servers.
    pub k: usize,
    /// Observations per server.
    pub n: usize,
    pub c: f64,
    pub contamination: ContaminationSpec,
    pub replicates: usize,
    pub alpha: f64,
    pub base_seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            model: ModelKind::Logistic,
            theta0: vec![2.0, 1.0],
            k: 20,
            n: 1000,
            c: 1.345,
            contamination: ContaminationSpec::default(),
            replicates: 200,
            alpha: DEFAULT_ALPHA,
            base_seed: 20_240_601,
        }
    }
}

impl StudyConfig {
    pub fn p(&self) -> usize {
        self.theta0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k == 0 {
            return bad("K must be >= 1".into());
        }
        if self.n == 0 {
            return bad("n must be >= 1".into());
        }
        if self.replicates == 0 {
            return bad("replicates must be >= 1".into());
        }
        if self.theta0.is_empty() || self.theta0.iter().any(|v| !v.is_finite()) {
            return bad("theta0 must be a non-empty vector of finite numbers".into());
        }
        if !(self.c > 0.0) {
            return bad(format!("c must be positive, got {}", self.c));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.k.checked_mul(self.n).is_none() {
            return bad("K * n overflows".into());
        }
        self.contamination.validate(self.k, self.p())
    }

    /// Seeds for the data and the contamination draws of replicate `r`.
    ///
    /// Each replicate reads its own ChaCha stream, so results do not depend
    /// on the order in which replicates run.
    pub fn replicate_seeds(&self, r: usize) -> (u64, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(r as u64);
        (rng.next_u64(), rng.next_u64())
    }
}

/// Estimates of one aggregation method in one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutcome {
    pub theta: DVector<f64>,
    pub se: Vec<f64>,
    /// Whether `theta_j +- 1.96 SE_j` contains the true coefficient.
    pub covered: Vec<bool>,
}

impl EstimatorOutcome {
    fn new(theta: DVector<f64>, se: Vec<f64>, theta0: &[f64]) -> Self {
        let covered = theta.iter().zip(&se).zip(theta0).map(|((t, s), t0)| (t - t0).abs() <= Z_95 * s).collect();
        EstimatorOutcome { theta, se, covered }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub index: usize,
    pub huber: EstimatorOutcome,
    pub weighted_average: EstimatorOutcome,
    /// Ids of the servers that transmitted corrupted estimates.
    pub contaminated: Vec<u32>,
    /// Ids flagged by either detection step.
    pub flagged: Vec<u32>,
    /// Share of corrupted servers that were flagged; `None` when none were corrupted.
    pub hit_ratio: Option<f64>,
    /// Clean servers flagged in step 1.
    pub false_theta_flags: usize,
    /// Clean servers flagged in either step.
    pub false_flags: usize,
    pub clean_servers: usize,
    pub detection: DetectionReport,
}

/// Runs one replicate end to end: simulate, fit locally, corrupt, transmit,
/// aggregate, compute standard errors and screen.
pub fn run_replicate(config: &StudyConfig, r: usize) -> Result<ReplicateRecord> {
    config.validate()?;
    let (data_seed, contam_seed) = config.replicate_seeds(r);
    let model = ModelSpec::new(config.model, config.p())?;
    let data = generate_dataset(config.model, &config.theta0, config.k * config.n, data_seed);
    let shards = partition(&data, config.k)?;
    let opts = FitOptions::default();
    let fits = shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let id = i as u32 + 1;
            fit_local(id, &model, shard, &opts).map_err(|e| Error::Domain(format!("server {id}: {e}")))
        })
        .collect::<Result<Vec<LocalFit>>>()?;
    let (sent, contaminated) = contaminate(&fits, &shards, &model, &config.contamination, contam_seed)?;
    let received = sent
        .iter()
        .map(|est| decode_message(&encode_message(est)))
        .collect::<std::result::Result<Vec<LocalEstimate>, _>>()?;

    let sigma_s = aggregate_sigma_default(&received)?;
    let huber_cfg = HuberConfig::with_c(config.c)?;
    let huber = huber_aggregate(&received, &sigma_s, &huber_cfg)?;
    let (theta_bar, sigma_bar) = weighted_average(&received)?;
    let se_bar = standard_errors(&sigma_bar, huber.n_total, 1.0)?;
    let detection = detect(&received, &huber.theta_hat, &sigma_s, config.alpha)?;

    let mut flagged: Vec<u32> = detection
        .records
        .iter()
        .filter(|rec| rec.theta_flagged || rec.sigma_flagged)
        .map(|rec| rec.server_id)
        .collect();
    flagged.sort_unstable();
    let is_bad = |id: u32| contaminated.binary_search(&id).is_ok();
    let hits = flagged.iter().filter(|&&id| is_bad(id)).count();
    let hit_ratio = (!contaminated.is_empty()).then(|| hits as f64 / contaminated.len() as f64);
    let clean = detection.records.iter().filter(|rec| !is_bad(rec.server_id));
    let false_theta_flags = clean.clone().filter(|rec| rec.theta_flagged).count();
    let false_flags = clean.clone().filter(|rec| rec.theta_flagged || rec.sigma_flagged).count();
    let clean_servers = clean.count();

    Ok(ReplicateRecord {
        index: r,
        huber: EstimatorOutcome::new(huber.theta_hat, huber.se, &config.theta0),
        weighted_average: EstimatorOutcome::new(theta_bar, se_bar, &config.theta0),
        contaminated,
        flagged,
        hit_ratio,
        false_theta_flags,
        false_flags,
        clean_servers,
        detection,
    })
}

/// Summary of one estimator for one coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientMetrics {
    pub bias: f64,
    /// Root mean squared deviation from the replicate mean (divisor R).
    pub sd: f64,
    /// Mean standard error.
    pub ase: f64,
    /// Coverage of the nominal 95% interval.
    pub cp: f64,
}

impl CoefficientMetrics {
    pub fn mse(&self) -> f64 {
        self.bias * self.bias + self.sd * self.sd
    }

    fn from_outcomes<'a>(outcomes: impl Iterator<Item = &'a EstimatorOutcome> + Clone, j: usize, truth: f64) -> Self {
        let r = outcomes.clone().count() as f64;
        let mean = outcomes.clone().map(|o| o.theta[j]).sum::<f64>() / r;
        let var = outcomes.clone().map(|o| (o.theta[j] - mean).powi(2)).sum::<f64>() / r;
        CoefficientMetrics {
            bias: mean - truth,
            sd: var.sqrt(),
            ase: outcomes.clone().map(|o| o.se[j]).sum::<f64>() / r,
            cp: outcomes.filter(|o| o.covered[j]).count() as f64 / r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyMetrics {
    pub huber: Vec<CoefficientMetrics>,
    pub weighted_average: Vec<CoefficientMetrics>,
    /// `MSE(weighted average) / MSE(huber)` per coefficient.
    pub re: Vec<f64>,
    /// Mean hit ratio; `None` without contamination.
    pub hr: Option<f64>,
    /// Share of clean servers flagged by step 1.
    pub false_theta_flag_rate: f64,
    /// Share of clean servers flagged by either step.
    pub false_flag_rate: f64,
    pub replicates: usize,
    pub failed: usize,
    pub runtime: Duration,
    /// Successful replicate records in index order.
    pub records: Vec<ReplicateRecord>,
}

impl StudyMetrics {
    /// Reduces replicate records (in the given order) into the summary table.
    pub fn from_records(
        records: Vec<ReplicateRecord>,
        theta0: &[f64],
        failed: usize,
        runtime: Duration,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Domain("no successful replicates to summarize".into()));
        }
        let p = theta0.len();
        let huber: Vec<_> =
            (0..p).map(|j| CoefficientMetrics::from_outcomes(records.iter().map(|r| &r.huber), j, theta0[j])).collect();
        let weighted_average: Vec<_> = (0..p)
            .map(|j| CoefficientMetrics::from_outcomes(records.iter().map(|r| &r.weighted_average), j, theta0[j]))
            .collect();
        let re = huber.iter().zip(&weighted_average).map(|(h, w)| w.mse() / h.mse()).collect();
        let hits: Vec<f64> = records.iter().filter_map(|r| r.hit_ratio).collect();
        let hr = (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64);
        let clean: usize = records.iter().map(|r| r.clean_servers).sum();
        let rate = |count: usize| if clean == 0 { 0.0 } else { count as f64 / clean as f64 };
        Ok(StudyMetrics {
            huber,
            weighted_average,
            re,
            hr,
            false_theta_flag_rate: rate(records.iter().map(|r| r.false_theta_flags).sum()),
            false_flag_rate: rate(records.iter().map(|r| r.false_flags).sum()),
            replicates: records.len(),
            failed,
            runtime,
            records,
        })
    }

    /// One row per (coefficient, estimator) plus a detection summary row.
    /// Reals are written at full precision; runtime is left out so identical
    /// runs produce identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("coefficient,estimator,bias,sd,ase,cp,re,hr,false_flag_rate\n");
        for j in 0..self.huber.len() {
            for (name, m, re) in
                [("huber", &self.huber[j], Some(self.re[j])), ("weighted_average", &self.weighted_average[j], None)]
            {
                let _ = writeln!(
                    out,
                    "theta{},{name},{:e},{:e},{:e},{:e},{},NA,NA",
                    j + 1,
                    m.bias,
                    m.sd,
                    m.ase,
                    m.cp,
                    opt(re)
                );
            }
        }
        let _ = writeln!(out, "all,detection,NA,NA,NA,NA,NA,{},{:e}", opt(self.hr), self.false_flag_rate);
        out
    }

    /// Human-readable table at 6 significant digits.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:<17} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "coefficient", "estimator", "BIAS", "SD", "ASE", "CP", "RE"
        );
        for j in 0..self.huber.len() {
            for (name, m, re) in
                [("huber", &self.huber[j], Some(self.re[j])), ("weighted_avg", &self.weighted_average[j], None)]
            {
                let _ = writeln!(
                    out,
                    "{:<12} {:<17} {:>12} {:>12} {:>12} {:>12} {:>12}",
                    format!("theta{}", j + 1),
                    name,
                    sig6(m.bias),
                    sig6(m.sd),
                    sig6(m.ase),
                    sig6(m.cp),
                    re.map_or_else(|| "-".to_string(), sig6)
                );
            }
        }
        let _ = writeln!(
            out,
            "HR: {}   false-flag rate: {}   replicates: {} ({} failed)   runtime: {:.2}s",
            self.hr.map_or_else(|| "NA".to_string(), sig6),
            sig6(self.false_flag_rate),
            self.replicates,
            self.failed,
            self.runtime.as_secs_f64()
        );
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:e}"))
}

/// Formats `x` with 6 significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.5e}")
    }
}

/// Runs all replicates on the current rayon pool and summarizes them.
///
/// Failed replicates are dropped from the metrics and counted; more than
/// 10% failures is an error.
pub fn run_study(config: &StudyConfig) -> Result<StudyMetrics> {
    config.validate()?;
    if config.replicates < 2 {
        return Err(Error::Config("a study needs at least 2 replicates".into()));
    }
    let start = Instant::now();
    let outcomes: Vec<Result<ReplicateRecord>> =
        (0..config.replicates).into_par_iter().map(|r| run_replicate(config, r)).collect();
    let total = outcomes.len();
    let mut records = Vec::with_capacity(total);
    let mut errors = Vec::new();
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(rec) => records.push(rec),
            Err(e) => errors.push(format!("replicate {r}: {e}")),
        }
    }
    if errors.len() as f64 > MAX_FAILED_FRACTION * total as f64 || records.is_empty() {
        return Err(Error::StudyFailed { failed: errors.len(), total, first_error: errors.swap_remove(0) });
    }
    StudyMetrics::from_records(records, &config.theta0, errors.len(), start.elapsed())
}
