use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::aggregate::LocalEstimate;
use crate::error::{Error, Result};
use crate::models::{sandwich_variance_pinv, LocalFit, ModelSpec, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContaminationKind {
    None,
    /// Every contaminated server sends the same fixed vector.
    Omniscient,
    /// Contaminated estimates are drawn from `N(0, variance * I)`.
    Gaussian,
    /// Contaminated servers send the negated estimate.
    BitFlip,
}

impl ContaminationKind {
    pub fn name(self) -> &'static str {
        match self {
            ContaminationKind::None => "none",
            ContaminationKind::Omniscient => "omniscient",
            ContaminationKind::Gaussian => "gaussian",
            ContaminationKind::BitFlip => "bitflip",
        }
    }
}

impl std::str::FromStr for ContaminationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "none" => Ok(ContaminationKind::None),
            "omniscient" => Ok(ContaminationKind::Omniscient),
            "gaussian" => Ok(ContaminationKind::Gaussian),
            "bitflip" => Ok(ContaminationKind::BitFlip),
            _ => Err(Error::Config(format!(
                "unknown contamination `{s}` (expected none, omniscient, gaussian or bitflip)"
            ))),
        }
    }
}

impl std::fmt::Display for ContaminationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContaminationSpec {
    pub kind: ContaminationKind,
    /// Number of contaminated servers; `None` means `floor(K^{1/4})`.
    pub count: Option<usize>,
    /// Omniscient payload; `None` means `-1e6` in every coordinate.
    pub omniscient_value: Option<Vec<f64>>,
    pub gaussian_variance: f64,
    /// Contaminate a random subset instead of servers `1..=count`.
    pub randomize_placement: bool,
}

impl Default for ContaminationSpec {
    fn default() -> Self {
        ContaminationSpec {
            kind: ContaminationKind::None,
            count: None,
            omniscient_value: None,
            gaussian_variance: 200.0,
            randomize_placement: false,
        }
    }
}

impl ContaminationSpec {
    pub fn of_kind(kind: ContaminationKind) -> Self {
        ContaminationSpec { kind, ..Default::default() }
    }

    pub fn with_count(mut self, count: usize) -> Self {
        self.count = Some(count);
        self
    }

    /// Number of servers that will be contaminated among `k`.
    pub fn resolved_count(&self, k: usize) -> usize {
        match self.kind {
            ContaminationKind::None => 0,
            _ => self.count.unwrap_or_else(|| fourth_root_floor(k)),
        }
    }

    pub fn validate(&self, k: usize, p: usize) -> Result<()> {
        let count = self.resolved_count(k);
        if count > k {
            return Err(Error::Config(format!("contamination count {count} exceeds K = {k}")));
        }
        if let Some(v) = &self.omniscient_value {
            if v.len() != p {
                return Err(Error::Config(format!(
                    "omniscient value has length {}, parameter dimension is {p}",
                    v.len()
                )));
            }
        }
        if !(self.gaussian_variance > 0.0 && self.gaussian_variance.is_finite()) {
            return Err(Error::Config("gaussian contamination variance must be positive".into()));
        }
        Ok(())
    }
}

/// `floor(k^{1/4})`, exact for all `usize`.
pub fn fourth_root_floor(k: usize) -> usize {
    let mut r = (k as f64).powf(0.25) as usize;
    while r > 0 && r.pow(4) > k {
        r -= 1;
    }
    while (r + 1).checked_pow(4).is_some_and(|q| q <= k) {
        r += 1;
    }
    r
}

/// Turns local fits into transmitted estimates, corrupting some of them.
///
/// `shards[i]` must be the data behind `fits[i]`. A corrupted server's
/// variance matrix is the sandwich re-evaluated at its corrupted estimate on
/// its own shard (pseudo-inverting `U` if it has become singular). Returns
/// the estimates and the sorted ids of the corrupted servers.
pub fn contaminate(
    fits: &[LocalFit],
    shards: &[&[Observation]],
    model: &ModelSpec,
    spec: &ContaminationSpec,
    seed: u64,
) -> Result<(Vec<LocalEstimate>, Vec<u32>)> {
    if fits.len() != shards.len() {
        return Err(Error::Dimension(format!("{} fits but {} shards", fits.len(), shards.len())));
    }
    spec.validate(fits.len(), model.p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..fits.len()).collect();
    order.sort_by_key(|&i| fits[i].server_id);
    let count = spec.resolved_count(fits.len());
    let chosen: Vec<usize> = if spec.randomize_placement {
        let mut picks = rand::seq::index::sample(&mut rng, fits.len(), count).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|pos| order[pos]).collect()
    } else {
        order[..count].to_vec()
    };

    let mut estimates: Vec<LocalEstimate> = fits.iter().map(LocalEstimate::from_fit).collect();
    let mut corrupted = Vec::with_capacity(count);
    for &i in &chosen {
        let fit = &fits[i];
        let theta_star = match spec.kind {
            ContaminationKind::None => continue,
            ContaminationKind::Omniscient => match &spec.omniscient_value {
                Some(v) => DVector::from_column_slice(v),
                None => DVector::from_element(model.p, -1e6),
            },
            ContaminationKind::Gaussian => {
                let sd = spec.gaussian_variance.sqrt();
                DVector::from_fn(model.p, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
            }
            ContaminationKind::BitFlip => -&fit.theta_hat,
        };
        let sandwich = sandwich_variance_pinv(model, shards[i], &theta_star)?;
        estimates[i].theta_star = theta_star;
        estimates[i].sigma_star = sandwich.sigma.into_inner();
        corrupted.push(fit.server_id);
    }
    corrupted.sort_unstable();
    Ok((estimates, corrupted))
}
