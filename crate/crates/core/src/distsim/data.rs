use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::{ModelKind, Observation};

/// Draws `n_obs` observations with independent standard normal covariates.
///
/// Logistic responses are Bernoulli with success probability
/// `1 / (1 + exp(-x^T theta0))`; linear responses are `x^T theta0 + e` with
/// `e ~ N(0, 1)`. Output is a pure function of the arguments.
pub fn generate_dataset(kind: ModelKind, theta0: &[f64], n_obs: usize, seed: u64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_obs)
        .map(|_| {
            let x: Vec<f64> = theta0.iter().map(|_| rng.sample(StandardNormal)).collect();
            let eta: f64 = x.iter().zip(theta0).map(|(a, b)| a * b).sum();
            let y = match kind {
                ModelKind::Linear => {
                    let noise: f64 = rng.sample(StandardNormal);
                    eta + noise
                }
                ModelKind::Logistic => {
                    let prob = 1.0 / (1.0 + (-eta).exp());
                    if rng.random::<f64>() < prob {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            Observation::new(y, x)
        })
        .collect()
}

/// Splits `data` into `k` contiguous, equally sized shards.
pub fn partition(data: &[Observation], k: usize) -> Result<Vec<&[Observation]>> {
    if k == 0 {
        return Err(Error::Config("number of servers K must be >= 1".into()));
    }
    if !data.len().is_multiple_of(k) || data.is_empty() {
        return Err(Error::Config(format!("{} observations cannot be split evenly across {k} servers", data.len())));
    }
    Ok(data.chunks_exact(data.len() / k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{fit_local, FitOptions, ModelSpec};

    #[test]
    fn partition_examples() {
        let data: Vec<_> = (0..6).map(|i| Observation::new(i as f64, vec![0.0])).collect();
        let shards = partition(&data, 3).unwrap();
        let ys: Vec<Vec<f64>> = shards.iter().map(|s| s.iter().map(|o| o.y).collect()).collect();
        assert_eq!(ys, vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]]);

        assert_eq!(partition(&data, 1).unwrap(), vec![&data[..]]);

        let ten: Vec<_> = (0..10).map(|i| Observation::new(i as f64, vec![0.0])).collect();
        assert!(matches!(partition(&ten, 3), Err(Error::Config(_))));
        assert!(partition(&ten, 0).is_err());
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_dataset(ModelKind::Logistic, &[2.0, 1.0], 500, 11);
        let b = generate_dataset(ModelKind::Logistic, &[2.0, 1.0], 500, 11);
        assert_eq!(a, b);
        let bits = |d: &[Observation]| -> Vec<u64> { d.iter().flat_map(|o| o.x.iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, generate_dataset(ModelKind::Logistic, &[2.0, 1.0], 500, 12));
    }

    #[test]
    fn covariate_moments() {
        let n = 100_000;
        let data = generate_dataset(ModelKind::Linear, &[2.0, 1.0], n, 3);
        let bound = 5.0 / (n as f64).sqrt();
        for j in 0..2 {
            let mean = data.iter().map(|o| o.x[j]).sum::<f64>() / n as f64;
            let var = data.iter().map(|o| (o.x[j] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < bound, "mean {mean}");
            assert!((var - 1.0).abs() < bound * 2.0, "var {var}");
        }
    }

    #[test]
    fn linear_data_recovers_parameters() {
        let data = generate_dataset(ModelKind::Linear, &[2.0, 1.0], 100_000, 5);
        let fit = fit_local(1, &ModelSpec::linear(2).unwrap(), &data, &FitOptions::default()).unwrap();
        assert!((fit.theta_hat[0] - 2.0).abs() < 0.02);
        assert!((fit.theta_hat[1] - 1.0).abs() < 0.02);
    }

    #[test]
    fn logistic_at_zero_is_balanced() {
        let data = generate_dataset(ModelKind::Logistic, &[0.0, 0.0], 100_000, 9);
        let mean = data.iter().map(|o| o.y).sum::<f64>() / data.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }
}
