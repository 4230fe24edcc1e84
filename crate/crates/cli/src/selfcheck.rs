//! Fast invariant checks behind `robagg check`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robagg::distsim::{decode_message, encode_message, run_replicate, StudyConfig};
use robagg::numkit::{inv_sqrt_pd, PD_EPS};
use robagg::spatialmed::aggregate_sigma_default;
use robagg::{huber_aggregate, tau_c, weighted_average, HuberConfig, LocalEstimate, SymMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_pd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(p, p) * 0.1
}

fn random_estimates(rng: &mut ChaCha8Rng, k: usize, p: usize) -> Vec<LocalEstimate> {
    (0..k)
        .map(|i| {
            let theta = DVector::from_fn(p, |_, _| rng.random_range(-3.0..3.0));
            let sigma = random_pd(rng, p);
            LocalEstimate::new(i as u32 + 1, rng.random_range(10..2000), theta, sigma).expect("valid estimate")
        })
        .collect()
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn check_tau() -> CheckOutcome {
    let got = tau_c(1.345);
    outcome("tau_c(1.345) = 0.950", (got - 0.950).abs() <= 1e-3, format!("got {got:.6}"))
}

fn check_infinite_c(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = rng.random_range(1..=4);
        let k = rng.random_range(2..=15);
        let ests = random_estimates(rng, k, p);
        let sigma = SymMatrix::new(random_pd(rng, p)).expect("symmetric");
        let cfg = HuberConfig::with_c(f64::INFINITY).expect("valid c");
        worst = match (huber_aggregate(&ests, &sigma, &cfg), weighted_average(&ests)) {
            (Ok(h), Ok((avg, _))) => worst.max((&h.theta_hat - avg).amax()),
            _ => f64::INFINITY,
        };
    }
    outcome("c = inf matches the weighted average", worst <= 1e-8, format!("max gap {worst:.2e}"))
}

fn check_sigma_pd(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut smallest = f64::INFINITY;
    for _ in 0..50 {
        let p = rng.random_range(1..=4);
        let k = rng.random_range(3..=12);
        let mut ests = random_estimates(rng, k, p);
        ests[0].sigma_star = DMatrix::zeros(p, p);
        ests[1].sigma_star = -random_pd(rng, p);
        smallest = match aggregate_sigma_default(&ests) {
            Ok(s) => smallest.min(s.min_eigenvalue().unwrap_or(f64::NEG_INFINITY)),
            Err(_) => f64::NEG_INFINITY,
        };
    }
    outcome(
        "aggregated variance is positive definite",
        smallest >= PD_EPS * (1.0 - 1e-9),
        format!("smallest eigenvalue {smallest:.3e}"),
    )
}

fn check_codec(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut failures = 0;
    for _ in 0..500 {
        let p = rng.random_range(1..=5);
        let est = &random_estimates(rng, 1, p)[0];
        if decode_message(&encode_message(est)).as_ref() != Ok(est) {
            failures += 1;
        }
    }
    outcome("wire codec round-trips bit-exactly", failures == 0, format!("{failures} of 500 failed"))
}

fn check_inv_sqrt(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = rng.random_range(1..=5);
        let s = SymMatrix::new(random_pd(rng, p)).expect("symmetric");
        worst = match inv_sqrt_pd(&s) {
            Ok(r) => {
                let id = r.as_matrix() * s.as_matrix() * r.as_matrix();
                worst.max((id - DMatrix::identity(p, p)).amax())
            }
            Err(_) => f64::INFINITY,
        };
    }
    outcome("inv_sqrt(S) S inv_sqrt(S) = I", worst <= 1e-8, format!("max error {worst:.2e}"))
}

fn check_replicate_determinism() -> CheckOutcome {
    let cfg = StudyConfig { k: 4, n: 200, replicates: 2, ..StudyConfig::default() };
    let same = match (run_replicate(&cfg, 1), run_replicate(&cfg, 1)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    outcome("replicates are reproducible from the seed", same, String::new())
}

/// Runs every check with a fixed seed.
pub fn run_checks() -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    vec![
        check_tau(),
        check_infinite_c(&mut rng),
        check_sigma_pd(&mut rng),
        check_codec(&mut rng),
        check_inv_sqrt(&mut rng),
        check_replicate_determinism(),
    ]
}
