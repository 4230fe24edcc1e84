use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use robagg::distsim::{
    generate_dataset, run_replicate, run_study, ContaminationKind, ContaminationSpec, StudyConfig, StudyMetrics,
};
use robagg::models::FitOptions;
use robagg::{fit_local, ModelKind, ModelSpec};

fn small(model: ModelKind, k: usize, n: usize, replicates: usize) -> StudyConfig {
    StudyConfig { model, k, n, replicates, base_seed: 77, ..StudyConfig::default() }
}

fn without_runtime(mut m: StudyMetrics) -> StudyMetrics {
    m.runtime = Duration::ZERO;
    m
}

#[test]
fn study_is_identical_across_thread_counts() {
    let cfg = StudyConfig {
        contamination: ContaminationSpec {
            randomize_placement: true,
            ..ContaminationSpec::of_kind(ContaminationKind::Gaussian)
        },
        ..small(ModelKind::Logistic, 8, 200, 12)
    };
    let on = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        without_runtime(pool.install(|| run_study(&cfg).unwrap()))
    };
    let one = on(1);
    let four = on(4);
    assert_eq!(one, four);
    assert_eq!(one.to_csv(), four.to_csv());
}

#[test]
fn clean_huber_stays_close_to_weighted_average() {
    let cfg = small(ModelKind::Logistic, 10, 500, 100);
    let mut close = 0;
    for r in 0..cfg.replicates {
        let rec = run_replicate(&cfg, r).unwrap();
        let ok = (0..cfg.p())
            .all(|j| (rec.huber.theta[j] - rec.weighted_average.theta[j]).abs() < 5.0 * rec.weighted_average.se[j]);
        close += ok as usize;
    }
    assert!(close >= 99, "{close} of 100 replicates within 5 SE");
}

#[test]
fn asymptotic_standard_errors_match_spread() {
    let m = run_study(&small(ModelKind::Linear, 10, 500, 200)).unwrap();
    for (j, h) in m.huber.iter().enumerate() {
        let ratio = h.ase / h.sd;
        assert!((0.85..=1.15).contains(&ratio), "theta{}: ASE/SD = {ratio}", j + 1);
    }
    for (j, w) in m.weighted_average.iter().enumerate() {
        let ratio = w.ase / w.sd;
        assert!((0.85..=1.15).contains(&ratio), "theta{}: weighted ASE/SD = {ratio}", j + 1);
    }
}

#[test]
fn omniscient_attack_breaks_only_the_average() {
    let cfg = StudyConfig {
        contamination: ContaminationSpec::of_kind(ContaminationKind::Omniscient),
        ..small(ModelKind::Linear, 20, 300, 20)
    };
    let m = run_study(&cfg).unwrap();
    for j in 0..cfg.p() {
        let (h, w) = (m.huber[j].bias.abs(), m.weighted_average[j].bias.abs());
        assert!(w >= 1e3 * h, "theta{}: |bias| huber {h}, average {w}", j + 1);
    }
    assert_eq!(m.hr, Some(1.0));
}

#[test]
fn bitflip_servers_are_flagged() {
    let cfg = StudyConfig {
        contamination: ContaminationSpec { count: Some(3), ..ContaminationSpec::of_kind(ContaminationKind::BitFlip) },
        ..small(ModelKind::Logistic, 20, 400, 10)
    };
    let m = run_study(&cfg).unwrap();
    assert_eq!(m.hr, Some(1.0));
    for rec in &m.records {
        assert_eq!(rec.contaminated, vec![1, 2, 3]);
    }
}

#[test]
fn logistic_fit_is_consistent_for_large_n() {
    let theta0 = [2.0, 1.0];
    let model = ModelSpec::logistic(2).unwrap();
    let data = generate_dataset(ModelKind::Logistic, &theta0, 200_000, 5);
    let fit = fit_local(1, &model, &data, &FitOptions::default()).unwrap();
    for (j, t0) in theta0.iter().enumerate() {
        let se = (fit.sigma_hat.get(j, j) / data.len() as f64).sqrt();
        assert!((fit.theta_hat[j] - t0).abs() < 4.0 * se, "coef {j}: {} (se {se})", fit.theta_hat[j]);
    }
    assert!(fit.sigma_positive_definite);
}

#[test]
fn sandwich_matches_monte_carlo_covariance() {
    // Oracle: the empirical covariance of sqrt(n) * theta_hat over independent
    // datasets should agree with the average sandwich estimate.
    let (n, reps) = (2000, 300);
    let theta0 = [2.0, 1.0];
    let model = ModelSpec::logistic(2).unwrap();
    let mut draws = Vec::with_capacity(reps);
    let mut mean_sigma = DMatrix::zeros(2, 2);
    for seed in 0..reps as u64 {
        let data = generate_dataset(ModelKind::Logistic, &theta0, n, 1000 + seed);
        let fit = fit_local(1, &model, &data, &FitOptions::default()).unwrap();
        draws.push(fit.theta_hat.clone() * (n as f64).sqrt());
        mean_sigma += fit.sigma_hat.as_matrix() / reps as f64;
    }
    let mean: DVector<f64> = draws.iter().fold(DVector::zeros(2), |a, d| a + d) / reps as f64;
    let cov =
        draws.iter().fold(DMatrix::zeros(2, 2), |a, d| a + (d - &mean) * (d - &mean).transpose()) / (reps - 1) as f64;
    for j in 0..2 {
        let ratio = cov[(j, j)] / mean_sigma[(j, j)];
        assert!((0.8..=1.25).contains(&ratio), "variance {j}: empirical / sandwich = {ratio}");
    }
    let corr = |m: &DMatrix<f64>| m[(0, 1)] / (m[(0, 0)] * m[(1, 1)]).sqrt();
    assert!((corr(&cov) - corr(&mean_sigma)).abs() < 0.12, "correlations {} vs {}", corr(&cov), corr(&mean_sigma));
}
