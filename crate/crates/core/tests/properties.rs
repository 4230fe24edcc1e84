use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use robagg::aggregate::{huber_aggregate, huber_psi, tau_c, HuberConfig, LocalEstimate};
use robagg::detect::detect;
use robagg::distsim::{decode_message, encode_message};
use robagg::numkit::{pd_project, SymMatrix, PD_EPS};
use robagg::spatialmed::{
    aggregate_sigma_default, spatial_median, spatial_objective, SpatialMedianConfig, WeightedPoint,
};

fn vec_strategy(p: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, p)
}

/// `p`-dimensional points with positive weights.
fn points(p: usize) -> impl Strategy<Value = Vec<WeightedPoint>> {
    prop::collection::vec((vec_strategy(p, 10.0), 0.1f64..5.0), 3..15)
        .prop_map(|v| v.into_iter().map(|(x, w)| WeightedPoint::new(DVector::from_vec(x), w)).collect())
}

fn pd_matrix(p: usize) -> impl Strategy<Value = DMatrix<f64>> {
    vec_strategy(p * p, 1.0).prop_map(move |v| {
        let a = DMatrix::from_vec(p, p, v);
        &a * a.transpose() + DMatrix::identity(p, p) * 0.2
    })
}

fn estimates(p: usize) -> impl Strategy<Value = Vec<LocalEstimate>> {
    prop::collection::vec((vec_strategy(p, 3.0), pd_matrix(p), 20u64..2000), 3..12).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (t, s, n))| LocalEstimate::new(i as u32 + 1, n, DVector::from_vec(t), s).unwrap())
            .collect()
    })
}

fn median(pts: &[WeightedPoint]) -> DVector<f64> {
    spatial_median(pts, &SpatialMedianConfig::default()).unwrap().eta
}

/// Simpson's rule for `int_a^b g(z) phi(z) dz`.
fn normal_integral(g: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let m = 20_000;
    let h = (b - a) / m as f64;
    let f = |x: f64| g(x) * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = f(a) + f(b);
    for i in 1..m {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spatial_median_is_translation_equivariant(pts in points(3), shift in vec_strategy(3, 50.0)) {
        let a = DVector::from_vec(shift);
        let moved: Vec<WeightedPoint> = pts.iter().map(|q| WeightedPoint::new(&q.value + &a, q.weight)).collect();
        let gap = (median(&moved) - (median(&pts) + &a)).amax();
        prop_assert!(gap <= 1e-6, "gap {gap}");
    }

    #[test]
    fn spatial_median_is_scale_equivariant(pts in points(2), s in 0.01f64..100.0) {
        let scaled: Vec<WeightedPoint> = pts.iter().map(|q| WeightedPoint::new(&q.value * s, q.weight)).collect();
        let gap = (median(&scaled) - median(&pts) * s).amax();
        prop_assert!(gap <= 1e-6 * s.max(1.0), "gap {gap}");
    }

    #[test]
    fn spatial_median_beats_every_data_point(pts in points(4)) {
        let eta = median(&pts);
        let best = spatial_objective(&pts, &eta);
        for q in &pts {
            prop_assert!(best <= spatial_objective(&pts, &q.value) + 1e-9 * best.max(1.0));
        }
        for j in 0..4 {
            let lo = pts.iter().map(|q| q.value[j]).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|q| q.value[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(eta[j] >= lo - 1e-9 && eta[j] <= hi + 1e-9);
        }
    }

    #[test]
    fn pd_project_floors_the_spectrum(v in vec_strategy(9, 5.0)) {
        let m = DMatrix::from_vec(3, 3, v);
        let s = SymMatrix::symmetrize(&m).unwrap();
        let out = pd_project(&s, PD_EPS).unwrap();
        prop_assert!(out.min_eigenvalue().unwrap() >= PD_EPS * (1.0 - 1e-6));
    }

    #[test]
    fn aggregated_variance_is_positive_definite(
        mut ests in estimates(3),
        junk in prop::collection::vec(vec_strategy(9, 1e6), 1..3),
    ) {
        for (e, j) in ests.iter_mut().zip(junk) {
            e.sigma_star = DMatrix::from_vec(3, 3, j);
        }
        let min_eig = aggregate_sigma_default(&ests).unwrap().min_eigenvalue().unwrap();
        prop_assert!(min_eig > 0.0, "min eigenvalue {min_eig}");
    }

    #[test]
    fn huber_is_translation_equivariant(ests in estimates(2), shift in vec_strategy(2, 20.0), c in 0.5f64..3.0) {
        let sigma = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5])).unwrap();
        let cfg = HuberConfig::with_c(c).unwrap();
        let a = DVector::from_vec(shift);
        let moved: Vec<LocalEstimate> = ests
            .iter()
            .map(|e| LocalEstimate { theta_star: &e.theta_star + &a, ..e.clone() })
            .collect();
        let base = huber_aggregate(&ests, &sigma, &cfg).unwrap().theta_hat;
        let shifted = huber_aggregate(&moved, &sigma, &cfg).unwrap().theta_hat;
        prop_assert!((shifted - (base + &a)).amax() <= 1e-7);
    }

    #[test]
    fn far_outlier_position_does_not_matter(ests in estimates(2), dir in vec_strategy(2, 1.0)) {
        // Once every coordinate of an estimate is clipped, moving it further
        // out leaves the estimating equation unchanged. That needs the rest
        // to outweigh it, or the root follows it out.
        prop_assume!(dir.iter().all(|d| d.abs() > 0.05));
        let root_n = |e: &LocalEstimate| (e.n_k as f64).sqrt();
        prop_assume!(root_n(&ests[0]) < ests[1..].iter().map(root_n).sum::<f64>() * 0.9);
        let sigma = SymMatrix::identity(2);
        let cfg = HuberConfig::default();
        let d = DVector::from_vec(dir);
        let at = |dist: f64| {
            let mut v = ests.clone();
            v[0].theta_star = &d * dist;
            huber_aggregate(&v, &sigma, &cfg).unwrap().theta_hat
        };
        prop_assert!((at(1e4) - at(1e9)).amax() <= 1e-8);
    }

    #[test]
    fn tau_is_increasing_and_bounded(c in 0.01f64..8.0, dc in 0.01f64..1.0) {
        let (lo, hi) = (tau_c(c), tau_c(c + dc));
        // Past c ~ 7.5, 1 - tau drops below half an ulp of 1.
        let increasing = if c + dc < 5.0 { lo < hi } else { lo <= hi };
        prop_assert!(increasing, "tau({c}) = {lo}, tau({}) = {hi}", c + dc);
        prop_assert!(lo > 2.0 / std::f64::consts::PI - 1e-9 && hi <= 1.0);
    }

    #[test]
    fn tau_matches_quadrature(c in 0.05f64..6.0) {
        // Split at the kink of psi so each piece is smooth; by symmetry
        // integrate over z >= 0 and double.
        let b = 2.0 * normal_integral(|_| 1.0, 0.0, c);
        let s2 = 2.0 * (normal_integral(|z| z * z, 0.0, c) + normal_integral(|_| c * c, c, c + 40.0));
        prop_assert!((tau_c(c) - b * b / s2).abs() <= 1e-9, "tau {} vs {}", tau_c(c), b * b / s2);
        prop_assert_eq!(huber_psi(c + 1.0, c), c);
    }

    #[test]
    fn codec_round_trips(est in estimates(4).prop_map(|mut v| v.remove(0))) {
        prop_assert_eq!(decode_message(&encode_message(&est)).unwrap(), est);
    }

    #[test]
    fn smaller_alpha_flags_fewer_servers(ests in estimates(2), a1 in 0.001f64..0.5, a2 in 0.001f64..0.5) {
        let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
        let sigma = aggregate_sigma_default(&ests).unwrap();
        let theta = ests[0].theta_star.clone();
        let strict = detect(&ests, &theta, &sigma, lo).unwrap();
        let loose = detect(&ests, &theta, &sigma, hi).unwrap();
        prop_assert!(strict.threshold >= loose.threshold);
        for id in strict.theta_flagged() {
            prop_assert!(loose.theta_flagged().contains(&id));
        }
    }
}
