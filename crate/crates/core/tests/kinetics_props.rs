use emitterlab::kinetics::{
    background_degraded_g2, emission_rate, g2_eval, g2_params_from_rates, k31_from_g2_params, saturation_from_rates,
    G2Params, RateSet,
};
use nalgebra::Matrix3;
use proptest::prelude::*;

fn log_rate() -> impl Strategy<Value = f64> {
    (-2.0f64..2.0).prop_map(|e| 10f64.powf(e))
}

fn rate_set() -> impl Strategy<Value = RateSet> {
    (log_rate(), log_rate(), log_rate(), log_rate())
        .prop_map(|(k12, k21, k23, k31)| RateSet::new(k12, k21, k23, k31).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn k31_round_trip(r in rate_set()) {
        let g = g2_params_from_rates(&r);
        prop_assume!(g.is_ok());
        let k31 = k31_from_g2_params(&g.unwrap()).unwrap();
        prop_assert!((k31 / r.k31 - 1.0).abs() <= 1e-9, "{} vs {}", k31, r.k31);
    }

    #[test]
    fn timescales_match_rate_matrix_eigenvalues(r in rate_set()) {
        let g = g2_params_from_rates(&r);
        prop_assume!(g.is_ok());
        let g = g.unwrap();
        let m = r.generator();
        let mat = Matrix3::from_fn(|i, j| m[i][j]);
        let ev = mat.eigenvalues().expect("real spectrum");
        let mut mags: Vec<f64> = ev.iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        // the smallest magnitude is the stationary zero mode
        let scale = mags[2];
        prop_assert!(mags[0] <= 1e-12 * scale);
        prop_assert!((1.0 / g.tau1 - mags[2]).abs() <= 1e-9 * mags[2]);
        prop_assert!((1.0 / g.tau2 - mags[1]).abs() <= 1e-9 * mags[1], "{} vs {}", 1.0 / g.tau2, mags[1]);
    }
}

proptest! {
    #[test]
    fn constrained_g2_vanishes_and_rises(beta in 0.0f64..5.0, tau1 in 0.01f64..10.0, ratio in 1.01f64..1000.0) {
        let g = G2Params::constrained(beta, tau1, tau1 * ratio).unwrap();
        prop_assert_eq!(g2_eval(&g, 0.0), 0.0);
        let slope = g.alpha / g.tau1 - g.beta / g.tau2;
        prop_assert!(slope >= 0.0);
        let eps = 1e-6 * tau1;
        prop_assert!(g2_eval(&g, eps) >= 0.0);
    }

    #[test]
    fn rates_give_exact_zero(r in rate_set()) {
        let g = g2_params_from_rates(&r);
        prop_assume!(g.is_ok());
        prop_assert_eq!(g2_eval(&g.unwrap(), 0.0), 0.0);
    }

    #[test]
    fn saturation_matches_steady_state(r in rate_set(), eta in 0.01f64..10.0, xi in 1e-4f64..1.0) {
        let s = saturation_from_rates(&r, eta, xi).unwrap();
        for i in 0..50 {
            let p = 10f64.powf(-2.0 + 4.0 * i as f64 / 49.0);
            let direct = emission_rate(&r, eta, xi, p);
            let model = s.rate_at(p);
            prop_assert!((direct / model - 1.0).abs() <= 1e-12, "P={} {} vs {}", p, direct, model);
        }
    }

    #[test]
    fn background_keeps_timescales(r in rate_set(), rho in 0.01f64..1.0) {
        let g = g2_params_from_rates(&r);
        prop_assume!(g.is_ok());
        let g = g.unwrap();
        let d = background_degraded_g2(&g, rho).unwrap();
        prop_assert_eq!(d.tau1, g.tau1);
        prop_assert_eq!(d.tau2, g.tau2);
    }
}
