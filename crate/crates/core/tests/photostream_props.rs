use emitterlab::correlator::correlate;
use emitterlab::kinetics::{g2_bin_mean, g2_params_from_rates, steady_state, RateSet, NS_PER_S};
use emitterlab::photostream::{
    apply_dead_time, detect_hbt, simulate_cw, simulate_pulsed, BackgroundModel, DetectorModel, PulseTrain,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identical_seed_identical_channels(seed in any::<u64>(), k12 in 0.1f64..5.0) {
        let r = RateSet::new(k12, 1.2, 0.05, 0.08).unwrap();
        let bg = BackgroundModel { rate_cps: 2e4 };
        let run = || {
            let s = simulate_cw(&r, 50_000_000, &bg, seed).unwrap();
            detect_hbt(&s, 0.5, &DetectorModel::default(), &DetectorModel::default(), seed ^ 1).unwrap()
        };
        prop_assert_eq!(run(), run());
        let train = PulseTrain { rep_rate_mhz: 80.0, pulse_width_ps: 1.0, excitation_prob: 0.9 };
        let p1 = simulate_pulsed(&r, &train, 50_000_000, &bg, seed).unwrap();
        let p2 = simulate_pulsed(&r, &train, 50_000_000, &bg, seed).unwrap();
        prop_assert_eq!(p1.times_ps, p2.times_ps);
    }

    #[test]
    fn dead_time_never_adds_events(ts in proptest::collection::vec(0u64..1_000_000, 0..400), d1 in 0.0f64..5000.0, d2 in 0.0f64..5000.0) {
        let mut ts = ts;
        ts.sort_unstable();
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(apply_dead_time(&ts, hi).len() <= apply_dead_time(&ts, lo).len());
    }
}

#[test]
fn detected_rate_matches_populations() {
    let r = RateSet::new(0.8, 1.2, 0.05, 0.5).unwrap();
    let det = DetectorModel { efficiency: 0.4, jitter_sigma_ps: 30.0, dead_time_ps: 0.0, dark_rate_cps: 500.0 };
    let split = 0.5;
    let block = 200_000_000u64;
    let nblocks = 20;
    let mut rates_a = Vec::new();
    for k in 0..nblocks {
        let s = simulate_cw(&r, block, &BackgroundModel::none(), 100 + k).unwrap();
        let (a, _) = detect_hbt(&s, split, &det, &det, 900 + k).unwrap();
        rates_a.push(a.len() as f64 / (block as f64 * 1e-12));
    }
    let n = nblocks as f64;
    let mean = rates_a.iter().sum::<f64>() / n;
    let sd = (rates_a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    let expected = split * det.efficiency * r.k21 * steady_state(&r).p2 * NS_PER_S + det.dark_rate_cps;
    assert!((mean - expected).abs() < 3.0 * se, "mean {mean} expected {expected} se {se}");
}

#[test]
fn own_output_reproduces_closed_form() {
    let r = RateSet::new(0.5, 1.23866, 0.05, 0.07775).unwrap();
    let s = simulate_cw(&r, 7_000_000_000, &BackgroundModel::none(), 2024).unwrap();
    assert!(s.len() >= 1_000_000, "{}", s.len());
    let (a, b) = detect_hbt(&s, 0.5, &DetectorModel::ideal(), &DetectorModel::ideal(), 7).unwrap();
    let h = correlate(&a, &b, 100, 50_000).unwrap();
    let g = g2_params_from_rates(&r).unwrap();
    let obs = h.g2();
    let err = h.g2_err();
    let chi2: f64 = (0..h.len())
        .map(|i| {
            let (lo, hi) = h.bin_edges_ns(i);
            ((obs[i] - g2_bin_mean(&g, lo, hi)) / err[i]).powi(2)
        })
        .sum();
    let red = chi2 / h.len() as f64;
    assert!(red < 2.0, "reduced chi2 {red}");
}
