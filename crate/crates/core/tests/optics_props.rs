use emitterlab::optics::{collection_half_angle, quantum_efficiency, EfficiencyBudget};
use proptest::prelude::*;

proptest! {
    #[test]
    fn quantum_efficiency_is_homogeneous(
        i_inf in 1e3f64..1e8, i_total in 1e6f64..1e11, k in 1e-3f64..1e3,
        c in 0.01f64..1.0, f in 0.01f64..1.0, o in 0.01f64..1.0, d in 0.01f64..1.0,
    ) {
        let b = EfficiencyBudget::new(c, f, o, d).unwrap();
        let q1 = quantum_efficiency(i_inf, i_total, &b).unwrap().eta_q;
        let q2 = quantum_efficiency(k * i_inf, k * i_total, &b).unwrap().eta_q;
        prop_assert!((q1 / q2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_angle_monotone(n in 1.0f64..2.5, a in 0.0f64..1.0, b in 0.0f64..1.0, dn in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi > lo);
        let t_lo = collection_half_angle(lo * n, n).unwrap();
        let t_hi = collection_half_angle(hi * n, n).unwrap();
        prop_assert!(t_lo < t_hi);
        prop_assume!(dn > 0.0);
        let wider = collection_half_angle(hi * n, n + dn).unwrap();
        prop_assert!(wider < t_hi);
    }
}
