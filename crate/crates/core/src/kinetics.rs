//! Closed-form photophysics of a three-level emitter.
//!
//! Levels are |1⟩ ground, |2⟩ excited and |3⟩ metastable (shelving). Rates
//! are carried in 1/ns, powers in mW and count rates in counts/s; the only
//! place a unit conversion happens is [`NS_PER_S`] in [`saturation_from_rates`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds per second; rates in 1/ns times this give counts/s.
pub const NS_PER_S: f64 = 1e9;

/// Relative tolerance on `A² − 4B` below which the two timescales are
/// considered coalesced.
pub const DEGENERATE_ROOT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KineticsError {
    #[error("rate {name} must be strictly positive and finite, got {value}")]
    InvalidRate { name: &'static str, value: f64 },
    #[error("invalid g2 parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate timescales: A² − 4B = {disc:e} is within tolerance of zero (A = {a})")]
    DegenerateRoots { a: f64, disc: f64 },
    #[error("k31 denominator β(τ₂−τ₁)+τ₂ = {0} is not positive")]
    NonPositiveDenominator(f64),
    #[error("signal fraction ρ = {0} outside (0, 1]")]
    SignalFraction(f64),
    #[error("{name} must be strictly positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
}

/// Transition rates of the three-level scheme, all in 1/ns.
///
/// `k12` is the only power-dependent rate; under cw drive `k12 = η·P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSet {
    pub k12: f64,
    pub k21: f64,
    pub k23: f64,
    pub k31: f64,
}

impl RateSet {
    pub fn new(k12: f64, k21: f64, k23: f64, k31: f64) -> Result<Self, KineticsError> {
        let r = RateSet { k12, k21, k23, k31 };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), KineticsError> {
        for (name, value) in [("k12", self.k12), ("k21", self.k21), ("k23", self.k23), ("k31", self.k31)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(KineticsError::InvalidRate { name, value });
            }
        }
        Ok(())
    }

    /// Same rates with the excitation rate replaced.
    pub fn with_k12(self, k12: f64) -> Self {
        RateSet { k12, ..self }
    }

    /// Total decay rate out of the excited state, `k21 + k23`.
    pub fn excited_decay_rate(&self) -> f64 {
        self.k21 + self.k23
    }

    /// Excited-state lifetime `(k21 + k23)⁻¹` in ns.
    pub fn excited_lifetime_ns(&self) -> f64 {
        1.0 / self.excited_decay_rate()
    }

    /// The 3×3 generator `dp/dt = Q p` (columns sum to zero), row-major.
    pub fn generator(&self) -> [[f64; 3]; 3] {
        [[-self.k12, self.k21, self.k31], [self.k12, -(self.k21 + self.k23), 0.0], [0.0, self.k23, -self.k31]]
    }
}

/// Phenomenological correlation parameters:
/// `g²(τ) = 1 − α·exp(−|τ|/τ₁) + β·exp(−|τ|/τ₂)`, timescales in ns.
///
/// `alpha` is stored independently of `beta` so that background-degraded
/// curves (where `α < 1 + β`) can be represented.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct G2Params {
    pub alpha: f64,
    pub beta: f64,
    pub tau1: f64,
    pub tau2: f64,
}

impl G2Params {
    /// Checked constructor: positive, ordered timescales and `β ≥ 0`.
    pub fn new(alpha: f64, beta: f64, tau1: f64, tau2: f64) -> Result<Self, KineticsError> {
        let p = G2Params { alpha, beta, tau1, tau2 };
        if !(alpha.is_finite() && beta.is_finite()) {
            return Err(KineticsError::InvalidParams("non-finite amplitude".into()));
        }
        if !(tau1 > 0.0 && tau2 > 0.0 && tau1.is_finite() && tau2.is_finite()) {
            return Err(KineticsError::InvalidParams(format!("timescales must be positive, got τ₁={tau1}, τ₂={tau2}")));
        }
        if tau2 < tau1 {
            return Err(KineticsError::InvalidParams(format!("τ₂ ({tau2}) must not be shorter than τ₁ ({tau1})")));
        }
        if beta < 0.0 {
            return Err(KineticsError::InvalidParams(format!("β must be ≥ 0, got {beta}")));
        }
        Ok(p)
    }

    /// Background-free three-level form, `α = 1 + β`.
    pub fn constrained(beta: f64, tau1: f64, tau2: f64) -> Result<Self, KineticsError> {
        let alpha = 1.0 + beta;
        G2Params::new(alpha, alpha - 1.0, tau1, tau2)
    }

    /// `g²(0) = 1 − α + β`.
    pub fn g2_zero(&self) -> f64 {
        1.0 - self.alpha + self.beta
    }

    pub fn eval(&self, tau_ns: f64) -> f64 {
        g2_eval(self, tau_ns)
    }
}

/// Stationary occupation probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
}

/// Saturation curve `I(P) = I∞·P/(P + P_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationParams {
    /// Saturation power, mW.
    pub p_sat: f64,
    /// Asymptotic count rate, counts/s.
    pub i_inf: f64,
    #[serde(default)]
    pub p_sat_sigma: f64,
    #[serde(default)]
    pub i_inf_sigma: f64,
}

impl SaturationParams {
    pub fn new(p_sat: f64, i_inf: f64) -> Result<Self, KineticsError> {
        for (name, value) in [("p_sat", p_sat), ("i_inf", i_inf)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(KineticsError::NonPositive { name, value });
            }
        }
        Ok(SaturationParams { p_sat, i_inf, p_sat_sigma: 0.0, i_inf_sigma: 0.0 })
    }

    pub fn with_sigmas(mut self, p_sat_sigma: f64, i_inf_sigma: f64) -> Self {
        self.p_sat_sigma = p_sat_sigma;
        self.i_inf_sigma = i_inf_sigma;
        self
    }

    /// Count rate at power `p_mw`.
    pub fn rate_at(&self, p_mw: f64) -> f64 {
        self.i_inf * p_mw / (p_mw + self.p_sat)
    }
}

/// Coefficients `A` and `B` of the characteristic quadratic `λ² − Aλ + B`.
pub fn characteristic(rates: &RateSet) -> (f64, f64) {
    let a = rates.k12 + rates.k21 + rates.k23 + rates.k31;
    let b = rates.k12 * (rates.k23 + rates.k31) + rates.k31 * (rates.k21 + rates.k23);
    (a, b)
}

/// Maps rates to `(α, β, τ₁, τ₂)` with `α = 1 + β`, so `g²(0) = 0` exactly.
///
/// `τ₁,₂ = 2/(A ± √(A² − 4B))`; `τ₂` is evaluated as `(A + √·)/(2B)` to
/// avoid cancellation when `B ≪ A²`. When deshelving is faster than the
/// whole excited-state dynamics (`k31 > k12 + k21 + k23`) the slow branch
/// carries the antibunching and `β` comes out negative; the result is still
/// the exact correlation function, so it is returned unchecked.
pub fn g2_params_from_rates(rates: &RateSet) -> Result<G2Params, KineticsError> {
    rates.validate()?;
    let (a, b) = characteristic(rates);
    let disc = a * a - 4.0 * b;
    if disc <= DEGENERATE_ROOT_TOL * a * a {
        return Err(KineticsError::DegenerateRoots { a, disc });
    }
    let s = disc.sqrt();
    let tau1 = 2.0 / (a + s);
    let tau2 = (a + s) / (2.0 * b);
    let beta = (1.0 - tau2 * rates.k31) / (rates.k31 * (tau2 - tau1));
    // β is snapped to α − 1 so that 1 − α + β cancels exactly.
    let alpha = 1.0 + beta;
    Ok(G2Params { alpha, beta: alpha - 1.0, tau1, tau2 })
}

/// `g²(τ) = 1 − α·exp(−|τ|/τ₁) + β·exp(−|τ|/τ₂)`, τ in ns.
pub fn g2_eval(params: &G2Params, tau_ns: f64) -> f64 {
    let t = tau_ns.abs();
    1.0 - params.alpha * (-t / params.tau1).exp() + params.beta * (-t / params.tau2).exp()
}

/// Mean of `g²` over `[lo, hi]` (ns), integrated analytically.
///
/// Histogram bins report averages over their width, so comparisons against
/// binned data should use this rather than the bin-centre value.
pub fn g2_bin_mean(params: &G2Params, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return g2_eval(params, lo);
    }
    // ∫ exp(−|t|/τ) dt over [lo, hi]
    let exp_integral = |tau: f64| -> f64 {
        let prim = |t: f64| -> f64 {
            // odd primitive of exp(−|t|/τ), continuous at 0
            if t >= 0.0 {
                tau * (1.0 - (-t / tau).exp())
            } else {
                -tau * (1.0 - (t / tau).exp())
            }
        };
        prim(hi) - prim(lo)
    };
    let width = hi - lo;
    1.0 - params.alpha * exp_integral(params.tau1) / width + params.beta * exp_integral(params.tau2) / width
}

/// Exact inverse of the β relation: `k31 = 1/[β(τ₂ − τ₁) + τ₂]`.
pub fn k31_from_g2_params(params: &G2Params) -> Result<f64, KineticsError> {
    let denom = params.beta * (params.tau2 - params.tau1) + params.tau2;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(KineticsError::NonPositiveDenominator(denom));
    }
    Ok(1.0 / denom)
}

/// Stationary solution of the rate equations.
pub fn steady_state(rates: &RateSet) -> SteadyState {
    // p1 is the reference weight; p2 = k12·p1/(k21+k23), p3 = (k23/k31)·p2.
    let w2 = rates.k12 / (rates.k21 + rates.k23);
    let w3 = rates.k23 / rates.k31 * w2;
    let norm = 1.0 + w2 + w3;
    SteadyState { p1: 1.0 / norm, p2: w2 / norm, p3: w3 / norm }
}

/// Detected photon rate `ξ·k21·p2` (counts/s) with `k12 = η·P`.
pub fn emission_rate(rates: &RateSet, eta: f64, xi: f64, power_mw: f64) -> f64 {
    let ss = steady_state(&rates.with_k12(eta * power_mw));
    xi * rates.k21 * ss.p2 * NS_PER_S
}

/// Saturation parameters implied by the rate model.
///
/// `rates.k12` is ignored; the excitation rate is `η·P` with `eta` in
/// 1/(ns·mW). `xi` is the overall probability that an emitted photon is
/// detected.
pub fn saturation_from_rates(rates: &RateSet, eta: f64, xi: f64) -> Result<SaturationParams, KineticsError> {
    for (name, value) in [("eta", eta), ("xi", xi)] {
        if !(value.is_finite() && value > 0.0) {
            return Err(KineticsError::NonPositive { name, value });
        }
    }
    let shelf = 1.0 + rates.k23 / rates.k31;
    let i_inf = xi * rates.k21 / shelf * NS_PER_S;
    let p_sat = (rates.k21 + rates.k23) / (eta * shelf);
    SaturationParams::new(p_sat, i_inf)
}

/// Mixes in uncorrelated Poissonian background: `α ← ρ²α`, `β ← ρ²β`,
/// where `ρ` is the signal fraction of the detected light.
pub fn background_degraded_g2(params: &G2Params, rho: f64) -> Result<G2Params, KineticsError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(KineticsError::SignalFraction(rho));
    }
    let r2 = rho * rho;
    Ok(G2Params { alpha: params.alpha * r2, beta: params.beta * r2, ..*params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn derived_rates() -> RateSet {
        RateSet::new(1.0, 10.0, 1.0, 0.5).unwrap()
    }

    #[test]
    fn two_level_limit() {
        // k23 → 0 is not a valid RateSet, so build directly.
        let r = RateSet { k12: 1.0, k21: 10.0, k23: 0.0, k31: 2.0 };
        let (a, b) = characteristic(&r);
        let disc = (a * a - 4.0 * b).sqrt();
        let p = G2Params { alpha: 1.0, beta: 0.0, tau1: 2.0 / (a + disc), tau2: 2.0 / (a - disc) };
        assert_relative_eq!(p.tau1, 1.0 / 11.0, max_relative = 1e-14);
        assert_relative_eq!(p.tau2, 0.5, max_relative = 1e-14);
        // 1/τ₂ = k31 is a root of λ² − Aλ + B
        assert_relative_eq!(r.k31 * r.k31 - a * r.k31 + b, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn derived_example_values() {
        // Frozen from the quadratic λ² − 12.5λ + 7 = 0 solved at high precision.
        let p = g2_params_from_rates(&derived_rates()).unwrap();
        assert_relative_eq!(p.tau1, 0.083946310506705, max_relative = 1e-12);
        assert_relative_eq!(p.tau2, 1.701767975207581, max_relative = 1e-12);
        assert_relative_eq!(p.beta, 0.184341717816939, max_relative = 1e-11);
        assert_relative_eq!(p.alpha, 1.0 + p.beta);
        assert_eq!(p.g2_zero(), 0.0);
    }

    #[test]
    fn rate_scaling_homogeneity() {
        let r = derived_rates();
        let p = g2_params_from_rates(&r).unwrap();
        let s = 3.7;
        let q = g2_params_from_rates(&RateSet::new(s, 10.0 * s, s, 0.5 * s).unwrap()).unwrap();
        assert_relative_eq!(q.tau1, p.tau1 / s, max_relative = 1e-12);
        assert_relative_eq!(q.tau2, p.tau2 / s, max_relative = 1e-12);
        assert_relative_eq!(q.beta, p.beta, max_relative = 1e-10);
    }

    #[test]
    fn degenerate_roots_rejected() {
        // A² = 4B exactly: k12 = 1, k21 = 1, k23 = 1, k31 = 1 gives A = 4, B = 4.
        let r = RateSet::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert!(matches!(g2_params_from_rates(&r), Err(KineticsError::DegenerateRoots { .. })));
    }

    #[test]
    fn invalid_rates_rejected() {
        assert!(RateSet::new(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(RateSet::new(f64::NAN, 1.0, 1.0, 1.0).is_err());
        assert!(RateSet::new(1.0, 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn g2_eval_examples() {
        let p = G2Params::new(1.0, 0.0, 0.776, 10.0).unwrap();
        assert_relative_eq!(g2_eval(&p, 0.776), 1.0 - (-1.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(g2_eval(&p, -0.776), g2_eval(&p, 0.776));
        assert!((g2_eval(&p, 1e4) - 1.0).abs() < 1e-12);

        let c = G2Params::constrained(0.3, 0.5, 5.0).unwrap();
        assert_eq!(g2_eval(&c, 0.0), 0.0);

        // free fit with g²(0) = 0.05 ⇔ α − β = 0.95
        let f = G2Params::new(1.25, 0.30, 0.5, 5.0).unwrap();
        assert_relative_eq!(f.g2_zero(), 0.05, epsilon = 1e-15);
        assert_relative_eq!(f.alpha - f.beta, 0.95, epsilon = 1e-15);
    }

    #[test]
    fn bin_mean_matches_quadrature() {
        let p = G2Params::new(1.2, 0.2, 0.3, 4.0).unwrap();
        for (lo, hi) in [(-0.05, 0.05), (0.1, 0.2), (-3.0, -2.9), (-0.02, 0.5)] {
            let n = 20_000;
            let h = (hi - lo) / n as f64;
            let mut s = 0.0;
            for i in 0..n {
                s += g2_eval(&p, lo + (i as f64 + 0.5) * h);
            }
            assert_relative_eq!(g2_bin_mean(&p, lo, hi), s / n as f64, max_relative = 1e-8);
        }
    }

    #[test]
    fn k31_inverse_examples() {
        let p = g2_params_from_rates(&derived_rates()).unwrap();
        assert_relative_eq!(k31_from_g2_params(&p).unwrap(), 0.5, max_relative = 1e-14);

        let two = G2Params::new(1.0, 0.0, 0.1, 2.5).unwrap();
        assert_relative_eq!(k31_from_g2_params(&two).unwrap(), 1.0 / 2.5);

        let q = G2Params::new(1.5, 0.5, 0.1, 1.0).unwrap();
        assert_relative_eq!(k31_from_g2_params(&q).unwrap(), 1.0 / 1.45, max_relative = 1e-15);

        let bad = G2Params { alpha: 1.0, beta: -3.0, tau1: 0.1, tau2: 1.0 };
        assert!(matches!(k31_from_g2_params(&bad), Err(KineticsError::NonPositiveDenominator(_))));
    }

    #[test]
    fn steady_state_examples() {
        let ss = steady_state(&derived_rates());
        assert_relative_eq!(ss.p1 + ss.p2 + ss.p3, 1.0, epsilon = 1e-15);
        assert_relative_eq!(ss.p3 / ss.p2, 2.0, max_relative = 1e-14);

        let no_shelf = steady_state(&RateSet { k23: 0.0, ..derived_rates() });
        assert_eq!(no_shelf.p3, 0.0);

        let sat = steady_state(&derived_rates().with_k12(1e12));
        assert!(sat.p1 < 1e-10);
    }

    #[test]
    fn saturation_examples() {
        let r = derived_rates();
        let s = saturation_from_rates(&r, 1.0, 1.0).unwrap();
        assert_relative_eq!(s.i_inf, 10.0 / 3.0 * NS_PER_S, max_relative = 1e-14);

        let two = RateSet { k23: 0.0, ..r };
        let s2 = saturation_from_rates(&two, 0.4, 0.01).unwrap();
        assert_relative_eq!(s2.i_inf, 0.01 * 10.0 * NS_PER_S, max_relative = 1e-14);
        assert_relative_eq!(s2.p_sat, 10.0 / 0.4, max_relative = 1e-14);

        // measured-looking values as a SaturationParams instance
        let emitter = SaturationParams::new(2.32, 0.69e6).unwrap();
        assert_relative_eq!(emitter.rate_at(2.32), 0.345e6, max_relative = 1e-14);

        assert!(saturation_from_rates(&r, 0.0, 1.0).is_err());
    }

    #[test]
    fn background_mixing() {
        let p = g2_params_from_rates(&derived_rates()).unwrap();
        assert_eq!(background_degraded_g2(&p, 1.0).unwrap(), p);

        let rho = 0.95f64.sqrt();
        let d = background_degraded_g2(&p, rho).unwrap();
        assert_relative_eq!(d.g2_zero(), 0.05, epsilon = 1e-12);
        assert_eq!(d.tau1, p.tau1);
        assert_eq!(d.tau2, p.tau2);

        let tiny = background_degraded_g2(&p, 1e-6).unwrap();
        for t in [0.0, 0.1, 1.0, 10.0] {
            assert!((g2_eval(&tiny, t) - 1.0).abs() < 1e-11);
        }
        assert!(background_degraded_g2(&p, 0.0).is_err());
        assert!(background_degraded_g2(&p, 1.1).is_err());
    }

    #[test]
    fn g2_params_checked_constructor() {
        assert!(G2Params::new(1.0, 0.1, 2.0, 1.0).is_err());
        assert!(G2Params::new(1.0, -0.1, 1.0, 2.0).is_err());
        assert!(G2Params::new(1.0, 0.1, 0.0, 2.0).is_err());
    }
}
