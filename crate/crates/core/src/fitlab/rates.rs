//! Transition-rate extraction from a power series of g² fits.
//!
//! Each point gives `k31 = 1/[β(τ₂ − τ₁) + τ₂]` directly. `τ₁(P)` and `τ₂(P)`
//! are then fitted jointly with `k21`, `k23` and `η` free, `k12 = η·P` and
//! `k31` held at its per-point value.

use serde::{Deserialize, Serialize};

use super::lm::{minimize, Dataset, FitError, FitOptions, FitResult, ParamSpec};
use crate::kinetics::{characteristic, g2_params_from_rates, RateSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSeriesPoint {
    pub power_mw: f64,
    pub tau1: f64,
    pub tau1_sigma: f64,
    pub tau2: f64,
    pub tau2_sigma: f64,
    pub beta: f64,
    pub beta_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct K31Point {
    pub power_mw: f64,
    pub k31: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateExtraction {
    pub k21: f64,
    pub k21_sigma: Option<f64>,
    pub k23: f64,
    pub k23_sigma: Option<f64>,
    pub eta: f64,
    pub eta_sigma: Option<f64>,
    pub k31: Vec<K31Point>,
    /// `(k21 + k23)⁻¹`, ns.
    pub lifetime_ns: f64,
    pub lifetime_sigma_ns: Option<f64>,
    /// False when no point shows bunching above its noise, leaving `k23` and
    /// `k31` unidentifiable.
    pub shelving_resolved: bool,
    pub fit: FitResult,
}

/// `k31` from one point with first-order error propagation.
pub fn k31_with_sigma(p: &PowerSeriesPoint) -> Result<(f64, f64), FitError> {
    let denom = p.beta * (p.tau2 - p.tau1) + p.tau2;
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(FitError::InconsistentSeries(format!(
            "k31 denominator β(τ₂ − τ₁) + τ₂ = {denom} at P = {} mW",
            p.power_mw
        )));
    }
    let k = 1.0 / denom;
    let k2 = k * k;
    let d_beta = -k2 * (p.tau2 - p.tau1);
    let d_tau1 = k2 * p.beta;
    let d_tau2 = -k2 * (1.0 + p.beta);
    let var = (d_beta * p.beta_sigma).powi(2) + (d_tau1 * p.tau1_sigma).powi(2) + (d_tau2 * p.tau2_sigma).powi(2);
    Ok((k, var.sqrt()))
}

/// Linear seeds: `A − k31 = η·P + K` and `B − k31·K = η·P·(k23 + k31)`.
fn seed(series: &[PowerSeriesPoint], k31: &[f64]) -> (f64, f64, f64) {
    let n = series.len() as f64;
    let xs: Vec<f64> = series.iter().map(|p| p.power_mw).collect();
    let ys: Vec<f64> = series.iter().zip(k31).map(|(p, k)| 1.0 / p.tau1 + 1.0 / p.tau2 - k).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let mut eta = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let mut big_k = my - eta * mx;
    if !(eta > 0.0) {
        eta = my / mx.max(1e-12) * 0.5;
    }
    if !(big_k > 0.0) {
        big_k = my * 0.5;
    }
    let mut k23s: Vec<f64> = series
        .iter()
        .zip(k31)
        .map(|(p, &k)| {
            let b = 1.0 / (p.tau1 * p.tau2);
            (b - k * big_k) / (eta * p.power_mw) - k
        })
        .filter(|v| v.is_finite())
        .collect();
    k23s.sort_by(f64::total_cmp);
    let mut k23 = k23s.get(k23s.len() / 2).copied().unwrap_or(0.0);
    if !(k23 > 0.0 && k23 < big_k) {
        k23 = 0.05 * big_k;
    }
    (big_k - k23, k23, eta)
}

/// Per-point `(τ₁, τ₂)` of the three-level model.
fn taus(k21: f64, k23: f64, eta: f64, power: f64, k31: f64) -> (f64, f64) {
    let r = RateSet { k12: eta * power, k21, k23, k31 };
    match g2_params_from_rates(&r) {
        Ok(g) => (g.tau1, g.tau2),
        Err(_) => {
            // coalescing roots: fall back to the repeated root
            let (a, _) = characteristic(&r);
            (2.0 / a, 2.0 / a)
        }
    }
}

/// `[τ₁(P₀…), τ₂(P₀…)]` for parameters `[k21, k23, η]` with `k31` given
/// per power.
pub fn rate_series_model(powers: &[f64], k31: &[f64], p: &[f64]) -> Vec<f64> {
    let pairs: Vec<(f64, f64)> = powers.iter().zip(k31).map(|(&pw, &k)| taus(p[0], p[1], p[2], pw, k)).collect();
    pairs.iter().map(|t| t.0).chain(pairs.iter().map(|t| t.1)).collect()
}

/// Joint rate extraction over a power series (≥ 4 points).
///
/// Points are weighted by their own fitted uncertainties; a non-positive
/// σ falls back to 1 % of the value.
pub fn extract_rates(series: &[PowerSeriesPoint], opts: &FitOptions) -> Result<RateExtraction, FitError> {
    if series.len() < 4 {
        return Err(FitError::Underdetermined { points: series.len(), params: 4 });
    }
    for p in series {
        let ok = [p.power_mw, p.tau1, p.tau2].iter().all(|v| v.is_finite() && *v > 0.0) && p.beta.is_finite();
        if !ok {
            return Err(FitError::InconsistentSeries(format!(
                "point at P = {} mW has non-positive power or timescale",
                p.power_mw
            )));
        }
    }
    let mut k31 = Vec::with_capacity(series.len());
    for p in series {
        let (k, s) = k31_with_sigma(p)?;
        k31.push(K31Point { power_mw: p.power_mw, k31: k, sigma: s });
    }
    let k31v: Vec<f64> = k31.iter().map(|k| k.k31).collect();
    let (k21_0, k23_0, eta_0) = seed(series, &k31v);

    let n = series.len();
    let mut y = Vec::with_capacity(2 * n);
    let mut sigma = Vec::with_capacity(2 * n);
    for p in series {
        y.push(p.tau1);
        sigma.push(if p.tau1_sigma > 0.0 { p.tau1_sigma } else { 0.01 * p.tau1 });
    }
    for p in series {
        y.push(p.tau2);
        sigma.push(if p.tau2_sigma > 0.0 { p.tau2_sigma } else { 0.01 * p.tau2 });
    }
    let data = Dataset::new((0..2 * n).map(|i| i as f64).collect(), y, sigma)?;
    let powers: Vec<f64> = series.iter().map(|p| p.power_mw).collect();
    let model = |_: &[f64], q: &[f64]| rate_series_model(&powers, &k31v, q);
    let fit = minimize(
        model,
        &data,
        &[ParamSpec::positive("k21", k21_0), ParamSpec::positive("k23", k23_0), ParamSpec::positive("eta", eta_0)],
        opts,
    )?;
    let v = fit.values();
    let (k21, k23, eta) = (v[0], v[1], v[2]);
    let lifetime_ns = 1.0 / (k21 + k23);
    let lifetime_sigma_ns = fit.covariance.as_ref().map(|c| {
        let var = c[0][0] + c[1][1] + 2.0 * c[0][1];
        lifetime_ns * lifetime_ns * var.max(0.0).sqrt()
    });
    let shelving_resolved = series.iter().any(|p| p.beta > 3.0 * p.beta_sigma.max(1e-3));
    Ok(RateExtraction {
        k21,
        k21_sigma: fit.params[0].sigma,
        k23,
        k23_sigma: fit.params[1].sigma,
        eta,
        eta_sigma: fit.params[2].sigma,
        k31,
        lifetime_ns,
        lifetime_sigma_ns,
        shelving_resolved,
        fit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LifetimeCheck {
    pub implied_ns: f64,
    pub implied_sigma_ns: f64,
    pub measured_ns: f64,
    pub measured_sigma_ns: f64,
    pub difference_ns: f64,
    /// `|implied − measured| / measured`.
    pub relative_difference: f64,
    /// Difference over the combined uncertainty.
    pub z_score: f64,
    /// Relative difference within 10 %.
    pub roughly_consistent: bool,
}

/// Compares the g²-implied excited-state lifetime with a directly measured one.
pub fn lifetime_consistency(
    implied_ns: f64,
    implied_sigma_ns: f64,
    measured_ns: f64,
    measured_sigma_ns: f64,
) -> LifetimeCheck {
    let difference_ns = implied_ns - measured_ns;
    let relative_difference = difference_ns.abs() / measured_ns;
    let combined = (implied_sigma_ns.powi(2) + measured_sigma_ns.powi(2)).sqrt();
    let z_score = if combined > 0.0 { difference_ns.abs() / combined } else { f64::INFINITY };
    LifetimeCheck {
        implied_ns,
        implied_sigma_ns,
        measured_ns,
        measured_sigma_ns,
        difference_ns,
        relative_difference,
        z_score,
        roughly_consistent: relative_difference <= 0.10,
    }
}

/// Noise-free power series from known rates, with `k31` given per power.
///
/// Uncertainties are set to `rel_sigma` times each value.
pub fn forward_series(
    k21: f64,
    k23: f64,
    eta: f64,
    powers: &[f64],
    k31: impl Fn(f64) -> f64,
    rel_sigma: f64,
) -> Result<Vec<PowerSeriesPoint>, crate::kinetics::KineticsError> {
    powers
        .iter()
        .map(|&pw| {
            let g = g2_params_from_rates(&RateSet::new(eta * pw, k21, k23, k31(pw))?)?;
            Ok(PowerSeriesPoint {
                power_mw: pw,
                tau1: g.tau1,
                tau1_sigma: rel_sigma * g.tau1,
                tau2: g.tau2,
                tau2_sigma: rel_sigma * g.tau2,
                beta: g.beta,
                beta_sigma: rel_sigma * g.beta.abs().max(1e-3),
            })
        })
        .collect()
}
