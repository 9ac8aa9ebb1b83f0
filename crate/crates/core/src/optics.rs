//! Collection-chain arithmetic: numerical-aperture half-angle, quantum
//! efficiency from an efficiency budget, and extraction-enhancement ratios.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetics::SaturationParams;

#[derive(Debug, Error, PartialEq)]
pub enum OpticsError {
    #[error("{name} must be in (0, 1], got {value}")]
    Efficiency { name: &'static str, value: f64 },
    #[error("{name} must be > 0, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("numerical aperture {na} exceeds medium index {n_medium} (evanescent regime)")]
    Evanescent { na: f64, n_medium: f64 },
    #[error("{0}")]
    Input(String),
}

fn positive(name: &'static str, value: f64) -> Result<(), OpticsError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(OpticsError::NonPositive { name, value })
    }
}

/// Maximum collected half-angle `asin(na / n_medium)` in degrees.
pub fn collection_half_angle(na: f64, n_medium: f64) -> Result<f64, OpticsError> {
    positive("n_medium", n_medium)?;
    if !(na >= 0.0 && na.is_finite()) {
        return Err(OpticsError::NonPositive { name: "na", value: na });
    }
    if na > n_medium {
        return Err(OpticsError::Evanescent { na, n_medium });
    }
    Ok((na / n_medium).asin().to_degrees())
}

/// Extraction/collection, fiber coupling, objective transmission and detector
/// efficiencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyBudget {
    pub eta_c: f64,
    pub eta_f: f64,
    pub eta_o: f64,
    pub eta_d: f64,
}

impl EfficiencyBudget {
    pub fn new(eta_c: f64, eta_f: f64, eta_o: f64, eta_d: f64) -> Result<Self, OpticsError> {
        let b = Self { eta_c, eta_f, eta_o, eta_d };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        for (name, value) in
            [("eta_c", self.eta_c), ("eta_f", self.eta_f), ("eta_o", self.eta_o), ("eta_d", self.eta_d)]
        {
            if !(value > 0.0 && value <= 1.0) {
                return Err(OpticsError::Efficiency { name, value });
            }
        }
        Ok(())
    }

    /// End-to-end detection probability.
    pub fn product(&self) -> f64 {
        self.eta_c * self.eta_f * self.eta_o * self.eta_d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantumEfficiency {
    pub eta_q: f64,
    pub detection_probability: f64,
    /// `η_q > 1`: the inputs are mutually inconsistent.
    pub exceeds_unity: bool,
}

/// `η_q = I∞ / (I_total · η_c·η_f·η_o·η_d)`.
pub fn quantum_efficiency(
    i_inf: f64,
    i_total: f64,
    budget: &EfficiencyBudget,
) -> Result<QuantumEfficiency, OpticsError> {
    positive("i_inf", i_inf)?;
    positive("i_total", i_total)?;
    budget.validate()?;
    let p = budget.product();
    let eta_q = i_inf / (i_total * p);
    Ok(QuantumEfficiency { eta_q, detection_probability: p, exceeds_unity: eta_q > 1.0 })
}

/// Total emission rate taken as one photon per lifetime, `1/τ` in 1/s.
pub fn total_rate_from_lifetime(lifetime_ps: f64) -> Result<f64, OpticsError> {
    positive("lifetime_ps", lifetime_ps)?;
    Ok(1e12 / lifetime_ps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ratio {
    pub value: f64,
    pub sigma: f64,
}

/// Ratio of asymptotic count rates `I∞_b / I∞_a` with first-order
/// propagation of their uncertainties.
pub fn enhancement_ratio(a: &SaturationParams, b: &SaturationParams) -> Result<Ratio, OpticsError> {
    positive("a.i_inf", a.i_inf)?;
    positive("b.i_inf", b.i_inf)?;
    let value = b.i_inf / a.i_inf;
    let rel = ((a.i_inf_sigma / a.i_inf).powi(2) + (b.i_inf_sigma / b.i_inf).powi(2)).sqrt();
    Ok(Ratio { value, sigma: value * rel })
}

/// Ratio of sample means `mean(patterned) / mean(pristine)`, with the
/// uncertainty propagated from the standard errors of both means.
pub fn mean_enhancement(pristine: &[f64], patterned: &[f64]) -> Result<Ratio, OpticsError> {
    let stats = |name: &str, v: &[f64]| -> Result<(f64, f64), OpticsError> {
        if v.is_empty() {
            return Err(OpticsError::Input(format!("{name} sample is empty")));
        }
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let sem =
            if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt() } else { 0.0 };
        Ok((m, sem))
    };
    let (ma, sa) = stats("pristine", pristine)?;
    let (mb, sb) = stats("patterned", patterned)?;
    positive("mean(pristine)", ma)?;
    let value = mb / ma;
    let sigma = value.abs() * ((sa / ma).powi(2) + (sb / mb).powi(2)).sqrt();
    Ok(Ratio { value, sigma })
}
