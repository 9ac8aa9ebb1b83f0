//! Least-squares fitting: the generic minimizer and every built-in model.

pub mod curves;
pub mod g2;
pub mod lifetime;
pub mod lm;
pub mod rates;

pub use curves::{
    fit_k31_power, fit_polarization, fit_saturation, k31_power_model, polarization_model, saturation_model,
    PolarizationFit, SaturationFit,
};
pub use g2::{fit_g2_cw, g2_model_constrained, g2_model_free, G2Fit, G2FitMode};
pub use lifetime::{fit_lifetime, lifetime_model, synthetic_decay, IrfModel, LifetimeFit};
pub use lm::{jacobian, minimize, Bound, Dataset, Difference, FitError, FitOptions, FitParam, FitResult, ParamSpec};
pub use rates::{
    extract_rates, forward_series, k31_with_sigma, lifetime_consistency, rate_series_model, K31Point, LifetimeCheck,
    PowerSeriesPoint, RateExtraction,
};
