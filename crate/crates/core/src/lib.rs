//! Single-photon emitter analysis: three-level kinetics, photon-stream
//! simulation, correlation, curve fitting, a quasi-1D exciton model and
//! collection-efficiency arithmetic.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correlator;
pub mod exciton;
pub mod fitlab;
pub mod kinetics;
pub mod optics;
pub mod photostream;
pub mod plot;
pub mod timestamps;

pub use correlator::{correlate, intensity_trace, pulsed_g2, CorrelationHistogram, IntensityTrace, PulsedG2Result};
pub use exciton::{zpl_distribution, zpl_for_defect, ExcitonParams, StackProfile, ZplSpectrum};
pub use fitlab::{extract_rates, fit_g2_cw, fit_lifetime, fit_polarization, fit_saturation, FitOptions, FitResult};
pub use kinetics::{G2Params, RateSet, SaturationParams};
pub use optics::{collection_half_angle, quantum_efficiency, EfficiencyBudget};
pub use photostream::{simulate_cw, simulate_pulsed, DetectorModel, PhotonStream};
pub use timestamps::TimestampChannel;
