//! Python bindings. Structured results are returned as plain dicts built from
//! the library's JSON serialization.

use std::fmt::Display;

use emitterlab::correlator::{self, CorrelationHistogram};
use emitterlab::exciton::{self, ExcitonParams, GridSpec, StackProfile};
use emitterlab::fitlab::{self, Dataset, FitOptions, G2FitMode};
use emitterlab::kinetics::{self, RateSet};
use emitterlab::optics::{self, EfficiencyBudget};
use emitterlab::photostream::{self, BackgroundModel, DetectorModel, PulseTrain};
use emitterlab::timestamps::TimestampChannel;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let s = serde_json::to_string(v).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (s,))?.unbind())
}

fn rates(r: (f64, f64, f64, f64)) -> RateSet {
    RateSet { k12: r.0, k21: r.1, k23: r.2, k31: r.3 }
}

fn channel(ts: Vec<u64>, duration_ps: Option<u64>, label: &str) -> PyResult<TimestampChannel> {
    let d = duration_ps.unwrap_or_else(|| ts.iter().copied().max().unwrap_or(0));
    TimestampChannel::from_unsorted(ts, d, label).map_err(err)
}

/// `(alpha, beta, tau1_ns, tau2_ns)` of the g2 function for rates
/// `(k12, k21, k23, k31)` in 1/ns.
#[pyfunction]
fn g2_params(r: (f64, f64, f64, f64)) -> PyResult<(f64, f64, f64, f64)> {
    let g = kinetics::g2_params_from_rates(&rates(r)).map_err(err)?;
    Ok((g.alpha, g.beta, g.tau1, g.tau2))
}

/// g2 at each delay (ns) for rates `(k12, k21, k23, k31)`.
#[pyfunction]
fn g2_curve(r: (f64, f64, f64, f64), tau_ns: Vec<f64>) -> PyResult<Vec<f64>> {
    let g = kinetics::g2_params_from_rates(&rates(r)).map_err(err)?;
    Ok(tau_ns.iter().map(|&t| kinetics::g2_eval(&g, t)).collect())
}

/// Detector timestamps `(a, b)` in ps for an emitter behind a beam splitter.
/// Continuous-wave unless `rep_rate_mhz` is given.
#[pyfunction]
#[pyo3(signature = (r, duration_ms, seed, background_cps=0.0, efficiency=0.3, jitter_ps=30.0, dead_time_ps=20000.0, dark_cps=100.0, rep_rate_mhz=None, excitation_prob=1.0))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    r: (f64, f64, f64, f64),
    duration_ms: f64,
    seed: u64,
    background_cps: f64,
    efficiency: f64,
    jitter_ps: f64,
    dead_time_ps: f64,
    dark_cps: f64,
    rep_rate_mhz: Option<f64>,
    excitation_prob: f64,
) -> PyResult<(Vec<u64>, Vec<u64>)> {
    if !(duration_ms > 0.0 && duration_ms.is_finite()) {
        return Err(err(format!("duration_ms must be > 0, got {duration_ms}")));
    }
    let duration = (duration_ms * 1e9).round() as u64;
    let bg = BackgroundModel { rate_cps: background_cps };
    let stream = match rep_rate_mhz {
        Some(rep) => {
            let train = PulseTrain { rep_rate_mhz: rep, pulse_width_ps: 0.0, excitation_prob };
            photostream::simulate_pulsed(&rates(r), &train, duration, &bg, seed)
        }
        None => photostream::simulate_cw(&rates(r), duration, &bg, seed),
    }
    .map_err(err)?;
    let det = DetectorModel { efficiency, jitter_sigma_ps: jitter_ps, dead_time_ps, dark_rate_cps: dark_cps };
    let (a, b) = photostream::detect_hbt(&stream, 0.5, &det, &det, seed ^ 0x5DEE_CE66_D1CE_4E5B).map_err(err)?;
    Ok((a.into_timestamps(), b.into_timestamps()))
}

fn histogram_dict(py: Python<'_>, h: &CorrelationHistogram) -> PyResult<Py<PyAny>> {
    let v = serde_json::json!({
        "tau_ps": (0..h.len()).map(|i| h.tau_ps(i)).collect::<Vec<_>>(),
        "counts": h.counts,
        "g2": h.g2(),
        "g2_err": h.g2_err(),
        "normalization": h.normalization,
        "bin_width_ps": h.bin_width_ps,
    });
    to_py(py, &v)
}

fn histogram(
    a: Vec<u64>,
    b: Vec<u64>,
    bin_ps: u64,
    window_ns: f64,
    duration_ps: Option<u64>,
) -> PyResult<CorrelationHistogram> {
    let end = a.iter().chain(&b).copied().max().unwrap_or(0);
    let d = Some(duration_ps.unwrap_or(end));
    let (a, b) = (channel(a, d, "A")?, channel(b, d, "B")?);
    correlator::correlate(&a, &b, bin_ps, (window_ns * 1e3).round() as u64).map_err(err)
}

/// Normalized coincidence histogram of τ = t_b − t_a.
#[pyfunction]
#[pyo3(signature = (a, b, bin_ps=100, window_ns=400.0, duration_ps=None))]
fn correlate(
    py: Python<'_>,
    a: Vec<u64>,
    b: Vec<u64>,
    bin_ps: u64,
    window_ns: f64,
    duration_ps: Option<u64>,
) -> PyResult<Py<PyAny>> {
    histogram_dict(py, &histogram(a, b, bin_ps, window_ns, duration_ps)?)
}

/// Correlates two channels and fits the g2 model (`mode` "free" or "constrained").
#[pyfunction]
#[pyo3(signature = (a, b, bin_ps=100, window_ns=100.0, mode="free", duration_ps=None))]
fn fit_g2(
    py: Python<'_>,
    a: Vec<u64>,
    b: Vec<u64>,
    bin_ps: u64,
    window_ns: f64,
    mode: &str,
    duration_ps: Option<u64>,
) -> PyResult<Py<PyAny>> {
    let mode = match mode {
        "free" => G2FitMode::Free,
        "constrained" => G2FitMode::Constrained,
        other => return Err(err(format!("mode must be \"free\" or \"constrained\", got {other:?}"))),
    };
    let h = histogram(a, b, bin_ps, window_ns, duration_ps)?;
    to_py(py, &fitlab::fit_g2_cw(&h, mode, &FitOptions::default()).map_err(err)?)
}

/// Peak-area g2(0) under pulsed excitation.
#[pyfunction]
#[pyo3(signature = (a, b, rep_rate_mhz, n_peaks=10))]
fn pulsed_g2(py: Python<'_>, a: Vec<u64>, b: Vec<u64>, rep_rate_mhz: f64, n_peaks: usize) -> PyResult<Py<PyAny>> {
    let end = a.iter().chain(&b).copied().max();
    let (a, b) = (channel(a, end, "A")?, channel(b, end, "B")?);
    to_py(py, &correlator::pulsed_g2(&a, &b, rep_rate_mhz, n_peaks).map_err(err)?)
}

fn dataset(x: Vec<f64>, y: Vec<f64>, sigma: Option<Vec<f64>>) -> PyResult<Dataset> {
    match sigma {
        Some(s) => Dataset::new(x, y, s),
        None => Dataset::unweighted(x, y),
    }
    .map_err(err)
}

/// Saturation fit of count rate against power (mW).
#[pyfunction]
#[pyo3(signature = (power_mw, rate_cps, sigma=None))]
fn fit_saturation(
    py: Python<'_>,
    power_mw: Vec<f64>,
    rate_cps: Vec<f64>,
    sigma: Option<Vec<f64>>,
) -> PyResult<Py<PyAny>> {
    to_py(py, &fitlab::fit_saturation(&dataset(power_mw, rate_cps, sigma)?, &FitOptions::default()).map_err(err)?)
}

/// Polarization fit of counts against analyzer angle (degrees).
#[pyfunction]
#[pyo3(signature = (angle_deg, counts, sigma=None))]
fn fit_polarization(
    py: Python<'_>,
    angle_deg: Vec<f64>,
    counts: Vec<f64>,
    sigma: Option<Vec<f64>>,
) -> PyResult<Py<PyAny>> {
    let ds = match sigma {
        Some(s) => Dataset::new(angle_deg, counts, s),
        None => Dataset::poisson(angle_deg, counts),
    }
    .map_err(err)?;
    to_py(py, &fitlab::fit_polarization(&ds, &FitOptions::default()).map_err(err)?)
}

/// Decay fit with a Gaussian instrument response of width `irf_sigma_ps`
/// (0 for an ideal response).
#[pyfunction]
#[pyo3(signature = (t_ps, counts, irf_sigma_ps=0.0))]
fn fit_lifetime(py: Python<'_>, t_ps: Vec<f64>, counts: Vec<f64>, irf_sigma_ps: f64) -> PyResult<Py<PyAny>> {
    let irf = if irf_sigma_ps > 0.0 {
        fitlab::IrfModel::Gaussian { sigma_ps: irf_sigma_ps }
    } else {
        fitlab::IrfModel::Delta
    };
    to_py(py, &fitlab::fit_lifetime(&t_ps, &counts, &irf, &FitOptions::default()).map_err(err)?)
}

/// `asin(na / n_medium)` in degrees.
#[pyfunction]
fn collection_half_angle(na: f64, n_medium: f64) -> PyResult<f64> {
    optics::collection_half_angle(na, n_medium).map_err(err)
}

/// Quantum efficiency for efficiencies `(eta_c, eta_f, eta_o, eta_d)`.
#[pyfunction]
fn quantum_efficiency(i_inf: f64, i_total: f64, eta: (f64, f64, f64, f64)) -> PyResult<f64> {
    let b = EfficiencyBudget::new(eta.0, eta.1, eta.2, eta.3).map_err(err)?;
    Ok(optics::quantum_efficiency(i_inf, i_total, &b).map_err(err)?.eta_q)
}

/// ZPL distribution for defects at `positions` (bilayer units) near the
/// `h`/`c` stacking sequence `stack`. `params` overrides exciton parameters
/// by name.
#[pyfunction]
#[pyo3(signature = (stack, positions, params=None))]
fn zpl_distribution(
    py: Python<'_>,
    stack: &str,
    positions: Vec<f64>,
    params: Option<Bound<'_, PyAny>>,
) -> PyResult<Py<PyAny>> {
    let stack = StackProfile::parse(stack, StackProfile::DEFAULT_BILAYER_NM).map_err(err)?;
    let params: ExcitonParams = match params {
        Some(p) => {
            let s: String = py.import("json")?.call_method1("dumps", (p,))?.extract()?;
            serde_json::from_str(&s).map_err(err)?
        }
        None => ExcitonParams::default(),
    };
    params.validate().map_err(err)?;
    to_py(py, &exciton::zpl_distribution(&stack, &positions, &params, &GridSpec::default()).map_err(err)?)
}

/// Writes timestamps (ps) to a PTS1 file.
#[pyfunction]
fn write_pts(path: &str, timestamps: Vec<u64>) -> PyResult<()> {
    channel(timestamps, None, "channel")?.write_pts(path).map_err(err)
}

/// Reads timestamps (ps) from a PTS1 file.
#[pyfunction]
fn read_pts(path: &str) -> PyResult<Vec<u64>> {
    Ok(TimestampChannel::read_pts(path, None).map_err(err)?.into_timestamps())
}

#[pymodule]
fn emitterlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(g2_params, m)?)?;
    m.add_function(wrap_pyfunction!(g2_curve, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(correlate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_g2, m)?)?;
    m.add_function(wrap_pyfunction!(pulsed_g2, m)?)?;
    m.add_function(wrap_pyfunction!(fit_saturation, m)?)?;
    m.add_function(wrap_pyfunction!(fit_polarization, m)?)?;
    m.add_function(wrap_pyfunction!(fit_lifetime, m)?)?;
    m.add_function(wrap_pyfunction!(collection_half_angle, m)?)?;
    m.add_function(wrap_pyfunction!(quantum_efficiency, m)?)?;
    m.add_function(wrap_pyfunction!(zpl_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(write_pts, m)?)?;
    m.add_function(wrap_pyfunction!(read_pts, m)?)?;
    Ok(())
}
