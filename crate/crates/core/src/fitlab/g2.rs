//! Fit of the three-level g²(τ) form to a cw correlation histogram.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::lm::{minimize, Dataset, FitError, FitOptions, FitResult, ParamSpec};
use crate::correlator::CorrelationHistogram;
use crate::kinetics::{g2_bin_mean, G2Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum G2FitMode {
    /// `α = 1 + β`, i.e. `g²(0) = 0`.
    Constrained,
    /// `α` independent of `β`.
    #[default]
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct G2Fit {
    pub fit: FitResult,
    pub mode: G2FitMode,
    pub params: G2Params,
    /// `1 − α + β`.
    pub g2_zero: f64,
    pub g2_zero_sigma: Option<f64>,
}

/// Bin-averaged model over `x = [lo₀, hi₀, lo₁, hi₁, …]` (ns);
/// parameters `[α, β, τ₁, τ₂]`.
pub fn g2_model_free(x: &[f64], p: &[f64]) -> Vec<f64> {
    let g = G2Params { alpha: p[0], beta: p[1], tau1: p[2], tau2: p[3] };
    x.chunks_exact(2).map(|e| g2_bin_mean(&g, e[0], e[1])).collect()
}

/// As [`g2_model_free`] with `α = 1 + β`; parameters `[β, τ₁, τ₂]`.
pub fn g2_model_constrained(x: &[f64], p: &[f64]) -> Vec<f64> {
    g2_model_free(x, &[1.0 + p[0], p[0], p[1], p[2]])
}

/// Deterministic seed from the histogram shape: `(α, β, τ₁, τ₂)`.
fn seed(taus: &[f64], g: &[f64]) -> (f64, f64, f64, f64) {
    let half = taus.len() / 2;
    // fold ±τ and smooth over 5 bins to tame shot noise
    let folded: Vec<f64> = (0..=half).map(|k| 0.5 * (g[half + k] + g[half - k])).collect();
    let t: Vec<f64> = (0..=half).map(|k| taus[half + k]).collect();
    let smooth: Vec<f64> = (0..folded.len())
        .map(|i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 3).min(folded.len());
            folded[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let g0 = g[half];
    let (ipk, peak) =
        smooth.iter().enumerate().fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let beta0 = (peak - 1.0).max(0.0);
    let alpha0 = (1.0 + beta0 - g0).max(0.05);

    // dip: half-way from g(0) up to the peak level
    let level = 0.5 * (g0 + 1.0 + beta0);
    let ihalf = smooth.iter().position(|&v| v >= level).unwrap_or(1).max(1);
    let dt = if t.len() > 1 { t[1] - t[0] } else { 1.0 };
    let tau1 = (t[ihalf].max(0.5 * dt) / std::f64::consts::LN_2).max(0.25 * dt);

    // bunching tail: time from the peak down to 1 + β/e; a tail that never
    // decays inside the window yields the full span
    let tau2 = if beta0 > 0.02 {
        let target = 1.0 + beta0 / std::f64::consts::E;
        smooth[ipk..].iter().position(|&v| v <= target).map(|i| t[ipk + i] - t[ipk]).unwrap_or(t[t.len() - 1])
    } else {
        5.0 * tau1
    };
    let tau2 = tau2.max(2.0 * tau1);
    (alpha0, beta0, tau1, tau2)
}

/// Fits `g²(τ) = 1 − α·e^{−|τ|/τ₁} + β·e^{−|τ|/τ₂}` to a normalized
/// histogram, with Poisson weights `σ = √max(counts, 1)/normalization`.
///
/// The model is averaged over each bin. After the fit the timescales are
/// ordered `τ₁ ≤ τ₂`; a swap maps `(α, β) → (−β, −α)`.
pub fn fit_g2_cw(hist: &CorrelationHistogram, mode: G2FitMode, opts: &FitOptions) -> Result<G2Fit, FitError> {
    let n = hist.len();
    if n < 5 {
        return Err(FitError::Underdetermined { points: n, params: 4 });
    }
    let taus = hist.taus_ns();
    let g = hist.g2();
    let (alpha0, beta0, tau1_0, tau2_0) = seed(&taus, &g);
    let span = hist.window_ps() * 1e-3;
    if span < 5.0 * tau2_0 {
        return Err(FitError::Precondition(format!(
            "histogram spans ±{span:.3} ns, shorter than 5·τ₂ ≈ {:.3} ns",
            5.0 * tau2_0
        )));
    }

    let x: Vec<f64> = (0..n)
        .flat_map(|i| {
            let (lo, hi) = hist.bin_edges_ns(i);
            [lo, hi]
        })
        .collect();
    let sigma: Vec<f64> = hist.counts.iter().map(|&c| (c as f64).max(1.0).sqrt() / hist.normalization).collect();
    // Dataset rows are bins; the model reads edges pairwise, so x is stored
    // separately and indexed through the closure.
    let data = Dataset::new((0..n).map(|i| i as f64).collect(), g, sigma)?;

    let mut fit = match mode {
        G2FitMode::Free => minimize(
            |_: &[f64], p: &[f64]| g2_model_free(&x, p),
            &data,
            &[
                ParamSpec::free("alpha", alpha0),
                ParamSpec::free("beta", beta0),
                ParamSpec::positive("tau1", tau1_0),
                ParamSpec::positive("tau2", tau2_0),
            ],
            opts,
        )?,
        G2FitMode::Constrained => minimize(
            |_: &[f64], p: &[f64]| g2_model_constrained(&x, p),
            &data,
            &[ParamSpec::free("beta", beta0), ParamSpec::positive("tau1", tau1_0), ParamSpec::positive("tau2", tau2_0)],
            opts,
        )?,
    };

    // Express as (α, β, τ₁, τ₂) with τ₁ ≤ τ₂.
    let v = fit.values();
    let (mut full, mut t) = match mode {
        G2FitMode::Free => ([v[0], v[1], v[2], v[3]], DMatrix::<f64>::identity(4, 4)),
        G2FitMode::Constrained => {
            let mut t = DMatrix::<f64>::zeros(4, 3);
            t[(0, 0)] = 1.0;
            t[(1, 0)] = 1.0;
            t[(2, 1)] = 1.0;
            t[(3, 2)] = 1.0;
            ([1.0 + v[0], v[0], v[1], v[2]], t)
        }
    };
    if full[2] > full[3] {
        full = [-full[1], -full[0], full[3], full[2]];
        let mut s = DMatrix::<f64>::zeros(4, 4);
        s[(0, 1)] = -1.0;
        s[(1, 0)] = -1.0;
        s[(2, 3)] = 1.0;
        s[(3, 2)] = 1.0;
        t = s * t;
    }
    fit.reparameterize(&["alpha", "beta", "tau1", "tau2"], &full, &t);
    if mode == G2FitMode::Constrained {
        // α is derived, report the underlying free parameters' uncertainty only
        fit.params.retain(|p| p.name != "alpha");
        if let Some(c) = fit.covariance.as_mut() {
            c.remove(0);
            for row in c.iter_mut() {
                row.remove(0);
            }
        }
    }

    let params = G2Params { alpha: full[0], beta: full[1], tau1: full[2], tau2: full[3] };
    let (g2_zero, g2_zero_sigma) = match mode {
        G2FitMode::Free => {
            let s = fit.covariance.as_ref().map(|c| (c[0][0] + c[1][1] - 2.0 * c[0][1]).max(0.0).sqrt());
            (params.g2_zero(), s)
        }
        G2FitMode::Constrained => (0.0, fit.converged.then_some(0.0)),
    };
    Ok(G2Fit { fit, mode, params, g2_zero, g2_zero_sigma })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(p: &G2Params, w_ps: u64, half: u64, norm: f64) -> CorrelationHistogram {
        let mut h = CorrelationHistogram { bin_width_ps: w_ps, half_bins: half, counts: vec![], normalization: norm };
        h.counts = (0..(2 * half + 1) as usize)
            .map(|i| {
                let (lo, hi) = h.bin_edges_ns(i);
                (g2_bin_mean(p, lo, hi) * norm).round() as u64
            })
            .collect();
        h
    }

    #[test]
    fn noise_free_recovery_free_mode() {
        let truth = G2Params { alpha: 1.15, beta: 0.2, tau1: 0.7, tau2: 8.0 };
        let h = synthetic(&truth, 100, 500, 1e7);
        let f = fit_g2_cw(&h, G2FitMode::Free, &FitOptions::default()).unwrap();
        assert!(f.fit.converged);
        let p = f.params;
        assert!((p.alpha - truth.alpha).abs() < 1e-4, "{p:?}");
        assert!((p.beta - truth.beta).abs() < 1e-4, "{p:?}");
        assert!((p.tau1 / truth.tau1 - 1.0).abs() < 1e-4, "{p:?}");
        assert!((p.tau2 / truth.tau2 - 1.0).abs() < 1e-4, "{p:?}");
        assert!((f.g2_zero - 0.05).abs() < 1e-4);
        assert!(f.g2_zero_sigma.unwrap() > 0.0);
    }

    #[test]
    fn noise_free_recovery_constrained_mode() {
        let truth = G2Params { alpha: 1.3, beta: 0.3, tau1: 0.5, tau2: 4.0 };
        let h = synthetic(&truth, 50, 600, 1e7);
        let f = fit_g2_cw(&h, G2FitMode::Constrained, &FitOptions::default()).unwrap();
        assert!(f.fit.converged);
        assert_eq!(f.fit.params.len(), 3);
        assert!((f.params.beta - 0.3).abs() < 1e-4);
        assert!((f.params.tau1 / 0.5 - 1.0).abs() < 1e-4);
        assert!(f.g2_zero.abs() < 1e-12);
    }

    #[test]
    fn narrow_window_rejected() {
        let truth = G2Params { alpha: 1.2, beta: 0.2, tau1: 0.7, tau2: 8.0 };
        let h = synthetic(&truth, 100, 100, 1e6);
        assert!(matches!(fit_g2_cw(&h, G2FitMode::Free, &FitOptions::default()), Err(FitError::Precondition(_))));
    }
}
