//! Subcommand configs and pipelines.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use emitterlab::correlator::{correlate, intensity_trace, pulsed_g2, CorrelationHistogram};
use emitterlab::exciton::{calibrate, uniform_positions, zpl_distribution, ExcitonParams, GridSpec, StackProfile};
use emitterlab::fitlab::{
    extract_rates, fit_g2_cw, fit_lifetime, fit_polarization, fit_saturation, g2_model_free, lifetime_consistency,
    saturation_model, Dataset, FitError, FitOptions, FitResult, G2FitMode, IrfModel, PowerSeriesPoint,
};
use emitterlab::kinetics::RateSet;
use emitterlab::optics::{
    collection_half_angle, mean_enhancement, quantum_efficiency, total_rate_from_lifetime, EfficiencyBudget,
};
use emitterlab::photostream::{
    background_for_target_g2, cw_emission_rate_cps, detect_hbt, pulsed_emission_rate_cps, simulate_cw, simulate_pulsed,
    BackgroundModel, DetectorModel, PulseTrain,
};
use emitterlab::plot::{Chart, Style};
use emitterlab::timestamps::TimestampChannel;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::io::{
    create_file, emit_result, ensure_out, input_err, open_file, out_file, read_csv, require, to_rounded,
    write_manifest, CliError, Context,
};

/// Solver settings shared by the fitting subcommands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Multiply the covariance by the reduced chi-square.
    pub scale_covariance: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        let d = FitOptions::default();
        Self { max_iter: d.max_iter, grad_tol: d.grad_tol, scale_covariance: d.scale_covariance }
    }
}

impl FitConfig {
    fn options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            scale_covariance: self.scale_covariance,
            ..FitOptions::default()
        }
    }
}

fn fit_err(e: FitError) -> CliError {
    CliError::Input(format!("fit rejected the input: {e}"))
}

/// Emits the result, then reports non-convergence as exit code 1.
fn finish_fit(ctx: &Context, result: &Value, fit: &FitResult) -> Result<(), CliError> {
    emit_result(ctx, result)?;
    if fit.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!("{} iterations, gradient norm {:.3e}", fit.iters, fit.grad_norm)))
    }
}

/// Plots are conveniences: write failures are ignored.
fn save_plot(ctx: &Context, name: &str, chart: Chart) {
    let _ = chart.write(&out_file(ctx, name));
}

fn read_channel(path: &Path) -> Result<TimestampChannel, CliError> {
    TimestampChannel::read_pts(path, None)
        .map_err(|e| CliError::Input(format!("cannot read timestamps {}: {e}", path.display())))
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{name} must be > 0, got {v}")))
    }
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Transition rates in 1/ns.
    pub rates: RateSet,
    /// Pulsed drive when present, continuous-wave otherwise.
    pub pulsed: Option<PulseTrain>,
    pub duration_ms: f64,
    pub background_cps: f64,
    /// Overrides `background_cps` with the rate that gives this g2(0).
    pub target_g2_zero: Option<f64>,
    /// Probability that a photon goes to detector A.
    pub splitter_ratio: f64,
    pub detector_a: DetectorModel,
    pub detector_b: DetectorModel,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            rates: RateSet { k12: 0.5, k21: 1.25, k23: 0.05, k31: 0.05 },
            pulsed: None,
            duration_ms: 10.0,
            background_cps: 0.0,
            target_g2_zero: None,
            splitter_ratio: 0.5,
            detector_a: DetectorModel::default(),
            detector_b: DetectorModel::default(),
        }
    }
}

pub fn simulate(ctx: &Context, cfg: SimulateConfig) -> Result<(), CliError> {
    positive("duration_ms", cfg.duration_ms)?;
    let background = match cfg.target_g2_zero {
        Some(g) => {
            let signal = match &cfg.pulsed {
                Some(t) => pulsed_emission_rate_cps(&cfg.rates, t),
                None => cw_emission_rate_cps(&cfg.rates),
            };
            background_for_target_g2(signal, g).map_err(input_err)?
        }
        None => BackgroundModel { rate_cps: cfg.background_cps },
    };
    let duration_ps = (cfg.duration_ms * 1e9).round() as u64;
    ensure_out(ctx)?;
    write_manifest(ctx, &cfg)?;
    let stream = match &cfg.pulsed {
        Some(t) => simulate_pulsed(&cfg.rates, t, duration_ps, &background, ctx.seed),
        None => simulate_cw(&cfg.rates, duration_ps, &background, ctx.seed),
    }
    .map_err(input_err)?;
    let detect_seed = ctx.seed ^ 0x5DEE_CE66_D1CE_4E5B;
    let (a, b) =
        detect_hbt(&stream, cfg.splitter_ratio, &cfg.detector_a, &cfg.detector_b, detect_seed).map_err(input_err)?;
    for (ch, name) in [(&a, "ch_a.pts"), (&b, "ch_b.pts")] {
        let path = out_file(ctx, name);
        ch.write_pts(&path).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    }
    let result = json!({
        "duration_ps": duration_ps,
        "background_cps": background.rate_cps,
        "photons": stream.len(),
        "emitter_photons": stream.emitter_photons,
        "counts_a": a.len(),
        "counts_b": b.len(),
        "rate_a_cps": a.rate_cps(),
        "rate_b_cps": b.rate_cps(),
    });
    emit_result(ctx, &crate::io::round_json(result))
}

// --------------------------------------------------------------- correlate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelateConfig {
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub bin_ps: u64,
    /// Half-width of the delay window.
    pub window_ns: f64,
}

impl Default for CorrelateConfig {
    fn default() -> Self {
        Self { a: None, b: None, bin_ps: 100, window_ns: 400.0 }
    }
}

fn correlate_files(a: &Path, b: &Path, bin_ps: u64, window_ns: f64) -> Result<CorrelationHistogram, CliError> {
    positive("window_ns", window_ns)?;
    let (a, b) = (read_channel(a)?, read_channel(b)?);
    correlate(&a, &b, bin_ps, (window_ns * 1e3).round() as u64).map_err(input_err)
}

fn write_histogram(ctx: &Context, hist: &CorrelationHistogram) -> Result<(), CliError> {
    let path = out_file(ctx, "g2.csv");
    hist.write_csv(BufWriter::new(create_file(&path)?))
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn histogram_summary(hist: &CorrelationHistogram) -> Value {
    json!({
        "bin_width_ps": hist.bin_width_ps,
        "half_bins": hist.half_bins,
        "bins": hist.len(),
        "total_counts": hist.total_counts(),
        "normalization": hist.normalization,
        "g2_zero_bin": hist.g2()[hist.half_bins as usize],
    })
}

pub fn correlate_cmd(ctx: &Context, cfg: CorrelateConfig) -> Result<(), CliError> {
    let a = require(&cfg.a, "channel A (--a)")?;
    let b = require(&cfg.b, "channel B (--b)")?;
    let hist = correlate_files(&a, &b, cfg.bin_ps, cfg.window_ns)?;
    ensure_out(ctx)?;
    write_manifest(ctx, &cfg)?;
    write_histogram(ctx, &hist)?;
    save_plot(
        ctx,
        "g2.svg",
        Chart::new("Second-order correlation", "delay (ns)", "g2").with(
            "data",
            &hist.taus_ns(),
            &hist.g2(),
            Style::Points,
            "black",
        ),
    );
    emit_result(ctx, &crate::io::round_json(histogram_summary(&hist)))
}

// ------------------------------------------------------------------ fit-g2

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitG2Config {
    /// Histogram CSV as written by `correlate`. Takes precedence over channels.
    pub histogram: Option<PathBuf>,
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub bin_ps: u64,
    pub window_ns: f64,
    pub mode: G2FitMode,
    pub fit: FitConfig,
}

impl Default for FitG2Config {
    fn default() -> Self {
        let c = CorrelateConfig::default();
        Self {
            histogram: None,
            a: None,
            b: None,
            bin_ps: c.bin_ps,
            window_ns: c.window_ns,
            mode: G2FitMode::Free,
            fit: FitConfig::default(),
        }
    }
}

pub fn fit_g2(ctx: &Context, cfg: FitG2Config) -> Result<(), CliError> {
    let hist = match (&cfg.histogram, &cfg.a, &cfg.b) {
        (Some(h), _, _) => {
            let path = h.as_path();
            CorrelationHistogram::read_csv(open_file(path)?)
                .map_err(|e| CliError::Input(format!("malformed histogram {}: {e}", path.display())))?
        }
        (None, Some(a), Some(b)) => correlate_files(a, b, cfg.bin_ps, cfg.window_ns)?,
        _ => return Err(CliError::Input("missing input: give --histogram or both --a and --b".into())),
    };
    let fit = fit_g2_cw(&hist, cfg.mode, &cfg.fit.options()).map_err(fit_err)?;
    ensure_out(ctx)?;
    write_manifest(ctx, &cfg)?;
    if cfg.histogram.is_none() {
        write_histogram(ctx, &hist)?;
    }
    let taus = hist.taus_ns();
    let edges: Vec<f64> = (0..hist.len())
        .flat_map(|i| {
            let (lo, hi) = hist.bin_edges_ns(i);
            [lo, hi]
        })
        .collect();
    let p = fit.params;
    let model = g2_model_free(&edges, &[p.alpha, p.beta, p.tau1, p.tau2]);
    save_plot(
        ctx,
        "g2_fit.svg",
        Chart::new("Second-order correlation", "delay (ns)", "g2")
            .with("data", &taus, &hist.g2(), Style::Points, "black")
            .with("fit", &taus, &model, Style::Line, "crimson"),
    );
    let result = json!({ "histogram": histogram_summary(&hist), "fit": fit });
    finish_fit(ctx, &crate::io::round_json(result), &fit.fit)
}

// ---------------------------------------------------------- fit-saturation

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveConfig {
    pub data: Option<PathBuf>,
    pub fit: FitConfig,
}

#[derive(Deserialize)]
struct SaturationRow {
    power_mw: f64,
    rate_cps: f64,
    sigma: Option<f64>,
}

/// Explicit sigmas when every row has one, `fallback` when none has.
fn dataset(
    x: Vec<f64>,
    y: Vec<f64>,
    sigma: Vec<Option<f64>>,
    fallback: impl FnOnce(Vec<f64>, Vec<f64>) -> Result<Dataset, FitError>,
) -> Result<Dataset, CliError> {
    let given = sigma.iter().filter(|s| s.is_some()).count();
    let ds = if given == sigma.len() {
        Dataset::new(x, y, sigma.into_iter().flatten().collect())
    } else if given == 0 {
        fallback(x, y)
    } else {
        return Err(CliError::Input("sigma column must be filled for every row or for none".into()));
    };
    ds.map_err(fit_err)
}

pub fn fit_saturation_cmd(ctx: &Context, cfg: CurveConfig) -> Result<(), CliError> {
    let path = require(&cfg.data, "data CSV (--data)")?;
    let rows: Vec<SaturationRow> = read_csv(&path)?;
    let x: Vec<f64> = rows.iter().map(|r| r.power_mw).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.rate_cps).collect();
    let ds = dataset(x.clone(), y.clone(), rows.iter().map(|r| r.sigma).collect(), Dataset::unweighted)?;
    let fit = fit_saturation(&ds, &cfg.fit.options()).map_err(fit_err)?;
    ensure_out(ctx)?;
    write_manifest(ctx, &cfg)?;
    let xmax = x.iter().cloned().fold(0.0, f64::max);
    let xs: Vec<f64> = (0..=200).map(|i| xmax * i as f64 / 200.0).collect();
    let model = saturation_model(&xs, &[fit.params.p_sat, fit.params.i_inf]);
    save_plot(
        ctx,
        "saturation.svg",
        Chart::new("Saturation", "power (mW)", "count rate (1/s)").with("data", &x, &y, Style::Points, "black").with(
            "fit",
            &xs,
            &model,
            Style::Line,
            "crimson",
        ),
    );
    finish_fit(ctx, &to_rounded(&fit)?, &fit.fit)
}

// ------------------------------------------------------------ fit-lifetime

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifetimeConfig {
    pub data: Option<PathBuf>,
    pub irf: IrfModel,
    pub fit: FitConfig,
}

impl Default for LifetimeConfig {
    fn default() -> Self {
        Self { data: None, irf: IrfModel::Delta, fit: FitConfig::default() }
    }
}

#[derive(Deserialize)]
struct DecayRow {
    t_ps: f64,
    counts: f64,
}

pub fn fit_lifetime_cmd(ctx: &Context, cfg: LifetimeConfig) -> Result<(), CliError> {
    let path = require(&cfg.data, "data CSV (--data)")?;
    let rows: Vec<DecayRow> = read_csv(&path)?;
    let t: Vec<f64> = rows.iter().map(|r| r.t_ps).collect();
    let c: Vec<f64> = rows.iter().map(|r| r.counts).collect();
    let fit = fit_lifetime(&t, &c, &cfg.irf, &cfg.fit.options()).map_err(fit_err)?;
    ensure_out(ctx)?;
    write_manifest(ctx, &cfg)?;
    finish_fit(ctx, &to_rounded(&fit)?, &fit.fit)
}

// -------------------------------------------------------- fit-polarization

#[derive(Deserialize)]
struct PolarizationRow {
    angle_deg: f64,
    counts: f64,
    sigma: Option<f64>,
}

pub fn fit_polarization_cmd(ctx: &Context, cfg: CurveConfig) -> Result<(), CliError> {
    let path = require(&cfg.data, "data CSV (--data)")?;
    let rows: Vec<PolarizationRow> = read_csv(&path)?;
    let x = rows.iter().map(|r| r.angle_deg).collect();
    let y = rows.iter().map(|r| r.counts).collect();
    let ds = dataset(x, y, rows.iter().map(|r| r.sigma).collect(), Dataset::poisson)?;
    let fit = fit_polarization(&ds, &cfg.fit.options()).map_err(fit_err)?;
    ensure_out(ctx)?;
    write_manifest(ctx, &cfg)?;
    finish_fit(ctx, &to_rounded(&fit)?, &fit.fit)
}

// ------------------------------------------------------------------- rates

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatesConfig {
    /// Per-power g2 fit results.
    pub series: Option<PathBuf>,
    /// Directly measured excited-state lifetime for the consistency check.
    pub measured_lifetime_ps: Option<f64>,
    pub measured_lifetime_sigma_ps: f64,
    pub fit: FitConfig,
}

#[derive(Deserialize)]
struct SeriesRow {
    power_mw: f64,
    tau1_ns: f64,
    tau1_sigma_ns: f64,
    tau2_ns: f64,
    tau2_sigma_ns: f64,
    beta: f64,
    beta_sigma: f64,
}

pub fn rates(ctx: &Context, cfg: RatesConfig) -> Result<(), CliError> {
    let path = require(&cfg.series, "power series CSV (--series)")?;
    let rows: Vec<SeriesRow> = read_csv(&path)?;
    let series: Vec<PowerSeriesPoint> = rows
        .iter()
        .map(|r| PowerSeriesPoint {
            power_mw: r.power_mw,
            tau1: r.tau1_ns,
            tau1_sigma: r.tau1_sigma_ns,
            tau2: r.tau2_ns,
            tau2_sigma: r.tau2_sigma_ns,
            beta: r.beta,
            beta_sigma: r.beta_sigma,
        })
        .collect();
    let ex = extract_rates(&series, &cfg.fit.options()).map_err(fit_err)?;
    let check = match cfg.measured_lifetime_ps {
        Some(m) => {
            positive("measured_lifetime_ps", m)?;
            Some(lifetime_consistency(
                ex.lifetime_ns,
                ex.lifetime_sigma_ns.unwrap_or(0.0),
                m * 1e-3,
                cfg.measured_lifetime_sigma_ps * 1e-3,
            ))
        }
        None => None,
    };
    ensure_out(ctx)?;
    write_manifest(ctx, &cfg)?;
    let result = json!({ "rates": ex, "lifetime_check": check });
    finish_fit(ctx, &to_rounded(&result)?, &ex.fit)
}

// --------------------------------------------------------------- pulsed-g2

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PulsedConfig {
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub rep_rate_mhz: f64,
    /// Side peaks on each side of zero delay.
    pub n_peaks: usize,
}

impl Default for PulsedConfig {
    fn default() -> Self {
        Self { a: None, b: None, rep_rate_mhz: 80.0, n_peaks: 10 }
    }
}

pub fn pulsed(ctx: &Context, cfg: PulsedConfig) -> Result<(), CliError> {
    let a = read_channel(&require(&cfg.a, "channel A (--a)")?)?;
    let b = read_channel(&require(&cfg.b, "channel B (--b)")?)?;
    let res = pulsed_g2(&a, &b, cfg.rep_rate_mhz, cfg.n_peaks).map_err(input_err)?;
    ensure_out(ctx)?;
    write_manifest(ctx, &cfg)?;
    let x: Vec<f64> = res.offsets.iter().map(|&o| o as f64).collect();
    let y: Vec<f64> = res.peak_areas.iter().map(|&c| c as f64).collect();
    save_plot(
        ctx,
        "pulsed_g2.svg",
        Chart::new("Pulsed correlation", "pulse offset", "coincidences").with(
            "areas",
            &x,
            &y,
            Style::Bars,
            "steelblue",
        ),
    );
    emit_result(ctx, &to_rounded(&res)?)
}

// ------------------------------------------------------------------- trace

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    pub a: Option<PathBuf>,
    pub bin_ms: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self { a: None, bin_ms: 10.0 }
    }
}

pub fn trace(ctx: &Context, cfg: TraceConfig) -> Result<(), CliError> {
    let a = read_channel(&require(&cfg.a, "channel (--a)")?)?;
    let tr = intensity_trace(&a, cfg.bin_ms).map_err(input_err)?;
    ensure_out(ctx)?;
    write_manifest(ctx, &cfg)?;
    let path = out_file(ctx, "trace.csv");
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    let werr = |e: csv::Error| CliError::Input(format!("cannot write {}: {e}", path.display()));
    w.write_record(["t_ms", "counts"]).map_err(werr)?;
    for (i, c) in tr.counts.iter().enumerate() {
        w.write_record([format!("{}", i as f64 * tr.bin_ms), c.to_string()]).map_err(werr)?;
    }
    w.flush().map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    let t: Vec<f64> = (0..tr.counts.len()).map(|i| i as f64 * tr.bin_ms).collect();
    let c: Vec<f64> = tr.counts.iter().map(|&c| c as f64).collect();
    save_plot(
        ctx,
        "trace.svg",
        Chart::new("Intensity trace", "time (ms)", "counts per bin").with("counts", &t, &c, Style::Line, "black"),
    );
    emit_result(ctx, &to_rounded(&tr)?)
}

// --------------------------------------------------------------------- zpl

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Positions {
    /// The boundary planes of every cubic segment.
    Interfaces,
    /// Bilayers `lo..=hi` sampled `per_bilayer` times each.
    Range {
        lo: i64,
        hi: i64,
        per_bilayer: u32,
    },
    List {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    /// Target wavelengths of the two interface sites.
    pub targets_nm: [f64; 2],
    #[serde(default = "default_bracket")]
    pub bracket_ev: [f64; 2],
}

fn default_bracket() -> [f64; 2] {
    [-0.5, 0.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZplConfig {
    /// Stacking sequence of `h`/`c` bilayers, centred on bilayer 0.
    pub stack: String,
    pub bilayer_nm: f64,
    pub params: ExcitonParams,
    pub grid: GridSpec,
    pub positions: Positions,
    pub calibrate: Option<CalibrateConfig>,
}

impl Default for ZplConfig {
    fn default() -> Self {
        Self {
            stack: "ccc".into(),
            bilayer_nm: StackProfile::DEFAULT_BILAYER_NM,
            params: ExcitonParams::default(),
            grid: GridSpec::default(),
            positions: Positions::Range { lo: -10, hi: 10, per_bilayer: 2 },
            calibrate: None,
        }
    }
}

pub fn zpl(ctx: &Context, cfg: ZplConfig) -> Result<(), CliError> {
    let stack = StackProfile::parse(&cfg.stack, cfg.bilayer_nm).map_err(input_err)?;
    stack.validate().map_err(input_err)?;
    cfg.params.validate().map_err(input_err)?;
    let positions = match &cfg.positions {
        Positions::Interfaces => stack.interface_sites(),
        Positions::Range { lo, hi, per_bilayer } => uniform_positions(*lo, *hi, *per_bilayer),
        Positions::List { values } => values.clone(),
    };
    let calibration = match &cfg.calibrate {
        Some(c) => Some(
            calibrate(&stack, &cfg.params, &cfg.grid, c.targets_nm, (c.bracket_ev[0], c.bracket_ev[1]))
                .map_err(input_err)?,
        ),
        None => None,
    };
    let params = calibration.as_ref().map_or(cfg.params, |c| c.params);
    let spectrum = zpl_distribution(&stack, &positions, &params, &cfg.grid).map_err(input_err)?;
    ensure_out(ctx)?;
    write_manifest(ctx, &cfg)?;
    for (name, hist) in [("zpl.csv", false), ("zpl_histogram.csv", true)] {
        let path = out_file(ctx, name);
        let w = BufWriter::new(create_file(&path)?);
        let r = if hist { spectrum.write_histogram_csv(w) } else { spectrum.write_csv(w) };
        r.map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    }
    let x: Vec<f64> = spectrum.histogram.iter().map(|b| b.lambda_nm).collect();
    let y: Vec<f64> = spectrum.histogram.iter().map(|b| b.count as f64).collect();
    save_plot(
        ctx,
        "zpl.svg",
        Chart::new("Zero-phonon lines", "wavelength (nm)", "defects").with("count", &x, &y, Style::Bars, "steelblue"),
    );
    let (lo, hi) = spectrum.span_nm();
    let result = json!({
        "positions": positions.len(),
        "span_nm": [lo, hi],
        "clusters": spectrum.clusters(emitterlab::exciton::ZplSpectrum::CLUSTER_GAP_NM),
        "boundary_warnings": spectrum.entries.iter().filter(|e| e.boundary_warning).count(),
        "histogram": spectrum.histogram,
        "entries": spectrum.entries,
        "calibration": calibration,
    });
    emit_result(ctx, &to_rounded(&result)?)
}

// ------------------------------------------------------------------ budget

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancementConfig {
    pub pristine: Vec<f64>,
    pub patterned: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub na: Option<f64>,
    pub n_medium: Option<f64>,
    pub efficiencies: Option<EfficiencyBudget>,
    /// Asymptotic detected count rate, 1/s.
    pub i_inf_cps: Option<f64>,
    /// Total emission rate, 1/s. Defaults to one photon per lifetime.
    pub i_total_cps: Option<f64>,
    pub lifetime_ps: Option<f64>,
    pub enhancement: Option<EnhancementConfig>,
}

pub fn budget(ctx: &Context, cfg: BudgetConfig) -> Result<(), CliError> {
    let mut result = serde_json::Map::new();
    match (cfg.na, cfg.n_medium) {
        (Some(na), Some(n)) => {
            result.insert("half_angle_deg".into(), json!(collection_half_angle(na, n).map_err(input_err)?));
        }
        (None, None) => {}
        _ => return Err(CliError::Input("half angle needs both na and n_medium".into())),
    }
    if let Some(i_inf) = cfg.i_inf_cps {
        let b = cfg.efficiencies.ok_or_else(|| CliError::Input("quantum efficiency needs efficiencies".into()))?;
        let i_total = match (cfg.i_total_cps, cfg.lifetime_ps) {
            (Some(t), _) => t,
            (None, Some(l)) => total_rate_from_lifetime(l).map_err(input_err)?,
            (None, None) => return Err(CliError::Input("quantum efficiency needs i_total_cps or lifetime_ps".into())),
        };
        let q = quantum_efficiency(i_inf, i_total, &b).map_err(input_err)?;
        result.insert("i_total_cps".into(), json!(i_total));
        result.insert("quantum_efficiency".into(), to_rounded(&q)?);
    }
    if let Some(e) = &cfg.enhancement {
        result.insert(
            "enhancement".into(),
            to_rounded(&mean_enhancement(&e.pristine, &e.patterned).map_err(input_err)?)?,
        );
    }
    if result.is_empty() {
        return Err(CliError::Input(
            "budget config computes nothing: give na/n_medium, i_inf_cps or enhancement".into(),
        ));
    }
    ensure_out(ctx)?;
    write_manifest(ctx, &cfg)?;
    emit_result(ctx, &crate::io::round_json(Value::Object(result)))
}
