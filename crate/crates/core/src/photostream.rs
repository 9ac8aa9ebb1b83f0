//! Monte Carlo photon streams from the three-level emitter and a
//! beam-splitter/detector chain producing two HBT channels.
//!
//! Emitter dynamics are a continuous-time Markov chain over |1⟩,|2⟩,|3⟩
//! simulated event by event; a photon is emitted on every |2⟩→|1⟩ jump.
//! Internally times are f64 ns; every emitted timestamp is rounded to the
//! nearest integer picosecond.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetics::{steady_state, RateSet};
use crate::timestamps::TimestampChannel;

const PS_PER_NS: f64 = 1e3;
const PS_PER_S: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhotostreamError {
    #[error("invalid detector model: {0}")]
    Detector(String),
    #[error("invalid pulse train: {0}")]
    PulseTrain(String),
    #[error("background rate must be finite and ≥ 0, got {0}")]
    Background(f64),
    #[error("splitter ratio {0} outside [0, 1]")]
    SplitterRatio(f64),
    #[error("target g2(0) {0} outside [0, 1)")]
    TargetG2(f64),
    #[error(transparent)]
    Rates(#[from] crate::kinetics::KineticsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorModel {
    /// Detection probability per incident photon.
    pub efficiency: f64,
    /// Gaussian timing jitter standard deviation, ps.
    pub jitter_sigma_ps: f64,
    /// Dead time after an accepted event, ps.
    pub dead_time_ps: f64,
    /// Dark count rate, counts/s.
    pub dark_rate_cps: f64,
}

impl Default for DetectorModel {
    /// SSPD-like: 30 ps jitter, 20 ns dead time, 100 counts/s dark rate,
    /// 30 % efficiency.
    fn default() -> Self {
        DetectorModel { efficiency: 0.3, jitter_sigma_ps: 30.0, dead_time_ps: 20_000.0, dark_rate_cps: 100.0 }
    }
}

impl DetectorModel {
    /// Perfect detector: unit efficiency, no jitter, dead time or darks.
    pub fn ideal() -> Self {
        DetectorModel { efficiency: 1.0, jitter_sigma_ps: 0.0, dead_time_ps: 0.0, dark_rate_cps: 0.0 }
    }

    pub fn validate(&self) -> Result<(), PhotostreamError> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(PhotostreamError::Detector(format!("efficiency {} outside [0, 1]", self.efficiency)));
        }
        for (name, v) in [
            ("jitter_sigma_ps", self.jitter_sigma_ps),
            ("dead_time_ps", self.dead_time_ps),
            ("dark_rate_cps", self.dark_rate_cps),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PhotostreamError::Detector(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseTrain {
    pub rep_rate_mhz: f64,
    /// Documentation only: pulses are treated as instantaneous.
    pub pulse_width_ps: f64,
    /// Probability that a pulse promotes |1⟩ → |2⟩.
    pub excitation_prob: f64,
}

impl PulseTrain {
    pub fn validate(&self) -> Result<(), PhotostreamError> {
        if !(self.rep_rate_mhz.is_finite() && self.rep_rate_mhz > 0.0) {
            return Err(PhotostreamError::PulseTrain(format!("rep rate must be > 0, got {}", self.rep_rate_mhz)));
        }
        if !(self.pulse_width_ps.is_finite() && self.pulse_width_ps >= 0.0) {
            return Err(PhotostreamError::PulseTrain("pulse width must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.excitation_prob) {
            return Err(PhotostreamError::PulseTrain(format!(
                "excitation probability {} outside [0, 1]",
                self.excitation_prob
            )));
        }
        Ok(())
    }

    pub fn period_ns(&self) -> f64 {
        1e3 / self.rep_rate_mhz
    }

    pub fn period_ps(&self) -> f64 {
        1e6 / self.rep_rate_mhz
    }
}

/// Poissonian background photons reaching the beam splitter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BackgroundModel {
    pub rate_cps: f64,
}

impl BackgroundModel {
    pub fn none() -> Self {
        BackgroundModel { rate_cps: 0.0 }
    }

    fn validate(&self) -> Result<(), PhotostreamError> {
        if !(self.rate_cps.is_finite() && self.rate_cps >= 0.0) {
            return Err(PhotostreamError::Background(self.rate_cps));
        }
        Ok(())
    }
}

/// Photons arriving at the beam splitter, sorted (ties allowed), in ps.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonStream {
    pub times_ps: Vec<u64>,
    pub duration_ps: u64,
    /// How many of `times_ps` came from the emitter rather than background.
    pub emitter_photons: usize,
}

impl PhotonStream {
    pub fn len(&self) -> usize {
        self.times_ps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_ps.is_empty()
    }

    /// The stream as a single ideal-detector channel (coincident photons merge).
    pub fn to_channel(&self, label: &str) -> TimestampChannel {
        let mut ts = self.times_ps.clone();
        ts.dedup();
        TimestampChannel::from_sorted_unchecked(ts, self.duration_ps, label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Level {
    Ground,
    Excited,
    Shelved,
}

/// Simulation accepts `k23 = 0` (two-level limit); the other rates must be
/// strictly positive.
fn check_rates(rates: &RateSet) -> Result<(), PhotostreamError> {
    match rates.validate() {
        Err(_) if rates.k23 == 0.0 => RateSet { k23: 1.0, ..*rates }.validate()?,
        other => other?,
    }
    Ok(())
}

fn exp_sample(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let e: f64 = Exp1.sample(rng);
    e / rate
}

fn to_ps(t_ns: f64) -> u64 {
    (t_ns * PS_PER_NS).round() as u64
}

fn draw_level(rng: &mut ChaCha8Rng, p1: f64, p2: f64) -> Level {
    let u: f64 = rng.random();
    if u < p1 {
        Level::Ground
    } else if u < p1 + p2 {
        Level::Excited
    } else {
        Level::Shelved
    }
}

/// Continuous-wave drive. The initial level is drawn from the stationary
/// distribution so the stream is stationary from t = 0.
pub fn simulate_cw(
    rates: &RateSet,
    duration_ps: u64,
    background: &BackgroundModel,
    seed: u64,
) -> Result<PhotonStream, PhotostreamError> {
    check_rates(rates)?;
    background.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let end_ns = duration_ps as f64 / PS_PER_NS;
    let mut photons = Vec::new();
    if duration_ps > 0 {
        let ss = steady_state(rates);
        let mut level = draw_level(&mut rng, ss.p1, ss.p2);
        let decay = rates.k21 + rates.k23;
        let radiative = rates.k21 / decay;
        let mut t = 0.0;
        loop {
            match level {
                Level::Ground => {
                    t += exp_sample(&mut rng, rates.k12);
                    level = Level::Excited;
                }
                Level::Excited => {
                    t += exp_sample(&mut rng, decay);
                    if t >= end_ns {
                        break;
                    }
                    if rng.random::<f64>() < radiative {
                        photons.push(to_ps(t));
                        level = Level::Ground;
                    } else {
                        level = Level::Shelved;
                    }
                }
                Level::Shelved => {
                    t += exp_sample(&mut rng, rates.k31);
                    level = Level::Ground;
                }
            }
            if t >= end_ns {
                break;
            }
        }
    }
    Ok(finish_stream(photons, duration_ps, background, &mut rng))
}

/// Pulsed drive with instantaneous pulses at `n·T_rep`.
///
/// Between pulses `k12 = 0`; an emitter still in |2⟩ or |3⟩ when a pulse
/// arrives is left alone, so shelving persists across pulse boundaries.
pub fn simulate_pulsed(
    rates: &RateSet,
    train: &PulseTrain,
    duration_ps: u64,
    background: &BackgroundModel,
    seed: u64,
) -> Result<PhotonStream, PhotostreamError> {
    check_rates(rates)?;
    train.validate()?;
    background.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut photons = Vec::new();
    if duration_ps > 0 {
        let end_ns = duration_ps as f64 / PS_PER_NS;
        let period = train.period_ns();
        let pre = pulsed_stationary(rates, train);
        let mut level = draw_level(&mut rng, pre[0], pre[1]);
        let decay = rates.k21 + rates.k23;
        let radiative = rates.k21 / decay;
        let mut n: u64 = 0;
        loop {
            let t_pulse = n as f64 * period;
            if t_pulse >= end_ns {
                break;
            }
            let t_next = ((n + 1) as f64 * period).min(end_ns);
            if level == Level::Ground && rng.random::<f64>() < train.excitation_prob {
                level = Level::Excited;
            }
            let mut t = t_pulse;
            // Memoryless: an unfinished dwell is redrawn in the next period.
            while level != Level::Ground {
                let rate = if level == Level::Excited { decay } else { rates.k31 };
                let dt = exp_sample(&mut rng, rate);
                if t + dt >= t_next {
                    break;
                }
                t += dt;
                level = match level {
                    Level::Excited if rng.random::<f64>() < radiative => {
                        photons.push(to_ps(t));
                        Level::Ground
                    }
                    Level::Excited => Level::Shelved,
                    _ => Level::Ground,
                };
            }
            n += 1;
        }
    }
    Ok(finish_stream(photons, duration_ps, background, &mut rng))
}

fn finish_stream(
    mut photons: Vec<u64>,
    duration_ps: u64,
    background: &BackgroundModel,
    rng: &mut ChaCha8Rng,
) -> PhotonStream {
    let emitter_photons = photons.len();
    let bg = poisson_arrivals(rng, background.rate_cps, duration_ps);
    if !bg.is_empty() {
        photons.extend_from_slice(&bg);
        photons.sort_unstable();
    }
    PhotonStream { times_ps: photons, duration_ps, emitter_photons }
}

/// Homogeneous Poisson arrivals on `[0, duration_ps]`, sorted.
fn poisson_arrivals(rng: &mut ChaCha8Rng, rate_cps: f64, duration_ps: u64) -> Vec<u64> {
    let mut out = Vec::new();
    if rate_cps <= 0.0 || duration_ps == 0 {
        return out;
    }
    let rate_per_ps = rate_cps / PS_PER_S;
    let end = duration_ps as f64;
    let mut t = 0.0;
    loop {
        t += exp_sample(rng, rate_per_ps);
        if t > end {
            break;
        }
        out.push((t.round() as u64).min(duration_ps));
    }
    out
}

/// Splits photons over two detectors and applies per-channel efficiency
/// thinning, Gaussian jitter, dark counts and dead time (in that order).
pub fn detect_hbt(
    photons: &PhotonStream,
    splitter_ratio: f64,
    det_a: &DetectorModel,
    det_b: &DetectorModel,
    seed: u64,
) -> Result<(TimestampChannel, TimestampChannel), PhotostreamError> {
    if !(0.0..=1.0).contains(&splitter_ratio) {
        return Err(PhotostreamError::SplitterRatio(splitter_ratio));
    }
    det_a.validate()?;
    det_b.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration = photons.duration_ps;
    let mut raw = [Vec::new(), Vec::new()];
    let dets = [det_a, det_b];
    for &t in &photons.times_ps {
        let ch = if rng.random::<f64>() < splitter_ratio { 0 } else { 1 };
        let det = dets[ch];
        if rng.random::<f64>() >= det.efficiency {
            continue;
        }
        let mut tf = t as f64;
        if det.jitter_sigma_ps > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            tf += det.jitter_sigma_ps * z;
        }
        let tr = tf.round();
        if tr < 0.0 || tr > duration as f64 {
            continue;
        }
        raw[ch].push(tr as u64);
    }
    let [raw_a, raw_b] = raw;
    let a = finish_channel(raw_a, det_a, duration, "A", &mut rng);
    let b = finish_channel(raw_b, det_b, duration, "B", &mut rng);
    Ok((a, b))
}

fn finish_channel(
    mut events: Vec<u64>,
    det: &DetectorModel,
    duration: u64,
    label: &str,
    rng: &mut ChaCha8Rng,
) -> TimestampChannel {
    events.extend(poisson_arrivals(rng, det.dark_rate_cps, duration));
    events.sort_unstable();
    let kept = apply_dead_time(&events, det.dead_time_ps);
    TimestampChannel::from_sorted_unchecked(kept, duration, label)
}

/// Drops every event within `dead_time_ps` (inclusive) of the previous
/// accepted one, so the result is strictly increasing even for zero dead time.
pub fn apply_dead_time(sorted: &[u64], dead_time_ps: f64) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::with_capacity(sorted.len());
    for &t in sorted {
        match out.last() {
            Some(&last) if ((t - last) as f64) <= dead_time_ps => {}
            _ => out.push(t),
        }
    }
    out
}

/// Level populations `[p1, p2, p3]` just before a pulse, in the periodic
/// steady state of the pulsed drive.
pub fn pulsed_stationary(rates: &RateSet, train: &PulseTrain) -> [f64; 3] {
    let period = train.period_ns();
    let decay = rates.k21 + rates.k23;
    let p22 = (-decay * period).exp();
    let p23 = if (rates.k31 - decay).abs() > 1e-9 * decay {
        rates.k23 / (rates.k31 - decay) * ((-decay * period).exp() - (-rates.k31 * period).exp())
    } else {
        rates.k23 * period * (-decay * period).exp()
    };
    let p21 = 1.0 - p22 - p23;
    let p33 = (-rates.k31 * period).exp();
    let p31 = 1.0 - p33;
    let exc = train.excitation_prob;

    let mut pi = [1.0, 0.0, 0.0];
    for _ in 0..100_000 {
        // pulse, then free evolution over one period
        let q = [pi[0] * (1.0 - exc), pi[1] + pi[0] * exc, pi[2]];
        let next = [q[0] + q[1] * p21 + q[2] * p31, q[1] * p22, q[1] * p23 + q[2] * p33];
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-16 {
            break;
        }
    }
    pi
}

/// Mean emitted photons per pulse in the periodic steady state.
///
/// |2⟩ is only entered at a pulse, and each entry yields a photon with
/// probability `k21/(k21 + k23)`.
pub fn pulsed_photons_per_pulse(rates: &RateSet, train: &PulseTrain) -> f64 {
    let pi = pulsed_stationary(rates, train);
    train.excitation_prob * pi[0] * rates.k21 / (rates.k21 + rates.k23)
}

/// Mean emitted photon rate under pulsed drive, counts/s.
pub fn pulsed_emission_rate_cps(rates: &RateSet, train: &PulseTrain) -> f64 {
    pulsed_photons_per_pulse(rates, train) * train.rep_rate_mhz * 1e6
}

/// Mean emitted photon rate under cw drive, counts/s.
pub fn cw_emission_rate_cps(rates: &RateSet) -> f64 {
    rates.k21 * steady_state(rates).p2 * crate::kinetics::NS_PER_S
}

/// Background rate that lifts an ideal single-photon source's g²(0) to
/// `target_g2_zero`.
///
/// Uncorrelated background at rate `b` on top of signal `s` gives
/// `g²(0) = 1 − ρ²` with `ρ = s/(s + b)`, so `b = s·(1/ρ − 1)` with
/// `ρ = √(1 − g²(0))`. Holds for cw and for full-period pulsed windows.
pub fn background_for_target_g2(
    signal_rate_cps: f64,
    target_g2_zero: f64,
) -> Result<BackgroundModel, PhotostreamError> {
    if !(0.0..1.0).contains(&target_g2_zero) {
        return Err(PhotostreamError::TargetG2(target_g2_zero));
    }
    let rho = (1.0 - target_g2_zero).sqrt();
    Ok(BackgroundModel { rate_cps: signal_rate_cps * (1.0 / rho - 1.0) })
}
