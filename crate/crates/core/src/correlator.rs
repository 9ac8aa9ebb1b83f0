//! Photon correlation: multi-stop g²(τ) histograms, pulsed coincidence-peak
//! areas and intensity traces.
//!
//! Bin `k` is centred on `k·w` and covers `|τ| ∈ [(|k| − ½)·w, (|k| + ½)·w)`
//! on its side of zero. A delay exactly on an edge goes to the bin farther
//! from zero, so swapping the channels mirrors the histogram exactly. Only
//! bins lying entirely inside `±tau_max` are kept.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::timestamps::TimestampChannel;

#[derive(Debug, Error)]
pub enum CorrelatorError {
    #[error("channel {0:?} is empty")]
    EmptyChannel(String),
    #[error("channel {label:?} not strictly increasing at index {index}")]
    Unsorted { label: String, index: usize },
    #[error("invalid binning: {0}")]
    Binning(String),
    #[error("pulsed g2 needs at least one side peak on each side (n_peaks ≥ 1), got {0}")]
    TooFewPeaks(usize),
    #[error("repetition rate must be > 0 MHz, got {0}")]
    RepRate(f64),
    #[error("no coincidences in the side peaks")]
    NoSideCoincidences,
    #[error("bin width must be > 0 ms, got {0}")]
    TraceBin(f64),
    #[error("malformed histogram CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for CorrelatorError {
    fn from(e: csv::Error) -> Self {
        CorrelatorError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationHistogram {
    pub bin_width_ps: u64,
    /// Bins run over `k ∈ [−half_bins, half_bins]`.
    pub half_bins: u64,
    pub counts: Vec<u64>,
    /// Expected coincidences per bin for uncorrelated channels.
    pub normalization: f64,
}

impl CorrelationHistogram {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Bin centre of entry `i`, ps.
    pub fn tau_ps(&self, i: usize) -> i64 {
        (i as i64 - self.half_bins as i64) * self.bin_width_ps as i64
    }

    pub fn taus_ns(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.tau_ps(i) as f64 * 1e-3).collect()
    }

    /// Lower and upper edge of entry `i`, ns.
    pub fn bin_edges_ns(&self, i: usize) -> (f64, f64) {
        let c = self.tau_ps(i) as f64 * 1e-3;
        let h = self.bin_width_ps as f64 * 0.5e-3;
        (c - h, c + h)
    }

    /// Largest |τ| covered by a bin, ps.
    pub fn window_ps(&self) -> f64 {
        (self.half_bins as f64 + 0.5) * self.bin_width_ps as f64
    }

    pub fn g2(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.normalization).collect()
    }

    /// `√counts / normalization`.
    pub fn g2_err(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| (c as f64).sqrt() / self.normalization).collect()
    }

    pub fn total_counts(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mirror image in τ, i.e. the histogram of the swapped channel pair.
    pub fn mirrored(&self) -> Self {
        let mut counts = self.counts.clone();
        counts.reverse();
        CorrelationHistogram { counts, ..self.clone() }
    }

    /// CSV with header `tau_ps,counts,g2,g2_err`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), CorrelatorError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["tau_ps", "counts", "g2", "g2_err"])?;
        let g2 = self.g2();
        let err = self.g2_err();
        for i in 0..self.len() {
            wr.write_record(&[
                self.tau_ps(i).to_string(),
                self.counts[i].to_string(),
                format!("{:.12e}", g2[i]),
                format!("{:.12e}", err[i]),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`write_csv`](Self::write_csv). Bin width is
    /// taken from the τ spacing and the normalization from `counts / g2`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, CorrelatorError> {
        #[derive(Deserialize)]
        struct Row {
            tau_ps: f64,
            counts: f64,
            g2: f64,
        }
        let mut rd = csv::Reader::from_reader(r);
        let mut taus = Vec::new();
        let mut counts = Vec::new();
        let mut norm = None;
        for row in rd.deserialize::<Row>() {
            let row = row?;
            if !(row.counts >= 0.0 && row.counts.fract() == 0.0) {
                return Err(CorrelatorError::Csv(format!("bad count {}", row.counts)));
            }
            if norm.is_none() && row.counts > 0.0 && row.g2 > 0.0 {
                norm = Some(row.counts / row.g2);
            }
            taus.push(row.tau_ps);
            counts.push(row.counts as u64);
        }
        if taus.len() < 2 || taus.len() % 2 == 0 {
            return Err(CorrelatorError::Csv("need an odd number (≥ 3) of bins".into()));
        }
        let w = taus[1] - taus[0];
        if !(w >= 1.0 && w.fract() == 0.0) {
            return Err(CorrelatorError::Csv(format!("bin spacing {w} ps is not a positive integer")));
        }
        let half = (taus.len() / 2) as u64;
        for (i, &t) in taus.iter().enumerate() {
            if t != (i as f64 - half as f64) * w {
                return Err(CorrelatorError::Csv(format!("τ grid not uniform/centred at row {i}")));
            }
        }
        let normalization =
            norm.ok_or_else(|| CorrelatorError::Csv("no nonzero bins to infer normalization".into()))?;
        Ok(CorrelationHistogram { bin_width_ps: w as u64, half_bins: half, counts, normalization })
    }
}

fn check_channel(ch: &TimestampChannel) -> Result<(), CorrelatorError> {
    let ts = ch.timestamps();
    if ts.is_empty() {
        return Err(CorrelatorError::EmptyChannel(ch.label().to_string()));
    }
    if let Some(i) = ts.windows(2).position(|w| w[1] <= w[0]) {
        return Err(CorrelatorError::Unsorted { label: ch.label().to_string(), index: i + 1 });
    }
    Ok(())
}

/// Bin of delay `tau` for width `w`: `sign(τ)·⌊(|τ| + w/2)/w⌋`, computed
/// exactly.
#[inline]
fn bin_of(tau: i64, w: i64) -> i64 {
    let k = (2 * tau.abs() + w) / (2 * w);
    if tau < 0 {
        -k
    } else {
        k
    }
}

/// Multi-stop cross-correlation of `b` against `a` (τ = t_b − t_a).
pub fn correlate(
    a: &TimestampChannel,
    b: &TimestampChannel,
    bin_width_ps: u64,
    tau_max_ps: u64,
) -> Result<CorrelationHistogram, CorrelatorError> {
    check_channel(a)?;
    check_channel(b)?;
    if bin_width_ps == 0 {
        return Err(CorrelatorError::Binning("bin width must be > 0".into()));
    }
    if tau_max_ps < bin_width_ps {
        return Err(CorrelatorError::Binning(format!(
            "window {tau_max_ps} ps shorter than one bin ({bin_width_ps} ps)"
        )));
    }
    let half_bins = (2 * tau_max_ps - bin_width_ps) / (2 * bin_width_ps);
    let counts = correlate_counts(a.timestamps(), b.timestamps(), bin_width_ps, half_bins);

    let overlap = a.duration_ps().min(b.duration_ps()) as f64;
    let ra = a.len() as f64 / a.duration_ps().max(1) as f64;
    let rb = b.len() as f64 / b.duration_ps().max(1) as f64;
    let normalization = ra * rb * overlap * bin_width_ps as f64;
    Ok(CorrelationHistogram { bin_width_ps, half_bins, counts, normalization })
}

fn correlate_counts(a: &[u64], b: &[u64], w: u64, half_bins: u64) -> Vec<u64> {
    let nbins = (2 * half_bins + 1) as usize;
    let w = w as i64;
    let k_max = half_bins as i64;
    // Delays reach at most (K + ½)·w; one extra bin of slack is harmless.
    let reach = (k_max + 1) * w;
    let chunk = (a.len() / (4 * rayon::current_num_threads())).max(4096);

    let sweep = |part: &[u64]| -> Vec<u64> {
        let mut hist = vec![0u64; nbins];
        let first = part[0];
        let mut lo = b.partition_point(|&t| (t as i64) < first as i64 - reach);
        for &ta in part {
            let ta = ta as i64;
            while lo < b.len() && (b[lo] as i64) < ta - reach {
                lo += 1;
            }
            for &tb in &b[lo..] {
                let tau = tb as i64 - ta;
                if tau > reach {
                    break;
                }
                let k = bin_of(tau, w);
                if k.abs() <= k_max {
                    hist[(k + k_max) as usize] += 1;
                }
            }
        }
        hist
    };

    a.par_chunks(chunk).map(sweep).reduce(
        || vec![0u64; nbins],
        |mut x, y| {
            x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
            x
        },
    )
}

/// All-pairs reference implementation of [`correlate`]'s counts.
pub fn correlate_brute_force(a: &[u64], b: &[u64], bin_width_ps: u64, half_bins: u64) -> Vec<u64> {
    let w = bin_width_ps as i64;
    let k_max = half_bins as i64;
    let mut hist = vec![0u64; (2 * half_bins + 1) as usize];
    for &ta in a {
        for &tb in b {
            let k = bin_of(tb as i64 - ta as i64, w);
            if k.abs() <= k_max {
                hist[(k + k_max) as usize] += 1;
            }
        }
    }
    hist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulsedG2Result {
    pub rep_rate_mhz: f64,
    pub n_peaks: usize,
    /// Pulse offsets `−N..=N`.
    pub offsets: Vec<i64>,
    pub peak_areas: Vec<u64>,
    pub g2_zero: f64,
    pub g2_zero_err: f64,
}

impl PulsedG2Result {
    pub fn center_area(&self) -> u64 {
        self.peak_areas[self.n_peaks]
    }

    pub fn mean_side_area(&self) -> f64 {
        let side: u64 = self.peak_areas.iter().sum::<u64>() - self.center_area();
        side as f64 / (2 * self.n_peaks) as f64
    }
}

/// Coincidences folded into full-period windows centred on `n·T_rep`.
///
/// `g2_zero` is the central area over the mean of the `2N` side areas, with
/// Poisson errors propagated through the ratio.
pub fn pulsed_g2(
    a: &TimestampChannel,
    b: &TimestampChannel,
    rep_rate_mhz: f64,
    n_peaks: usize,
) -> Result<PulsedG2Result, CorrelatorError> {
    if n_peaks < 1 {
        return Err(CorrelatorError::TooFewPeaks(n_peaks));
    }
    if !(rep_rate_mhz.is_finite() && rep_rate_mhz > 0.0) {
        return Err(CorrelatorError::RepRate(rep_rate_mhz));
    }
    check_channel(a)?;
    check_channel(b)?;
    let period = 1e6 / rep_rate_mhz;
    let n_max = n_peaks as i64;
    let reach = ((n_max as f64 + 0.5) * period).ceil() as i64 + 1;
    let bt = b.timestamps();
    let nwin = 2 * n_peaks + 1;
    let chunk = (a.len() / (4 * rayon::current_num_threads())).max(4096);

    let areas = a
        .timestamps()
        .par_chunks(chunk)
        .map(|part| {
            let mut hist = vec![0u64; nwin];
            let mut lo = bt.partition_point(|&t| (t as i64) < part[0] as i64 - reach);
            for &ta in part {
                let ta = ta as i64;
                while lo < bt.len() && (bt[lo] as i64) < ta - reach {
                    lo += 1;
                }
                for &tb in &bt[lo..] {
                    let tau = tb as i64 - ta;
                    if tau > reach {
                        break;
                    }
                    let n = ((tau as f64 + 0.5 * period) / period).floor() as i64;
                    if n.abs() <= n_max {
                        hist[(n + n_max) as usize] += 1;
                    }
                }
            }
            hist
        })
        .reduce(
            || vec![0u64; nwin],
            |mut x, y| {
                x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
                x
            },
        );

    let center = areas[n_peaks] as f64;
    let side_total = areas.iter().sum::<u64>() as f64 - center;
    if side_total <= 0.0 {
        return Err(CorrelatorError::NoSideCoincidences);
    }
    let mean_side = side_total / (2 * n_peaks) as f64;
    let g2_zero = center / mean_side;
    // Var(c/m) ≈ c/m² + c²·Var(m)/m⁴ with Var(m) = Σside/(2N)²; an empty
    // central peak still carries a one-count Poisson uncertainty.
    let var_m = side_total / ((2 * n_peaks) as f64).powi(2);
    let g2_zero_err = (center.max(1.0) / mean_side.powi(2) + center.powi(2) * var_m / mean_side.powi(4)).sqrt();

    Ok(PulsedG2Result {
        rep_rate_mhz,
        n_peaks,
        offsets: (-n_max..=n_max).collect(),
        peak_areas: areas,
        g2_zero,
        g2_zero_err,
    })
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntensityTrace {
    pub bin_ms: f64,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    /// Infinite (serialized as null) when some bin is empty.
    #[serde(serialize_with = "finite_or_null")]
    pub max_min_ratio: f64,
    /// Largest |count − mean| in units of the shot-noise σ = √mean.
    pub max_deviation_sigma: f64,
    /// An empty bin or a bin more than 5 shot-noise σ from the mean.
    pub blinking: bool,
}

/// Counts per contiguous bin of `bin_ms` over the channel duration.
///
/// Only complete bins are kept; a channel shorter than one bin yields a single
/// bin covering the whole duration.
pub fn intensity_trace(a: &TimestampChannel, bin_ms: f64) -> Result<IntensityTrace, CorrelatorError> {
    if !(bin_ms.is_finite() && bin_ms > 0.0) {
        return Err(CorrelatorError::TraceBin(bin_ms));
    }
    let bin_ps = bin_ms * 1e9;
    let n_bins = ((a.duration_ps() as f64 / bin_ps).floor() as usize).max(1);
    let mut counts = vec![0u64; n_bins];
    for &t in a.timestamps() {
        let i = (t as f64 / bin_ps).floor() as usize;
        if i < n_bins {
            counts[i] += 1;
        } else if n_bins == 1 {
            counts[0] += 1;
        }
    }
    let n = n_bins as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    let std = if n_bins > 1 {
        (counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let max = *counts.iter().max().unwrap() as f64;
    let min = *counts.iter().min().unwrap() as f64;
    let max_min_ratio = if min > 0.0 { max / min } else { f64::INFINITY };
    let max_deviation_sigma = if mean > 0.0 {
        counts.iter().map(|&c| (c as f64 - mean).abs()).fold(0.0, f64::max) / mean.sqrt()
    } else {
        0.0
    };
    let blinking = min == 0.0 || max_deviation_sigma > 5.0;
    Ok(IntensityTrace { bin_ms, counts, mean, std, max_min_ratio, max_deviation_sigma, blinking })
}
