//! Unconditional photon statistics of a two-detector click stream.
//!
//! Correlations are only ever formed between detector 1 and detector 2
//! clicks of the same cycle. Background predictions come from folding the
//! stream modulo the drive period and circularly correlating the two folded
//! rates.

use log::warn;
use rayon::prelude::*;
use thiserror::Error;

use crate::clicks::{ClickRecord, ClickStream, Detector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("click stream is empty")]
    EmptyStream,
    #[error("no clicks on detector {0}")]
    EmptyDetector(u8),
    #[error("mean count rate must be > 0")]
    ZeroRate,
    #[error("invalid binning: {0}")]
    InvalidBinning(String),
    #[error("lag range {lag_ns} ns must be shorter than the cycle window {window_ns} ns")]
    LagTooLong { lag_ns: u64, window_ns: u64 },
    #[error("phase grids differ")]
    GridMismatch,
}

/// Mean per-detector rates, 1/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSummary {
    pub i_bar: f64,
    pub i_noise: f64,
    pub i_photon: f64,
}

impl RateSummary {
    /// Builds a summary from a total and a noise rate. A noise rate above the
    /// total clamps the photon rate to zero.
    pub fn new(i_bar: f64, i_noise: f64) -> Self {
        let mut i_photon = i_bar - i_noise;
        if i_photon < 0.0 {
            warn!("noise rate {i_noise} exceeds mean rate {i_bar}; photon rate clamped to 0");
            i_photon = 0.0;
        }
        Self {
            i_bar,
            i_noise,
            i_photon,
        }
    }

    fn photon_fraction_sq(&self) -> Result<f64, StatsError> {
        if !(self.i_bar > 0.0) {
            return Err(StatsError::ZeroRate);
        }
        Ok((self.i_photon / self.i_bar).powi(2))
    }
}

pub fn summarize_rates(stream: &ClickStream, dark_rate: f64) -> Result<RateSummary, StatsError> {
    if stream.clicks.is_empty() {
        return Err(StatsError::EmptyStream);
    }
    let time = stream.observation_time();
    if !(time > 0.0) {
        return Err(StatsError::EmptyStream);
    }
    let i_bar = stream.clicks.len() as f64 / (2.0 * time);
    Ok(RateSummary::new(i_bar, dark_rate))
}

/// Constant noise contribution `1 − (Ī_P/Ī)²`.
pub fn noise_floor(rates: &RateSummary) -> Result<f64, StatsError> {
    Ok(1.0 - rates.photon_fraction_sq()?)
}

/// Different-atom photon–photon contribution, oscillating between these
/// values: `(0, 2(Ī_P/Ī)²)`.
pub fn photon_pair_extrema(rates: &RateSummary) -> Result<(f64, f64), StatsError> {
    Ok((0.0, 2.0 * rates.photon_fraction_sq()?))
}

/// Rate-based prediction for the long-lag oscillation of g²:
/// `1 ∓ (Ī_P/Ī)²`.
pub fn estimator_extrema(rates: &RateSummary) -> Result<(f64, f64), StatsError> {
    let f = rates.photon_fraction_sq()?;
    Ok((1.0 - f, 1.0 + f))
}

/// Cross-correlation histogram of detector-2 minus detector-1 lags.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationHistogram {
    pub bin_width_ns: u64,
    pub lag_range_ns: u64,
    /// Ordered pairs per bin; bin `b` covers `[lag_lo(b), lag_lo(b) + bin_width)`.
    pub raw_pairs: Vec<u64>,
    /// Expected pairs per bin for uncorrelated, uniform streams (same for all bins).
    pub normalization: f64,
}

impl CorrelationHistogram {
    pub fn n_bins(&self) -> usize {
        self.raw_pairs.len()
    }

    /// Lower edge of bin `b`, ns.
    pub fn lag_lo(&self, b: usize) -> i64 {
        -(self.lag_range_ns as i64) + (b as u64 * self.bin_width_ns) as i64
    }

    pub fn lag_center(&self, b: usize) -> f64 {
        self.lag_lo(b) as f64 + 0.5 * self.bin_width_ns as f64
    }

    pub fn g2(&self, b: usize) -> f64 {
        if self.normalization > 0.0 {
            self.raw_pairs[b] as f64 / self.normalization
        } else {
            0.0
        }
    }

    /// Shot-noise error `√raw / normalization`.
    pub fn sigma(&self, b: usize) -> f64 {
        if self.normalization > 0.0 {
            (self.raw_pairs[b] as f64).sqrt() / self.normalization
        } else {
            0.0
        }
    }

    /// Bin containing `lag_ns`, if in range.
    pub fn bin_of(&self, lag_ns: i64) -> Option<usize> {
        let shifted = lag_ns + self.lag_range_ns as i64;
        if shifted < 0 {
            return None;
        }
        let b = (shifted as u64 / self.bin_width_ns) as usize;
        (b < self.n_bins()).then_some(b)
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.raw_pairs.iter_mut().zip(other.raw_pairs) {
            *a += b;
        }
        self.normalization += other.normalization;
        self
    }
}

fn split_detectors(clicks: &[ClickRecord]) -> (Vec<i64>, Vec<i64>) {
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    for c in clicks {
        match c.detector {
            Detector::One => d1.push(c.timestamp_ns as i64),
            Detector::Two => d2.push(c.timestamp_ns as i64),
        }
    }
    (d1, d2)
}

pub fn g2_histogram(
    stream: &ClickStream,
    bin_width_ns: u64,
    lag_range_ns: u64,
) -> Result<CorrelationHistogram, StatsError> {
    if bin_width_ns == 0 || lag_range_ns == 0 || !lag_range_ns.is_multiple_of(bin_width_ns) {
        return Err(StatsError::InvalidBinning(format!(
            "need bin width > 0 dividing the lag range ({bin_width_ns} ns / {lag_range_ns} ns)"
        )));
    }
    let window_ns = stream.schedule().cycle_window_ns();
    if lag_range_ns >= window_ns {
        return Err(StatsError::LagTooLong {
            lag_ns: lag_range_ns,
            window_ns,
        });
    }
    for det in [Detector::One, Detector::Two] {
        if stream.count(det) == 0 {
            return Err(StatsError::EmptyDetector(det.label()));
        }
    }
    let n_bins = (2 * lag_range_ns / bin_width_ns) as usize;
    let empty = CorrelationHistogram {
        bin_width_ns,
        lag_range_ns,
        raw_pairs: vec![0; n_bins],
        normalization: 0.0,
    };
    let range = lag_range_ns as i64;
    let width = bin_width_ns as i64;
    let cycles: Vec<&[ClickRecord]> = stream.cycles().map(|(_, c)| c).collect();

    let hist = cycles
        .par_iter()
        .map(|clicks| {
            let mut h = empty.clone();
            let (d1, d2) = split_detectors(clicks);
            h.normalization =
                d1.len() as f64 * d2.len() as f64 * bin_width_ns as f64 / window_ns as f64;
            let mut start = 0usize;
            for &t1 in &d1 {
                while start < d2.len() && d2[start] < t1 - range {
                    start += 1;
                }
                for &t2 in &d2[start..] {
                    let lag = t2 - t1;
                    if lag >= range {
                        break;
                    }
                    h.raw_pairs[((lag + range) / width) as usize] += 1;
                }
            }
            h
        })
        .reduce(|| empty.clone(), CorrelationHistogram::merge);
    Ok(hist)
}

/// Click rate of one detector folded modulo the drive period.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseAveragedRate {
    pub phase_bin_ns: u64,
    pub tau_period_ns: u64,
    /// Counts per phase bin.
    pub counts: Vec<u64>,
    /// Rate per phase bin, 1/s.
    pub rate: Vec<f64>,
    pub n_periods: u64,
}

impl PulseAveragedRate {
    pub fn n_bins(&self) -> usize {
        self.rate.len()
    }

    /// Period average of the folded rate, equal to the mean click rate.
    pub fn mean_rate(&self) -> f64 {
        self.rate.iter().sum::<f64>() / self.rate.len() as f64
    }

    /// Bin-by-bin mean of two folded rates on the same grid.
    pub fn average(a: &Self, b: &Self) -> Result<Self, StatsError> {
        if a.phase_bin_ns != b.phase_bin_ns || a.tau_period_ns != b.tau_period_ns {
            return Err(StatsError::GridMismatch);
        }
        Ok(Self {
            phase_bin_ns: a.phase_bin_ns,
            tau_period_ns: a.tau_period_ns,
            counts: a.counts.iter().zip(&b.counts).map(|(x, y)| x + y).collect(),
            rate: a.rate.iter().zip(&b.rate).map(|(x, y)| 0.5 * (x + y)).collect(),
            n_periods: a.n_periods,
        })
    }
}

pub const DEFAULT_PHASE_BIN_NS: u64 = 40;

pub fn pulse_averaged_rate(
    stream: &ClickStream,
    detector: Detector,
    phase_bin_ns: u64,
) -> Result<PulseAveragedRate, StatsError> {
    if stream.clicks.is_empty() {
        return Err(StatsError::EmptyStream);
    }
    let schedule = stream.schedule();
    let period = schedule.tau_period_ns();
    if phase_bin_ns == 0 || !period.is_multiple_of(phase_bin_ns) {
        return Err(StatsError::InvalidBinning(format!(
            "phase bin {phase_bin_ns} ns must divide the period {period} ns"
        )));
    }
    let n_bins = (period / phase_bin_ns) as usize;
    let mut counts = vec![0u64; n_bins];
    for c in stream.clicks.iter().filter(|c| c.detector == detector) {
        counts[((c.timestamp_ns % period) / phase_bin_ns) as usize] += 1;
    }
    let n_periods = stream.header.cycles as u64 * schedule.pulses_per_cycle as u64;
    let norm = n_periods as f64 * phase_bin_ns as f64 * 1e-9;
    let rate = counts.iter().map(|&c| c as f64 / norm).collect();
    Ok(PulseAveragedRate {
        phase_bin_ns,
        tau_period_ns: period,
        counts,
        rate,
        n_periods,
    })
}

/// Periodic background correlation predicted from two folded rates.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundCorrelation {
    pub step_ns: u64,
    pub tau_period_ns: u64,
    /// g²_C at lags `j·step_ns`, j = 0 … n−1.
    pub g2: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

impl BackgroundCorrelation {
    /// Value at any lag, linear between grid points, periodic.
    pub fn at(&self, lag_ns: f64) -> f64 {
        let n = self.g2.len();
        let x = (lag_ns / self.step_ns as f64).rem_euclid(n as f64);
        let i = x.floor() as usize % n;
        let frac = x - x.floor();
        self.g2[i] * (1.0 - frac) + self.g2[(i + 1) % n] * frac
    }

    /// Mean over `[lo, hi)` ns. The curve is piecewise linear between grid
    /// points, so the trapezoid rule on a grid that includes every
    /// breakpoint is exact.
    pub fn mean_over(&self, lo_ns: f64, hi_ns: f64) -> f64 {
        if hi_ns <= lo_ns {
            return self.at(lo_ns);
        }
        let step = self.step_ns as f64;
        let mut pts = vec![lo_ns];
        let mut k = (lo_ns / step).floor() + 1.0;
        while k * step < hi_ns {
            pts.push(k * step);
            k += 1.0;
        }
        pts.push(hi_ns);
        let area: f64 = pts
            .windows(2)
            .map(|w| 0.5 * (self.at(w[0]) + self.at(w[1])) * (w[1] - w[0]))
            .sum();
        area / (hi_ns - lo_ns)
    }
}

pub fn background_correlation(
    rate1: &PulseAveragedRate,
    rate2: &PulseAveragedRate,
) -> Result<BackgroundCorrelation, StatsError> {
    if rate1.phase_bin_ns != rate2.phase_bin_ns
        || rate1.tau_period_ns != rate2.tau_period_ns
        || rate1.n_bins() != rate2.n_bins()
    {
        return Err(StatsError::GridMismatch);
    }
    let (m1, m2) = (rate1.mean_rate(), rate2.mean_rate());
    if !(m1 > 0.0 && m2 > 0.0) {
        return Err(StatsError::ZeroRate);
    }
    let n = rate1.n_bins();
    let g2: Vec<f64> = (0..n)
        .map(|j| {
            let s: f64 = (0..n).map(|i| rate1.rate[i] * rate2.rate[(i + j) % n]).sum();
            s / n as f64 / (m1 * m2)
        })
        .collect();
    let min = g2.iter().copied().fold(f64::INFINITY, f64::min);
    let max = g2.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(BackgroundCorrelation {
        step_ns: rate1.phase_bin_ns,
        tau_period_ns: rate1.tau_period_ns,
        g2,
        min,
        max,
    })
}
