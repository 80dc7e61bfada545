//! Conditioning on atom presence.
//!
//! A pump interval with at least one click is taken as evidence that an atom
//! is in the cavity; the *next* pump interval then forms the conditioned
//! data set. Clicks during recycling are ignored throughout, and nothing is
//! ever paired across cycle boundaries.

use log::warn;
use thiserror::Error;

use crate::click_stats::{pulse_averaged_rate, PulseAveragedRate, StatsError};
use crate::clicks::{ClickStream, Detector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConditioningError {
    #[error("p_atom undefined: no photon or noise counts per pulse")]
    NoCounts,
    #[error("no follow-up photons on one or both detectors")]
    NoFollowUpPhotons,
    #[error("need at least one trigger")]
    NoTriggers,
    #[error("detection efficiency and p_atom must be > 0 (eta = {eta}, p_atom = {p_atom})")]
    DegenerateCorrection { eta: f64, p_atom: f64 },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Counts in one non-empty pump interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PulseEntry {
    pub cycle: u32,
    pub pulse: u32,
    pub n1: u32,
    pub n2: u32,
}

impl PulseEntry {
    pub fn n(&self) -> u32 {
        self.n1 + self.n2
    }
}

/// Per-pump-interval counts, stored sparsely: intervals without clicks are
/// implicit zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseCounts {
    pub cycles: u32,
    pub pulses_per_cycle: u32,
    /// Sorted by (cycle, pulse).
    pub entries: Vec<PulseEntry>,
}

impl PulseCounts {
    pub fn get(&self, cycle: u32, pulse: u32) -> (u32, u32) {
        match self
            .entries
            .binary_search_by_key(&(cycle, pulse), |e| (e.cycle, e.pulse))
        {
            Ok(i) => (self.entries[i].n1, self.entries[i].n2),
            Err(_) => (0, 0),
        }
    }

    pub fn n(&self, cycle: u32, pulse: u32) -> u32 {
        let (a, b) = self.get(cycle, pulse);
        a + b
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.n() as u64).sum()
    }

    pub fn n_pulses(&self) -> u64 {
        self.cycles as u64 * self.pulses_per_cycle as u64
    }
}

pub fn bin_clicks_to_pulses(stream: &ClickStream) -> PulseCounts {
    let schedule = stream.schedule();
    let mut entries: Vec<PulseEntry> = Vec::new();
    for c in &stream.clicks {
        let Some(pulse) = schedule.pump_pulse_of(c.timestamp_ns) else {
            continue;
        };
        let entry = match entries.last_mut() {
            Some(e) if e.cycle == c.cycle_id && e.pulse == pulse => e,
            _ => {
                entries.push(PulseEntry {
                    cycle: c.cycle_id,
                    pulse,
                    n1: 0,
                    n2: 0,
                });
                entries.last_mut().unwrap()
            }
        };
        match c.detector {
            Detector::One => entry.n1 += 1,
            Detector::Two => entry.n2 += 1,
        }
    }
    PulseCounts {
        cycles: stream.header.cycles,
        pulses_per_cycle: schedule.pulses_per_cycle,
        entries,
    }
}

/// `n̄_P / (n̄_P + n̄_N)`.
pub fn atom_presence_probability(n_bar_p: f64, n_bar_n: f64) -> Result<f64, ConditioningError> {
    let total = n_bar_p + n_bar_n;
    if !(total > 0.0) {
        return Err(ConditioningError::NoCounts);
    }
    Ok((n_bar_p / total).clamp(0.0, 1.0))
}

/// Mean photon and noise counts per pump pulse summed over both detectors,
/// from the folded per-detector rate `Ĩ(t)`:
/// `n̄_N = 2 Ī_N τ_P`, `n̄_P = 2 ∫₀^{τ_P} (Ĩ(t) − Ī_N) dt`.
pub fn mean_counts_per_pulse(
    pulse_avg: &PulseAveragedRate,
    i_noise: f64,
    tau_pump_ns: u64,
) -> (f64, f64) {
    let n_bar_n = 2.0 * i_noise * tau_pump_ns as f64 * 1e-9;
    let bin = pulse_avg.phase_bin_ns;
    let mut integral = 0.0;
    for (i, &r) in pulse_avg.rate.iter().enumerate() {
        let lo = i as u64 * bin;
        if lo >= tau_pump_ns {
            break;
        }
        let width = (lo + bin).min(tau_pump_ns) - lo;
        integral += (r - i_noise) * width as f64 * 1e-9;
    }
    let mut n_bar_p = 2.0 * integral;
    if n_bar_p < 0.0 {
        warn!("pump-window rate below the noise rate; n_bar_P clamped to 0");
        n_bar_p = 0.0;
    }
    (n_bar_p, n_bar_n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditioningStats {
    pub n_bar_p: f64,
    pub n_bar_n: f64,
    pub p_atom: f64,
    /// Overall detection efficiency after the output coupler.
    pub eta: f64,
}

pub const DEFAULT_ETA: f64 = 0.36;

impl ConditioningStats {
    pub fn from_counts(n_bar_p: f64, n_bar_n: f64, eta: f64) -> Result<Self, ConditioningError> {
        Ok(Self {
            n_bar_p,
            n_bar_n,
            p_atom: atom_presence_probability(n_bar_p, n_bar_n)?,
            eta,
        })
    }

    /// Data-driven estimate from a click stream and a known noise rate.
    pub fn from_stream(
        stream: &ClickStream,
        i_noise: f64,
        eta: f64,
        phase_bin_ns: u64,
    ) -> Result<Self, ConditioningError> {
        let r1 = pulse_averaged_rate(stream, Detector::One, phase_bin_ns)?;
        let r2 = pulse_averaged_rate(stream, Detector::Two, phase_bin_ns)?;
        let both = PulseAveragedRate::average(&r1, &r2)?;
        let (n_p, n_n) = mean_counts_per_pulse(&both, i_noise, stream.header.tau_pump_ns);
        Self::from_counts(n_p, n_n, eta)
    }
}

/// One conditioned entry: a trigger pulse and the counts in the pulse after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectedPulse {
    pub cycle: u32,
    pub trigger_pulse: u32,
    pub m1: u32,
    pub m2: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedSeries {
    pub entries: Vec<SelectedPulse>,
}

impl SelectedSeries {
    pub fn m(&self) -> usize {
        self.entries.len()
    }

    pub fn mean_m1(&self) -> f64 {
        mean(self.entries.iter().map(|e| e.m1 as f64))
    }

    pub fn mean_m2(&self) -> f64 {
        mean(self.entries.iter().map(|e| e.m2 as f64))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Every pulse with `n > 0` that has a following pulse in the same cycle.
pub fn select_triggered(pulses: &PulseCounts) -> SelectedSeries {
    let entries = pulses
        .entries
        .iter()
        .filter(|e| e.n() > 0 && e.pulse + 1 < pulses.pulses_per_cycle)
        .map(|e| {
            let (m1, m2) = pulses.get(e.cycle, e.pulse + 1);
            SelectedPulse {
                cycle: e.cycle,
                trigger_pulse: e.pulse,
                m1,
                m2,
            }
        })
        .collect();
    SelectedSeries { entries }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalPoint {
    pub delta_i: i32,
    pub g2: f64,
    /// Σ m1(i)·m2(i+Δi) before normalisation.
    pub n_events: u64,
    /// Number of index pairs entering the sum.
    pub n_valid: u64,
    /// `g2/√n_events`; `None` when there are no events.
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalG2 {
    pub points: Vec<ConditionalPoint>,
    pub m: usize,
    pub mean_m1: f64,
    pub mean_m2: f64,
}

impl ConditionalG2 {
    pub fn at(&self, delta_i: i32) -> Option<&ConditionalPoint> {
        self.points.iter().find(|p| p.delta_i == delta_i)
    }

    /// Average of g²(Δi≠0) with the shot-noise error `mean/√n̄_e`, where
    /// n̄_e is the average event count of those points.
    pub fn off_peak_mean(&self) -> Option<(f64, f64)> {
        let off: Vec<&ConditionalPoint> =
            self.points.iter().filter(|p| p.delta_i != 0 && p.n_valid > 0).collect();
        if off.is_empty() {
            return None;
        }
        let g = mean(off.iter().map(|p| p.g2));
        let n_e = mean(off.iter().map(|p| p.n_events as f64));
        let sigma = if n_e > 0.0 { g / n_e.sqrt() } else { f64::INFINITY };
        Some((g, sigma))
    }
}

/// Relative error `1/√n_e` of a conditional g² point.
pub fn g2_error_bars(g2: f64, n_events: u64) -> Option<f64> {
    (n_events > 0).then(|| g2 / (n_events as f64).sqrt())
}

/// Pulse-to-pulse correlation of the conditioned series, normalised per Δi
/// by the number of valid index pairs (both entries in the same cycle).
pub fn conditional_g2(
    series: &SelectedSeries,
    delta_range: u32,
) -> Result<ConditionalG2, ConditioningError> {
    let (m1_bar, m2_bar) = (series.mean_m1(), series.mean_m2());
    if !(m1_bar * m2_bar > 0.0) {
        return Err(ConditioningError::NoFollowUpPhotons);
    }
    let e = &series.entries;
    let range = delta_range as i64;
    let points = (-range..=range)
        .map(|d| {
            let mut events = 0u64;
            let mut valid = 0u64;
            for (i, a) in e.iter().enumerate() {
                let j = i as i64 + d;
                if j < 0 || j >= e.len() as i64 {
                    continue;
                }
                let b = &e[j as usize];
                if b.cycle != a.cycle {
                    continue;
                }
                valid += 1;
                events += a.m1 as u64 * b.m2 as u64;
            }
            let g2 = if valid > 0 {
                events as f64 / (valid as f64 * m1_bar * m2_bar)
            } else {
                0.0
            };
            ConditionalPoint {
                delta_i: d as i32,
                g2,
                n_events: events,
                n_valid: valid,
                sigma: g2_error_bars(g2, events),
            }
        })
        .collect();
    Ok(ConditionalG2 {
        points,
        m: e.len(),
        mean_m1: m1_bar,
        mean_m2: m2_bar,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmissionPoint {
    pub delta_k: i32,
    pub p_bar: f64,
    /// Standard error from the spread of the per-trigger counts.
    pub sigma: f64,
    pub n_valid: u64,
}

/// Background- and efficiency-corrected emission probability in the pump
/// pulses around each trigger:
/// `p̄(Δk) = 1/(η p_atom) · mean_i [n(k_i+Δk) − n̄_N − n̄_P − δ_{Δk,0}]`.
/// Offsets leaving the trigger's cycle are skipped. Not clamped, so noise-only
/// data scatters around zero.
pub fn conditional_emission_probability(
    pulses: &PulseCounts,
    series: &SelectedSeries,
    stats: &ConditioningStats,
    delta_k_range: u32,
) -> Result<Vec<EmissionPoint>, ConditioningError> {
    if !(stats.eta > 0.0 && stats.p_atom > 0.0) {
        return Err(ConditioningError::DegenerateCorrection {
            eta: stats.eta,
            p_atom: stats.p_atom,
        });
    }
    if series.m() == 0 {
        return Err(ConditioningError::NoTriggers);
    }
    let scale = 1.0 / (stats.eta * stats.p_atom);
    let background = stats.n_bar_n + stats.n_bar_p;
    let range = delta_k_range as i64;
    let ppc = pulses.pulses_per_cycle as i64;
    Ok((-range..=range)
        .map(|dk| {
            let self_count = if dk == 0 { 1.0 } else { 0.0 };
            let (mut sum, mut sum_sq, mut n) = (0.0f64, 0.0f64, 0u64);
            for e in &series.entries {
                let k = e.trigger_pulse as i64 + dk;
                if k < 0 || k >= ppc {
                    continue;
                }
                let x = pulses.n(e.cycle, k as u32) as f64 - background - self_count;
                sum += x;
                sum_sq += x * x;
                n += 1;
            }
            if n == 0 {
                return EmissionPoint {
                    delta_k: dk as i32,
                    p_bar: 0.0,
                    sigma: f64::INFINITY,
                    n_valid: 0,
                };
            }
            let avg = sum / n as f64;
            let var = if n > 1 {
                (sum_sq - n as f64 * avg * avg).max(0.0) / (n - 1) as f64
            } else {
                0.0
            };
            EmissionPoint {
                delta_k: dk as i32,
                p_bar: scale * avg,
                sigma: scale * (var / n as f64).sqrt(),
                n_valid: n,
            }
        })
        .collect())
}
