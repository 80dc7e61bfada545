//! Monte Carlo click streams from atoms falling through a pulsed cavity.
//!
//! Each cycle is an independent measurement window of `pulses_per_cycle`
//! pump/recycle periods. Atoms arrive as a homogeneous Poisson process, see a
//! Gaussian coupling profile while they cross the mode, and are treated
//! quasi-statically: the coupling at a pump pulse's midpoint fixes the
//! emission probability for that pulse. Every cycle draws from its own
//! ChaCha stream keyed by `(seed, cycle_id)`, so output does not depend on
//! how cycles are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::cavity::{tabulate_efficiency, CavityError, CavityQedParams, EfficiencyTable};
use crate::clicks::{ClickRecord, ClickStream, Detector, StreamHeader};

/// Pump/recycle timing grid. Pump interval `k` is
/// `[k·τ_period, k·τ_period + τ_pump)` within a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PulseSchedule {
    pub tau_pump_ns: u64,
    pub tau_recycle_ns: u64,
    pub pulses_per_cycle: u32,
}

impl Default for PulseSchedule {
    fn default() -> Self {
        Self {
            tau_pump_ns: 2000,
            tau_recycle_ns: 2000,
            pulses_per_cycle: 2000,
        }
    }
}

impl PulseSchedule {
    pub fn tau_period_ns(&self) -> u64 {
        self.tau_pump_ns + self.tau_recycle_ns
    }

    pub fn cycle_window_ns(&self) -> u64 {
        self.tau_period_ns() * self.pulses_per_cycle as u64
    }

    pub fn tau_pump(&self) -> f64 {
        self.tau_pump_ns as f64 / 1e9
    }

    pub fn tau_period(&self) -> f64 {
        self.tau_period_ns() as f64 / 1e9
    }

    pub fn cycle_window(&self) -> f64 {
        self.cycle_window_ns() as f64 / 1e9
    }

    pub fn pulse_start_ns(&self, k: u32) -> u64 {
        k as u64 * self.tau_period_ns()
    }

    /// Midpoint of pump pulse `k`, seconds from cycle start.
    pub fn pulse_midpoint(&self, k: u32) -> f64 {
        (self.pulse_start_ns(k) as f64 + 0.5 * self.tau_pump_ns as f64) * 1e-9
    }

    /// Pump interval containing `timestamp_ns`, or `None` during recycling
    /// or outside the window.
    pub fn pump_pulse_of(&self, timestamp_ns: u64) -> Option<u32> {
        let period = self.tau_period_ns();
        let k = timestamp_ns / period;
        if k >= self.pulses_per_cycle as u64 {
            return None;
        }
        (timestamp_ns % period < self.tau_pump_ns).then_some(k as u32)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.tau_pump_ns == 0 || self.tau_recycle_ns == 0 {
            return Err(SimError::InvalidConfig(
                "tau_pump_ns and tau_recycle_ns must be > 0".into(),
            ));
        }
        if self.pulses_per_cycle == 0 {
            return Err(SimError::InvalidConfig("pulses_per_cycle must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomFluxConfig {
    /// Atoms per second entering the mode volume.
    pub rate_lambda: f64,
    /// m/s
    pub velocity: f64,
    /// Mode waist (1/e field radius), m.
    pub waist: f64,
    pub recycle_success: f64,
}

impl Default for AtomFluxConfig {
    fn default() -> Self {
        Self {
            rate_lambda: 0.0,
            velocity: 2.0,
            // the atom moves a fifth of the waist per 4 µs period at 2 m/s
            waist: 40e-6,
            recycle_success: 0.7,
        }
    }
}

impl AtomFluxConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.rate_lambda.is_finite() && self.rate_lambda >= 0.0) {
            return Err(SimError::InvalidConfig("rate_lambda must be >= 0".into()));
        }
        if !(self.velocity > 0.0 && self.waist > 0.0) {
            return Err(SimError::InvalidConfig(
                "velocity and waist must be > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.recycle_success) {
            return Err(SimError::InvalidConfig(
                "recycle_success must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// One atom crossing the cavity mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomTransit {
    /// Time of closest approach to the mode axis, s from cycle start.
    pub t_center: f64,
    /// Transverse offset along the cavity-perpendicular direction, m.
    pub impact_y: f64,
    /// |cos| of the axial standing-wave phase.
    pub antinode_factor: f64,
}

impl AtomTransit {
    pub fn coupling(&self, t: f64, flux: &AtomFluxConfig, g_max: f64) -> f64 {
        let w2 = flux.waist * flux.waist;
        let x = flux.velocity * (t - self.t_center);
        g_max * (-(x * x) / w2).exp() * (-(self.impact_y * self.impact_y) / w2).exp()
            * self.antinode_factor
    }

    /// Pulses during which the atom is within `PRESENCE_WAISTS` waists of
    /// the mode centre along its fall.
    pub fn pulse_range(&self, flux: &AtomFluxConfig, schedule: &PulseSchedule) -> (u32, u32) {
        let half = PRESENCE_WAISTS * flux.waist / flux.velocity;
        let period = schedule.tau_period();
        let first = ((self.t_center - half) / period).floor().max(0.0);
        let last = ((self.t_center + half) / period)
            .ceil()
            .min(schedule.pulses_per_cycle as f64 - 1.0);
        if last < first {
            return (1, 0);
        }
        (first as u32, last as u32)
    }
}

/// Beyond this many waists the coupling is below `e^{-12} g_max`.
pub const PRESENCE_WAISTS: f64 = 3.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub qe: f64,
    /// Spatial filtering and optics after the output coupler.
    pub path_efficiency: f64,
    /// Probability of routing a photon to detector 1.
    pub splitter_ratio: f64,
    /// Noise counts per detector, 1/s.
    pub dark_rate: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            qe: 0.5,
            path_efficiency: 0.72,
            splitter_ratio: 0.5,
            dark_rate: 446.0,
        }
    }
}

impl DetectorModel {
    /// Overall detection efficiency η for a photon that left the cavity.
    pub fn eta(&self) -> f64 {
        self.qe * self.path_efficiency
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("qe", self.qe),
            ("path_efficiency", self.path_efficiency),
            ("splitter_ratio", self.splitter_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SimError::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.dark_rate.is_finite() && self.dark_rate >= 0.0) {
            return Err(SimError::InvalidConfig("dark_rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Photon-number statistics of a single pump pulse on an armed atom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmissionMode {
    /// At most one photon (Bernoulli with the master-equation probability).
    #[default]
    SinglePhoton,
    /// Poisson photon number with the same mean: a classical reference.
    Classical,
}

/// Everything `run_experiment` needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub cavity: CavityQedParams,
    pub schedule: PulseSchedule,
    pub flux: AtomFluxConfig,
    pub detector: DetectorModel,
    pub emission: EmissionMode,
    /// Coupling grid points for the efficiency lookup table.
    pub efficiency_grid: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            cavity: CavityQedParams::default(),
            schedule: PulseSchedule::default(),
            flux: AtomFluxConfig::default(),
            detector: DetectorModel::default(),
            emission: EmissionMode::SinglePhoton,
            efficiency_grid: 65,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.cavity.validate()?;
        self.schedule.validate()?;
        self.flux.validate()?;
        self.detector.validate()?;
        if self.efficiency_grid < 2 {
            return Err(SimError::InvalidConfig("efficiency_grid must be >= 2".into()));
        }
        if (self.cavity.tau_pump - self.schedule.tau_pump()).abs() > 1e-15 {
            return Err(SimError::InvalidConfig(
                "cavity pulse length differs from the schedule's pump length".into(),
            ));
        }
        Ok(())
    }

    pub fn efficiency_table(&self) -> Result<EfficiencyTable, SimError> {
        Ok(tabulate_efficiency(&self.cavity, self.efficiency_grid)?)
    }

    /// Probability that an emitted cavity photon produces a click on either
    /// detector.
    pub fn detection_probability(&self) -> f64 {
        self.cavity.escape_fraction * self.detector.eta()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Cavity(#[from] CavityError),
    #[error("target photon rate {target} 1/s is not reachable: {reason}")]
    Unreachable { target: f64, reason: String },
}

/// Ground truth for one (atom, pump pulse) pair with at least one photon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmissionEvent {
    pub pulse: u32,
    pub atom: u32,
    /// Photons generated in the cavity (≤ 1 in single-photon mode).
    pub generated: u8,
    /// Of those, photons that left through the output coupler.
    pub escaped: u8,
    /// Of those, photons that produced a click.
    pub detected: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CycleTruth {
    pub transits: Vec<AtomTransit>,
    /// Sorted by (atom, pulse).
    pub emissions: Vec<EmissionEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub stream: ClickStream,
    /// Indexed by cycle id.
    pub truth: Vec<CycleTruth>,
    pub config: SimConfig,
    pub seed: u64,
}

/// Random stream for one cycle.
pub fn cycle_rng(seed: u64, cycle_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cycle_id as u64);
    rng
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
}

pub fn sample_atom_transits<R: Rng + ?Sized>(
    flux: &AtomFluxConfig,
    schedule: &PulseSchedule,
    rng: &mut R,
) -> Vec<AtomTransit> {
    let window = schedule.cycle_window();
    let n = poisson_count(flux.rate_lambda * window, rng);
    let impact = Normal::new(0.0, 0.5 * flux.waist).expect("positive waist");
    (0..n)
        .map(|_| {
            let t_center = rng.random::<f64>() * window;
            let impact_y = loop {
                let y: f64 = impact.sample(rng);
                if y.abs() <= 2.0 * flux.waist {
                    break y;
                }
            };
            let phase = rng.random::<f64>() * std::f64::consts::PI;
            AtomTransit {
                t_center,
                impact_y,
                antinode_factor: phase.cos().abs(),
            }
        })
        .collect()
}

fn to_ns(t: f64, window_ns: u64) -> u64 {
    ((t * 1e9).floor().max(0.0) as u64).min(window_ns - 1)
}

/// Simulates one cycle with the given atoms already placed.
pub fn simulate_transits<R: Rng + ?Sized>(
    cycle_id: u32,
    transits: Vec<AtomTransit>,
    config: &SimConfig,
    table: &EfficiencyTable,
    rng: &mut R,
) -> (Vec<ClickRecord>, CycleTruth) {
    let schedule = &config.schedule;
    let flux = &config.flux;
    let det = &config.detector;
    let window_ns = schedule.cycle_window_ns();
    let g_max = config.cavity.g_max;
    let mut clicks = Vec::new();
    let mut emissions = Vec::new();

    for (atom, transit) in transits.iter().enumerate() {
        let (first, last) = transit.pulse_range(flux, schedule);
        let mut armed = true;
        for k in first..=last {
            if armed {
                let g = transit.coupling(schedule.pulse_midpoint(k), flux, g_max);
                let p = table.probability_at(g);
                let generated = match config.emission {
                    EmissionMode::SinglePhoton => u64::from(rng.random::<f64>() < p),
                    EmissionMode::Classical => poisson_count(p, rng),
                };
                if generated > 0 {
                    let mut escaped = 0u8;
                    let mut detected = 0u8;
                    for _ in 0..generated {
                        let t_emit = table.sample_emission_time(g, rng.random(), rng.random());
                        if rng.random::<f64>() >= config.cavity.escape_fraction {
                            continue;
                        }
                        escaped = escaped.saturating_add(1);
                        if rng.random::<f64>() >= det.eta() {
                            continue;
                        }
                        detected = detected.saturating_add(1);
                        let detector = if rng.random::<f64>() < det.splitter_ratio {
                            Detector::One
                        } else {
                            Detector::Two
                        };
                        let t = schedule.pulse_start_ns(k) as f64 * 1e-9 + t_emit;
                        let ts = to_ns(t, window_ns)
                            .min(schedule.pulse_start_ns(k) + schedule.tau_pump_ns - 1);
                        clicks.push(ClickRecord {
                            cycle_id,
                            detector,
                            timestamp_ns: ts,
                        });
                    }
                    emissions.push(EmissionEvent {
                        pulse: k,
                        atom: atom as u32,
                        generated: generated.min(u8::MAX as u64) as u8,
                        escaped,
                        detected,
                    });
                    armed = false;
                }
            }
            // recycle interval after pump pulse k
            if !armed {
                armed = rng.random::<f64>() < flux.recycle_success;
            }
        }
    }

    for detector in [Detector::One, Detector::Two] {
        let n = poisson_count(det.dark_rate * schedule.cycle_window(), rng);
        for _ in 0..n {
            clicks.push(ClickRecord {
                cycle_id,
                detector,
                timestamp_ns: rng.random_range(0..window_ns),
            });
        }
    }

    clicks.sort_by_key(|c| (c.timestamp_ns, c.detector));
    (clicks, CycleTruth { transits, emissions })
}

pub fn simulate_cycle<R: Rng + ?Sized>(
    cycle_id: u32,
    config: &SimConfig,
    table: &EfficiencyTable,
    rng: &mut R,
) -> (Vec<ClickRecord>, CycleTruth) {
    let transits = sample_atom_transits(&config.flux, &config.schedule, rng);
    simulate_transits(cycle_id, transits, config, table, rng)
}

pub fn run_experiment(config: &SimConfig, n_cycles: u32, seed: u64) -> Result<SimOutput, SimError> {
    config.validate()?;
    let table = config.efficiency_table()?;
    run_experiment_with(config, &table, n_cycles, seed)
}

/// As [`run_experiment`], reusing a prebuilt efficiency table.
pub fn run_experiment_with(
    config: &SimConfig,
    table: &EfficiencyTable,
    n_cycles: u32,
    seed: u64,
) -> Result<SimOutput, SimError> {
    config.validate()?;
    if n_cycles == 0 {
        return Err(SimError::InvalidConfig("n_cycles must be >= 1".into()));
    }
    let per_cycle: Vec<(Vec<ClickRecord>, CycleTruth)> = (0..n_cycles)
        .into_par_iter()
        .map(|cycle_id| {
            let mut rng = cycle_rng(seed, cycle_id);
            simulate_cycle(cycle_id, config, table, &mut rng)
        })
        .collect();

    let total: usize = per_cycle.iter().map(|(c, _)| c.len()).sum();
    let mut clicks = Vec::with_capacity(total);
    let mut truth = Vec::with_capacity(per_cycle.len());
    for (c, t) in per_cycle {
        clicks.extend(c);
        truth.push(t);
    }
    let header = StreamHeader {
        tau_period_ns: config.schedule.tau_period_ns(),
        tau_pump_ns: config.schedule.tau_pump_ns,
        pulses_per_cycle: config.schedule.pulses_per_cycle,
        cycles: n_cycles,
        seed,
    };
    Ok(SimOutput {
        stream: ClickStream { header, clicks },
        truth,
        config: config.clone(),
        seed,
    })
}

impl SimOutput {
    /// Source-photon clicks per detector per second, from ground truth.
    pub fn true_photon_rate(&self) -> f64 {
        let detected: u64 = self
            .truth
            .iter()
            .flat_map(|t| &t.emissions)
            .map(|e| e.detected as u64)
            .sum();
        detected as f64 / (2.0 * self.stream.observation_time())
    }

    /// Rows `(cycle_id, pulse_index, atom_id, generated)` for every pulse
    /// each atom spends in the mode, in (cycle, atom, pulse) order.
    pub fn truth_rows(&self) -> impl Iterator<Item = (u32, u32, u32, u8)> + '_ {
        let flux = &self.config.flux;
        let schedule = &self.config.schedule;
        self.truth.iter().enumerate().flat_map(move |(cycle, truth)| {
            let mut cursor = 0usize;
            truth
                .transits
                .iter()
                .enumerate()
                .flat_map(move |(atom, transit)| {
                    let (first, last) = transit.pulse_range(flux, schedule);
                    (first..=last).map(move |k| (atom as u32, k))
                })
                .map(move |(atom, k)| {
                    let ev = &truth.emissions;
                    while cursor < ev.len() && (ev[cursor].atom, ev[cursor].pulse) < (atom, k) {
                        cursor += 1;
                    }
                    let generated = match ev.get(cursor) {
                        Some(e) if e.atom == atom && e.pulse == k => e.generated,
                        _ => 0,
                    };
                    (cycle as u32, k, atom, generated)
                })
        })
    }
}

/// Pilot-run settings for [`calibrate_flux`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub pilot_cycles: u32,
    pub seed: u64,
    /// Relative tolerance on the pilot photon rate.
    pub rel_tol: f64,
    pub max_iterations: usize,
    /// Upper bound on atoms per second tried before giving up.
    pub max_rate: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            pilot_cycles: 4000,
            seed: 0x5eed,
            rel_tol: 0.01,
            max_iterations: 60,
            max_rate: 5e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub rate_lambda: f64,
    /// Per-detector photon click rate of the final pilot, 1/s.
    pub photon_rate: f64,
    pub iterations: usize,
}

/// Finds the atom arrival rate giving `target_photon_rate` photon clicks
/// per detector per second. Every pilot reuses the same seed, so the pilot
/// rate is a deterministic, monotone-in-expectation function of λ and the
/// search is a plain bisection.
pub fn calibrate_flux(
    target_photon_rate: f64,
    config: &SimConfig,
    table: &EfficiencyTable,
    options: &CalibrationOptions,
) -> Result<Calibration, SimError> {
    if !(target_photon_rate.is_finite() && target_photon_rate >= 0.0) {
        return Err(SimError::Unreachable {
            target: target_photon_rate,
            reason: "target must be finite and >= 0".into(),
        });
    }
    if target_photon_rate == 0.0 {
        return Ok(Calibration {
            rate_lambda: 0.0,
            photon_rate: 0.0,
            iterations: 0,
        });
    }
    let saturation = 1.0 / config.schedule.tau_period();
    if target_photon_rate >= saturation {
        return Err(SimError::Unreachable {
            target: target_photon_rate,
            reason: format!(
                "a detected photon in every pump pulse gives only {saturation} 1/s"
            ),
        });
    }

    let pilot = |lambda: f64| -> Result<f64, SimError> {
        let mut cfg = config.clone();
        cfg.flux.rate_lambda = lambda;
        Ok(run_experiment_with(&cfg, table, options.pilot_cycles, options.seed)?.true_photon_rate())
    };

    let within = |rate: f64| (rate - target_photon_rate).abs() <= options.rel_tol * target_photon_rate;
    let mut iterations = 0;

    // bracket
    let mut lo = 0.0;
    let mut hi = 100.0;
    loop {
        iterations += 1;
        let r = pilot(hi)?;
        if within(r) {
            return Ok(Calibration {
                rate_lambda: hi,
                photon_rate: r,
                iterations,
            });
        }
        if r > target_photon_rate {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > options.max_rate {
            return Err(SimError::Unreachable {
                target: target_photon_rate,
                reason: format!("photon rate still {r} 1/s at {lo} atoms/s"),
            });
        }
    }

    let mut best = (hi, f64::INFINITY);
    while iterations < options.max_iterations {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let r = pilot(mid)?;
        if (r - target_photon_rate).abs() < best.1 {
            best = (mid, (r - target_photon_rate).abs());
        }
        if within(r) {
            return Ok(Calibration {
                rate_lambda: mid,
                photon_rate: r,
                iterations,
            });
        }
        if r > target_photon_rate {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(SimError::Unreachable {
        target: target_photon_rate,
        reason: format!(
            "bisection did not converge; closest λ = {} missed by {} 1/s",
            best.0, best.1
        ),
    })
}
