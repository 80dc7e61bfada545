//! Four-state atom–cavity master equation for a single pump pulse.
//!
//! Basis order is `|u,0⟩, |e,0⟩, |g,1⟩, |g,0⟩`. The pump drives `u ↔ e` with a
//! Rabi frequency that ramps linearly from zero, the cavity vacuum couples
//! `e,0 ↔ g,1`, and the pulse is Raman resonant so the detuning sits on
//! `|e,0⟩` alone. The cavity field decays at `κ` (population rate `2κ`) into
//! `|g,0⟩`; every such jump is one photon generated. The excited state decays
//! at `2γ⊥`: a fraction `decay_to_initial` returns to `|u,0⟩`, the rest leaves
//! the manifold into an absorbing sink population.

use std::f64::consts::TAU;

use nalgebra::{Complex, Matrix4};
use rayon::prelude::*;
use thiserror::Error;

use crate::ode::{DormandPrince, OdeError, Tolerance};

pub type C64 = Complex<f64>;
pub type Mat4 = Matrix4<C64>;

pub const U0: usize = 0;
pub const E0: usize = 1;
pub const G1: usize = 2;
pub const G0: usize = 3;

const STATE_LEN: usize = 34;
const SINK: usize = 32;
const EMITTED: usize = 33;

pub const TRACE_TOL: f64 = 1e-8;
pub const HERMITICITY_TOL: f64 = 1e-10;
pub const POSITIVITY_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CavityError {
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("coupling must be non-negative, got {0}")]
    NegativeCoupling(f64),
    #[error("time {t:e} s lies outside the pump pulse [0, {tau:e}] s")]
    TimeOutsidePulse { t: f64, tau: f64 },
    #[error("integrator failure")]
    Integrator(#[from] OdeError),
    #[error("density-matrix invariant violated at t = {t:e} s: {what}")]
    InvariantViolated { t: f64, what: String },
}

/// Physical rates in rad/s, durations in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct CavityQedParams {
    pub g_max: f64,
    pub kappa: f64,
    pub gamma_perp: f64,
    pub delta: f64,
    pub omega_max: f64,
    pub tau_pump: f64,
    /// Probability that a cavity photon leaves through the output coupler.
    pub escape_fraction: f64,
    /// Fraction of spontaneous decays from `|e⟩` that land back in `|u⟩`.
    pub decay_to_initial: f64,
}

/// `⁸⁵Rb` 5P₃/₂ F′=3 → 5S₁/₂ F=3 branching ratio.
pub const RB85_F3_BRANCHING: f64 = 5.0 / 9.0;

impl Default for CavityQedParams {
    fn default() -> Self {
        Self {
            g_max: TAU * 2.5e6,
            kappa: TAU * 1.25e6,
            gamma_perp: TAU * 3.0e6,
            delta: -TAU * 20.0e6,
            omega_max: TAU * 8.0e6,
            tau_pump: 2e-6,
            escape_fraction: 0.9,
            decay_to_initial: RB85_F3_BRANCHING,
        }
    }
}

impl CavityQedParams {
    pub fn validate(&self) -> Result<(), CavityError> {
        let non_negative = [
            ("g_max", self.g_max),
            ("kappa", self.kappa),
            ("gamma_perp", self.gamma_perp),
            ("omega_max", self.omega_max),
            ("tau_pump", self.tau_pump),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CavityError::InvalidParameter {
                    name,
                    reason: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        if !self.delta.is_finite() {
            return Err(CavityError::InvalidParameter {
                name: "delta",
                reason: "must be finite".into(),
            });
        }
        for (name, v) in [
            ("escape_fraction", self.escape_fraction),
            ("decay_to_initial", self.decay_to_initial),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CavityError::InvalidParameter {
                    name,
                    reason: format!("must lie in [0, 1], got {v}"),
                });
            }
        }
        Ok(())
    }

    /// Pump Rabi frequency: linear ramp from 0 to `omega_max` over the pulse.
    pub fn pump_rabi(&self, t: f64) -> f64 {
        if self.tau_pump == 0.0 {
            return 0.0;
        }
        self.omega_max * t / self.tau_pump
    }
}

/// A 4×4 density matrix over `{|u,0⟩, |e,0⟩, |g,1⟩, |g,0⟩}`.
///
/// Populations that left to the sink are tracked outside the matrix, so the
/// trace alone may drop below one.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(Mat4);

impl DensityMatrix {
    pub fn pure(index: usize) -> Self {
        let mut m = Mat4::zeros();
        m[(index, index)] = C64::new(1.0, 0.0);
        Self(m)
    }

    pub fn from_matrix(m: Mat4) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }

    pub fn population(&self, index: usize) -> f64 {
        self.0[(index, index)].re
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    /// Largest entry of `|ρ − ρ†|`.
    pub fn hermiticity_error(&self) -> f64 {
        (self.0 - self.0.adjoint())
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (self.0 + self.0.adjoint()) * C64::new(0.5, 0.0);
        herm.symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    fn to_state(&self, sink: f64, emitted: f64) -> [f64; STATE_LEN] {
        let mut y = [0.0; STATE_LEN];
        for r in 0..4 {
            for c in 0..4 {
                y[4 * r + c] = self.0[(r, c)].re;
                y[16 + 4 * r + c] = self.0[(r, c)].im;
            }
        }
        y[SINK] = sink;
        y[EMITTED] = emitted;
        y
    }

    fn from_state(y: &[f64; STATE_LEN]) -> Self {
        Self(Mat4::from_fn(|r, c| C64::new(y[4 * r + c], y[16 + 4 * r + c])))
    }
}

/// Instantaneous Lindblad generator with a non-Hermitian loss into the sink.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub hamiltonian: Mat4,
    /// Collapse operators that stay inside the four-state manifold.
    pub jumps: Vec<Mat4>,
    /// Population rate from `|e,0⟩` into the sink.
    pub sink_rate: f64,
    /// Population rate of `|g,1⟩ → |g,0⟩`, i.e. 2κ.
    pub photon_rate: f64,
    h_eff: Mat4,
}

impl Generator {
    /// `dρ/dt`.
    pub fn apply(&self, rho: &Mat4) -> Mat4 {
        let minus_i = C64::new(0.0, -1.0);
        let mut d = (self.h_eff * rho - rho * self.h_eff.adjoint()) * minus_i;
        for l in &self.jumps {
            d += l * rho * l.adjoint();
        }
        d
    }

    /// Rate at which population flows into the sink.
    pub fn sink_flow(&self, rho: &Mat4) -> f64 {
        self.sink_rate * rho[(E0, E0)].re
    }

    /// Rate at which photons are generated (cavity decay of `|g,1⟩`).
    pub fn photon_flow(&self, rho: &Mat4) -> f64 {
        self.photon_rate * rho[(G1, G1)].re
    }
}

pub fn build_generator(
    params: &CavityQedParams,
    g_eff: f64,
    t: f64,
) -> Result<Generator, CavityError> {
    if !(g_eff >= 0.0) {
        return Err(CavityError::NegativeCoupling(g_eff));
    }
    if !(0.0..=params.tau_pump).contains(&t) {
        return Err(CavityError::TimeOutsidePulse {
            t,
            tau: params.tau_pump,
        });
    }
    Ok(generator_unchecked(params, g_eff, t))
}

fn generator_unchecked(params: &CavityQedParams, g_eff: f64, t: f64) -> Generator {
    let re = |x: f64| C64::new(x, 0.0);
    let half_rabi = 0.5 * params.pump_rabi(t);

    let mut h = Mat4::zeros();
    h[(E0, E0)] = re(params.delta);
    h[(U0, E0)] = re(half_rabi);
    h[(E0, U0)] = re(half_rabi);
    h[(E0, G1)] = re(g_eff);
    h[(G1, E0)] = re(g_eff);

    let photon_rate = 2.0 * params.kappa;
    let spont = 2.0 * params.gamma_perp;
    let back = spont * params.decay_to_initial;
    let sink_rate = spont - back;

    let mut cavity_jump = Mat4::zeros();
    cavity_jump[(G0, G1)] = re(photon_rate.sqrt());
    let mut recycle_jump = Mat4::zeros();
    recycle_jump[(U0, E0)] = re(back.sqrt());

    let mut h_eff = h;
    // −(i/2) Σ L†L, including the sink channel
    h_eff[(G1, G1)] -= C64::new(0.0, 0.5 * photon_rate);
    h_eff[(E0, E0)] -= C64::new(0.0, 0.5 * spont);

    Generator {
        hamiltonian: h,
        jumps: vec![cavity_jump, recycle_jump],
        sink_rate,
        photon_rate,
        h_eff,
    }
}

/// Emission rate `2κ ρ_{g1,g1}(t)` sampled on a uniform grid over the pulse.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionProfile {
    pub time_grid: Vec<f64>,
    pub rate: Vec<f64>,
    /// Running integral of `rate` from the start of the pulse.
    pub cumulative: Vec<f64>,
    pub total_probability: f64,
}

impl EmissionProfile {
    /// Inverse of the normalised cumulative emission, linear between grid
    /// points. `u` in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        let total = self.total_probability;
        let n = self.time_grid.len();
        if total <= 0.0 || n < 2 {
            return u * self.time_grid.last().copied().unwrap_or(0.0);
        }
        let target = u.clamp(0.0, 1.0) * total;
        let idx = self.cumulative.partition_point(|&c| c < target);
        if idx == 0 {
            return self.time_grid[0];
        }
        if idx >= n {
            return self.time_grid[n - 1];
        }
        let (c0, c1) = (self.cumulative[idx - 1], self.cumulative[idx]);
        let (t0, t1) = (self.time_grid[idx - 1], self.time_grid[idx]);
        if c1 <= c0 {
            t0
        } else {
            t0 + (t1 - t0) * (target - c0) / (c1 - c0)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IntegrationDiagnostics {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// max |tr ρ + sink − 1|
    pub max_trace_error: f64,
    pub max_hermiticity_error: f64,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseOutcome {
    pub profile: EmissionProfile,
    pub final_state: DensityMatrix,
    pub sink_population: f64,
    pub diagnostics: IntegrationDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub tolerance: Tolerance,
    /// Number of intervals in the emission-profile grid.
    pub profile_intervals: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            tolerance: Tolerance::default(),
            profile_intervals: 400,
        }
    }
}

pub fn evolve_pump_pulse(
    params: &CavityQedParams,
    g_eff: f64,
) -> Result<PulseOutcome, CavityError> {
    evolve_pump_pulse_with(params, g_eff, &IntegratorConfig::default())
}

pub fn evolve_pump_pulse_with(
    params: &CavityQedParams,
    g_eff: f64,
    config: &IntegratorConfig,
) -> Result<PulseOutcome, CavityError> {
    params.validate()?;
    if !(g_eff >= 0.0) {
        return Err(CavityError::NegativeCoupling(g_eff));
    }
    let tau = params.tau_pump;
    let intervals = config.profile_intervals.max(1);
    let grid: Vec<f64> = (0..=intervals)
        .map(|i| tau * i as f64 / intervals as f64)
        .collect();

    let rhs = |t: f64, y: &[f64; STATE_LEN]| {
        let rho = DensityMatrix::from_state(y);
        let gen = generator_unchecked(params, g_eff, t.clamp(0.0, tau));
        let d = gen.apply(rho.matrix());
        let mut out = DensityMatrix(d).to_state(0.0, 0.0);
        out[SINK] = gen.sink_flow(rho.matrix());
        out[EMITTED] = gen.photon_flow(rho.matrix());
        out
    };

    let mut diag = IntegrationDiagnostics {
        min_eigenvalue: 1.0,
        ..Default::default()
    };
    let y0 = DensityMatrix::pure(U0).to_state(0.0, 0.0);
    let solver = DormandPrince::new(rhs, config.tolerance.clone());
    let (states, stats) = solver.integrate(y0, &grid, |t, y| check_state(t, y, &mut diag))?;
    diag.accepted_steps = stats.accepted;
    diag.rejected_steps = stats.rejected;

    let mut rate = Vec::with_capacity(states.len());
    let mut cumulative = Vec::with_capacity(states.len());
    let mut running = 0.0f64;
    for y in &states {
        rate.push((2.0 * params.kappa * y[4 * G1 + G1]).max(0.0));
        // integrator drift can make the accumulated value dip by ~1e-16
        running = running.max(y[EMITTED]);
        cumulative.push(running);
    }
    let last = states.last().expect("grid has at least two points");
    let total_probability = last[EMITTED].clamp(0.0, 1.0);

    Ok(PulseOutcome {
        profile: EmissionProfile {
            time_grid: grid,
            rate,
            cumulative,
            total_probability,
        },
        final_state: DensityMatrix::from_state(last),
        sink_population: last[SINK],
        diagnostics: diag,
    })
}

fn check_state(
    t: f64,
    y: &[f64; STATE_LEN],
    diag: &mut IntegrationDiagnostics,
) -> Result<(), CavityError> {
    let rho = DensityMatrix::from_state(y);
    let trace_err = (rho.trace() + y[SINK] - 1.0).abs();
    let herm = rho.hermiticity_error();
    let min_eig = rho.min_eigenvalue();
    diag.max_trace_error = diag.max_trace_error.max(trace_err);
    diag.max_hermiticity_error = diag.max_hermiticity_error.max(herm);
    diag.min_eigenvalue = diag.min_eigenvalue.min(min_eig);
    if trace_err > TRACE_TOL {
        return Err(CavityError::InvariantViolated {
            t,
            what: format!("trace error {trace_err:e}"),
        });
    }
    if herm > HERMITICITY_TOL {
        return Err(CavityError::InvariantViolated {
            t,
            what: format!("hermiticity error {herm:e}"),
        });
    }
    if min_eig < -POSITIVITY_TOL {
        return Err(CavityError::InvariantViolated {
            t,
            what: format!("negative eigenvalue {min_eig:e}"),
        });
    }
    Ok(())
}

/// Probability that one pump pulse generates a cavity photon.
pub fn emission_probability(params: &CavityQedParams, g_eff: f64) -> Result<f64, CavityError> {
    Ok(evolve_pump_pulse(params, g_eff)?.profile.total_probability)
}

/// Emission probability and profile on a uniform coupling grid over `[0, g_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyTable {
    pub g_grid: Vec<f64>,
    pub probability: Vec<f64>,
    pub profiles: Vec<EmissionProfile>,
    pub tolerance: Tolerance,
}

pub fn tabulate_efficiency(
    params: &CavityQedParams,
    n_grid: usize,
) -> Result<EfficiencyTable, CavityError> {
    tabulate_efficiency_with(params, n_grid, &IntegratorConfig::default())
}

pub fn tabulate_efficiency_with(
    params: &CavityQedParams,
    n_grid: usize,
    config: &IntegratorConfig,
) -> Result<EfficiencyTable, CavityError> {
    if n_grid < 2 {
        return Err(CavityError::InvalidParameter {
            name: "n_grid",
            reason: format!("need at least 2 grid points, got {n_grid}"),
        });
    }
    let g_grid: Vec<f64> = (0..n_grid)
        .map(|i| params.g_max * i as f64 / (n_grid - 1) as f64)
        .collect();
    let outcomes = g_grid
        .par_iter()
        .map(|&g| evolve_pump_pulse_with(params, g, config))
        .collect::<Result<Vec<_>, _>>()?;
    let probability = outcomes.iter().map(|o| o.profile.total_probability).collect();
    let profiles = outcomes.into_iter().map(|o| o.profile).collect();
    Ok(EfficiencyTable {
        g_grid,
        probability,
        profiles,
        tolerance: config.tolerance.clone(),
    })
}

impl EfficiencyTable {
    pub fn g_max(&self) -> f64 {
        *self.g_grid.last().unwrap()
    }

    /// Grid interval containing `g` (clamped into the table) and the
    /// fractional position inside it.
    fn locate(&self, g: f64) -> (usize, f64) {
        let n = self.g_grid.len();
        let g_max = self.g_max();
        if g_max <= 0.0 {
            return (0, 0.0);
        }
        let x = (g.clamp(0.0, g_max) / g_max) * (n - 1) as f64;
        let i = (x.floor() as usize).min(n - 2);
        (i, x - i as f64)
    }

    /// Linearly interpolated emission probability.
    pub fn probability_at(&self, g: f64) -> f64 {
        let (i, frac) = self.locate(g);
        if self.g_grid.len() == 1 {
            return self.probability[0];
        }
        self.probability[i] * (1.0 - frac) + self.probability[i + 1] * frac
    }

    /// Draws an emission time from the profile mixture matching
    /// `probability_at(g)`: the two bracketing profiles are weighted by their
    /// share of the interpolated probability.
    pub fn sample_emission_time(&self, g: f64, u_pick: f64, u_time: f64) -> f64 {
        let (i, frac) = self.locate(g);
        let w_lo = self.probability[i] * (1.0 - frac);
        let w_hi = self.probability[i + 1] * frac;
        let total = w_lo + w_hi;
        let pick = if total <= 0.0 || u_pick * total < w_lo {
            i
        } else {
            i + 1
        };
        self.profiles[pick].quantile(u_time)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> CavityQedParams {
        CavityQedParams::default()
    }

    #[test]
    fn ramp_endpoints() {
        let p = params();
        assert_eq!(p.pump_rabi(0.0), 0.0);
        assert!((p.pump_rabi(p.tau_pump) - TAU * 8.0e6).abs() < 1e-6);
    }

    #[test]
    fn generator_at_pulse_start_couples_only_e_and_g1() {
        let p = params();
        let gen = build_generator(&p, p.g_max, 0.0).unwrap();
        assert_eq!(gen.hamiltonian[(U0, E0)], C64::new(0.0, 0.0));
        assert_eq!(gen.hamiltonian[(E0, U0)], C64::new(0.0, 0.0));
        assert_eq!(gen.hamiltonian[(E0, G1)].re, p.g_max);
        // |u,0⟩ is stationary when nothing drives it
        let rho = DensityMatrix::pure(U0);
        let d = gen.apply(rho.matrix());
        assert!(d.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn uncoupled_cavity_never_populates_photon_states() {
        let p = params();
        let gen = build_generator(&p, 0.0, 0.5 * p.tau_pump).unwrap();
        let mut rho = Mat4::zeros();
        rho[(U0, U0)] = C64::new(0.6, 0.0);
        rho[(E0, E0)] = C64::new(0.4, 0.0);
        rho[(U0, E0)] = C64::new(0.1, 0.2);
        rho[(E0, U0)] = C64::new(0.1, -0.2);
        let d = gen.apply(&rho);
        assert_eq!(d[(G1, G1)].norm(), 0.0);
        assert_eq!(d[(G0, G0)].norm(), 0.0);
    }

    #[test]
    fn generator_preserves_trace_with_sink_and_hermiticity() {
        let p = params();
        let gen = build_generator(&p, 0.7 * p.g_max, 1.3e-6).unwrap();
        // arbitrary Hermitian, positive matrix: A A†
        let a = Mat4::from_fn(|r, c| C64::new((r * 3 + c) as f64 * 0.1, (r as f64 - c as f64) * 0.05));
        let rho = a * a.adjoint();
        let rho = rho / rho.trace();
        let d = gen.apply(&rho);
        let dtrace = d.trace().re + gen.sink_flow(&rho);
        assert!(dtrace.abs() < 1e-6, "{dtrace}");
        assert!(d.trace().im.abs() < 1e-6);
        let herm = (d - d.adjoint()).iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(herm < 1e-6, "{herm}");
    }

    #[test]
    fn generator_rejects_bad_inputs() {
        let p = params();
        assert!(matches!(
            build_generator(&p, -1.0, 0.0),
            Err(CavityError::NegativeCoupling(_))
        ));
        assert!(matches!(
            build_generator(&p, 1.0, -1e-9),
            Err(CavityError::TimeOutsidePulse { .. })
        ));
        assert!(matches!(
            build_generator(&p, 1.0, 2.0 * p.tau_pump),
            Err(CavityError::TimeOutsidePulse { .. })
        ));
    }

    #[test]
    fn zero_coupling_emits_nothing() {
        let out = evolve_pump_pulse(&params(), 0.0).unwrap();
        assert_eq!(out.profile.total_probability, 0.0);
        assert!(out.profile.rate.iter().all(|&r| r == 0.0));
        assert_eq!(emission_probability(&params(), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn invariants_hold_over_the_pulse() {
        let p = params();
        let out = evolve_pump_pulse(&p, p.g_max).unwrap();
        let d = out.diagnostics;
        assert!(d.max_trace_error < TRACE_TOL);
        assert!(d.max_hermiticity_error < HERMITICITY_TOL);
        assert!(d.min_eigenvalue > -POSITIVITY_TOL);
        let total = out.final_state.trace() + out.sink_population;
        assert!((total - 1.0).abs() < 1e-6);
        // photons generated end up in |g,0⟩
        assert!((out.final_state.population(G0) - out.profile.total_probability).abs() < 1e-6);
        let cum = &out.profile.cumulative;
        assert!(cum.windows(2).all(|w| w[1] >= w[0]));
        assert!(out.profile.total_probability <= 1.0);
    }

    #[test]
    fn emission_probability_matches_profile_total() {
        let p = params();
        let g = 0.37 * p.g_max;
        let direct = emission_probability(&p, g).unwrap();
        let profile = evolve_pump_pulse(&p, g).unwrap().profile;
        assert_eq!(direct, profile.total_probability);
    }

    #[test]
    fn tabulation_rejects_short_grid() {
        assert!(tabulate_efficiency(&params(), 1).is_err());
    }

    #[test]
    fn quantile_spans_the_pulse() {
        let p = params();
        let prof = evolve_pump_pulse(&p, p.g_max).unwrap().profile;
        let lo = prof.quantile(0.0);
        let hi = prof.quantile(0.999_999);
        let mid = prof.quantile(0.5);
        assert!(lo >= 0.0 && hi <= p.tau_pump);
        assert!(lo <= mid && mid <= hi);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = params();
        p.escape_fraction = 1.5;
        assert!(evolve_pump_pulse(&p, 0.0).is_err());
        let mut p = params();
        p.kappa = -1.0;
        assert!(p.validate().is_err());
    }
}
