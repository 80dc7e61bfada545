//! Fixed-step reference integration of the pump-pulse master equation.
//!
//! The right-hand side here is written out population-by-coherence on plain
//! arrays and stepped with classical RK4 at 0.1 ns, sharing nothing with the
//! adaptive solver in `cqed_core::cavity`.

use cqed_core::cavity::{
    emission_probability, evolve_pump_pulse, evolve_pump_pulse_with, tabulate_efficiency,
    CavityQedParams, IntegratorConfig,
};
use cqed_core::ode::Tolerance;

/// Reference value at g_eff = g_max/2 with default parameters, produced by
/// `reference_emission` below (0.1 ns RK4) and frozen.
const HALF_COUPLING_REFERENCE: f64 = 0.216_521_522_448;
/// Same oracle at g_eff = g_max.
const FULL_COUPLING_REFERENCE: f64 = 0.610_972_932_894;

#[derive(Clone, Copy)]
struct Cplx(f64, f64);

impl Cplx {
    fn mul(self, o: Cplx) -> Cplx {
        Cplx(self.0 * o.0 - self.1 * o.1, self.0 * o.1 + self.1 * o.0)
    }
    fn add(self, o: Cplx) -> Cplx {
        Cplx(self.0 + o.0, self.1 + o.1)
    }
    fn scale(self, s: f64) -> Cplx {
        Cplx(self.0 * s, self.1 * s)
    }
}

/// State: rho[4][4] complex, then emitted photon probability.
type State = ([[Cplx; 4]; 4], f64);

fn derivative(p: &CavityQedParams, g: f64, t: f64, s: &State) -> State {
    let (rho, _) = s;
    let half_rabi = 0.5 * p.omega_max * t / p.tau_pump;
    // Hamiltonian (real symmetric)
    let mut h = [[0.0f64; 4]; 4];
    h[1][1] = p.delta;
    h[0][1] = half_rabi;
    h[1][0] = half_rabi;
    h[1][2] = g;
    h[2][1] = g;
    let zero = Cplx(0.0, 0.0);
    let mut d = [[zero; 4]; 4];
    // -i [H, rho]
    for r in 0..4 {
        for c in 0..4 {
            let mut acc = zero;
            for k in 0..4 {
                acc = acc.add(rho[k][c].scale(h[r][k]));
                acc = acc.add(rho[r][k].scale(-h[k][c]));
            }
            d[r][c] = acc.mul(Cplx(0.0, -1.0));
        }
    }
    let two_kappa = 2.0 * p.kappa;
    let two_gamma = 2.0 * p.gamma_perp;
    // decay rates per basis state: amplitude damping of row/column
    let loss = [0.0, two_gamma, two_kappa, 0.0];
    for r in 0..4 {
        for c in 0..4 {
            let rate = 0.5 * (loss[r] + loss[c]);
            d[r][c] = d[r][c].add(rho[r][c].scale(-rate));
        }
    }
    // refilling: g,1 -> g,0 and e,0 -> u,0 (branching fraction)
    d[3][3] = d[3][3].add(rho[2][2].scale(two_kappa));
    d[0][0] = d[0][0].add(rho[1][1].scale(two_gamma * p.decay_to_initial));
    (d, two_kappa * rho[2][2].0)
}

fn axpy(a: &State, h: f64, b: &State) -> State {
    let mut out = *a;
    for r in 0..4 {
        for c in 0..4 {
            out.0[r][c] = a.0[r][c].add(b.0[r][c].scale(h));
        }
    }
    out.1 = a.1 + h * b.1;
    out
}

fn reference_emission(p: &CavityQedParams, g: f64, dt: f64) -> f64 {
    let zero = Cplx(0.0, 0.0);
    let mut rho = [[zero; 4]; 4];
    rho[0][0] = Cplx(1.0, 0.0);
    let mut s: State = (rho, 0.0);
    let steps = (p.tau_pump / dt).round() as usize;
    let h = p.tau_pump / steps as f64;
    for i in 0..steps {
        let t = i as f64 * h;
        let k1 = derivative(p, g, t, &s);
        let k2 = derivative(p, g, t + 0.5 * h, &axpy(&s, 0.5 * h, &k1));
        let k3 = derivative(p, g, t + 0.5 * h, &axpy(&s, 0.5 * h, &k2));
        let k4 = derivative(p, g, t + h, &axpy(&s, h, &k3));
        let mut next = axpy(&s, h / 6.0, &k1);
        next = axpy(&next, h / 3.0, &k2);
        next = axpy(&next, h / 3.0, &k3);
        next = axpy(&next, h / 6.0, &k4);
        s = next;
    }
    s.1
}

#[test]
fn oracle_reproduces_frozen_values() {
    let p = CavityQedParams::default();
    let half = reference_emission(&p, 0.5 * p.g_max, 1e-10);
    let full = reference_emission(&p, p.g_max, 1e-10);
    println!("oracle: half = {half:.12}, full = {full:.12}");
    assert!((half - HALF_COUPLING_REFERENCE).abs() < 1e-9, "{half}");
    assert!((full - FULL_COUPLING_REFERENCE).abs() < 1e-9, "{full}");
}

#[test]
fn adaptive_solver_matches_half_coupling_reference() {
    let p = CavityQedParams::default();
    let got = emission_probability(&p, 0.5 * p.g_max).unwrap();
    assert!((got - HALF_COUPLING_REFERENCE).abs() < 1e-7, "{got}");
}

#[test]
fn adaptive_solver_matches_full_coupling_reference() {
    let p = CavityQedParams::default();
    let out = evolve_pump_pulse(&p, p.g_max).unwrap();
    assert!(
        (out.profile.total_probability - FULL_COUPLING_REFERENCE).abs() < 1e-7,
        "{}",
        out.profile.total_probability
    );
}

#[test]
fn refining_tolerance_changes_result_below_1e4() {
    let p = CavityQedParams::default();
    let coarse = IntegratorConfig {
        tolerance: Tolerance {
            abs: 2e-10,
            rel: 2e-10,
            ..Tolerance::default()
        },
        ..IntegratorConfig::default()
    };
    let fine = IntegratorConfig {
        tolerance: Tolerance {
            abs: 1e-10,
            rel: 1e-10,
            ..Tolerance::default()
        },
        ..IntegratorConfig::default()
    };
    for g in [0.25, 0.5, 1.0].map(|f| f * p.g_max) {
        let a = evolve_pump_pulse_with(&p, g, &coarse).unwrap();
        let b = evolve_pump_pulse_with(&p, g, &fine).unwrap();
        let diff = (a.profile.total_probability - b.profile.total_probability).abs();
        assert!(diff < 1e-4, "g = {g}: {diff}");
    }
}

#[test]
fn doubling_profile_resolution_changes_result_below_1e4() {
    let p = CavityQedParams::default();
    let base = IntegratorConfig::default();
    let doubled = IntegratorConfig {
        profile_intervals: 2 * base.profile_intervals,
        ..base.clone()
    };
    let a = evolve_pump_pulse_with(&p, p.g_max, &base).unwrap();
    let b = evolve_pump_pulse_with(&p, p.g_max, &doubled).unwrap();
    assert!((a.profile.total_probability - b.profile.total_probability).abs() < 1e-4);
}

#[test]
fn table_endpoints_and_midpoint_interpolation() {
    let p = CavityQedParams::default();
    let table = tabulate_efficiency(&p, 65).unwrap();
    assert_eq!(table.probability[0], 0.0);
    assert_eq!(
        *table.probability.last().unwrap(),
        emission_probability(&p, p.g_max).unwrap()
    );
    // midpoints between grid nodes, compared against direct solves
    for i in [0usize, 7, 20, 31, 45, 63] {
        let g = 0.5 * (table.g_grid[i] + table.g_grid[i + 1]);
        let direct = emission_probability(&p, g).unwrap();
        let interp = table.probability_at(g);
        assert!((direct - interp).abs() < 1e-3, "g index {i}: {direct} vs {interp}");
    }
}

#[test]
fn coarse_and_fine_tables_share_endpoints() {
    let p = CavityQedParams::default();
    let coarse = tabulate_efficiency(&p, 2).unwrap();
    let fine = tabulate_efficiency(&p, 65).unwrap();
    assert_eq!(coarse.probability[0], fine.probability[0]);
    assert_eq!(coarse.probability[1], *fine.probability.last().unwrap());
}

#[test]
fn escape_weighted_efficiency_near_reported_value() {
    let p = CavityQedParams::default();
    let raw = emission_probability(&p, p.g_max).unwrap();
    let escaped = raw * p.escape_fraction;
    assert!((raw - 0.616).abs() <= 0.08 || (escaped - 0.616).abs() <= 0.08);
}

#[test]
fn all_decay_to_sink_gives_lower_efficiency() {
    let p = CavityQedParams {
        decay_to_initial: 0.0,
        ..CavityQedParams::default()
    };
    let raw = emission_probability(&p, p.g_max).unwrap();
    let reference = reference_emission(&p, p.g_max, 1e-10);
    assert!((raw - reference).abs() < 1e-7, "{raw} vs {reference}");
    assert!(raw < FULL_COUPLING_REFERENCE);
    println!("sink-only efficiency at g_max: {raw:.6}");
}

#[test]
fn efficiency_grows_with_coupling_at_weak_coupling() {
    let p = CavityQedParams::default();
    let a = emission_probability(&p, 0.1 * p.g_max).unwrap();
    let b = emission_probability(&p, 0.2 * p.g_max).unwrap();
    let c = emission_probability(&p, 0.4 * p.g_max).unwrap();
    assert!(0.0 < a && a < b && b < c);
}
