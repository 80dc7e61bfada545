//! Flat `key = value` configuration files.
//!
//! Frequencies are given in ordinary Hz (`g_max_hz = 2.5e6` means
//! g/2π = 2.5 MHz); durations in integer nanoseconds; everything else in SI.
//! `#` starts a comment. Keys that are absent keep their default values.

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::fmt::Write as _;

use thiserror::Error;

use crate::source::{EmissionMode, SimConfig, SimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: bad value for `{key}`: {value:?}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("{0}")]
    Invalid(#[from] SimError),
}

impl ConfigError {
    /// The key the error refers to, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key, .. }
            | ConfigError::DuplicateKey { key, .. }
            | ConfigError::BadValue { key, .. } => Some(key),
            _ => None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "g_max_hz",
    "kappa_hz",
    "gamma_perp_hz",
    "delta_hz",
    "omega_max_hz",
    "escape_fraction",
    "decay_to_initial",
    "tau_pump_ns",
    "tau_recycle_ns",
    "pulses_per_cycle",
    "atom_rate_hz",
    "velocity",
    "waist",
    "recycle_success",
    "qe",
    "path_efficiency",
    "splitter_ratio",
    "dark_rate_hz",
    "emission",
    "efficiency_grid",
];

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn set(cfg: &mut SimConfig, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
    let f = |v: &str| parse_value::<f64>(line, key, v);
    match key {
        "g_max_hz" => cfg.cavity.g_max = TAU * f(value)?,
        "kappa_hz" => cfg.cavity.kappa = TAU * f(value)?,
        "gamma_perp_hz" => cfg.cavity.gamma_perp = TAU * f(value)?,
        "delta_hz" => cfg.cavity.delta = TAU * f(value)?,
        "omega_max_hz" => cfg.cavity.omega_max = TAU * f(value)?,
        "escape_fraction" => cfg.cavity.escape_fraction = f(value)?,
        "decay_to_initial" => cfg.cavity.decay_to_initial = f(value)?,
        "tau_pump_ns" => cfg.schedule.tau_pump_ns = parse_value(line, key, value)?,
        "tau_recycle_ns" => cfg.schedule.tau_recycle_ns = parse_value(line, key, value)?,
        "pulses_per_cycle" => cfg.schedule.pulses_per_cycle = parse_value(line, key, value)?,
        "atom_rate_hz" => cfg.flux.rate_lambda = f(value)?,
        "velocity" => cfg.flux.velocity = f(value)?,
        "waist" => cfg.flux.waist = f(value)?,
        "recycle_success" => cfg.flux.recycle_success = f(value)?,
        "qe" => cfg.detector.qe = f(value)?,
        "path_efficiency" => cfg.detector.path_efficiency = f(value)?,
        "splitter_ratio" => cfg.detector.splitter_ratio = f(value)?,
        "dark_rate_hz" => cfg.detector.dark_rate = f(value)?,
        "emission" => {
            cfg.emission = match value {
                "single" => EmissionMode::SinglePhoton,
                "classical" => EmissionMode::Classical,
                _ => {
                    return Err(ConfigError::BadValue {
                        line,
                        key: key.into(),
                        value: value.into(),
                    })
                }
            }
        }
        "efficiency_grid" => cfg.efficiency_grid = parse_value(line, key, value)?,
        _ => {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            })
        }
    }
    Ok(())
}

/// Parse and validate a configuration. The cavity pulse length always
/// follows `tau_pump_ns`.
pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let mut cfg = SimConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        set(&mut cfg, line, key, value)?;
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
    }
    cfg.cavity.tau_pump = cfg.schedule.tau_pump();
    cfg.validate()?;
    Ok(cfg)
}

/// Serialise every key. `parse_config(&write_config(c))` reproduces `c` up
/// to the rounding of the 2π factor.
pub fn write_config(cfg: &SimConfig) -> String {
    let mut s = String::new();
    let c = &cfg.cavity;
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("g_max_hz", (c.g_max / TAU).to_string());
    kv("kappa_hz", (c.kappa / TAU).to_string());
    kv("gamma_perp_hz", (c.gamma_perp / TAU).to_string());
    kv("delta_hz", (c.delta / TAU).to_string());
    kv("omega_max_hz", (c.omega_max / TAU).to_string());
    kv("escape_fraction", c.escape_fraction.to_string());
    kv("decay_to_initial", c.decay_to_initial.to_string());
    kv("tau_pump_ns", cfg.schedule.tau_pump_ns.to_string());
    kv("tau_recycle_ns", cfg.schedule.tau_recycle_ns.to_string());
    kv("pulses_per_cycle", cfg.schedule.pulses_per_cycle.to_string());
    kv("atom_rate_hz", cfg.flux.rate_lambda.to_string());
    kv("velocity", cfg.flux.velocity.to_string());
    kv("waist", cfg.flux.waist.to_string());
    kv("recycle_success", cfg.flux.recycle_success.to_string());
    kv("qe", cfg.detector.qe.to_string());
    kv("path_efficiency", cfg.detector.path_efficiency.to_string());
    kv("splitter_ratio", cfg.detector.splitter_ratio.to_string());
    kv("dark_rate_hz", cfg.detector.dark_rate.to_string());
    kv(
        "emission",
        match cfg.emission {
            EmissionMode::SinglePhoton => "single",
            EmissionMode::Classical => "classical",
        }
        .to_string(),
    );
    kv("efficiency_grid", cfg.efficiency_grid.to_string());
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-14 * a.abs().max(b.abs())
    }

    fn same(a: &SimConfig, b: &SimConfig) -> bool {
        let (x, y) = (&a.cavity, &b.cavity);
        close(x.g_max, y.g_max)
            && close(x.kappa, y.kappa)
            && close(x.gamma_perp, y.gamma_perp)
            && close(x.delta, y.delta)
            && close(x.omega_max, y.omega_max)
            && x.tau_pump == y.tau_pump
            && x.escape_fraction == y.escape_fraction
            && x.decay_to_initial == y.decay_to_initial
            && a.schedule == b.schedule
            && a.flux == b.flux
            && a.detector == b.detector
            && a.emission == b.emission
            && a.efficiency_grid == b.efficiency_grid
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("# nothing\n\n").unwrap();
        assert!(same(&cfg, &SimConfig::default()));
    }

    #[test]
    fn values_and_units() {
        let cfg = parse_config(
            "g_max_hz = 1e6   # MHz\natom_rate_hz=1234.5\nemission = classical\ntau_pump_ns = 1000\n",
        )
        .unwrap();
        assert!(close(cfg.cavity.g_max, TAU * 1e6));
        assert_eq!(cfg.flux.rate_lambda, 1234.5);
        assert_eq!(cfg.emission, EmissionMode::Classical);
        assert_eq!(cfg.cavity.tau_pump, 1e-6);
    }

    #[test]
    fn errors_name_the_key() {
        let e = parse_config("qe = 0.5\nbogus_key = 3\n").unwrap_err();
        assert_eq!(
            e,
            ConfigError::UnknownKey {
                line: 2,
                key: "bogus_key".into()
            }
        );
        assert!(e.to_string().contains("bogus_key"));
        let e = parse_config("qe = lots\n").unwrap_err();
        assert_eq!(e.key(), Some("qe"));
        let e = parse_config("qe = 0.5\nqe = 0.6\n").unwrap_err();
        assert!(matches!(e, ConfigError::DuplicateKey { line: 2, .. }));
        assert_eq!(parse_config("qe 0.5\n"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(
            parse_config("qe = 1.5\n"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn writer_covers_every_key() {
        let text = write_config(&SimConfig::default());
        let keys: Vec<&str> = text
            .lines()
            .map(|l| l.split('=').next().unwrap().trim())
            .collect();
        assert_eq!(keys, KEYS);
    }

    proptest! {
        #[test]
        fn write_parse_round_trip(
            g in 1e5f64..1e8,
            delta in -1e8f64..1e8,
            rate in 0.0f64..1e6,
            qe in 0.0f64..=1.0,
            pump in 100u64..10_000,
            recycle in 1u64..10_000,
            ppc in 1u32..5000,
            classical in any::<bool>(),
        ) {
            let mut cfg = SimConfig::default();
            cfg.cavity.g_max = TAU * g;
            cfg.cavity.delta = TAU * delta;
            cfg.flux.rate_lambda = rate;
            cfg.detector.qe = qe;
            cfg.schedule.tau_pump_ns = pump;
            cfg.schedule.tau_recycle_ns = recycle;
            cfg.schedule.pulses_per_cycle = ppc;
            cfg.cavity.tau_pump = cfg.schedule.tau_pump();
            cfg.emission = if classical { EmissionMode::Classical } else { EmissionMode::SinglePhoton };
            let back = parse_config(&write_config(&cfg)).unwrap();
            prop_assert!(same(&cfg, &back));
        }
    }
}
