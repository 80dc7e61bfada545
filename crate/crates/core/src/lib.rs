//! Simulation and photon-statistics analysis for a periodically driven
//! single-photon source with randomly arriving atoms.
//!
//! - [`cavity`]: four-state master equation for one pump pulse
//! - [`source`]: Monte Carlo generation of detector click streams
//! - [`click_stats`]: unconditional g²(τ), pulse-averaged rates, estimators
//! - [`conditioning`]: atom-presence conditioning and conditional statistics
//! - [`clicks`], [`config`]: file formats shared with the command-line tool

pub mod cavity;
pub mod click_stats;
pub mod clicks;
pub mod conditioning;
pub mod config;
pub mod ode;
pub mod source;
pub mod svg;
