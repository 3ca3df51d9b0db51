//! Experiment presets, the runner behind the `siamlab` binary, sweeps, SVG
//! plots and the verification battery.

pub mod config;
pub mod plot;
pub mod presets;
pub mod runner;
pub mod verify;
