//! Simulation and analysis of internal quality factor fluctuations in
//! superconducting resonators driven by a fluctuating TLS loss tangent.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common double-precision case.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod circlefit;
pub mod config;
pub mod error;
pub mod io;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod spectral;
pub mod stats;
pub mod synth;
pub mod tls;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ResonatorParams64 = model::ResonatorParams<f64>;
pub type ResonatorParams32 = model::ResonatorParams<f32>;
pub type TlsModel64 = model::TlsModel<f64>;
pub type TlsModel32 = model::TlsModel<f32>;
pub type Environment64 = model::Environment<f64>;
pub type FrequencySweep64 = synth::FrequencySweep<f64>;
pub type FrequencySweep32 = synth::FrequencySweep<f32>;
pub type QiTimeSeries64 = synth::QiTimeSeries<f64>;
pub type FluctuationSpec64 = synth::FluctuationSpec<f64>;
pub type InterleavedSchedule64 = synth::InterleavedSchedule<f64>;
pub type ResonatorFit64 = circlefit::ResonatorFit<f64>;
pub type ResonatorFit32 = circlefit::ResonatorFit<f32>;
pub type PowerSweepData64 = tls::PowerSweepData<f64>;
pub type LossTangentSeries64 = tls::LossTangentSeries<f64>;
pub type SpectrumEstimate64 = spectral::SpectrumEstimate<f64>;
pub type SpectrumEstimate32 = spectral::SpectrumEstimate<f32>;
pub type LogNormalFit64 = stats::LogNormalFit<f64>;
pub type ConvergenceCurve64 = stats::ConvergenceCurve<f64>;
pub type TraceSettings64 = synth::TraceSettings<f64>;
pub type SimulationOptions64 = synth::SimulationOptions<f64>;
pub type PowerFit64 = tls::PowerFit<f64>;
pub type AveragingScan64 = stats::AveragingScan<f64>;
