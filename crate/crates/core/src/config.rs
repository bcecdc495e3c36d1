//! Run configuration: one JSON document describing the device, the loss
//! model, the fluctuation process, the schedule and the analysis settings.

use std::path::{Path, PathBuf};

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::Provenance;
use crate::model::{ResonatorParams, TlsModel};
use crate::synth::{FluctuationSpec, InterleavedSchedule, SimulationOptions, TraceSettings};

/// Estimator settings shared by the `analyze` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSettings {
    /// Welch segment length; `None` picks [`crate::spectral::default_segment_length`].
    pub segment_length: Option<usize>,
    pub overlap: f64,
    /// Frequency band (Hz) for the 1/f^alpha fit; `None` uses all bins.
    pub one_over_f_band: Option<(f64, f64)>,
    /// Window sizes for the convergence analysis, seconds.
    pub window_sizes_s: Vec<f64>,
    /// Reference span for the convergence analysis; `None` uses the whole series.
    pub reference_span_s: Option<f64>,
    /// Trace counts averaged in the averaging-time scan.
    pub k_values: Vec<usize>,
    pub histogram_bins: usize,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            segment_length: None,
            overlap: 0.5,
            one_over_f_band: None,
            window_sizes_s: [0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
                .iter()
                .map(|h| h * 3600.0)
                .collect(),
            reference_span_s: None,
            k_values: vec![1, 2, 4, 8, 16, 32, 64, 91],
            histogram_bins: 30,
        }
    }
}

impl AnalysisSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::param("analysis.overlap", "must be in [0, 1)"));
        }
        if let Some((lo, hi)) = self.one_over_f_band {
            if !(lo > 0.0 && hi > lo) {
                return Err(Error::param("analysis.one_over_f_band", "need 0 < lo < hi"));
            }
        }
        if self.window_sizes_s.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::param("analysis.window_sizes_s", "window sizes must be > 0"));
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::param("analysis.k_values", "need at least one k, all >= 1"));
        }
        if self.histogram_bins == 0 {
            return Err(Error::param("analysis.histogram_bins", "must be >= 1"));
        }
        Ok(())
    }
}

/// Complete, serializable description of a run. Missing fields take their
/// defaults, and the materialized document is what gets hashed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub resonator: ResonatorParams<f64>,
    pub tls: TlsModel<f64>,
    /// Its `seed` is overwritten by the top-level `seed`.
    pub fluctuation: FluctuationSpec<f64>,
    pub schedule: InterleavedSchedule<f64>,
    pub simulation: SimulationOptions<f64>,
    /// Single-power acquisition used by `simulate timetrace`.
    pub timetrace: TraceSettings<f64>,
    pub analysis: AnalysisSettings,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tls = TlsModel::default();
        let q_i = 1.0 / (tls.f_delta0 + 1.0 / tls.q_pi);
        let resonator = ResonatorParams::from_internal_q(Complex::new(1.0, 0.0), 0.0, 6e9, q_i, 5e5, 0.05)
            .expect("default resonator is physical");
        Self {
            resonator,
            tls,
            fluctuation: FluctuationSpec::default(),
            schedule: InterleavedSchedule::default(),
            simulation: SimulationOptions::default(),
            timetrace: TraceSettings {
                power_dbm: -75.0,
                noise_channel: 0,
                point_duration: 38.0,
                total_duration: 16.0 * 3600.0,
            },
            analysis: AnalysisSettings::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads a config file; absent fields take defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.sync_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes the fluctuation seed follow the top-level seed.
    pub fn sync_seed(&mut self) {
        self.fluctuation.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.resonator.validate()?;
        self.tls.validate()?;
        self.fluctuation.validate()?;
        self.schedule.validate()?;
        self.simulation.validate()?;
        self.timetrace.validate()?;
        self.analysis.validate()
    }

    /// Canonical JSON of the materialized config.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of [`RunConfig::to_json`] with `output_dir` cleared, hex
    /// encoded: where results go does not change them.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_json().as_bytes()))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.sync_seed();
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_document_takes_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7, "tls": {"beta": 0.4}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.tls.beta, 0.4);
        assert_eq!(cfg.tls.n_c, 5.0);
        assert_eq!(cfg.schedule, InterleavedSchedule::default());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn invalid_sections_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.analysis.overlap = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.timetrace.noise_channel = 3;
        assert!(cfg.validate().is_err());
    }
}
