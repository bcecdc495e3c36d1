//! Stochastic forward simulation: colored Gaussian noise, log-normal loss
//! tangent trajectories, noisy S21 sweeps and complete measurement runs.

mod run;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{eval_s21, ResonatorParams};
use crate::scalar::Real;

pub use run::{
    simulate_interleaved_run, simulate_timetrace, InterleavedRun, LatentTrajectory, MeasurementMode,
    SimulationOptions, TimeTraceRun, TraceSettings, TruthPoint,
};

/// RNG for sub-stream `stream` of `seed`.
pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes `(seed, index)` into an independent 64-bit seed (splitmix64 finalizer).
pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normals<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Acquisition metadata carried alongside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata<T> {
    pub power_dbm: T,
    pub temperature_k: T,
    pub timestamp_s: T,
    pub resonator_id: String,
}

impl<T: Real> Default for SweepMetadata<T> {
    fn default() -> Self {
        Self {
            power_dbm: T::zero(),
            temperature_k: T::zero(),
            timestamp_s: T::zero(),
            resonator_id: String::new(),
        }
    }
}

/// Complex S21 over a strictly increasing frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySweep<T> {
    pub frequencies: Vec<T>,
    pub s21: Vec<Complex<T>>,
    pub meta: SweepMetadata<T>,
}

/// Checks that a grid has at least three finite, strictly increasing points.
pub fn validate_grid<T: Real>(grid: &[T]) -> Result<()> {
    if grid.len() < 3 {
        return Err(Error::Length {
            required: 3,
            actual: grid.len(),
        });
    }
    for (i, f) in grid.iter().enumerate() {
        if !f.is_finite() || *f <= T::zero() {
            return Err(Error::param("frequencies", format!("entry {i} is not a positive finite frequency")));
        }
        if i > 0 && !(grid[i] > grid[i - 1]) {
            return Err(Error::NonMonotonic { index: i });
        }
    }
    Ok(())
}

impl<T: Real> FrequencySweep<T> {
    pub fn new(frequencies: Vec<T>, s21: Vec<Complex<T>>, meta: SweepMetadata<T>) -> Result<Self> {
        let s = Self {
            frequencies,
            s21,
            meta,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frequencies.len() != self.s21.len() {
            return Err(Error::LengthMismatch {
                left: self.frequencies.len(),
                right: self.s21.len(),
            });
        }
        validate_grid(&self.frequencies)
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }
}

/// Generative parameters of the fluctuating loss tangent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FluctuationSpec<T> {
    /// Mean of the log-normal loss tangent.
    pub target_mean: T,
    /// Standard deviation of the log-normal loss tangent.
    pub target_sd: T,
    /// Exponent alpha of the 1/f^alpha spectrum of the underlying Gaussian.
    pub spectral_exponent: T,
    /// Relative sd of white fluctuations of 1/Q_PI.
    pub hp_relative_sd: T,
    /// Relative sd of the optional f_r fluctuation process.
    pub freq_relative_sd: T,
    pub seed: u64,
}

impl<T: Real> Default for FluctuationSpec<T> {
    fn default() -> Self {
        Self {
            target_mean: T::lit(9.0e-7),
            target_sd: T::lit(2.2e-7),
            spectral_exponent: T::one(),
            hp_relative_sd: T::lit(0.005),
            freq_relative_sd: T::zero(),
            seed: 0,
        }
    }
}

impl<T: Real> FluctuationSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_mean > T::zero()) || !self.target_mean.is_finite() {
            return Err(Error::param("target_mean", "must be finite and > 0"));
        }
        if !(self.target_sd >= T::zero()) || !self.target_sd.is_finite() {
            return Err(Error::param("target_sd", "must be finite and >= 0"));
        }
        if !(self.spectral_exponent >= T::zero()) || !self.spectral_exponent.is_finite() {
            return Err(Error::param("spectral_exponent", "must be finite and >= 0"));
        }
        for (name, v) in [
            ("hp_relative_sd", self.hp_relative_sd),
            ("freq_relative_sd", self.freq_relative_sd),
        ] {
            if !(v >= T::zero() && v < T::one()) {
                return Err(Error::param(name, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Log-scale parameters (m, s) whose log-normal has the target moments.
    pub fn lognormal_params(&self) -> (T, T) {
        lognormal_params(self.target_mean, self.target_sd)
    }
}

/// `m = ln(mu^2 / sqrt(mu^2 + sigma^2))`, `s^2 = ln(1 + sigma^2 / mu^2)`.
pub fn lognormal_params<T: Real>(mean: T, sd: T) -> (T, T) {
    let r = sd / mean;
    let s2 = (r * r).ln_1p();
    (mean.ln() - s2 / T::lit(2.0), s2.sqrt())
}

/// Timing of the cyclic (LP, MP, HP) acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterleavedSchedule<T> {
    /// Idle time before the LP and MP points, seconds.
    pub idle_tau1: T,
    /// Idle time before the HP point, seconds.
    pub idle_tau2: T,
    /// Acquisition time per point for (LP, MP, HP), seconds.
    pub point_durations: [T; 3],
    pub total_duration: T,
    /// Source power for (LP, MP, HP), dBm.
    pub power_points: [T; 3],
}

impl<T: Real> Default for InterleavedSchedule<T> {
    fn default() -> Self {
        Self {
            idle_tau1: T::lit(3.0),
            idle_tau2: T::lit(0.5),
            point_durations: [T::lit(38.0), T::lit(9.0), T::lit(10.0)],
            total_duration: T::lit(16.0 * 3600.0),
            power_points: [T::lit(-75.0), T::lit(-55.0), T::lit(-15.0)],
        }
    }
}

impl<T: Real> InterleavedSchedule<T> {
    /// tau1 + LP + MP + tau2 + HP.
    pub fn cycle_duration(&self) -> T {
        let d = self.point_durations;
        self.idle_tau1 + d[0] + d[1] + self.idle_tau2 + d[2]
    }

    pub fn validate(&self) -> Result<()> {
        let durations = [
            ("idle_tau1", self.idle_tau1),
            ("idle_tau2", self.idle_tau2),
            ("point_durations[0]", self.point_durations[0]),
            ("point_durations[1]", self.point_durations[1]),
            ("point_durations[2]", self.point_durations[2]),
            ("total_duration", self.total_duration),
        ];
        for (name, v) in durations {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::param(name, "must be finite and > 0"));
            }
        }
        if self.power_points.iter().any(|p| !p.is_finite()) {
            return Err(Error::param("power_points", "must be finite"));
        }
        if self.total_duration < self.cycle_duration() {
            return Err(Error::param("total_duration", "shorter than one acquisition cycle"));
        }
        Ok(())
    }

    /// Number of complete cycles in the run.
    pub fn n_cycles(&self) -> usize {
        (self.total_duration / self.cycle_duration())
            .floor()
            .to_usize()
            .unwrap_or(0)
    }

    /// `(start, end)` of the LP, MP and HP points of cycle `c`.
    pub fn point_windows(&self, c: usize) -> [(T, T); 3] {
        let t0 = T::from_usize_lossy(c) * self.cycle_duration();
        let d = self.point_durations;
        let lp = t0 + self.idle_tau1;
        let mp = lp + d[0];
        let hp = mp + d[1] + self.idle_tau2;
        [(lp, lp + d[0]), (mp, mp + d[1]), (hp, hp + d[2])]
    }
}

/// Fitted resonator parameters of one acquisition channel over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QiTimeSeries<T> {
    pub label: String,
    pub power_dbm: T,
    pub temperature_k: T,
    pub timestamps: Vec<T>,
    pub q_i: Vec<T>,
    pub q_i_sigma: Vec<T>,
    pub f_r: Vec<T>,
    pub coupling_q: Vec<T>,
    pub converged: Vec<bool>,
}

impl<T: Real> QiTimeSeries<T> {
    pub fn empty(label: impl Into<String>, power_dbm: T, temperature_k: T) -> Self {
        Self {
            label: label.into(),
            power_dbm,
            temperature_k,
            timestamps: Vec::new(),
            q_i: Vec::new(),
            q_i_sigma: Vec::new(),
            f_r: Vec::new(),
            coupling_q: Vec::new(),
            converged: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.timestamps.len();
        for len in [self.q_i.len(), self.q_i_sigma.len(), self.f_r.len(), self.coupling_q.len(), self.converged.len()] {
            if len != n {
                return Err(Error::LengthMismatch { left: n, right: len });
            }
        }
        for i in 1..n {
            if !(self.timestamps[i] > self.timestamps[i - 1]) {
                return Err(Error::NonMonotonic { index: i });
            }
        }
        Ok(())
    }

    /// Copy restricted to converged points.
    pub fn converged_only(&self) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.converged[i]).collect();
        let pick = |v: &[T]| keep.iter().map(|&i| v[i]).collect::<Vec<T>>();
        Self {
            label: self.label.clone(),
            power_dbm: self.power_dbm,
            temperature_k: self.temperature_k,
            timestamps: pick(&self.timestamps),
            q_i: pick(&self.q_i),
            q_i_sigma: pick(&self.q_i_sigma),
            f_r: pick(&self.f_r),
            coupling_q: pick(&self.coupling_q),
            converged: vec![true; keep.len()],
        }
    }
}

/// Zero-mean Gaussian sequence with a 1/f^alpha power spectrum.
///
/// White noise is shaped in the frequency domain by `f^(-alpha/2)` with the
/// zero-frequency bin removed, transformed back, and standardized to the
/// requested variance (population normalization).
pub fn gen_one_over_f_gaussian<T: Real>(n: usize, dt: T, alpha: T, variance: T, seed: u64) -> Result<Vec<T>> {
    if n < 2 {
        return Err(Error::Length { required: 2, actual: n });
    }
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(Error::param("dt", "must be finite and > 0"));
    }
    if !(alpha >= T::zero()) || !alpha.is_finite() {
        return Err(Error::param("alpha", "must be finite and >= 0"));
    }
    if !(variance >= T::zero()) || !variance.is_finite() {
        return Err(Error::param("variance", "must be finite and >= 0"));
    }
    let mut rng = rng_for(seed, 0);
    let white: Vec<T> = normals(&mut rng, n);
    let mut buf: Vec<Complex<T>> = white.iter().map(|&x| Complex::new(x, T::zero())).collect();

    let mut planner = FftPlanner::<T>::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = T::one() / (T::from_usize_lossy(n) * dt);
    let half_alpha = alpha / T::lit(2.0);
    for (k, c) in buf.iter_mut().enumerate() {
        let kk = k.min(n - k);
        *c = if kk == 0 {
            Complex::new(T::zero(), T::zero())
        } else {
            *c * (T::from_usize_lossy(kk) * df).powf(-half_alpha)
        };
    }
    planner.plan_fft_inverse(n).process(&mut buf);

    let x: Vec<T> = buf.iter().map(|c| c.re).collect();
    Ok(standardize(&x, variance))
}

fn standardize<T: Real>(x: &[T], variance: T) -> Vec<T> {
    let nf = T::from_usize_lossy(x.len());
    let mean = x.iter().copied().sum::<T>() / nf;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
    if !(var > T::zero()) || variance == T::zero() {
        return vec![T::zero(); x.len()];
    }
    let scale = (variance / var).sqrt();
    x.iter().map(|&v| (v - mean) * scale).collect()
}

/// Log-normal loss-tangent trajectory `exp(m + s g_t)` with `g_t` a
/// standardized 1/f^alpha Gaussian process.
pub fn gen_loss_tangent_process<T: Real>(spec: &FluctuationSpec<T>, n: usize, dt: T) -> Result<Vec<T>> {
    spec.validate()?;
    if spec.target_sd == T::zero() {
        if n < 2 {
            return Err(Error::Length { required: 2, actual: n });
        }
        return Ok(vec![spec.target_mean; n]);
    }
    let g = gen_one_over_f_gaussian(n, dt, spec.spectral_exponent, T::one(), spec.seed)?;
    let (m, s) = spec.lognormal_params();
    Ok(g.into_iter().map(|v| (m + s * v).exp()).collect())
}

/// Evenly spaced grid of `points` frequencies centered on f_r spanning
/// `span_linewidths * f_r / Q`.
pub fn default_grid<T: Real>(p: &ResonatorParams<T>, span_linewidths: T, points: usize) -> Vec<T> {
    let span = span_linewidths * p.linewidth();
    let start = p.resonance_freq - span / T::lit(2.0);
    let step = span / T::from_usize_lossy(points.max(2) - 1);
    (0..points).map(|k| start + step * T::from_usize_lossy(k)).collect()
}

/// S21 of `p` on `grid` plus complex Gaussian noise with per-quadrature sd
/// `noise_sd`.
pub fn synth_sweep<T: Real>(p: &ResonatorParams<T>, grid: &[T], noise_sd: T, seed: u64) -> Result<FrequencySweep<T>> {
    validate_grid(grid)?;
    p.validate()?;
    if !(noise_sd >= T::zero()) || !noise_sd.is_finite() {
        return Err(Error::param("noise_sd", "must be finite and >= 0"));
    }
    let mut s21: Vec<Complex<T>> = grid.iter().map(|&f| eval_s21(f, p)).collect();
    if noise_sd > T::zero() {
        let mut rng = rng_for(seed, 1);
        for z in s21.iter_mut() {
            let re: T = T::lit(rng.sample::<f64, _>(StandardNormal));
            let im: T = T::lit(rng.sample::<f64, _>(StandardNormal));
            *z = *z + Complex::new(re, im) * noise_sd;
        }
    }
    Ok(FrequencySweep {
        frequencies: grid.to_vec(),
        s21,
        meta: SweepMetadata::default(),
    })
}
