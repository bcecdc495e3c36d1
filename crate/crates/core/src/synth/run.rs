//! Time-domain measurement runs built on the latent loss-tangent trajectory.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    default_grid, derive_seed, gen_loss_tangent_process, gen_one_over_f_gaussian, rng_for, synth_sweep,
    FluctuationSpec, FrequencySweep, InterleavedSchedule, QiTimeSeries,
};
use crate::circlefit::fit_resonance;
use crate::error::{Error, Result};
use crate::model::{
    loaded_q_from_internal, photon_number, thermal_factor, ResonatorParams, TlsModel,
};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MeasurementMode {
    /// Perturb the true parameters with fit-level noise.
    #[default]
    Fast,
    /// Synthesize and fit a sweep at every point.
    Full,
}

/// Measurement knobs that are not part of the physics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationOptions<T> {
    pub mode: MeasurementMode,
    /// Step of the latent loss-tangent grid, seconds.
    pub latent_dt: T,
    pub attenuation_db: T,
    pub temperature_k: T,
    /// Fast mode: relative Q_i measurement noise for (LP, MP, HP).
    pub fast_qi_relative_sd: [T; 3],
    /// Fast mode: relative |Q_c| measurement noise.
    pub fast_coupling_relative_sd: T,
    /// Full mode: per-quadrature S21 noise for (LP, MP, HP).
    pub sweep_noise_sd: [T; 3],
    pub sweep_points: usize,
    pub span_linewidths: T,
}

impl<T: Real> Default for SimulationOptions<T> {
    fn default() -> Self {
        Self {
            mode: MeasurementMode::Fast,
            latent_dt: T::one(),
            attenuation_db: T::lit(crate::model::DEFAULT_ATTENUATION_DB),
            temperature_k: T::zero(),
            fast_qi_relative_sd: [T::lit(0.01), T::lit(0.005), T::lit(0.001)],
            fast_coupling_relative_sd: T::lit(0.02),
            sweep_noise_sd: [T::lit(0.02), T::lit(0.01), T::lit(0.001)],
            sweep_points: 201,
            span_linewidths: T::lit(10.0),
        }
    }
}

impl<T: Real> SimulationOptions<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.latent_dt > T::zero()) {
            return Err(Error::param("latent_dt", "must be > 0"));
        }
        if !(self.attenuation_db >= T::zero()) {
            return Err(Error::param("attenuation_db", "must be >= 0"));
        }
        if !(self.temperature_k >= T::zero()) {
            return Err(Error::param("temperature_k", "must be >= 0"));
        }
        let noise = self
            .fast_qi_relative_sd
            .iter()
            .chain(&self.sweep_noise_sd)
            .chain(std::iter::once(&self.fast_coupling_relative_sd));
        for v in noise {
            if !(*v >= T::zero()) || !v.is_finite() {
                return Err(Error::param("noise", "noise levels must be finite and >= 0"));
            }
        }
        if self.sweep_points < 8 {
            return Err(Error::param("sweep_points", "must be >= 8"));
        }
        if !(self.span_linewidths > T::zero()) {
            return Err(Error::param("span_linewidths", "must be > 0"));
        }
        Ok(())
    }
}

/// Ground truth at one acquisition point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthPoint<T> {
    pub timestamp: T,
    /// 0 = LP, 1 = MP, 2 = HP; the noise channel for single-power traces.
    pub channel: usize,
    pub f_delta_tls: T,
    pub inverse_q_pi: T,
    pub mean_photons: T,
    pub q_i: T,
    pub f_r: T,
}

/// Latent loss tangent on its uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTrajectory<T> {
    pub dt: T,
    pub f_delta_tls: Vec<T>,
}

impl<T: Real> LatentTrajectory<T> {
    /// Linear interpolation at time `t`, clamped to the grid.
    pub fn at(&self, t: T) -> T {
        interp(&self.f_delta_tls, self.dt, t)
    }
}

fn interp<T: Real>(v: &[T], dt: T, t: T) -> T {
    let x = (t / dt).max(T::zero());
    let i = x.floor().to_usize().unwrap_or(0).min(v.len() - 1);
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    let w = x - T::from_usize_lossy(i);
    v[i] + (v[i + 1] - v[i]) * w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterleavedRun<T> {
    pub lp: QiTimeSeries<T>,
    pub mp: QiTimeSeries<T>,
    pub hp: QiTimeSeries<T>,
    pub truth: Vec<TruthPoint<T>>,
    pub latent: LatentTrajectory<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeTraceRun<T> {
    pub series: QiTimeSeries<T>,
    pub truth: Vec<TruthPoint<T>>,
    pub latent: LatentTrajectory<T>,
    /// Raw sweeps, present in full mode.
    pub sweeps: Option<Vec<FrequencySweep<T>>>,
}

/// Shared state of a simulated run: latent processes and the fixed physics.
struct Simulator<'a, T> {
    model: &'a TlsModel<T>,
    base: &'a ResonatorParams<T>,
    spec: &'a FluctuationSpec<T>,
    opts: &'a SimulationOptions<T>,
    latent: LatentTrajectory<T>,
    freq_noise: Option<Vec<T>>,
    thermal: T,
}

/// One point before measurement.
struct Pending<T> {
    truth: TruthPoint<T>,
    params: ResonatorParams<T>,
    power_dbm: T,
    grid_center: ResonatorParams<T>,
    noise_index: usize,
}

const STREAM_HP: u64 = 2;
const STREAM_FAST: u64 = 3;
const STREAM_FREQ: u64 = 4;

impl<'a, T: Real> Simulator<'a, T> {
    fn new(
        model: &'a TlsModel<T>,
        base: &'a ResonatorParams<T>,
        spec: &'a FluctuationSpec<T>,
        opts: &'a SimulationOptions<T>,
        total: T,
    ) -> Result<Self> {
        model.validate()?;
        base.validate()?;
        spec.validate()?;
        opts.validate()?;
        let n = (total / opts.latent_dt).ceil().to_usize().unwrap_or(0) + 2;
        let f_delta = gen_loss_tangent_process(spec, n, opts.latent_dt)?;
        let freq_noise = if spec.freq_relative_sd > T::zero() {
            Some(gen_one_over_f_gaussian(
                n,
                opts.latent_dt,
                spec.spectral_exponent,
                T::one(),
                derive_seed(spec.seed, STREAM_FREQ),
            )?)
        } else {
            None
        };
        Ok(Self {
            model,
            base,
            spec,
            opts,
            latent: LatentTrajectory {
                dt: opts.latent_dt,
                f_delta_tls: f_delta,
            },
            freq_noise,
            thermal: thermal_factor(base.omega_r(), opts.temperature_k),
        })
    }

    /// Internal Q and photon number at power `dbm`, iterated to self
    /// consistency since the photon number depends on the loaded Q.
    fn operating_point(&self, f_delta: T, inv_q_pi: T, dbm: T) -> Result<(T, T)> {
        let p = self.base;
        let mut n = T::zero();
        let mut q_i = T::one();
        for _ in 0..50 {
            let inv = f_delta * self.thermal * self.model.saturation(n) + inv_q_pi;
            q_i = T::one() / inv;
            let q = loaded_q_from_internal(q_i, p.coupling_q_mag, p.phi);
            let trial = ResonatorParams { loaded_q: q, ..*p };
            let n_new = photon_number(dbm, self.opts.attenuation_db, &trial)?;
            let done = (n_new - n).abs() <= T::lit(1e-12) * n_new;
            n = n_new;
            if done {
                break;
            }
        }
        Ok((q_i, n))
    }

    /// Nominal parameters at `dbm` (mean loss tangent, no Q_PI noise) used
    /// to center the frequency grid.
    fn nominal(&self, dbm: T) -> Result<ResonatorParams<T>> {
        let (q_i, _) = self.operating_point(self.spec.target_mean, T::one() / self.model.q_pi, dbm)?;
        ResonatorParams::from_internal_q(
            self.base.amplitude,
            self.base.delay,
            self.base.resonance_freq,
            q_i,
            self.base.coupling_q_mag,
            self.base.phi,
        )
    }

    fn point(&self, t: T, channel: usize, dbm: T, hp_xi: T, index: usize, nominal: &ResonatorParams<T>) -> Result<Pending<T>> {
        let f_delta = self.latent.at(t);
        let inv_q_pi = (T::one() + self.spec.hp_relative_sd * hp_xi) / self.model.q_pi;
        let (q_i, n) = self.operating_point(f_delta, inv_q_pi, dbm)?;
        let f_r = match &self.freq_noise {
            Some(g) => self.base.resonance_freq * (T::one() + self.spec.freq_relative_sd * interp(g, self.latent.dt, t)),
            None => self.base.resonance_freq,
        };
        let params = ResonatorParams::from_internal_q(
            self.base.amplitude,
            self.base.delay,
            f_r,
            q_i,
            self.base.coupling_q_mag,
            self.base.phi,
        )?;
        Ok(Pending {
            truth: TruthPoint {
                timestamp: t,
                channel,
                f_delta_tls: f_delta,
                inverse_q_pi: inv_q_pi,
                mean_photons: n,
                q_i,
                f_r,
            },
            params,
            power_dbm: dbm,
            grid_center: *nominal,
            noise_index: index,
        })
    }

    /// Measures every pending point, returning one (Q_i, sigma, f_r, |Q_c|,
    /// converged) row per point in input order, plus the sweeps in full mode.
    #[allow(clippy::type_complexity)]
    fn measure(&self, pending: &[Pending<T>], keep_sweeps: bool) -> Result<(Vec<(T, T, T, T, bool)>, Option<Vec<FrequencySweep<T>>>)> {
        match self.opts.mode {
            MeasurementMode::Fast => {
                let mut rng = rng_for(self.spec.seed, STREAM_FAST);
                let rows = pending
                    .iter()
                    .map(|p| {
                        let rel = self.opts.fast_qi_relative_sd[p.truth.channel];
                        let xs: [f64; 3] = [
                            rng.sample(StandardNormal),
                            rng.sample(StandardNormal),
                            rng.sample(StandardNormal),
                        ];
                        let [a, b, c] = xs.map(T::lit);
                        let lw = p.params.linewidth();
                        (
                            p.truth.q_i * (T::one() + rel * a),
                            rel * p.truth.q_i,
                            p.truth.f_r + rel * lw * b,
                            p.params.coupling_q_mag * (T::one() + self.opts.fast_coupling_relative_sd * c),
                            true,
                        )
                    })
                    .collect();
                Ok((rows, None))
            }
            MeasurementMode::Full => {
                let sweeps = pending
                    .iter()
                    .map(|p| {
                        let grid = default_grid(&p.grid_center, self.opts.span_linewidths, self.opts.sweep_points);
                        let sd = self.opts.sweep_noise_sd[p.truth.channel];
                        let seed = derive_seed(self.spec.seed, 1000 + p.noise_index as u64);
                        let mut s = synth_sweep(&p.params, &grid, sd, seed)?;
                        s.meta.power_dbm = p.power_dbm;
                        s.meta.temperature_k = self.opts.temperature_k;
                        s.meta.timestamp_s = p.truth.timestamp;
                        Ok(s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let fits: Vec<_> = sweeps.par_iter().map(fit_resonance).collect();
                let rows = fits
                    .into_iter()
                    .map(|f| match f {
                        Ok(f) => (f.q_i, f.sigma68.internal_q, f.params.resonance_freq, f.params.coupling_q_mag, f.converged),
                        Err(_) => (T::nan(), T::nan(), T::nan(), T::nan(), false),
                    })
                    .collect();
                Ok((rows, keep_sweeps.then_some(sweeps)))
            }
        }
    }
}

fn push_row<T: Real>(s: &mut QiTimeSeries<T>, t: T, row: (T, T, T, T, bool)) {
    s.timestamps.push(t);
    s.q_i.push(row.0);
    s.q_i_sigma.push(row.1);
    s.f_r.push(row.2);
    s.coupling_q.push(row.3);
    s.converged.push(row.4);
}

/// Simulates the interleaved (LP, MP, HP) acquisition.
///
/// Each point samples the latent loss tangent at its midpoint. The photon
/// number is solved self-consistently at each point, 1/Q_PI receives an
/// independent white perturbation, and the resulting parameters are either
/// perturbed directly (fast mode) or synthesized into a sweep and fitted
/// (full mode).
pub fn simulate_interleaved_run<T: Real>(
    model: &TlsModel<T>,
    base: &ResonatorParams<T>,
    spec: &FluctuationSpec<T>,
    sched: &InterleavedSchedule<T>,
    opts: &SimulationOptions<T>,
) -> Result<InterleavedRun<T>> {
    sched.validate()?;
    let sim = Simulator::new(model, base, spec, opts, sched.total_duration)?;
    let nominal: Vec<ResonatorParams<T>> = sched
        .power_points
        .iter()
        .map(|&p| sim.nominal(p))
        .collect::<Result<_>>()?;
    let mut hp_rng = rng_for(spec.seed, STREAM_HP);
    let mut pending = Vec::with_capacity(3 * sched.n_cycles());
    for c in 0..sched.n_cycles() {
        for (ch, (start, end)) in sched.point_windows(c).into_iter().enumerate() {
            let t = (start + end) / T::lit(2.0);
            let xi = T::lit(hp_rng.sample::<f64, _>(StandardNormal));
            let idx = pending.len();
            pending.push(sim.point(t, ch, sched.power_points[ch], xi, idx, &nominal[ch])?);
        }
    }
    let (rows, _) = sim.measure(&pending, false)?;

    let labels = ["LP", "MP", "HP"];
    let mut series: Vec<QiTimeSeries<T>> = (0..3)
        .map(|ch| QiTimeSeries::empty(labels[ch], sched.power_points[ch], opts.temperature_k))
        .collect();
    for (p, row) in pending.iter().zip(rows) {
        push_row(&mut series[p.truth.channel], p.truth.timestamp, row);
    }
    let hp = series.pop().expect("three channels");
    let mp = series.pop().expect("three channels");
    let lp = series.pop().expect("three channels");
    Ok(InterleavedRun {
        lp,
        mp,
        hp,
        truth: pending.into_iter().map(|p| p.truth).collect(),
        latent: sim.latent,
    })
}

/// A single-power acquisition: back-to-back points of `point_duration`
/// seconds over `total_duration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSettings<T> {
    pub power_dbm: T,
    /// Which (LP, MP, HP) measurement-noise level applies: 0, 1 or 2.
    pub noise_channel: usize,
    pub point_duration: T,
    pub total_duration: T,
}

impl<T: Real> TraceSettings<T> {
    pub fn validate(&self) -> Result<()> {
        if !self.power_dbm.is_finite() {
            return Err(Error::param("power_dbm", "must be finite"));
        }
        if self.noise_channel > 2 {
            return Err(Error::param("noise_channel", "must be 0 (LP), 1 (MP) or 2 (HP)"));
        }
        if !(self.point_duration > T::zero()) || !self.point_duration.is_finite() {
            return Err(Error::param("point_duration", "must be finite and > 0"));
        }
        if !(self.total_duration >= self.point_duration) || !self.total_duration.is_finite() {
            return Err(Error::param("total_duration", "must cover at least one point"));
        }
        Ok(())
    }
}

/// Simulates a single-power time trace.
pub fn simulate_timetrace<T: Real>(
    model: &TlsModel<T>,
    base: &ResonatorParams<T>,
    spec: &FluctuationSpec<T>,
    trace: &TraceSettings<T>,
    opts: &SimulationOptions<T>,
    keep_sweeps: bool,
) -> Result<TimeTraceRun<T>> {
    trace.validate()?;
    let TraceSettings {
        power_dbm,
        noise_channel,
        point_duration,
        total_duration,
    } = *trace;
    let sim = Simulator::new(model, base, spec, opts, total_duration)?;
    let nominal = sim.nominal(power_dbm)?;
    let n = (total_duration / point_duration).floor().to_usize().unwrap_or(0);
    let mut hp_rng = rng_for(spec.seed, STREAM_HP);
    let mut pending = Vec::with_capacity(n);
    for k in 0..n {
        let t = (T::from_usize_lossy(k) + T::lit(0.5)) * point_duration;
        let xi = T::lit(hp_rng.sample::<f64, _>(StandardNormal));
        pending.push(sim.point(t, noise_channel, power_dbm, xi, k, &nominal)?);
    }
    let (rows, sweeps) = sim.measure(&pending, keep_sweeps)?;
    let mut series = QiTimeSeries::empty(format!("{}dBm", power_dbm), power_dbm, opts.temperature_k);
    for (p, row) in pending.iter().zip(rows) {
        push_row(&mut series, p.truth.timestamp, row);
    }
    Ok(TimeTraceRun {
        series,
        truth: pending.into_iter().map(|p| p.truth).collect(),
        latent: sim.latent,
        sweeps,
    })
}
