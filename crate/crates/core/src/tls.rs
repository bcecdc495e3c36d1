//! Loss-tangent extraction: power-dependence fits, the interleaved two-point
//! estimator and the sigma-vs-Q linear model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{thermal_factor, TlsModel};
use crate::optim::{levenberg_marquardt, LeastSquares, LmOptions, Matrix};
use crate::scalar::{median, Real};
use crate::synth::QiTimeSeries;

/// Internal Q measured over a range of photon numbers at one temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSweepData<T> {
    pub mean_photons: Vec<T>,
    pub q_i: Vec<T>,
    pub q_i_sigma: Vec<T>,
    pub temperature_k: T,
    /// Needed for the thermal factor.
    pub resonance_freq: T,
}

impl<T: Real> PowerSweepData<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.mean_photons.len();
        for len in [self.q_i.len(), self.q_i_sigma.len()] {
            if len != n {
                return Err(Error::LengthMismatch { left: n, right: len });
            }
        }
        if n < 4 {
            return Err(Error::Length { required: 4, actual: n });
        }
        if self.mean_photons.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::param("mean_photons", "must be finite and > 0"));
        }
        if self.q_i.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::param("q_i", "must be finite and > 0"));
        }
        if self.q_i_sigma.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::param("q_i_sigma", "must be finite and > 0"));
        }
        if !(self.temperature_k >= T::zero()) {
            return Err(Error::param("temperature_k", "must be >= 0"));
        }
        if !(self.resonance_freq > T::zero()) {
            return Err(Error::param("resonance_freq", "must be > 0"));
        }
        Ok(())
    }
}

/// Fitted TLS parameters with their 68% half-widths.
///
/// `f_delta0` is left unconstrained so that data without a TLS component can
/// come out at or below zero; [`PowerFit::to_model`] rejects such fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFit<T> {
    pub f_delta0: T,
    pub n_c: T,
    pub beta: T,
    pub q_pi: T,
    pub sigma_f_delta0: T,
    pub sigma_n_c: T,
    pub sigma_beta: T,
    pub sigma_q_pi: T,
    pub reduced_chi2: T,
    pub iterations: usize,
}

impl<T: Real> PowerFit<T> {
    pub fn to_model(&self) -> Result<TlsModel<T>> {
        TlsModel::new(self.f_delta0, self.n_c, self.beta, self.q_pi)
    }

    /// 1/Q_i predicted by the fitted parameters.
    pub fn inverse_q(&self, mean_photons: T, thermal: T) -> T {
        self.f_delta0 * thermal * (T::one() + mean_photons / self.n_c).powf(-self.beta) + T::one() / self.q_pi
    }
}

/// Parameters `[F/s, ln n_c, beta, (1/Q_PI)/s]` with `s` the median 1/Q_i.
struct SCurve<'a, T> {
    n: &'a [T],
    inv_q: &'a [T],
    weight: Vec<T>,
    thermal: T,
    scale: T,
}

impl<T: Real> SCurve<'_, T> {
    fn model(&self, p: &[T], n: T) -> T {
        let nc = p[1].exp();
        self.scale * (p[0] * self.thermal * (T::one() + n / nc).powf(-p[2]) + p[3])
    }

    /// Best (F, 1/Q_PI) for fixed (n_c, beta): the model is linear in both.
    fn linear_start(&self, ln_nc: T, beta: T) -> Option<([T; 4], T)> {
        let nc = ln_nc.exp();
        let (mut s11, mut s12, mut s22, mut b1, mut b2) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
        for ((&n, &y), &w) in self.n.iter().zip(self.inv_q).zip(&self.weight) {
            let g = self.thermal * (T::one() + n / nc).powf(-beta);
            let w2 = w * w;
            let y = y / self.scale;
            s11 = s11 + w2 * g * g;
            s12 = s12 + w2 * g;
            s22 = s22 + w2;
            b1 = b1 + w2 * g * y;
            b2 = b2 + w2 * y;
        }
        let det = s11 * s22 - s12 * s12;
        if !(det.abs() > T::epsilon() * s11 * s22) {
            return None;
        }
        let f = (b1 * s22 - b2 * s12) / det;
        let c = (s11 * b2 - s12 * b1) / det;
        let p = [f, ln_nc, beta, c];
        let mut r = vec![T::zero(); self.n.len()];
        self.residuals(&p, &mut r);
        Some((p, r.iter().map(|&v| v * v).sum()))
    }
}

impl<T: Real> LeastSquares<T> for SCurve<'_, T> {
    fn n_params(&self) -> usize {
        4
    }
    fn n_residuals(&self) -> usize {
        self.n.len()
    }
    fn residuals(&self, p: &[T], out: &mut [T]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = (self.model(p, self.n[k]) - self.inv_q[k]) * self.weight[k];
        }
    }
    fn jacobian(&self, p: &[T], jac: &mut Matrix<T>) {
        let nc = p[1].exp();
        for (k, &n) in self.n.iter().enumerate() {
            let u = T::one() + n / nc;
            let sat = u.powf(-p[2]);
            let w = self.weight[k] * self.scale;
            let row = jac.row_mut(k);
            row[0] = w * self.thermal * sat;
            // d/d ln n_c of u^-beta = beta u^(-beta-1) n / n_c
            row[1] = w * p[0] * self.thermal * p[2] * sat / u * (n / nc);
            row[2] = -w * p[0] * self.thermal * sat * u.ln();
            row[3] = w;
        }
    }
}

/// Smallest admissible saturation exponent. As beta -> 0 only the product
/// `F beta` is identifiable.
pub const BETA_MIN: f64 = 0.05;

/// Weighted least-squares fit of the TLS saturation model in 1/Q_i space,
/// with weights `Q^2 / sigma_Q`.
///
/// The start point is the best of a grid over (n_c, beta), with the two
/// linear parameters solved exactly at each grid node, which includes the
/// conventional start beta = 0.3 and n_c at the geometric mean of the photon
/// range. beta is bounded to [`BETA_MIN`, 1] and n_c to the measured photon
/// range; outside those limits the parameters trade off against each other.
pub fn fit_power_dependence<T: Real>(data: &PowerSweepData<T>) -> Result<PowerFit<T>> {
    data.validate()?;
    let (nmin, nmax) = data
        .mean_photons
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let decades = (nmax / nmin).log10();
    if decades < T::lit(3.0) {
        return Err(Error::IllPosed(format!(
            "photon numbers span {:.2} decades; at least 3 are needed",
            decades.to_f64_lossy()
        )));
    }
    let inv_q: Vec<T> = data.q_i.iter().map(|&q| T::one() / q).collect();
    let weight: Vec<T> = data
        .q_i
        .iter()
        .zip(&data.q_i_sigma)
        .map(|(&q, &s)| q * q / s)
        .collect();
    let scale = median(&inv_q);
    let thermal = thermal_factor(T::lit(2.0) * T::PI() * data.resonance_freq, data.temperature_k);
    let prob = SCurve {
        n: &data.mean_photons,
        inv_q: &inv_q,
        weight,
        thermal,
        scale,
    };

    let (ln_lo, ln_hi) = (nmin.ln(), nmax.ln());
    let mut starts = vec![((ln_lo + ln_hi) / T::lit(2.0), T::lit(0.3))];
    let grid_n = 13;
    for i in 0..grid_n {
        let ln_nc = ln_lo + (ln_hi - ln_lo) * T::from_usize_lossy(i) / T::from_usize_lossy(grid_n - 1);
        for beta in [0.1, 0.2, 0.3, 0.5, 0.7, 1.0] {
            starts.push((ln_nc, T::lit(beta)));
        }
    }
    let best = starts
        .into_iter()
        .filter_map(|(a, b)| prob.linear_start(a, b))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .ok_or_else(|| Error::IllPosed("no admissible start point".into()))?;

    let opts = LmOptions {
        lower: Some(vec![T::neg_infinity(), ln_lo, T::lit(BETA_MIN), T::neg_infinity()]),
        upper: Some(vec![T::infinity(), ln_hi, T::one(), T::infinity()]),
        // flat directions (e.g. no TLS component) only stop on cost stagnation
        ftol: T::lit(1e-12),
        xtol: T::lit(1e-10),
        max_iter: 1000,
        ..LmOptions::default()
    };
    let rep = levenberg_marquardt(&prob, &best.0, &opts);
    if !rep.converged() {
        return Err(Error::IllPosed(format!("optimizer stopped: {:?}", rep.termination)));
    }
    let p = &rep.params;
    let inv_q_pi = p[3] * scale;
    if !(inv_q_pi > T::zero()) {
        return Err(Error::IllPosed("fitted 1/Q_PI is not positive".into()));
    }
    let cov = rep.covariance();
    let sd = |j: usize| cov[(j, j)].max(T::zero()).sqrt();
    let dof = T::from_usize_lossy(data.q_i.len().saturating_sub(4).max(1));
    let n_c = p[1].exp();
    let q_pi = T::one() / inv_q_pi;
    Ok(PowerFit {
        f_delta0: p[0] * scale,
        n_c,
        beta: p[2],
        q_pi,
        sigma_f_delta0: sd(0) * scale,
        sigma_n_c: sd(1) * n_c,
        sigma_beta: sd(2),
        sigma_q_pi: sd(3) * scale * q_pi * q_pi,
        reduced_chi2: T::lit(2.0) * rep.cost / dof,
        iterations: rep.iterations,
    })
}

/// Two-point estimate `1/Q_LP - 1/Q_HP` of the effective loss tangent.
/// May be negative; see [`extract_loss_tangent`] for how that is handled.
pub fn interleaved_loss_tangent<T: Real>(q_lp: T, q_hp: T) -> T {
    T::one() / q_lp - T::one() / q_hp
}

/// Factor multiplying the true loss tangent in the two-point estimate:
/// `(1 + n_LP/n_c)^-beta - (1 + n_HP/n_c)^-beta`.
pub fn plateau_factor<T: Real>(m: &TlsModel<T>, n_lp: T, n_hp: T) -> T {
    m.saturation(n_lp) - m.saturation(n_hp)
}

/// Strictly positive loss-tangent values on strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTangentSeries<T> {
    pub timestamps: Vec<T>,
    pub f_delta_tls: Vec<T>,
}

impl<T: Real> LossTangentSeries<T> {
    pub fn new(timestamps: Vec<T>, f_delta_tls: Vec<T>) -> Result<Self> {
        let s = Self { timestamps, f_delta_tls };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timestamps.len() != self.f_delta_tls.len() {
            return Err(Error::LengthMismatch {
                left: self.timestamps.len(),
                right: self.f_delta_tls.len(),
            });
        }
        for i in 1..self.timestamps.len() {
            if !(self.timestamps[i] > self.timestamps[i - 1]) {
                return Err(Error::NonMonotonic { index: i });
            }
        }
        if let Some(i) = self.f_delta_tls.iter().position(|&v| !(v > T::zero())) {
            return Err(Error::param("f_delta_tls", format!("entry {i} is not positive")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn span(&self) -> T {
        match (self.timestamps.first(), self.timestamps.last()) {
            (Some(&a), Some(&b)) => b - a,
            _ => T::zero(),
        }
    }
}

/// Pointwise two-point estimate over an interleaved run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTangentExtraction<T> {
    /// Positive estimates only.
    pub series: LossTangentSeries<T>,
    /// Every estimate, negatives included, with its timestamp.
    pub raw_timestamps: Vec<T>,
    pub raw_values: Vec<T>,
    pub n_negative: usize,
    /// Pairs dropped because either fit did not converge.
    pub n_unconverged: usize,
}

/// Pairs the i-th LP and HP points (same acquisition cycle) and applies the
/// two-point estimator. The timestamp is the midpoint of the pair.
pub fn extract_loss_tangent<T: Real>(lp: &QiTimeSeries<T>, hp: &QiTimeSeries<T>) -> Result<LossTangentExtraction<T>> {
    lp.validate()?;
    hp.validate()?;
    if lp.len() != hp.len() {
        return Err(Error::LengthMismatch {
            left: lp.len(),
            right: hp.len(),
        });
    }
    let mut raw_t = Vec::with_capacity(lp.len());
    let mut raw_v = Vec::with_capacity(lp.len());
    let mut n_unconverged = 0;
    for i in 0..lp.len() {
        let ok = lp.converged[i] && hp.converged[i] && lp.q_i[i] > T::zero() && hp.q_i[i] > T::zero();
        if !ok {
            n_unconverged += 1;
            continue;
        }
        raw_t.push((lp.timestamps[i] + hp.timestamps[i]) / T::lit(2.0));
        raw_v.push(interleaved_loss_tangent(lp.q_i[i], hp.q_i[i]));
    }
    let (t, v): (Vec<T>, Vec<T>) = raw_t
        .iter()
        .zip(&raw_v)
        .filter(|(_, &v)| v > T::zero())
        .map(|(&t, &v)| (t, v))
        .unzip();
    let n_negative = raw_v.len() - v.len();
    Ok(LossTangentExtraction {
        series: LossTangentSeries::new(t, v)?,
        raw_timestamps: raw_t,
        raw_values: raw_v,
        n_negative,
        n_unconverged,
    })
}

/// Slope of the through-origin line `sigma = c Q` by least squares:
/// `sum(Q sigma) / sum(Q^2)`.
pub fn fit_sigma_vs_q<T: Real>(points: &[(T, T)]) -> Result<T> {
    if points.is_empty() {
        return Err(Error::Length { required: 1, actual: 0 });
    }
    if points.iter().any(|&(q, s)| !(q > T::zero()) || !(s >= T::zero())) {
        return Err(Error::param("points", "need Q > 0 and sigma >= 0"));
    }
    let num: T = points.iter().map(|&(q, s)| q * s).sum();
    let den: T = points.iter().map(|&(q, _)| q * q).sum();
    Ok(num / den)
}
