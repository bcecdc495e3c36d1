//! Resonance fitting for notch-type S21 sweeps.
//!
//! The pipeline is the usual one for hanger resonators:
//!
//! 1. cable delay from the off-resonant phase slope, refined so that the
//!    corrected trace lies on a circle;
//! 2. algebraic (Taubin) circle fit with a geometric refinement;
//! 3. phase-versus-frequency fit around the circle center for `f_r` and `Q`;
//! 4. off-resonant point gives the background `A`, the normalized circle
//!    gives `phi` and the diameter `Q/|Q_c|`;
//! 5. a joint least-squares refinement of all seven real parameters of the
//!    transmission model, whose linearized covariance provides the 68%
//!    half-widths.

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{eval_s21, internal_q, ResonatorParams};
use crate::optim::{levenberg_marquardt, LeastSquares, LmOptions, Matrix};
use crate::scalar::{median, Real};
use crate::synth::FrequencySweep;

/// 68% half-widths of the fitted quantities (one standard error).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sigma68<T> {
    pub resonance_freq: T,
    pub loaded_q: T,
    pub coupling_q_mag: T,
    pub phi: T,
    pub internal_q: T,
}

impl<T: Real> Sigma68<T> {
    fn unknown() -> Self {
        Self {
            resonance_freq: T::infinity(),
            loaded_q: T::infinity(),
            coupling_q_mag: T::infinity(),
            phi: T::infinity(),
            internal_q: T::infinity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonatorFit<T> {
    pub params: ResonatorParams<T>,
    pub q_i: T,
    pub sigma68: Sigma68<T>,
    /// RMS of |S21_data - S21_model| over the sweep.
    pub residual_rms: T,
    pub converged: bool,
    /// Why the fit was marked unconverged, if it was.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle<T> {
    pub center: Complex<T>,
    pub radius: T,
}

fn unwrap_phase<T: Real>(z: &[Complex<T>]) -> Vec<T> {
    let two_pi = T::lit(2.0) * T::PI();
    let mut out = Vec::with_capacity(z.len());
    let mut offset = T::zero();
    let mut prev = T::zero();
    for (k, v) in z.iter().enumerate() {
        let a = v.arg();
        if k > 0 {
            let mut d = a + offset - prev;
            while d > T::PI() {
                offset = offset - two_pi;
                d = d - two_pi;
            }
            while d < -T::PI() {
                offset = offset + two_pi;
                d = d + two_pi;
            }
        }
        prev = a + offset;
        out.push(prev);
    }
    out
}

fn apply_delay<T: Real>(sweep: &FrequencySweep<T>, f_ref: T, tau: T) -> Vec<Complex<T>> {
    let two_pi = T::lit(2.0) * T::PI();
    sweep
        .frequencies
        .iter()
        .zip(&sweep.s21)
        .map(|(&f, &z)| z * Complex::from_polar(T::one(), two_pi * (f - f_ref) * tau))
        .collect()
}

/// Reference frequency for delay corrections: the sweep center.
fn delay_reference<T: Real>(sweep: &FrequencySweep<T>) -> T {
    let n = sweep.frequencies.len();
    (sweep.frequencies[0] + sweep.frequencies[n - 1]) / T::lit(2.0)
}

/// Least-squares slope of `y` against `x`.
fn linear_slope<T: Real>(x: &[T], y: &[T]) -> Option<T> {
    let n = T::from_usize_lossy(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let sxx: T = x.iter().map(|&v| (v - mx) * (v - mx)).sum();
    let sxy: T = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    if !(sxx > T::zero()) {
        return None;
    }
    Some(sxy / sxx)
}

/// Circle residual used to refine the delay: geometric distance of every
/// corrected point to the common circle (tau, xc, yc, r).
struct DelayCircle<'a, T> {
    freqs: &'a [T],
    s21: &'a [Complex<T>],
    f_ref: T,
    tau_scale: T,
}

impl<T: Real> DelayCircle<'_, T> {
    fn point(&self, k: usize, tau: T) -> Complex<T> {
        let ph = T::lit(2.0) * T::PI() * (self.freqs[k] - self.f_ref) * tau;
        self.s21[k] * Complex::from_polar(T::one(), ph)
    }
}

impl<T: Real> LeastSquares<T> for DelayCircle<'_, T> {
    fn n_params(&self) -> usize {
        4
    }
    fn n_residuals(&self) -> usize {
        self.freqs.len()
    }
    fn residuals(&self, p: &[T], out: &mut [T]) {
        let tau = p[0] / self.tau_scale;
        let c = Complex::new(p[1], p[2]);
        for (k, o) in out.iter_mut().enumerate() {
            *o = (self.point(k, tau) - c).norm() - p[3];
        }
    }
    fn jacobian(&self, p: &[T], jac: &mut Matrix<T>) {
        let tau = p[0] / self.tau_scale;
        let c = Complex::new(p[1], p[2]);
        let two_pi = T::lit(2.0) * T::PI();
        for k in 0..self.freqs.len() {
            let z = self.point(k, tau);
            let d = z - c;
            let dist = d.norm().max(T::min_positive_value());
            // dz/dtau = i 2 pi (f - f_ref) z
            let dz = Complex::new(T::zero(), two_pi * (self.freqs[k] - self.f_ref)) * z;
            let row = jac.row_mut(k);
            row[0] = (d.re * dz.re + d.im * dz.im) / dist / self.tau_scale;
            row[1] = -d.re / dist;
            row[2] = -d.im / dist;
            row[3] = -T::one();
        }
    }
}

/// Absolute RMS geometric residual of the Taubin circle through `z`;
/// infinite when the fit fails. Not normalized by the radius: a wrong delay
/// flattens the trace onto a huge circle with a small relative residual.
fn circle_rms<T: Real>(z: &[Complex<T>]) -> T {
    match taubin(z) {
        Ok(c) => {
            let ss: T = z.iter().map(|&p| {
                let d = (p - c.center).norm() - c.radius;
                d * d
            }).sum();
            (ss / T::from_usize_lossy(z.len())).sqrt()
        }
        Err(_) => T::infinity(),
    }
}

/// Estimates and removes the line delay.
///
/// The first estimate is the slope of the unwrapped phase over the outer
/// tenth of the sweep on each side. It is then refined by requiring the
/// corrected trace to lie on a circle, which removes the bias from the
/// resonance's own phase tails. The correction is applied relative to the
/// sweep center frequency, `s21 * exp(+i 2 pi (f - f_center) tau)`; the
/// constant phase `exp(i 2 pi f_center tau)` belongs to the background `A`.
pub fn remove_cable_delay<T: Real>(sweep: &FrequencySweep<T>) -> Result<(FrequencySweep<T>, T)> {
    sweep.validate()?;
    let n = sweep.len();
    let f_ref = delay_reference(sweep);
    let phase = unwrap_phase(&sweep.s21);
    let tail = (n / 10).max(2).min(n / 2);
    let idx: Vec<usize> = (0..tail).chain(n - tail..n).collect();
    let fx: Vec<T> = idx.iter().map(|&k| sweep.frequencies[k] - f_ref).collect();
    let py: Vec<T> = idx.iter().map(|&k| phase[k]).collect();
    let slope = linear_slope(&fx, &py)
        .ok_or_else(|| Error::Degenerate("off-resonant phase fit is rank deficient".into()))?;
    let two_pi = T::lit(2.0) * T::PI();
    let tau0 = -slope / two_pi;

    let span = sweep.frequencies[n - 1] - sweep.frequencies[0];
    let tau = refine_delay(sweep, f_ref, span, tau0).unwrap_or(tau0);

    let corrected = FrequencySweep {
        frequencies: sweep.frequencies.clone(),
        s21: apply_delay(sweep, f_ref, tau),
        meta: sweep.meta.clone(),
    };
    Ok((corrected, tau))
}

fn refine_delay<T: Real>(sweep: &FrequencySweep<T>, f_ref: T, span: T, tau0: T) -> Option<T> {
    let base = circle_rms(&apply_delay(sweep, f_ref, tau0));
    if !base.is_finite() || base == T::zero() {
        return None;
    }
    // coarse scan of +-0.25 / span around the slope estimate
    let steps = 50;
    let width = T::lit(0.25) / span;
    let mut best = (base, tau0);
    for j in 0..=steps {
        let t = tau0 - width + T::lit(2.0) * width * T::from_usize_lossy(j) / T::from_usize_lossy(steps);
        let v = circle_rms(&apply_delay(sweep, f_ref, t));
        if v < best.0 {
            best = (v, t);
        }
    }
    let start = apply_delay(sweep, f_ref, best.1);
    let c = taubin(&start).ok()?;
    let tau_scale = T::lit(2.0) * T::PI() * span;
    let prob = DelayCircle {
        freqs: &sweep.frequencies,
        s21: &sweep.s21,
        f_ref,
        tau_scale,
    };
    let rep = levenberg_marquardt(
        &prob,
        &[best.1 * tau_scale, c.center.re, c.center.im, c.radius],
        &LmOptions::default(),
    );
    let tau = rep.params[0] / tau_scale;
    if !tau.is_finite() || rep.params[3] <= T::zero() {
        return None;
    }
    // keep the refinement only if it actually improved circularity
    let refined = circle_rms(&apply_delay(sweep, f_ref, tau));
    if refined <= best.0 {
        Some(tau)
    } else {
        Some(best.1)
    }
}

/// Algebraic circle fit (Taubin), solved by Newton iteration on the
/// characteristic polynomial.
fn taubin<T: Real>(points: &[Complex<T>]) -> Result<Circle<T>> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Length {
            required: 3,
            actual: n,
        });
    }
    let nf = T::from_usize_lossy(n);
    let mean = points.iter().fold(Complex::new(T::zero(), T::zero()), |a, &b| a + b) / nf;
    // scale to unit RMS radius about the centroid for conditioning
    let rms = (points.iter().map(|p| (p - mean).norm_sqr()).sum::<T>() / nf).sqrt();
    if !(rms > T::zero()) || !rms.is_finite() {
        return Err(Error::Collinear);
    }
    let (mut mxx, mut myy, mut mxy, mut mxz, mut myz, mut mzz) =
        (T::zero(), T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for p in points {
        let x = (p.re - mean.re) / rms;
        let y = (p.im - mean.im) / rms;
        let z = x * x + y * y;
        mxx = mxx + x * x;
        myy = myy + y * y;
        mxy = mxy + x * y;
        mxz = mxz + x * z;
        myz = myz + y * z;
        mzz = mzz + z * z;
    }
    mxx = mxx / nf;
    myy = myy / nf;
    mxy = mxy / nf;
    mxz = mxz / nf;
    myz = myz / nf;
    mzz = mzz / nf;

    // collinear points: the 2x2 scatter matrix is singular
    let tr = mxx + myy;
    let det2 = mxx * myy - mxy * mxy;
    if det2 <= T::epsilon() * T::lit(64.0) * tr * tr {
        return Err(Error::Collinear);
    }

    let mz = mxx + myy;
    let cov_xy = mxx * myy - mxy * mxy;
    let var_z = mzz - mz * mz;
    let three = T::lit(3.0);
    let four = T::lit(4.0);
    let a3 = four * mz;
    let a2 = -three * mz * mz - mzz;
    let a1 = var_z * mz + four * cov_xy * mz - mxz * mxz - myz * myz;
    let a0 = mxz * (mxz * myy - myz * mxy) + myz * (myz * mxx - mxz * mxy) - var_z * cov_xy;
    let a22 = a2 + a2;
    let a33 = a3 + a3 + a3;

    let mut x = T::zero();
    let mut y = a0;
    for _ in 0..99 {
        let dy = a1 + x * (a22 + a33 * x);
        if dy == T::zero() {
            break;
        }
        let x_new = x - y / dy;
        if x_new == x || !x_new.is_finite() {
            break;
        }
        let y_new = a0 + x_new * (a1 + x_new * (a2 + x_new * a3));
        if y_new.abs() >= y.abs() {
            break;
        }
        x = x_new;
        y = y_new;
    }
    let det = x * x - x * mz + cov_xy;
    if det.abs() <= T::epsilon() {
        return Err(Error::Collinear);
    }
    let xc = (mxz * (myy - x) - myz * mxy) / det / T::lit(2.0);
    let yc = (myz * (mxx - x) - mxz * mxy) / det / T::lit(2.0);
    let r = (xc * xc + yc * yc + mz).sqrt();
    let center = Complex::new(xc * rms + mean.re, yc * rms + mean.im);
    let radius = r * rms;
    if !radius.is_finite() || !center.re.is_finite() || !center.im.is_finite() {
        return Err(Error::Collinear);
    }
    Ok(Circle { center, radius })
}

struct GeometricCircle<'a, T> {
    points: &'a [Complex<T>],
}

impl<T: Real> LeastSquares<T> for GeometricCircle<'_, T> {
    fn n_params(&self) -> usize {
        3
    }
    fn n_residuals(&self) -> usize {
        self.points.len()
    }
    fn residuals(&self, p: &[T], out: &mut [T]) {
        let c = Complex::new(p[0], p[1]);
        for (o, z) in out.iter_mut().zip(self.points) {
            *o = (z - c).norm() - p[2];
        }
    }
    fn jacobian(&self, p: &[T], jac: &mut Matrix<T>) {
        let c = Complex::new(p[0], p[1]);
        for (k, z) in self.points.iter().enumerate() {
            let d = z - c;
            let dist = d.norm().max(T::min_positive_value());
            let row = jac.row_mut(k);
            row[0] = -d.re / dist;
            row[1] = -d.im / dist;
            row[2] = -T::one();
        }
    }
}

/// Least-squares circle through `points`: Taubin's algebraic fit, refined by
/// minimizing geometric distances.
pub fn fit_circle<T: Real>(points: &[Complex<T>]) -> Result<Circle<T>> {
    let init = taubin(points)?;
    let prob = GeometricCircle { points };
    let rep = levenberg_marquardt(
        &prob,
        &[init.center.re, init.center.im, init.radius],
        &LmOptions::default(),
    );
    let refined = Circle {
        center: Complex::new(rep.params[0], rep.params[1]),
        radius: rep.params[2],
    };
    if rep.converged() && refined.radius > T::zero() && refined.radius.is_finite() {
        Ok(refined)
    } else {
        Ok(init)
    }
}

/// theta(f) = theta0 + 2 atan(2 Q (1 - f/f_r)), parameters (theta0, u, ln Q)
/// with `f_r = f0 (1 + u / q0)`.
struct PhaseModel<'a, T> {
    freqs: &'a [T],
    theta: &'a [T],
    f0: T,
    q0: T,
}

impl<T: Real> PhaseModel<'_, T> {
    fn unpack(&self, p: &[T]) -> (T, T, T) {
        (p[0], self.f0 * (T::one() + p[1] / self.q0), p[2].exp())
    }
}

impl<T: Real> LeastSquares<T> for PhaseModel<'_, T> {
    fn n_params(&self) -> usize {
        3
    }
    fn n_residuals(&self) -> usize {
        self.freqs.len()
    }
    fn residuals(&self, p: &[T], out: &mut [T]) {
        let (th0, fr, q) = self.unpack(p);
        let two = T::lit(2.0);
        for ((o, &f), &th) in out.iter_mut().zip(self.freqs).zip(self.theta) {
            *o = th0 + two * (two * q * (T::one() - f / fr)).atan() - th;
        }
    }
    fn jacobian(&self, p: &[T], jac: &mut Matrix<T>) {
        let (_, fr, q) = self.unpack(p);
        let two = T::lit(2.0);
        for (k, &f) in self.freqs.iter().enumerate() {
            let u = two * q * (T::one() - f / fr);
            let g = two / (T::one() + u * u);
            let row = jac.row_mut(k);
            row[0] = T::one();
            // du/dfr = 2 q f / fr^2, dfr/dp1 = f0 / q0
            row[1] = g * two * q * f / (fr * fr) * self.f0 / self.q0;
            row[2] = g * u;
        }
    }
}

/// Linear interpolation of the frequency where `theta` first crosses `level`.
fn crossing<T: Real>(freqs: &[T], theta: &[T], level: T) -> Option<T> {
    for k in 1..theta.len() {
        let (a, b) = (theta[k - 1] - level, theta[k] - level);
        if a == T::zero() {
            return Some(freqs[k - 1]);
        }
        if (a > T::zero()) != (b > T::zero()) {
            let w = a / (a - b);
            return Some(freqs[k - 1] + w * (freqs[k] - freqs[k - 1]));
        }
    }
    None
}

/// The full transmission model on seven real parameters
/// `[Re A', Im A', tau * 2 pi span, u, ln Q, ln |Q_c|, phi]`
/// with `A' = A e^{-i 2 pi f_ref tau}` and `f_r = f0 (1 + u / q0)`.
struct FullModel<'a, T> {
    freqs: &'a [T],
    s21: &'a [Complex<T>],
    f_ref: T,
    tau_scale: T,
    f0: T,
    q0: T,
}

struct Parts<T> {
    e: Complex<T>,
    r: Complex<T>,
    d: Complex<T>,
}

impl<T: Real> FullModel<'_, T> {
    fn unpack(&self, p: &[T]) -> (Complex<T>, T, T, T, T, T) {
        (
            Complex::new(p[0], p[1]),
            p[2] / self.tau_scale,
            self.f0 * (T::one() + p[3] / self.q0),
            p[4].exp(),
            p[5].exp(),
            p[6],
        )
    }

    fn parts(&self, f: T, tau: T, fr: T, q: T, qc: T, phi: T) -> Parts<T> {
        let two = T::lit(2.0);
        let e = Complex::from_polar(T::one(), -two * T::PI() * (f - self.f_ref) * tau);
        let d = Complex::new(T::one(), two * q * (f / fr - T::one()));
        let r = Complex::from_polar(q / qc, phi) / d;
        Parts { e, r, d }
    }

    fn to_params(&self, p: &[T]) -> ResonatorParams<T> {
        let (a, tau, fr, q, qc, phi) = self.unpack(p);
        let amplitude = a * Complex::from_polar(T::one(), T::lit(2.0) * T::PI() * self.f_ref * tau);
        ResonatorParams {
            amplitude,
            delay: tau,
            resonance_freq: fr,
            loaded_q: q,
            coupling_q_mag: qc,
            phi,
        }
    }
}

impl<T: Real> LeastSquares<T> for FullModel<'_, T> {
    fn n_params(&self) -> usize {
        7
    }
    fn n_residuals(&self) -> usize {
        2 * self.freqs.len()
    }
    fn residuals(&self, p: &[T], out: &mut [T]) {
        let (a, tau, fr, q, qc, phi) = self.unpack(p);
        for (k, (&f, &z)) in self.freqs.iter().zip(self.s21).enumerate() {
            let Parts { e, r, .. } = self.parts(f, tau, fr, q, qc, phi);
            let m = a * e * (Complex::new(T::one(), T::zero()) - r);
            out[2 * k] = m.re - z.re;
            out[2 * k + 1] = m.im - z.im;
        }
    }
    fn jacobian(&self, p: &[T], jac: &mut Matrix<T>) {
        let (a, tau, fr, q, qc, phi) = self.unpack(p);
        let two = T::lit(2.0);
        let i = Complex::new(T::zero(), T::one());
        let one = Complex::new(T::one(), T::zero());
        for (k, &f) in self.freqs.iter().enumerate() {
            let Parts { e, r, d } = self.parts(f, tau, fr, q, qc, phi);
            let b = one - r;
            let ae = a * e;
            let cols = [
                e * b,
                i * e * b,
                ae * b * Complex::new(T::zero(), -two * T::PI() * (f - self.f_ref)) / self.tau_scale,
                // dD/dfr = -2 i q f / fr^2 ; dB/dfr = (r / d) dD/dfr
                ae * (r / d) * Complex::new(T::zero(), -two * q * f / (fr * fr)) * (self.f0 / self.q0),
                -(ae * r / d),
                ae * r,
                -(ae * i * r),
            ];
            for (j, c) in cols.iter().enumerate() {
                jac[(2 * k, j)] = c.re;
                jac[(2 * k + 1, j)] = c.im;
            }
        }
    }
}

/// Second-difference noise estimate per quadrature and the largest excursion
/// of the trace from its median point.
fn resonance_contrast<T: Real>(z: &[Complex<T>]) -> (T, T) {
    let n = z.len();
    let mut ss = T::zero();
    for k in 1..n - 1 {
        ss = ss + (z[k + 1] - z[k] * T::lit(2.0) + z[k - 1]).norm_sqr();
    }
    // var(second difference) = 6 sigma^2 per quadrature, two quadratures
    let sigma = (ss / (T::from_usize_lossy(n - 2) * T::lit(12.0))).sqrt();
    let re: Vec<T> = z.iter().map(|v| v.re).collect();
    let im: Vec<T> = z.iter().map(|v| v.im).collect();
    let center = Complex::new(median(&re), median(&im));
    let excursion = z.iter().map(|v| (v - center).norm()).fold(T::zero(), T::max);
    (sigma, excursion)
}

/// Placeholder result for sweeps where no resonance could be located.
fn unconverged<T: Real>(sweep: &FrequencySweep<T>, tau: T, message: String) -> ResonatorFit<T> {
    let n = sweep.len();
    let f_ref = delay_reference(sweep);
    let span = sweep.frequencies[n - 1] - sweep.frequencies[0];
    let mean = sweep.s21.iter().fold(Complex::new(T::zero(), T::zero()), |a, &b| a + b)
        / T::from_usize_lossy(n);
    let amplitude = if mean.norm() > T::zero() {
        mean
    } else {
        Complex::new(T::one(), T::zero())
    };
    let q = f_ref / span;
    // vanishing circle: Q/|Q_c| = 1e-12
    let params = ResonatorParams {
        amplitude,
        delay: tau,
        resonance_freq: f_ref,
        loaded_q: q,
        coupling_q_mag: q * T::lit(1e12),
        phi: T::zero(),
    };
    let q_i = internal_q(params.loaded_q, params.coupling_q_mag, params.phi).unwrap_or(q);
    let residual_rms = rms_residual(sweep, &params);
    ResonatorFit {
        params,
        q_i,
        sigma68: Sigma68::unknown(),
        residual_rms,
        converged: false,
        message: Some(message),
    }
}

fn rms_residual<T: Real>(sweep: &FrequencySweep<T>, p: &ResonatorParams<T>) -> T {
    let ss: T = sweep
        .frequencies
        .iter()
        .zip(&sweep.s21)
        .map(|(&f, &z)| (eval_s21(f, p) - z).norm_sqr())
        .sum();
    (ss / T::from_usize_lossy(sweep.len())).sqrt()
}

/// Fits the transmission model to one sweep.
///
/// Returns `Ok` with `converged == false` when no resonance can be located or
/// the optimizer fails; only invalid input or a non-physical internal Q is an
/// `Err`.
pub fn fit_resonance<T: Real>(sweep: &FrequencySweep<T>) -> Result<ResonatorFit<T>> {
    sweep.validate()?;
    let n = sweep.len();
    if n < 8 {
        return Err(Error::Length {
            required: 8,
            actual: n,
        });
    }
    let (corrected, tau0) = match remove_cable_delay(sweep) {
        Ok(v) => v,
        Err(e) => return Ok(unconverged(sweep, T::zero(), e.to_string())),
    };
    let z = &corrected.s21;

    let (noise, excursion) = resonance_contrast(z);
    let scale = z.iter().map(|v| v.norm()).fold(T::zero(), T::max);
    if !(excursion > T::lit(8.0) * noise) || !(excursion > T::lit(1e-9) * scale) {
        return Ok(unconverged(
            sweep,
            tau0,
            format!(
                "no resonance found: excursion {:e} vs noise {:e}",
                excursion.to_f64_lossy(),
                noise.to_f64_lossy()
            ),
        ));
    }

    let circle = match fit_circle(z) {
        Ok(c) => c,
        Err(e) => return Ok(unconverged(sweep, tau0, e.to_string())),
    };

    // phase around the circle center
    let centered: Vec<Complex<T>> = z.iter().map(|v| v - circle.center).collect();
    let theta = unwrap_phase(&centered);
    let freqs = &sweep.frequencies;
    let th0 = (theta[0] + theta[n - 1]) / T::lit(2.0);
    let half_pi = T::FRAC_PI_2();
    let fr_init = crossing(freqs, &theta, th0).unwrap_or(freqs[n / 2]);
    let span = freqs[n - 1] - freqs[0];
    let dir = if theta[n - 1] < theta[0] { T::one() } else { -T::one() };
    let q_init = match (
        crossing(freqs, &theta, th0 + dir * half_pi),
        crossing(freqs, &theta, th0 - dir * half_pi),
    ) {
        (Some(lo), Some(hi)) if hi > lo => fr_init / (hi - lo),
        _ => fr_init / (span / T::lit(10.0)),
    };
    if dir < T::zero() {
        // phase runs the wrong way: not a notch resonance
        return Ok(unconverged(sweep, tau0, "phase winds the wrong way".into()));
    }

    let phase_prob = PhaseModel {
        freqs,
        theta: &theta,
        f0: fr_init,
        q0: q_init,
    };
    let phase_fit = levenberg_marquardt(
        &phase_prob,
        &[th0, T::zero(), q_init.ln()],
        &LmOptions::default(),
    );
    let (theta0, fr1, q1) = phase_prob.unpack(&phase_fit.params);
    if !(q1 > T::zero()) || !fr1.is_finite() {
        return Ok(unconverged(sweep, tau0, "phase fit diverged".into()));
    }

    // off-resonant point sits opposite the resonance on the circle
    let off_res = circle.center - Complex::from_polar(circle.radius, theta0);
    if !(off_res.norm() > T::zero()) {
        return Ok(unconverged(sweep, tau0, "zero background amplitude".into()));
    }
    let rel = Complex::new(T::one(), T::zero()) - circle.center / off_res;
    let phi1 = rel.arg();
    let diameter = T::lit(2.0) * circle.radius / off_res.norm();
    let qc1 = q1 / diameter;

    // joint refinement of everything
    let f_ref = delay_reference(sweep);
    let tau_scale = T::lit(2.0) * T::PI() * span;
    let full = FullModel {
        freqs,
        s21: &sweep.s21,
        f_ref,
        tau_scale,
        f0: fr1,
        q0: q1,
    };
    let x0 = [
        off_res.re,
        off_res.im,
        tau0 * tau_scale,
        T::zero(),
        q1.ln(),
        qc1.ln(),
        phi1,
    ];
    let data_scale: T = sweep.s21.iter().map(|v| v.norm_sqr()).sum();
    let opts = LmOptions {
        abs_cost: data_scale * T::epsilon() * T::epsilon(),
        ..LmOptions::default()
    };
    let rep = levenberg_marquardt(&full, &x0, &opts);
    let params = full.to_params(&rep.params);
    if params.validate().is_err() && internal_q(params.loaded_q, params.coupling_q_mag, params.phi).is_ok() {
        return Ok(unconverged(sweep, tau0, "refined parameters invalid".into()));
    }
    let q_i = internal_q(params.loaded_q, params.coupling_q_mag, params.phi)?;

    let cov = rep.covariance();
    let var = |j: usize| cov[(j, j)].max(T::zero());
    let (q, qc, phi) = (params.loaded_q, params.coupling_q_mag, params.phi);
    // gradient of 1/Q_i in (ln Q, ln |Q_c|, phi)
    let g = [-T::one() / q, phi.cos() / qc, phi.sin() / qc];
    let idx = [4usize, 5, 6];
    let mut var_inv = T::zero();
    for a in 0..3 {
        for b in 0..3 {
            var_inv = var_inv + g[a] * g[b] * cov[(idx[a], idx[b])];
        }
    }
    let sigma68 = Sigma68 {
        resonance_freq: var(3).sqrt() * fr1 / q1,
        loaded_q: q * var(4).sqrt(),
        coupling_q_mag: qc * var(5).sqrt(),
        phi: var(6).sqrt(),
        internal_q: q_i * q_i * var_inv.max(T::zero()).sqrt(),
    };

    let residual_rms = rms_residual(sweep, &params);
    let mut message = None;
    let mut converged = rep.converged();
    if !converged {
        message = Some(format!("optimizer stopped: {:?}", rep.termination));
    }
    let (f_lo, f_hi) = (freqs[0], freqs[n - 1]);
    if params.resonance_freq < f_lo || params.resonance_freq > f_hi {
        converged = false;
        message = Some("resonance frequency outside the sweep".into());
    }
    let lw = params.resonance_freq / params.loaded_q;
    let step = span / T::from_usize_lossy(n - 1);
    if lw < step / T::lit(2.0) || lw > span * T::lit(10.0) {
        converged = false;
        message = Some("linewidth not resolved by the sweep".into());
    }

    Ok(ResonatorFit {
        params,
        q_i,
        sigma68,
        residual_rms,
        converged,
        message,
    })
}

/// Fits every sweep in parallel; results are in input order.
pub fn fit_many<T: Real>(sweeps: &[FrequencySweep<T>]) -> Vec<Result<ResonatorFit<T>>> {
    sweeps.par_iter().map(fit_resonance).collect()
}

/// Pointwise complex mean of each block of `k` consecutive sweeps.
/// A trailing partial block is dropped.
pub fn average_traces<T: Real>(sweeps: &[FrequencySweep<T>], k: usize) -> Result<Vec<FrequencySweep<T>>> {
    if k == 0 {
        return Err(Error::param("k", "must be >= 1"));
    }
    let Some(first) = sweeps.first() else {
        return Ok(Vec::new());
    };
    for (i, s) in sweeps.iter().enumerate() {
        if s.frequencies != first.frequencies {
            return Err(Error::GridMismatch { index: i });
        }
    }
    let kf = T::from_usize_lossy(k);
    Ok(sweeps
        .chunks_exact(k)
        .map(|block| {
            let m = first.len();
            let mut acc = vec![Complex::new(T::zero(), T::zero()); m];
            for s in block {
                for (a, &z) in acc.iter_mut().zip(&s.s21) {
                    *a = *a + z;
                }
            }
            let s21 = if k == 1 {
                block[0].s21.clone()
            } else {
                acc.into_iter().map(|a| a / kf).collect()
            };
            let mut meta = block[0].meta.clone();
            meta.timestamp_s = block.iter().map(|s| s.meta.timestamp_s).sum::<T>() / kf;
            FrequencySweep {
                frequencies: first.frequencies.clone(),
                s21,
                meta,
            }
        })
        .collect())
}
