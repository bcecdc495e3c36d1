//! Forward physics of a hanger-coupled resonator.
//!
//! Everything here is a pure function of its arguments: the notch-type S21
//! transmission, the internal quality factor identity for an asymmetric
//! (impedance-mismatched) coupling, the TLS saturation model, and the unit
//! conversions that tie drive power and decay rate to the fit parameters.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Reduced Planck constant, J s (CODATA 2018, exact by SI definition).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant, J/K (exact by SI definition).
pub const K_B: f64 = 1.380_649e-23;

/// Parameters of one hanger resonance.
///
/// `coupling_q_mag` is |Q_c|; the complex coupling quality factor is
/// `|Q_c| e^{-i phi}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonatorParams<T> {
    /// Complex background transmission A.
    pub amplitude: Complex<T>,
    /// Line delay tau in seconds.
    pub delay: T,
    /// Resonance frequency f_r in hertz.
    pub resonance_freq: T,
    /// Loaded quality factor Q.
    pub loaded_q: T,
    /// |Q_c|.
    pub coupling_q_mag: T,
    /// Impedance-mismatch angle phi in radians.
    pub phi: T,
}

impl<T: Real> ResonatorParams<T> {
    pub fn new(
        amplitude: Complex<T>,
        delay: T,
        resonance_freq: T,
        loaded_q: T,
        coupling_q_mag: T,
        phi: T,
    ) -> Result<Self> {
        let p = Self {
            amplitude,
            delay,
            resonance_freq,
            loaded_q,
            coupling_q_mag,
            phi,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds the parameter set from an internal rather than loaded Q.
    pub fn from_internal_q(
        amplitude: Complex<T>,
        delay: T,
        resonance_freq: T,
        internal_q: T,
        coupling_q_mag: T,
        phi: T,
    ) -> Result<Self> {
        if !(internal_q > T::zero()) {
            return Err(Error::param("internal_q", "must be > 0"));
        }
        if !(coupling_q_mag > T::zero()) {
            return Err(Error::param("coupling_q_mag", "must be > 0"));
        }
        let loaded_q = loaded_q_from_internal(internal_q, coupling_q_mag, phi);
        Self::new(amplitude, delay, resonance_freq, loaded_q, coupling_q_mag, phi)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resonance_freq > T::zero()) || !self.resonance_freq.is_finite() {
            return Err(Error::param("resonance_freq", "must be finite and > 0"));
        }
        if !(self.loaded_q > T::zero()) || !self.loaded_q.is_finite() {
            return Err(Error::param("loaded_q", "must be finite and > 0"));
        }
        if !(self.coupling_q_mag > T::zero()) || !self.coupling_q_mag.is_finite() {
            return Err(Error::param("coupling_q_mag", "must be finite and > 0"));
        }
        if !self.delay.is_finite() || !self.phi.is_finite() {
            return Err(Error::param("delay/phi", "must be finite"));
        }
        if !self.amplitude.re.is_finite() || !self.amplitude.im.is_finite() {
            return Err(Error::param("amplitude", "must be finite"));
        }
        internal_q(self.loaded_q, self.coupling_q_mag, self.phi).map(|_| ())
    }

    /// Internal quality factor implied by (Q, |Q_c|, phi).
    pub fn internal_q(&self) -> Result<T> {
        internal_q(self.loaded_q, self.coupling_q_mag, self.phi)
    }

    /// Complex coupling quality factor |Q_c| e^{-i phi}.
    pub fn coupling_q(&self) -> Complex<T> {
        Complex::from_polar(self.coupling_q_mag, -self.phi)
    }

    /// Full width at half depth, f_r / Q, in hertz.
    pub fn linewidth(&self) -> T {
        self.resonance_freq / self.loaded_q
    }

    pub fn omega_r(&self) -> T {
        T::lit(2.0) * T::PI() * self.resonance_freq
    }
}

/// Notch-type transmission
/// `A e^{-i 2 pi f tau} (1 - (Q/|Q_c|) e^{i phi} / (1 + 2 i Q (f/f_r - 1)))`.
pub fn eval_s21<T: Real>(f: T, p: &ResonatorParams<T>) -> Complex<T> {
    let two = T::lit(2.0);
    let delay = Complex::from_polar(T::one(), -two * T::PI() * f * p.delay);
    let detuning = Complex::new(T::one(), two * p.loaded_q * (f / p.resonance_freq - T::one()));
    let depth = Complex::from_polar(p.loaded_q / p.coupling_q_mag, p.phi);
    p.amplitude * delay * (Complex::new(T::one(), T::zero()) - depth / detuning)
}

/// Q_i from `1/Q_i = 1/Q - cos(phi)/|Q_c|`.
pub fn internal_q<T: Real>(loaded_q: T, coupling_q_mag: T, phi: T) -> Result<T> {
    if !(loaded_q > T::zero()) {
        return Err(Error::param("loaded_q", "must be > 0"));
    }
    if !(coupling_q_mag > T::zero()) {
        return Err(Error::param("coupling_q_mag", "must be > 0"));
    }
    let inv = T::one() / loaded_q - phi.cos() / coupling_q_mag;
    if !(inv > T::zero()) {
        return Err(Error::NonPhysical {
            inverse_qi: inv.to_f64_lossy(),
        });
    }
    Ok(T::one() / inv)
}

/// Loaded Q from `1/Q = 1/Q_i + cos(phi)/|Q_c|`.
pub fn loaded_q_from_internal<T: Real>(internal_q: T, coupling_q_mag: T, phi: T) -> T {
    T::one() / (T::one() / internal_q + phi.cos() / coupling_q_mag)
}

/// TLS loss model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TlsModel<T> {
    /// Effective loss tangent F delta^0_TLS.
    pub f_delta0: T,
    /// Critical photon number.
    pub n_c: T,
    /// Saturation exponent, in (0, 1].
    pub beta: T,
    /// Power-independent quality factor.
    pub q_pi: T,
}

/// F delta = 9e-7, n_c = 5, beta = 0.5, Q_PI = 1e6.
impl<T: Real> Default for TlsModel<T> {
    fn default() -> Self {
        Self {
            f_delta0: T::lit(9.0e-7),
            n_c: T::lit(5.0),
            beta: T::lit(0.5),
            q_pi: T::lit(1e6),
        }
    }
}

impl<T: Real> TlsModel<T> {
    pub fn new(f_delta0: T, n_c: T, beta: T, q_pi: T) -> Result<Self> {
        let m = Self {
            f_delta0,
            n_c,
            beta,
            q_pi,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, "must be finite and > 0"))
            }
        };
        pos("f_delta0", self.f_delta0)?;
        pos("n_c", self.n_c)?;
        pos("beta", self.beta)?;
        pos("q_pi", self.q_pi)?;
        if self.beta > T::one() {
            return Err(Error::param("beta", "must be <= 1"));
        }
        Ok(())
    }

    /// Fraction of the unsaturated TLS loss left at `mean_photons`,
    /// `(1 + n/n_c)^(-beta)`.
    pub fn saturation(&self, mean_photons: T) -> T {
        (T::one() + mean_photons / self.n_c).powf(-self.beta)
    }
}

/// Operating point of the resonator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Environment<T> {
    /// Angular resonance frequency, rad/s.
    pub omega_r: T,
    /// Kelvin.
    pub temperature: T,
    /// Average intracavity photon number.
    pub mean_photons: T,
}

impl<T: Real> Environment<T> {
    pub fn new(omega_r: T, temperature: T, mean_photons: T) -> Result<Self> {
        if !(omega_r > T::zero()) {
            return Err(Error::param("omega_r", "must be > 0"));
        }
        if !(temperature >= T::zero()) {
            return Err(Error::param("temperature", "must be >= 0"));
        }
        if !(mean_photons >= T::zero()) {
            return Err(Error::param("mean_photons", "must be >= 0"));
        }
        Ok(Self {
            omega_r,
            temperature,
            mean_photons,
        })
    }
}

/// `tanh(hbar omega / 2 k_B T)`, taken as exactly 1 at T = 0.
pub fn thermal_factor<T: Real>(omega_r: T, temperature: T) -> T {
    if temperature <= T::zero() {
        return T::one();
    }
    let x = T::lit(HBAR) * omega_r / (T::lit(2.0 * K_B) * temperature);
    x.tanh()
}

/// 1/Q_i from the TLS saturation model.
pub fn tls_inverse_q<T: Real>(m: &TlsModel<T>, env: &Environment<T>) -> T {
    m.f_delta0 * thermal_factor(env.omega_r, env.temperature) * m.saturation(env.mean_photons)
        + T::one() / m.q_pi
}

/// Default total input attenuation between the VNA port and the device, dB.
pub const DEFAULT_ATTENUATION_DB: f64 = 90.0;

/// Power delivered to the feedline at the device, watts.
pub fn input_power_watts<T: Real>(power_dbm_at_source: T, total_attenuation_db: T) -> T {
    T::lit(10.0).powf((power_dbm_at_source - total_attenuation_db - T::lit(30.0)) / T::lit(10.0))
}

/// Average photon number `2 Q^2 P_in / (hbar omega_r^2 |Q_c|)`.
pub fn photon_number<T: Real>(
    power_dbm_at_source: T,
    total_attenuation_db: T,
    p: &ResonatorParams<T>,
) -> Result<T> {
    if !(total_attenuation_db >= T::zero()) {
        return Err(Error::param("total_attenuation_db", "must be >= 0"));
    }
    let p_in = input_power_watts(power_dbm_at_source, total_attenuation_db);
    Ok(photon_number_watts(p_in, p))
}

/// Photon number for a given absolute input power in watts.
pub fn photon_number_watts<T: Real>(p_in: T, p: &ResonatorParams<T>) -> T {
    let omega = p.omega_r();
    // hbar * omega^2 underflows f32 (1e-13), so the constant is folded in f64 first
    let q = p.loaded_q;
    let scale = T::lit(2.0 / HBAR);
    scale * q * (q / (omega * omega)) * p_in / p.coupling_q_mag
}

/// Internal decay rate `2 pi f_r / Q_i`, rad/s.
pub fn decay_rate<T: Real>(resonance_freq: T, internal_q: T) -> Result<T> {
    if !(resonance_freq > T::zero()) {
        return Err(Error::param("resonance_freq", "must be > 0"));
    }
    if !(internal_q > T::zero()) {
        return Err(Error::param("internal_q", "must be > 0"));
    }
    Ok(T::lit(2.0) * T::PI() * resonance_freq / internal_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn params(q: f64, qc: f64, phi: f64) -> ResonatorParams<f64> {
        ResonatorParams::new(Complex::new(1.0, 0.0), 0.0, 6e9, q, qc, phi).unwrap()
    }

    /// Independent route: real arithmetic, rationalised denominator.
    fn s21_oracle(f: f64, p: &ResonatorParams<f64>) -> (f64, f64) {
        let u = 2.0 * p.loaded_q * (f / p.resonance_freq - 1.0);
        let d = p.loaded_q / p.coupling_q_mag;
        let (c, s) = (p.phi.cos(), p.phi.sin());
        // d e^{i phi} (1 - i u) / (1 + u^2)
        let den = 1.0 + u * u;
        let rr = d * (c + s * u) / den;
        let ri = d * (s - c * u) / den;
        let (br, bi) = (1.0 - rr, -ri);
        let th = -2.0 * PI * f * p.delay;
        let (er, ei) = (th.cos(), th.sin());
        let (ar, ai) = (p.amplitude.re * er - p.amplitude.im * ei, p.amplitude.re * ei + p.amplitude.im * er);
        (ar * br - ai * bi, ar * bi + ai * br)
    }

    #[test]
    fn on_resonance_value() {
        let p = params(2e5, 4e5, 0.0);
        let z = eval_s21(6e9, &p);
        assert_relative_eq!(z.re, 0.5, epsilon = 1e-15);
        assert_relative_eq!(z.im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn far_off_resonance_is_unity() {
        let p = params(2e5, 4e5, 0.3);
        let z = eval_s21(6e9 * 1.5, &p);
        assert!((z.norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn internal_q_examples() {
        assert_relative_eq!(internal_q(2e5, 4e5, 0.0).unwrap(), 4e5, max_relative = 1e-14);
        assert_relative_eq!(internal_q(2e5, 1e3, PI / 2.0).unwrap(), 2e5, max_relative = 1e-9);
        assert!(matches!(internal_q(2e5, 1e5, 0.0), Err(Error::NonPhysical { .. })));
        assert!(ResonatorParams::new(Complex::new(1.0, 0.0), 0.0, 6e9, 2e5, 1e5, 0.0).is_err());
    }

    #[test]
    fn tls_limits() {
        let m = TlsModel::new(9e-7, 10.0, 0.5, 1e6).unwrap();
        let env = Environment::new(2.0 * PI * 6e9, 0.0, 0.0).unwrap();
        assert_relative_eq!(tls_inverse_q(&m, &env), 9e-7 + 1e-6, max_relative = 1e-15);
        let sat = Environment::new(2.0 * PI * 6e9, 0.0, 1e30).unwrap();
        assert_relative_eq!(tls_inverse_q(&m, &sat), 1e-6, max_relative = 1e-9);
        // 1 / (9e-7 + 1e-6) = 526315.79
        let qi = 1.0 / tls_inverse_q(&m, &env);
        assert_relative_eq!(qi, 526_315.789_473_684, max_relative = 1e-12);
        assert!((3.3e5..=1.0e6).contains(&qi));
    }

    #[test]
    fn thermal_factor_at_zero_and_hot() {
        assert_eq!(thermal_factor(2.0 * PI * 6e9, 0.0), 1.0);
        // hbar w / 2 kT at 6 GHz, 10 mK ~ 14.4 -> tanh ~ 1
        assert!(thermal_factor(2.0 * PI * 6e9, 0.010) > 0.999_999);
        let hot: f64 = thermal_factor(2.0 * PI * 6e9, 0.8);
        let x = HBAR * 2.0 * PI * 6e9 / (2.0 * K_B * 0.8);
        assert_relative_eq!(hot, x.tanh(), max_relative = 1e-15);
    }

    #[test]
    fn photon_number_examples() {
        let p = params(2e5, 4e5, 0.0);
        let n = photon_number(-75.0, 90.0, &p).unwrap();
        // 2 * (2e5)^2 * 10^(-19.5) / (hbar * (2 pi 6e9)^2 * 4e5), evaluated by hand
        let p_in = 10f64.powf(-19.5);
        let w = 2.0 * PI * 6e9;
        let oracle = 2.0 * 4e10 * p_in / (HBAR * w * w * 4e5);
        assert_relative_eq!(n, oracle, max_relative = 1e-12);
        assert_relative_eq!(n, 0.04219, max_relative = 1e-3);
        let n10 = photon_number(-65.0, 90.0, &p).unwrap();
        assert_relative_eq!(n10 / n, 10.0, max_relative = 1e-12);
        assert!(photon_number(-400.0, 90.0, &p).unwrap() < 1e-30);
        assert!(photon_number(-75.0, -1.0, &p).is_err());
    }

    #[test]
    fn decay_rate_examples() {
        assert_relative_eq!(decay_rate(5e9, 5e5).unwrap(), 2.0 * PI * 1e4, max_relative = 1e-15);
        let g1 = decay_rate(5e9, 3e5).unwrap();
        let g2 = decay_rate(5e9, 6e5).unwrap();
        assert_relative_eq!(g1, 2.0 * g2, max_relative = 1e-15);
        assert!(decay_rate(0.0, 1.0).is_err());
    }

    #[test]
    fn f32_instantiation_tracks_f64() {
        // f32 resolves f/f_r - 1 only to ~1e-7, so keep 2Q(f/f_r - 1) well conditioned
        let p32 = ResonatorParams::<f32>::new(Complex::new(0.9, 0.1), 0.0, 6e9, 2e3, 4e3, 0.2).unwrap();
        let p64 = params(2e3, 4e3, 0.2);
        let p64 = ResonatorParams { amplitude: Complex::new(0.9, 0.1), ..p64 };
        let f = (6e9 * (1.0 + 1.0 / 4e3)) as f32;
        let (re, im) = s21_oracle(f as f64, &p64);
        let z = eval_s21(f, &p32);
        assert!((z.re as f64 - re).abs() < 1e-3 && (z.im as f64 - im).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn s21_matches_direct_evaluation(
            q in 1e3f64..1e7, ratio in 0.05f64..0.95, phi in -1.0f64..1.0,
            x in -20.0f64..20.0, tau in 0.0f64..1e-7, ar in 0.1f64..2.0, ai in -1.0f64..1.0,
        ) {
            let qc = q / ratio;
            let p = ResonatorParams::new(Complex::new(ar, ai), tau, 6e9, q, qc, phi).unwrap();
            let f = 6e9 * (1.0 + x / q);
            let z = eval_s21(f, &p);
            let (re, im) = s21_oracle(f, &p);
            prop_assert!((z.re - re).abs() < 1e-9 && (z.im - im).abs() < 1e-9);
        }

        #[test]
        fn internal_q_round_trip(qi in 1e3f64..1e8, qc in 1e3f64..1e8, phi in -1.5f64..1.5) {
            let q = loaded_q_from_internal(qi, qc, phi);
            let back = internal_q(q, qc, phi).unwrap();
            prop_assert!(((back - qi) / qi).abs() < 1e-12);
        }

        #[test]
        fn internal_q_is_at_least_loaded(q in 1e3f64..1e7, qc in 1e3f64..1e8, phi in -1.5f64..1.5) {
            if let Ok(qi) = internal_q(q, qc, phi) {
                prop_assert!(qi >= q * (1.0 - 1e-12));
            }
        }

        #[test]
        fn s21_minimum_at_resonance(q in 1e3f64..1e6, ratio in 0.05f64..0.95, x in -5.0f64..5.0) {
            let p = params(q, q / ratio, 0.0);
            let at_res = eval_s21(6e9, &p).norm();
            let off = eval_s21(6e9 * (1.0 + x / q), &p).norm();
            prop_assert!(off + 1e-12 >= at_res);
            prop_assert!(off <= 1.0 + 1e-12);
        }

        #[test]
        fn tls_monotone(n1 in 0.0f64..1e6, dn in 0.0f64..1e6, t1 in 0.0f64..1.0, dt in 0.0f64..1.0) {
            let m = TlsModel::new(9e-7, 5.0, 0.5, 1e6).unwrap();
            let w = 2.0 * PI * 6e9;
            let a = tls_inverse_q(&m, &Environment::new(w, t1, n1).unwrap());
            let b = tls_inverse_q(&m, &Environment::new(w, t1, n1 + dn).unwrap());
            let c = tls_inverse_q(&m, &Environment::new(w, t1 + dt, n1).unwrap());
            prop_assert!(b <= a * (1.0 + 1e-15));
            prop_assert!(c <= a * (1.0 + 1e-15));
            prop_assert!(b >= 1e-6 * (1.0 - 1e-15));
        }

        #[test]
        fn photon_number_additive_in_watts(p1 in 1e-22f64..1e-12, p2 in 1e-22f64..1e-12) {
            let p = params(2e5, 4e5, 0.1);
            let sum = photon_number_watts(p1 + p2, &p);
            let parts = photon_number_watts(p1, &p) + photon_number_watts(p2, &p);
            prop_assert!(((sum - parts) / sum).abs() < 1e-12);
        }

        #[test]
        fn decay_rate_matches_direct(f in 1e9f64..1e10, qi in 1e3f64..1e8) {
            let g = decay_rate(f, qi).unwrap();
            prop_assert!(((g - 2.0 * PI * f / qi) / g).abs() < 1e-15);
        }
    }
}
