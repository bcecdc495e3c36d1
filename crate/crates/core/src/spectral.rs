//! Welch spectral estimation, coherence and power-law fits.

use num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{median, Real};

/// One-sided density or coherence on the positive Fourier frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate<T> {
    pub freqs: Vec<T>,
    pub values: Vec<T>,
    pub n_segments: usize,
    pub window_name: String,
    pub segment_length: usize,
    pub overlap_fraction: T,
}

pub const WINDOW_NAME: &str = "hann";

/// Power of two nearest to `n / 8`, at least 8 and at most `n`.
pub fn default_segment_length(n: usize) -> usize {
    let target = (n as f64 / 8.0).max(1.0);
    let lo = 1usize << (target.log2().floor() as u32);
    let hi = lo << 1;
    let pick = if target - lo as f64 <= hi as f64 - target { lo } else { hi };
    pick.max(8).min(n.max(8))
}

fn hann<T: Real>(n: usize) -> Vec<T> {
    // periodic form, the usual choice for spectral estimation
    let two_pi = T::lit(2.0) * T::PI();
    (0..n)
        .map(|k| T::lit(0.5) - T::lit(0.5) * (two_pi * T::from_usize_lossy(k) / T::from_usize_lossy(n)).cos())
        .collect()
}

struct Segments<T> {
    /// Windowed, demeaned FFT of each segment, bins 0..=nperseg/2.
    spectra: Vec<Vec<Complex<T>>>,
    /// 2 / (fs sum w^2), halved again on the Nyquist bin.
    scale: T,
    nperseg: usize,
    dt: T,
}

fn check_args<T: Real>(len: usize, dt: T, nperseg: usize, overlap: T) -> Result<()> {
    if nperseg < 8 {
        return Err(Error::param("segment_length", "must be >= 8"));
    }
    if len < nperseg {
        return Err(Error::Length {
            required: nperseg,
            actual: len,
        });
    }
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(Error::param("dt", "must be finite and > 0"));
    }
    if !(overlap >= T::zero() && overlap <= T::lit(0.9)) {
        return Err(Error::param("overlap_fraction", "must lie in [0, 0.9]"));
    }
    Ok(())
}

fn segment_spectra<T: Real>(x: &[T], dt: T, nperseg: usize, overlap: T) -> Result<Segments<T>> {
    check_args(x.len(), dt, nperseg, overlap)?;
    let noverlap = (overlap * T::from_usize_lossy(nperseg)).round().to_usize().unwrap_or(0);
    let step = (nperseg - noverlap.min(nperseg - 1)).max(1);
    let w = hann::<T>(nperseg);
    let wss: T = w.iter().map(|&v| v * v).sum();
    let fft = FftPlanner::<T>::new().plan_fft_forward(nperseg);
    let nfreq = nperseg / 2 + 1;
    let mut spectra = Vec::new();
    let mut start = 0;
    let mut buf = vec![Complex::new(T::zero(), T::zero()); nperseg];
    while start + nperseg <= x.len() {
        let seg = &x[start..start + nperseg];
        let mean = seg.iter().copied().sum::<T>() / T::from_usize_lossy(nperseg);
        for ((b, &v), &wk) in buf.iter_mut().zip(seg).zip(&w) {
            *b = Complex::new((v - mean) * wk, T::zero());
        }
        fft.process(&mut buf);
        spectra.push(buf[..nfreq].to_vec());
        start += step;
    }
    Ok(Segments {
        spectra,
        scale: T::lit(2.0) * dt / wss,
        nperseg,
        dt,
    })
}

impl<T: Real> Segments<T> {
    fn freqs(&self) -> Vec<T> {
        let df = T::one() / (T::from_usize_lossy(self.nperseg) * self.dt);
        (1..=self.nperseg / 2).map(|k| T::from_usize_lossy(k) * df).collect()
    }

    fn bin_scale(&self, k: usize) -> T {
        if self.nperseg.is_multiple_of(2) && k == self.nperseg / 2 {
            self.scale / T::lit(2.0)
        } else {
            self.scale
        }
    }

    /// Averaged cross density `conj(X) Y`, DC excluded.
    fn cross(&self, other: &Segments<T>) -> Vec<Complex<T>> {
        let k_seg = T::from_usize_lossy(self.spectra.len());
        (1..=self.nperseg / 2)
            .map(|k| {
                let mut acc = Complex::new(T::zero(), T::zero());
                for (a, b) in self.spectra.iter().zip(&other.spectra) {
                    acc = acc + a[k].conj() * b[k];
                }
                acc * (self.bin_scale(k) / k_seg)
            })
            .collect()
    }

    fn estimate(&self, values: Vec<T>, overlap: T) -> SpectrumEstimate<T> {
        SpectrumEstimate {
            freqs: self.freqs(),
            values,
            n_segments: self.spectra.len(),
            window_name: WINDOW_NAME.to_string(),
            segment_length: self.nperseg,
            overlap_fraction: overlap,
        }
    }
}

/// One-sided Welch power spectral density with a Hann window and per-segment
/// mean removal. Units are `x^2 / Hz`; the DC bin is omitted.
pub fn welch_psd<T: Real>(x: &[T], dt: T, segment_length: usize, overlap_fraction: T) -> Result<SpectrumEstimate<T>> {
    let s = segment_spectra(x, dt, segment_length, overlap_fraction)?;
    let values = s.cross(&s).into_iter().map(|c| c.re).collect();
    Ok(s.estimate(values, overlap_fraction))
}

/// One-sided cross-spectral density `E[conj(A) B]`.
pub fn cross_spectral_density<T: Real>(
    a: &[T],
    b: &[T],
    dt: T,
    segment_length: usize,
    overlap_fraction: T,
) -> Result<(Vec<T>, Vec<Complex<T>>)> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let sa = segment_spectra(a, dt, segment_length, overlap_fraction)?;
    let sb = segment_spectra(b, dt, segment_length, overlap_fraction)?;
    Ok((sa.freqs(), sa.cross(&sb)))
}

/// Magnitude-squared coherence `|S_ab|^2 / (S_aa S_bb)`.
///
/// Bins where either auto-spectrum vanishes are reported as 0.
pub fn coherence<T: Real>(
    a: &[T],
    b: &[T],
    dt: T,
    segment_length: usize,
    overlap_fraction: T,
) -> Result<SpectrumEstimate<T>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let sa = segment_spectra(a, dt, segment_length, overlap_fraction)?;
    let sb = segment_spectra(b, dt, segment_length, overlap_fraction)?;
    if sa.spectra.len() < 2 {
        return Err(Error::param("segment_length", "coherence needs at least two segments"));
    }
    let saa = sa.cross(&sa);
    let sbb = sb.cross(&sb);
    let sab = sa.cross(&sb);
    let values = sab
        .iter()
        .zip(saa.iter().zip(&sbb))
        .map(|(ab, (aa, bb))| {
            let den = aa.re * bb.re;
            if den > T::zero() {
                (ab.norm_sqr() / den).min(T::one())
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(sa.estimate(values, overlap_fraction))
}

/// Least-squares fit of `log S = log A - alpha log f` over bins with
/// `band.0 <= f <= band.1` and positive values. Returns `(A, alpha)`.
pub fn fit_one_over_f<T: Real>(spec: &SpectrumEstimate<T>, band: (T, T)) -> Result<(T, T)> {
    let (lx, ly): (Vec<T>, Vec<T>) = spec
        .freqs
        .iter()
        .zip(&spec.values)
        .filter(|(&f, &v)| f >= band.0 && f <= band.1 && f > T::zero() && v > T::zero())
        .map(|(&f, &v)| (f.ln(), v.ln()))
        .unzip();
    if lx.len() < 3 {
        return Err(Error::Length {
            required: 3,
            actual: lx.len(),
        });
    }
    let n = T::from_usize_lossy(lx.len());
    let mx = lx.iter().copied().sum::<T>() / n;
    let my = ly.iter().copied().sum::<T>() / n;
    let sxx: T = lx.iter().map(|&x| (x - mx) * (x - mx)).sum();
    let sxy: T = lx.iter().zip(&ly).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(((my - slope * mx).exp(), -slope))
}

/// `(x - mean) / mean`, the fractional deviation from the series mean.
pub fn normalize_series<T: Real>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::Length { required: 1, actual: 0 });
    }
    let m = crate::scalar::mean(x);
    if m == T::zero() || !m.is_finite() {
        return Err(Error::Degenerate("series mean is zero or not finite".into()));
    }
    Ok(x.iter().map(|&v| (v - m) / m).collect())
}

/// Linear interpolation of an irregularly sampled series onto a uniform grid
/// at the median sampling interval, starting at the first timestamp.
/// Returns `(dt, values)`.
pub fn resample_uniform<T: Real>(t: &[T], x: &[T]) -> Result<(T, Vec<T>)> {
    if t.len() != x.len() {
        return Err(Error::LengthMismatch {
            left: t.len(),
            right: x.len(),
        });
    }
    if t.len() < 2 {
        return Err(Error::Length {
            required: 2,
            actual: t.len(),
        });
    }
    let diffs: Vec<T> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(i) = diffs.iter().position(|&d| !(d > T::zero())) {
        return Err(Error::NonMonotonic { index: i + 1 });
    }
    let dt = median(&diffs);
    let span = t[t.len() - 1] - t[0];
    let n = (span / dt).floor().to_usize().unwrap_or(0) + 1;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let tk = t[0] + T::from_usize_lossy(k) * dt;
        while j + 2 < t.len() && t[j + 1] < tk {
            j += 1;
        }
        let w = ((tk - t[j]) / (t[j + 1] - t[j])).max(T::zero()).min(T::one());
        out.push(x[j] + (x[j + 1] - x[j]) * w);
    }
    Ok((dt, out))
}

/// Mean of `values` over bins with `lo <= f <= hi`; NaN when the band is empty.
pub fn band_mean<T: Real>(spec: &SpectrumEstimate<T>, lo: T, hi: T) -> T {
    let v: Vec<T> = spec
        .freqs
        .iter()
        .zip(&spec.values)
        .filter(|(&f, _)| f >= lo && f <= hi)
        .map(|(_, &v)| v)
        .collect();
    crate::scalar::mean(&v)
}

/// Mean over the lowest decade of resolved frequencies, `[f_1, 10 f_1]`.
pub fn lowest_decade_mean<T: Real>(spec: &SpectrumEstimate<T>) -> T {
    match spec.freqs.first() {
        Some(&f1) => band_mean(spec, f1, f1 * T::lit(10.0)),
        None => T::nan(),
    }
}
