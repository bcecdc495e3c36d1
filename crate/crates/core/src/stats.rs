//! Distribution statistics: log-normal fits, skewness tests, window
//! convergence and the averaging-time scan.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circlefit::{average_traces, fit_resonance};
use crate::error::{Error, Result};
use crate::scalar::{median, Real};
use crate::synth::FrequencySweep;
use crate::tls::{interleaved_loss_tangent, LossTangentSeries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalFit<T> {
    /// Mean of ln x.
    pub mu_log: T,
    /// Standard deviation of ln x (1/n normalization).
    pub sigma_log: T,
    /// exp(m + s^2 / 2).
    pub mean: T,
    pub sd: T,
    pub n: usize,
    /// exp(m -+ s).
    pub band1: (T, T),
    /// exp(m -+ 2 s).
    pub band2: (T, T),
}

/// Maximum-likelihood log-normal fit.
pub fn fit_lognormal<T: Real>(x: &[T]) -> Result<LogNormalFit<T>> {
    if x.len() < 3 {
        return Err(Error::Length {
            required: 3,
            actual: x.len(),
        });
    }
    if let Some(i) = x.iter().position(|&v| !(v > T::zero()) || !v.is_finite()) {
        return Err(Error::param("x", format!("entry {i} is not a positive finite value")));
    }
    let logs: Vec<T> = x.iter().map(|v| v.ln()).collect();
    let nf = T::from_usize_lossy(x.len());
    let m = logs.iter().copied().sum::<T>() / nf;
    let s = (logs.iter().map(|&l| (l - m) * (l - m)).sum::<T>() / nf).sqrt();
    let s2 = s * s;
    let mean = (m + s2 / T::lit(2.0)).exp();
    Ok(LogNormalFit {
        mu_log: m,
        sigma_log: s,
        mean,
        sd: mean * s2.exp_m1().sqrt(),
        n: x.len(),
        band1: ((m - s).exp(), (m + s).exp()),
        band2: ((m - s - s).exp(), (m + s + s).exp()),
    })
}

/// Biased sample skewness `g1 = m3 / m2^(3/2)`; 0 for a constant sample.
pub fn sample_skewness<T: Real>(x: &[T]) -> T {
    let nf = T::from_usize_lossy(x.len());
    let mean = x.iter().copied().sum::<T>() / nf;
    let (m2, m3) = x.iter().fold((T::zero(), T::zero()), |(a, b), &v| {
        let d = v - mean;
        (a + d * d, b + d * d * d)
    });
    let (m2, m3) = (m2 / nf, m3 / nf);
    if m2 <= T::zero() {
        return T::zero();
    }
    m3 / (m2 * m2.sqrt())
}

/// D'Agostino's skewness test statistic, approximately N(0, 1) for normal
/// data. Needs at least 8 samples.
pub fn skewness_z<T: Real>(x: &[T]) -> Result<T> {
    let n = x.len();
    if n < 8 {
        return Err(Error::Length { required: 8, actual: n });
    }
    let b2 = sample_skewness(x).to_f64_lossy();
    let nf = n as f64;
    let y = b2 * ((nf + 1.0) * (nf + 3.0) / (6.0 * (nf - 2.0))).sqrt();
    let beta2 = 3.0 * (nf * nf + 27.0 * nf - 70.0) * (nf + 1.0) * (nf + 3.0)
        / ((nf - 2.0) * (nf + 5.0) * (nf + 7.0) * (nf + 9.0));
    let w2 = -1.0 + (2.0 * (beta2 - 1.0)).sqrt();
    let delta = 1.0 / (0.5 * w2.ln()).sqrt();
    let alpha = (2.0 / (w2 - 1.0)).sqrt();
    let ya = y / alpha;
    let z = delta * (ya + (ya * ya + 1.0).sqrt()).ln();
    Ok(T::lit(z))
}

/// Equal-width histogram over `[min, max]`; returns `(edges, counts)`.
pub fn histogram<T: Real>(x: &[T], bins: usize) -> Result<(Vec<T>, Vec<usize>)> {
    if bins == 0 {
        return Err(Error::param("bins", "must be >= 1"));
    }
    if x.is_empty() {
        return Err(Error::Length { required: 1, actual: 0 });
    }
    let lo = x.iter().copied().fold(T::infinity(), T::min);
    let hi = x.iter().copied().fold(T::neg_infinity(), T::max);
    let width = if hi > lo { (hi - lo) / T::from_usize_lossy(bins) } else { T::one() };
    let edges = (0..=bins).map(|k| lo + width * T::from_usize_lossy(k)).collect();
    let mut counts = vec![0; bins];
    for &v in x {
        let k = ((v - lo) / width).floor().to_usize().unwrap_or(0).min(bins - 1);
        counts[k] += 1;
    }
    Ok((edges, counts))
}

/// Relative deviations of windowed log-normal fits from a reference fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurve<T> {
    pub window_sizes: Vec<T>,
    /// Mean of |mu_w - mu_ref| / mu_ref over windows.
    pub delta_mu: Vec<T>,
    /// Mean of |sigma_w - sigma_ref| / sigma_ref over windows.
    pub delta_sigma: Vec<T>,
    pub delta_mu_signed: Vec<T>,
    pub delta_sigma_signed: Vec<T>,
    pub n_windows: Vec<usize>,
}

/// Points with `start <= t < start + width` (index range into sorted `t`).
fn window_range<T: Real>(t: &[T], start: T, width: T) -> std::ops::Range<usize> {
    let a = t.partition_point(|&v| v < start);
    let b = t.partition_point(|&v| v < start + width);
    a..b
}

/// Log-normal mean and sd over windows of each size, compared to the fit over
/// the first `reference_span` seconds.
///
/// Windows start at the first timestamp and advance by half their width; a
/// window is used only if it ends within the reference span and holds at least
/// three points.
pub fn windowed_convergence<T: Real>(
    series: &LossTangentSeries<T>,
    window_sizes: &[T],
    reference_span: T,
) -> Result<ConvergenceCurve<T>> {
    series.validate()?;
    if series.len() < 3 {
        return Err(Error::Length {
            required: 3,
            actual: series.len(),
        });
    }
    let t = &series.timestamps;
    let x = &series.f_delta_tls;
    let t0 = t[0];
    // one sample period of slack: the last point's timestamp sits at the
    // start of its interval
    let dt = median(&t.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>());
    if !(reference_span > T::zero()) || reference_span > series.span() + dt {
        return Err(Error::Span(format!(
            "reference span {} exceeds series span {}",
            reference_span.to_f64_lossy(),
            series.span().to_f64_lossy()
        )));
    }
    let reference = fit_lognormal(&x[window_range(t, t0, reference_span)])?;
    let end = t0 + reference_span;

    // (|d mu|, |d sigma|, d mu, d sigma, windows) per window size
    type Row<T> = (T, T, T, T, usize);
    let rows: Vec<Result<Row<T>>> = window_sizes
        .par_iter()
        .map(|&w| {
            if !(w > T::zero()) || w > reference_span {
                return Err(Error::Span(format!(
                    "window {} outside (0, {}]",
                    w.to_f64_lossy(),
                    reference_span.to_f64_lossy()
                )));
            }
            let stride = w / T::lit(2.0);
            let mut acc = (T::zero(), T::zero(), T::zero(), T::zero(), 0usize);
            let mut j = 0usize;
            loop {
                let start = t0 + stride * T::from_usize_lossy(j);
                // tolerate rounding in start + w vs end
                if start + w > end + w * T::lit(1e-9) {
                    break;
                }
                j += 1;
                let r = window_range(t, start, w);
                if r.len() < 3 {
                    continue;
                }
                let f = fit_lognormal(&x[r])?;
                let dm = (f.mean - reference.mean) / reference.mean;
                let ds = if reference.sd > T::zero() {
                    (f.sd - reference.sd) / reference.sd
                } else {
                    T::zero()
                };
                acc = (acc.0 + dm.abs(), acc.1 + ds.abs(), acc.2 + dm, acc.3 + ds, acc.4 + 1);
            }
            if acc.4 == 0 {
                return Err(Error::Span(format!("no window of {} s holds 3 points", w.to_f64_lossy())));
            }
            let k = T::from_usize_lossy(acc.4);
            Ok((acc.0 / k, acc.1 / k, acc.2 / k, acc.3 / k, acc.4))
        })
        .collect();

    let mut curve = ConvergenceCurve {
        window_sizes: window_sizes.to_vec(),
        delta_mu: Vec::new(),
        delta_sigma: Vec::new(),
        delta_mu_signed: Vec::new(),
        delta_sigma_signed: Vec::new(),
        n_windows: Vec::new(),
    };
    for r in rows {
        let (a, b, c, d, n) = r?;
        curve.delta_mu.push(a);
        curve.delta_sigma.push(b);
        curve.delta_mu_signed.push(c);
        curve.delta_sigma_signed.push(d);
        curve.n_windows.push(n);
    }
    Ok(curve)
}

/// Skewness of the two-point loss-tangent estimate versus averaging time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingScan<T> {
    pub k_values: Vec<usize>,
    /// k times the sweep interval, seconds.
    pub delta_t: Vec<T>,
    pub z_score: Vec<T>,
    /// Sample skewness g1 at each k.
    pub skewness: Vec<T>,
    /// Averaged traces whose fit converged.
    pub n_used: Vec<usize>,
    /// Averaged traces excluded (fit error or non-convergence).
    pub n_excluded: Vec<usize>,
}

/// Averages consecutive sweeps in blocks of k, fits each block, forms
/// `1/Q_i - 1/q_hp`, and records its skewness Z score. Values of k leaving
/// fewer than 8 usable fits give NaN.
pub fn averaging_time_scan<T: Real>(sweeps: &[FrequencySweep<T>], q_hp: T, k_values: &[usize]) -> Result<AveragingScan<T>> {
    if sweeps.len() < 2 {
        return Err(Error::Length {
            required: 2,
            actual: sweeps.len(),
        });
    }
    if !(q_hp > T::zero()) {
        return Err(Error::param("q_hp", "must be > 0"));
    }
    let t: Vec<T> = sweeps.iter().map(|s| s.meta.timestamp_s).collect();
    let diffs: Vec<T> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let dt = median(&diffs);
    if !(dt > T::zero()) {
        return Err(Error::Span("sweep timestamps are not increasing".into()));
    }
    if let Some(i) = diffs.iter().position(|&d| ((d - dt) / dt).abs() > T::lit(0.01)) {
        return Err(Error::Span(format!("sweep spacing is not uniform at index {}", i + 1)));
    }
    let mut scan = AveragingScan {
        k_values: k_values.to_vec(),
        delta_t: Vec::new(),
        z_score: Vec::new(),
        skewness: Vec::new(),
        n_used: Vec::new(),
        n_excluded: Vec::new(),
    };
    for &k in k_values {
        let averaged = average_traces(sweeps, k)?;
        let fits: Vec<_> = averaged.par_iter().map(fit_resonance).collect();
        let values: Vec<T> = fits
            .iter()
            .filter_map(|f| match f {
                Ok(f) if f.converged => Some(interleaved_loss_tangent(f.q_i, q_hp)),
                _ => None,
            })
            .collect();
        scan.delta_t.push(dt * T::from_usize_lossy(k));
        scan.n_excluded.push(averaged.len() - values.len());
        scan.n_used.push(values.len());
        scan.skewness.push(if values.is_empty() { T::nan() } else { sample_skewness(&values) });
        scan.z_score.push(skewness_z(&values).unwrap_or(T::nan()));
    }
    Ok(scan)
}
