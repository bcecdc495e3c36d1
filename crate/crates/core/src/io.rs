//! File formats.
//!
//! Every table is a CSV file whose first line is a `#` comment carrying the
//! tool version and config hash; readers skip comment lines. Floats are
//! written in Rust's shortest round-trip form, so f64 data survives a write
//! and read unchanged. Metadata that does not fit a column lives in a JSON
//! sidecar at `<path>.meta.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectrumEstimate;
use crate::stats::{AveragingScan, ConvergenceCurve};
use crate::synth::{FrequencySweep, QiTimeSeries, SweepMetadata, TruthPoint};
use crate::tls::{LossTangentSeries, PowerSweepData};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const SWEEP_HEADER: [&str; 3] = ["freq_hz", "s21_re", "s21_im"];
pub const SERIES_HEADER: [&str; 6] = ["timestamp_s", "q_i", "q_i_sigma", "f_r_hz", "coupling_q", "converged"];
pub const LOSS_TANGENT_HEADER: [&str; 2] = ["timestamp_s", "f_delta_tls"];
pub const POWER_SWEEP_HEADER: [&str; 3] = ["mean_photons", "q_i", "q_i_sigma"];
pub const SPECTRUM_HEADER: [&str; 2] = ["freq_hz", "value"];
pub const TRUTH_HEADER: [&str; 7] = [
    "timestamp_s",
    "channel",
    "f_delta_tls",
    "inverse_q_pi",
    "mean_photons",
    "q_i",
    "f_r_hz",
];
pub const CONVERGENCE_HEADER: [&str; 6] = [
    "window_s",
    "delta_mu",
    "delta_sigma",
    "delta_mu_signed",
    "delta_sigma_signed",
    "n_windows",
];
pub const AVERAGING_HEADER: [&str; 6] = ["k", "delta_t_s", "z_score", "skewness", "n_used", "n_excluded"];

/// Tool identity and config hash stamped on every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
}

impl Provenance {
    pub fn new(config_sha256: String) -> Self {
        Self {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            config_sha256,
        }
    }

    fn comment(&self) -> String {
        format!("# {} {} config_sha256={}", self.tool, self.version, self.config_sha256)
    }
}

/// `<path>.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

/// Writes a provenance comment, a header and rows.
pub fn write_table<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>], prov: &Provenance) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "{}", prov.comment()).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| format_err(path, e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.as_ref())).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// A parsed CSV table: header plus string rows, all of the header's width.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// Index of `name` in the header.
    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format_err(&self.path, format!("missing column `{name}`")))
    }

    /// Column `name` parsed as f64.
    pub fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[j].trim()
                    .parse::<f64>()
                    .map_err(|_| format_err(&self.path, format!("row {i}: `{}` in `{name}` is not a number", r[j])))
            })
            .collect()
    }

    pub fn has_header(&self, expected: &[&str]) -> bool {
        self.header.len() == expected.len() && self.header.iter().zip(expected).all(|(a, b)| a == b)
    }

    fn require_header(&self, expected: &[&str]) -> Result<()> {
        if self.has_header(expected) {
            Ok(())
        } else {
            Err(format_err(
                &self.path,
                format!("header `{}`, expected `{}`", self.header.join(","), expected.join(",")),
            ))
        }
    }
}

/// Reads a CSV table, skipping `#` comment lines. A row whose width differs
/// from the header is a [`Error::LengthMismatch`].
pub fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| format_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(format_err(path, "empty file"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(Error::LengthMismatch {
                left: header.len(),
                right: rec.len(),
            });
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table {
        path: path.to_path_buf(),
        header,
        rows,
    })
}

/// Serializes `value` with a `provenance` entry added at the top level.
pub fn write_json<V: Serialize>(path: &Path, value: &V, prov: &Provenance) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    match &mut v {
        serde_json::Value::Object(map) => {
            map.insert("provenance".into(), serde_json::to_value(prov)?);
        }
        other => {
            let inner = std::mem::take(other);
            v = serde_json::json!({ "value": inner, "provenance": prov });
        }
    }
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, &v)?;
    writeln!(out).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

/// Reads JSON, ignoring any `provenance` entry.
pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Serialize, Deserialize)]
struct SweepSidecar {
    #[serde(flatten)]
    meta: SweepMetadata<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    provenance: Option<Provenance>,
}

/// Writes `freq_hz,s21_re,s21_im` plus the metadata sidecar.
pub fn write_sweep(path: &Path, sweep: &FrequencySweep<f64>, prov: &Provenance) -> Result<()> {
    sweep.validate()?;
    let rows: Vec<Vec<String>> = sweep
        .frequencies
        .iter()
        .zip(&sweep.s21)
        .map(|(&f, z)| vec![num(f), num(z.re), num(z.im)])
        .collect();
    write_table(path, &SWEEP_HEADER, &rows, prov)?;
    let side = SweepSidecar {
        meta: sweep.meta.clone(),
        provenance: Some(prov.clone()),
    };
    let side_path = sidecar_path(path);
    let mut out = create(&side_path)?;
    serde_json::to_writer_pretty(&mut out, &side)?;
    writeln!(out).map_err(io_err(&side_path))?;
    out.flush().map_err(io_err(&side_path))
}

/// Reads a sweep and its sidecar. The grid must hold at least three strictly
/// increasing frequencies; a violation reports the data row index.
pub fn read_sweep(path: &Path) -> Result<FrequencySweep<f64>> {
    let side_path = sidecar_path(path);
    if !side_path.exists() {
        return Err(Error::MissingSidecar(side_path));
    }
    let t = read_table(path)?;
    t.require_header(&SWEEP_HEADER)?;
    let f = t.floats("freq_hz")?;
    let re = t.floats("s21_re")?;
    let im = t.floats("s21_im")?;
    let side: SweepSidecar = read_json(&side_path)?;
    let s21 = re.into_iter().zip(im).map(|(a, b)| Complex::new(a, b)).collect();
    FrequencySweep::new(f, s21, side.meta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SeriesSidecar {
    label: String,
    power_dbm: f64,
    temperature_k: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    provenance: Option<Provenance>,
}

/// Writes a Q_i time series plus a sidecar with label, power and temperature.
pub fn write_series(path: &Path, s: &QiTimeSeries<f64>, prov: &Provenance) -> Result<()> {
    s.validate()?;
    let rows: Vec<Vec<String>> = (0..s.len())
        .map(|k| {
            vec![
                num(s.timestamps[k]),
                num(s.q_i[k]),
                num(s.q_i_sigma[k]),
                num(s.f_r[k]),
                num(s.coupling_q[k]),
                (s.converged[k] as u8).to_string(),
            ]
        })
        .collect();
    write_table(path, &SERIES_HEADER, &rows, prov)?;
    let side = SeriesSidecar {
        label: s.label.clone(),
        power_dbm: s.power_dbm,
        temperature_k: s.temperature_k,
        provenance: Some(prov.clone()),
    };
    write_json(&sidecar_path(path), &side, prov)
}

/// Reads a Q_i time series; without a sidecar the label is the file stem
/// and power and temperature are NaN and 0.
pub fn read_series(path: &Path) -> Result<QiTimeSeries<f64>> {
    let t = read_table(path)?;
    t.require_header(&SERIES_HEADER)?;
    let side_path = sidecar_path(path);
    let side = if side_path.exists() {
        read_json(&side_path)?
    } else {
        SeriesSidecar {
            label: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            power_dbm: f64::NAN,
            temperature_k: 0.0,
            provenance: None,
        }
    };
    let conv = t.column("converged")?;
    let converged = t
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| match r[conv].as_str() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            v => Err(format_err(path, format!("row {i}: `{v}` is not a converged flag"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let s = QiTimeSeries {
        label: side.label,
        power_dbm: side.power_dbm,
        temperature_k: side.temperature_k,
        timestamps: t.floats("timestamp_s")?,
        q_i: t.floats("q_i")?,
        q_i_sigma: t.floats("q_i_sigma")?,
        f_r: t.floats("f_r_hz")?,
        coupling_q: t.floats("coupling_q")?,
        converged,
    };
    s.validate()?;
    Ok(s)
}

pub fn write_loss_tangent(path: &Path, s: &LossTangentSeries<f64>, prov: &Provenance) -> Result<()> {
    let rows: Vec<Vec<String>> = s
        .timestamps
        .iter()
        .zip(&s.f_delta_tls)
        .map(|(&t, &v)| vec![num(t), num(v)])
        .collect();
    write_table(path, &LOSS_TANGENT_HEADER, &rows, prov)
}

pub fn read_loss_tangent(path: &Path) -> Result<LossTangentSeries<f64>> {
    let t = read_table(path)?;
    t.require_header(&LOSS_TANGENT_HEADER)?;
    LossTangentSeries::new(t.floats("timestamp_s")?, t.floats("f_delta_tls")?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PowerSidecar {
    temperature_k: f64,
    resonance_freq: f64,
}

/// Writes `mean_photons,q_i,q_i_sigma` plus temperature and resonance
/// frequency in the sidecar.
pub fn write_power_sweep(path: &Path, d: &PowerSweepData<f64>, prov: &Provenance) -> Result<()> {
    let rows: Vec<Vec<String>> = (0..d.mean_photons.len())
        .map(|k| vec![num(d.mean_photons[k]), num(d.q_i[k]), num(d.q_i_sigma[k])])
        .collect();
    write_table(path, &POWER_SWEEP_HEADER, &rows, prov)?;
    let side = PowerSidecar {
        temperature_k: d.temperature_k,
        resonance_freq: d.resonance_freq,
    };
    write_json(&sidecar_path(path), &side, prov)
}

/// Reads a power sweep; `fallback` supplies (temperature, f_r) when there is
/// no sidecar.
pub fn read_power_sweep(path: &Path, fallback: (f64, f64)) -> Result<PowerSweepData<f64>> {
    let t = read_table(path)?;
    t.require_header(&POWER_SWEEP_HEADER)?;
    let side_path = sidecar_path(path);
    let (temperature_k, resonance_freq) = if side_path.exists() {
        let s: PowerSidecar = read_json(&side_path)?;
        (s.temperature_k, s.resonance_freq)
    } else {
        fallback
    };
    Ok(PowerSweepData {
        mean_photons: t.floats("mean_photons")?,
        q_i: t.floats("q_i")?,
        q_i_sigma: t.floats("q_i_sigma")?,
        temperature_k,
        resonance_freq,
    })
}

#[derive(Serialize)]
struct SpectrumSidecar<'a> {
    kind: &'a str,
    n_segments: usize,
    window: &'a str,
    segment_length: usize,
    overlap_fraction: f64,
}

/// Writes `freq_hz,value` plus the estimator settings in the sidecar;
/// `kind` names the quantity (`psd`, `coherence`).
pub fn write_spectrum(path: &Path, s: &SpectrumEstimate<f64>, kind: &str, prov: &Provenance) -> Result<()> {
    let rows: Vec<Vec<String>> = s.freqs.iter().zip(&s.values).map(|(&f, &v)| vec![num(f), num(v)]).collect();
    write_table(path, &SPECTRUM_HEADER, &rows, prov)?;
    let side = SpectrumSidecar {
        kind,
        n_segments: s.n_segments,
        window: &s.window_name,
        segment_length: s.segment_length,
        overlap_fraction: s.overlap_fraction,
    };
    write_json(&sidecar_path(path), &side, prov)
}

pub fn write_truth(path: &Path, truth: &[TruthPoint<f64>], prov: &Provenance) -> Result<()> {
    let rows: Vec<Vec<String>> = truth
        .iter()
        .map(|p| {
            vec![
                num(p.timestamp),
                p.channel.to_string(),
                num(p.f_delta_tls),
                num(p.inverse_q_pi),
                num(p.mean_photons),
                num(p.q_i),
                num(p.f_r),
            ]
        })
        .collect();
    write_table(path, &TRUTH_HEADER, &rows, prov)
}

pub fn write_convergence(path: &Path, c: &ConvergenceCurve<f64>, prov: &Provenance) -> Result<()> {
    let rows: Vec<Vec<String>> = (0..c.window_sizes.len())
        .map(|k| {
            vec![
                num(c.window_sizes[k]),
                num(c.delta_mu[k]),
                num(c.delta_sigma[k]),
                num(c.delta_mu_signed[k]),
                num(c.delta_sigma_signed[k]),
                c.n_windows[k].to_string(),
            ]
        })
        .collect();
    write_table(path, &CONVERGENCE_HEADER, &rows, prov)
}

pub fn write_averaging(path: &Path, a: &AveragingScan<f64>, prov: &Provenance) -> Result<()> {
    let rows: Vec<Vec<String>> = (0..a.k_values.len())
        .map(|k| {
            vec![
                a.k_values[k].to_string(),
                num(a.delta_t[k]),
                num(a.z_score[k]),
                num(a.skewness[k]),
                a.n_used[k].to_string(),
                a.n_excluded[k].to_string(),
            ]
        })
        .collect();
    write_table(path, &AVERAGING_HEADER, &rows, prov)
}

/// Writes `sweeps` as `sweep_00000.csv`, ... into `dir`.
pub fn write_sweep_dir(dir: &Path, sweeps: &[FrequencySweep<f64>], prov: &Provenance) -> Result<()> {
    for (k, s) in sweeps.iter().enumerate() {
        write_sweep(&dir.join(format!("sweep_{k:05}.csv")), s, prov)?;
    }
    Ok(())
}

/// Reads every `*.csv` sweep in `dir`, sorted by file name.
pub fn read_sweep_dir(dir: &Path) -> Result<Vec<FrequencySweep<f64>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(format_err(dir, "no sweep files"));
    }
    paths.iter().map(|p| read_sweep(p)).collect()
}
